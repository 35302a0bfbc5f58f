"""Solve the mid-range I-beam cantilever on three mesh resolutions and
compare the loaded-end deflection with the Timoshenko beam formula."""

from beamgnn import fea
from beamgnn.geometry import BeamParams, LoadDist, LoadType, MeshResolution, build_template

p = BeamParams.midpoint(force_magnitude=225e3, load_type=LoadType.BENDING_Y, load_dist=LoadDist.UNIFORM)
ref = fea.timoshenko_tip_deflection(p)
print(f"Timoshenko tip deflection: {ref:.4f} mm")
for res in [(2, 1), (4, 2), (8, 3)]:
    template = build_template(MeshResolution(*res))
    r = fea.solve_case(template, p)
    tip = -fea.tip_deflection(r)
    print(f"resolution {res}: {template.n_nodes:5d} nodes, tip {tip:.4f} mm, "
          f"error {(tip - ref) / ref:+.2%}, {r.solver_stats.iterations} PCG iterations")
