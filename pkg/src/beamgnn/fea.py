"""Static linear elasticity on constant-strain tetrahedra.

Units are mm / N / MPa throughout.  Stiffness is assembled into a scipy
sparse matrix and solved with a Jacobi-preconditioned conjugate gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateElement, InvalidMaterial, NoConvergence
from .geometry import BeamParams, LoadDist, LoadType, MeshTemplate, TetMesh, instantiate_mesh

VOLUME_FLOOR = 1e-9  # mm^3


def lame_params(E, nu):
    """Lame constants (lambda, mu) from Young's modulus and Poisson's ratio."""
    if not 0.0 <= nu < 0.5:
        raise InvalidMaterial(f"Poisson's ratio {nu} outside [0, 0.5)")
    if not E > 0:
        raise InvalidMaterial(f"Young's modulus must be positive, got {E}")
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    return lam, mu


def young_poisson(lam, mu):
    """Inverse of :func:`lame_params`."""
    E = mu * (3 * lam + 2 * mu) / (lam + mu)
    nu = lam / (2 * (lam + mu))
    return E, nu


@dataclass(frozen=True)
class MaterialModel:
    E: float
    nu: float
    lam: float
    mu: float

    @classmethod
    def from_E_nu(cls, E, nu):
        lam, mu = lame_params(E, nu)
        return cls(float(E), float(nu), lam, mu)

    def elasticity_matrix(self):
        lam, mu = self.lam, self.mu
        D = np.zeros((6, 6))
        D[:3, :3] = lam
        D[np.arange(3), np.arange(3)] = lam + 2 * mu
        D[np.arange(3, 6), np.arange(3, 6)] = mu
        return D


def _strain_displacement(coords):
    """B matrices (T, 6, 12) and volumes (T,) for tets given as (T, 4, 3).

    Strain ordering is (xx, yy, zz, xy, yz, zx) with engineering shears;
    dof ordering is node-major (u0x, u0y, u0z, u1x, ...).
    """
    M = np.transpose(coords[:, 1:] - coords[:, :1], (0, 2, 1))
    vol = np.linalg.det(M) / 6.0
    if not np.all(vol > VOLUME_FLOOR):
        k = int(np.argmin(vol))
        raise DegenerateElement(f"tet {k} volume {vol[k]:.3e} <= floor {VOLUME_FLOOR}")
    Minv = np.linalg.inv(M)
    grads = np.concatenate([-Minv.sum(axis=1, keepdims=True), Minv], axis=1)  # (T,4,3)
    T = coords.shape[0]
    B = np.zeros((T, 6, 12))
    gx, gy, gz = grads[..., 0], grads[..., 1], grads[..., 2]
    B[:, 0, 0::3] = gx
    B[:, 1, 1::3] = gy
    B[:, 2, 2::3] = gz
    B[:, 3, 0::3] = gy
    B[:, 3, 1::3] = gx
    B[:, 4, 1::3] = gz
    B[:, 4, 2::3] = gy
    B[:, 5, 0::3] = gz
    B[:, 5, 2::3] = gx
    return B, vol


def element_stiffness(tet_coords, mat: MaterialModel):
    """12x12 stiffness V * B^T D B of one constant-strain tetrahedron."""
    coords = np.asarray(tet_coords, dtype=np.float64).reshape(1, 4, 3)
    B, vol = _strain_displacement(coords)
    return vol[0] * B[0].T @ mat.elasticity_matrix() @ B[0]


def element_stiffnesses(nodes, tets, mat: MaterialModel):
    B, vol = _strain_displacement(nodes[tets])
    D = mat.elasticity_matrix()
    return np.einsum("t,tia,ij,tjb->tab", vol, B, D, B, optimize=True)


@dataclass
class SparseSystem:
    K: sp.csr_matrix
    F: np.ndarray | None = None
    constrained_dofs: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def element_dofs(tets):
    return (3 * tets[:, :, None] + np.arange(3)).reshape(-1, 12)


def assemble(mesh: TetMesh, mat: MaterialModel) -> SparseSystem:
    Ke = element_stiffnesses(mesh.nodes, mesh.tets, mat)
    dofs = element_dofs(mesh.tets)
    rows = np.repeat(dofs, 12, axis=1).ravel()
    cols = np.tile(dofs, (1, 12)).ravel()
    n = 3 * mesh.n_nodes
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    # exact symmetry regardless of summation order
    K = ((K + K.T) * 0.5).tocsr()
    K.sum_duplicates()
    return SparseSystem(K)


def _face_areas(nodes, faces):
    p = nodes[faces]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    return 0.5 * np.linalg.norm(n, axis=1)


def nodal_areas(mesh: TetMesh):
    """Lumped (row-sum) tributary area of each node on the loaded face."""
    a = np.zeros(mesh.n_nodes)
    np.add.at(a, mesh.load_faces.ravel(), np.repeat(_face_areas(mesh.nodes, mesh.load_faces) / 3.0, 3))
    return a


def traction_load(mesh: TetMesh, p: BeamParams) -> np.ndarray:
    """Nodal force vector for the end-face traction of load case ``p``.

    Bending cases carry a net force of magnitude P (-y for BendingY, -x for
    BendingX).  Torsion is a pure couple of torque P * depth / 2 about +z.
    LinearY scales the traction by (y - y_min)/(y_max - y_min) before the
    resultant is restored.
    """
    P = float(p.force_magnitude)
    a = nodal_areas(mesh)
    on = a > 0
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    w = np.where(on, 1.0, 0.0)
    if p.load_dist == LoadDist.LINEAR_Y:
        ymin, ymax = y[on].min(), y[on].max()
        w = np.where(on, (y - ymin) / (ymax - ymin), 0.0)
    aw = a * w
    F = np.zeros((mesh.n_nodes, 3))
    if p.load_type in (LoadType.BENDING_Y, LoadType.BENDING_X):
        comp = 1 if p.load_type == LoadType.BENDING_Y else 0
        F[:, comp] = -P * aw / aw.sum()
    else:
        T = P * p.depth / 2.0
        xc = (aw * x).sum() / aw.sum()
        yc = (aw * y).sum() / aw.sum()
        dx, dy = x - xc, y - yc
        F[:, 0] = -aw * dy
        F[:, 1] = aw * dx
        F[on, 0] -= F[on, 0].sum() * aw[on] / aw.sum()  # clear rounding drift
        F[on, 1] -= F[on, 1].sum() * aw[on] / aw.sum()
        torque = (x * F[:, 1] - y * F[:, 0]).sum()
        F *= T / torque
    return F.ravel()


def apply_dirichlet(sys: SparseSystem, fixed_nodes) -> SparseSystem:
    """Clamp all dofs of ``fixed_nodes``: zero rows/cols, unit diagonal, zero load."""
    dofs = (3 * np.asarray(fixed_nodes, dtype=np.int64)[:, None] + np.arange(3)).ravel()
    return apply_dirichlet_dofs(sys, dofs)


def apply_dirichlet_dofs(sys: SparseSystem, dofs) -> SparseSystem:
    """Homogeneous constraints on individual dofs (3 * node + component)."""
    n = sys.K.shape[0]
    dofs = np.asarray(dofs, dtype=np.int64)
    free = np.ones(n)
    free[dofs] = 0.0
    Dfree = sp.diags(free)
    K = (Dfree @ sys.K @ Dfree + sp.diags(1.0 - free)).tocsr()
    K.eliminate_zeros()
    F = None
    if sys.F is not None:
        F = np.array(sys.F, dtype=np.float64)
        F[dofs] = 0.0
    return SparseSystem(K, F, np.unique(np.concatenate([sys.constrained_dofs, dofs])))


@dataclass
class SolverStats:
    iterations: int
    residual: float


def pcg(K, F, rtol=1e-10, max_iters=None):
    """Jacobi-preconditioned conjugate gradient from a zero initial guess."""
    n = F.shape[0]
    max_iters = 20 * n if max_iters is None else max_iters
    u = np.zeros(n)
    fnorm = np.linalg.norm(F)
    if fnorm == 0.0:
        return u, SolverStats(0, 0.0)
    dinv = 1.0 / K.diagonal()
    r = F.copy()
    z = dinv * r
    d = z.copy()
    rz = r @ z
    for it in range(1, max_iters + 1):
        Kd = K @ d
        step = rz / (d @ Kd)
        u += step * d
        r -= step * Kd
        res = np.linalg.norm(r) / fnorm
        if res <= rtol:
            # confirm against the true residual; recurrences drift slightly
            true_res = np.linalg.norm(F - K @ u) / fnorm
            if true_res <= rtol:
                return u, SolverStats(it, float(true_res))
            r = F - K @ u
        z = dinv * r
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
    raise NoConvergence(max_iters, float(np.linalg.norm(F - K @ u) / fnorm))


def solve(sys: SparseSystem, rtol=1e-10, max_iters=None):
    u, _ = pcg(sys.K, sys.F, rtol=rtol, max_iters=max_iters)
    return u


@dataclass
class SimulationResult:
    params: BeamParams
    displacements: np.ndarray  # (N, 3) mm
    solver_stats: SolverStats
    mesh: TetMesh | None = None


def solve_case(template: MeshTemplate, p: BeamParams, rtol=1e-10, max_iters=None,
               validate=True) -> SimulationResult:
    if validate:
        p.validate(ranges={})
    mesh = instantiate_mesh(template, p)
    mat = MaterialModel.from_E_nu(p.youngs_modulus, p.poissons_ratio)
    sys = assemble(mesh, mat)
    sys.F = traction_load(mesh, p)
    sys = apply_dirichlet(sys, mesh.fixed_nodes)
    u, stats = pcg(sys.K, sys.F, rtol=rtol, max_iters=max_iters)
    u = u.reshape(-1, 3)
    u[mesh.fixed_nodes] = 0.0
    return SimulationResult(p, u, stats, mesh)


def timoshenko_tip_deflection(p: BeamParams) -> float:
    """Cantilever tip deflection P L^3/(3 E I) + P L/(G A_web).

    I is the strong-axis second moment of the plain I-section (no fillets);
    the shear area is the full-depth web d * tw.
    """
    b, d, tw, tf, _ = p.section_vector()
    P, L, E, nu = p.force_magnitude, p.length, p.youngs_modulus, p.poissons_ratio
    inertia = (b * d**3 - (b - tw) * (d - 2 * tf) ** 3) / 12.0
    G = E / (2 * (1 + nu))
    return P * L**3 / (3 * E * inertia) + P * L / (G * d * tw)


def tip_deflection(result: SimulationResult, component=1) -> float:
    """Mean displacement component over the loaded-face nodes."""
    ids = np.unique(result.mesh.load_faces)
    return float(result.displacements[ids, component].mean())
