"""Parametric I-beam geometry and fixed-topology tetrahedral meshing.

The cross-section is decomposed into quadrilateral blocks (two flanges split
into five columns each, three web blocks) plus four triangular chamfer blocks
at the web/flange junctions.  Every block corner is a homogeneous linear
function of ``(b, d, tw, tf, r)``, so each template node stores a 5-vector of
coefficients and instantiation is a single matrix product.  That is what keeps
the connectivity identical for every sampled beam.

Coordinates: x across the flange (centred), y along the depth (centred),
z along the beam axis from the clamped end (z = 0) to the loaded end (z = L).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from enum import IntEnum

import numpy as np

from .errors import InvalidParams, InvertedElement


class LoadType(IntEnum):
    BENDING_Y = 0
    BENDING_X = 1
    TORSION = 2


class LoadDist(IntEnum):
    UNIFORM = 0
    LINEAR_Y = 1


CONTINUOUS_FIELDS = (
    "length",
    "flange_width",
    "flange_thickness",
    "web_thickness",
    "depth",
    "fillet_radius",
    "youngs_modulus",
    "poissons_ratio",
    "force_magnitude",
)

# Table-1 ranges in mm / MPa / N.  Young's modulus and force are not given
# numerically in the table; 190-210 GPa and the low-signal band are used.
DEFAULT_RANGES = {
    "length": (280.0, 320.0),
    "flange_width": (90.0, 110.0),
    "flange_thickness": (13.0, 17.0),
    "web_thickness": (8.0, 12.0),
    "depth": (140.0, 160.0),
    "fillet_radius": (10.0, 14.0),
    "youngs_modulus": (190e3, 210e3),
    "poissons_ratio": (0.28, 0.32),
    "force_magnitude": (50e3, 100e3),
}


@dataclass(frozen=True)
class BeamParams:
    length: float
    flange_width: float
    flange_thickness: float
    web_thickness: float
    depth: float
    fillet_radius: float
    youngs_modulus: float
    poissons_ratio: float
    force_magnitude: float
    load_type: LoadType = LoadType.BENDING_Y
    load_dist: LoadDist = LoadDist.UNIFORM

    def __post_init__(self):
        object.__setattr__(self, "load_type", LoadType(self.load_type))
        object.__setattr__(self, "load_dist", LoadDist(self.load_dist))

    @classmethod
    def midpoint(cls, ranges=None, **overrides):
        ranges = DEFAULT_RANGES if ranges is None else ranges
        vals = {k: 0.5 * (lo + hi) for k, (lo, hi) in ranges.items()}
        vals.update(overrides)
        return cls(**vals)

    def continuous(self):
        """The 9 continuous parameters in storage order."""
        return np.array([getattr(self, k) for k in CONTINUOUS_FIELDS], dtype=np.float64)

    def section_vector(self):
        # basis of the linear section map: (b, d, tw, tf, r)
        return np.array(
            [self.flange_width, self.depth, self.web_thickness,
             self.flange_thickness, self.fillet_radius],
            dtype=np.float64,
        )

    def replace(self, **changes):
        return replace(self, **changes)

    def validate(self, ranges=None):
        """Raise InvalidParams if a field violates its range or the section
        is not a proper I-shape.  Pass ``ranges={}`` to skip range checks."""
        ranges = DEFAULT_RANGES if ranges is None else ranges
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in CONTINUOUS_FIELDS and not np.isfinite(v):
                raise InvalidParams(f.name, f"non-finite value {v!r}")
        for name, (lo, hi) in ranges.items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise InvalidParams(name, f"{v} outside [{lo}, {hi}]")
        b, d, tw, tf, r = self.section_vector()
        if min(b, d, tw, tf, r, self.length) <= 0:
            raise InvalidParams("geometry", "all dimensions must be positive")
        if not 2 * tf < d:
            raise InvalidParams("flange_thickness", "2*flange_thickness must be < depth")
        if not tw < b:
            raise InvalidParams("web_thickness", "web_thickness must be < flange_width")
        # strict: at equality a flange or web block collapses to zero width
        if not r < 0.5 * (b - tw):
            raise InvalidParams("fillet_radius", "must be < (flange_width - web_thickness)/2")
        if not r < 0.5 * (d - 2 * tf):
            raise InvalidParams("fillet_radius", "must be < (depth - 2*flange_thickness)/2")
        if not self.youngs_modulus > 0:
            raise InvalidParams("youngs_modulus", "must be positive")
        if not 0 < self.poissons_ratio < 0.5:
            raise InvalidParams("poissons_ratio", "must lie in (0, 0.5)")
        if not self.force_magnitude > 0:
            raise InvalidParams("force_magnitude", "must be positive")
        return self


def section_area(p: BeamParams) -> float:
    """Area of the chamfered I-section (exact for the meshed geometry)."""
    b, d, tw, tf, r = p.section_vector()
    return 2 * b * tf + tw * (d - 2 * tf) + 2 * r * r


@dataclass(frozen=True)
class MeshResolution:
    n_len: int = 4
    n_cross: int = 2

    def __post_init__(self):
        if int(self.n_len) != self.n_len or self.n_len < 2:
            raise InvalidParams("n_len", f"must be an integer >= 2, got {self.n_len}")
        if int(self.n_cross) != self.n_cross or self.n_cross < 1:
            raise InvalidParams("n_cross", f"must be an integer >= 1, got {self.n_cross}")


@dataclass(frozen=True, eq=False)
class MeshTemplate:
    resolution: MeshResolution
    coef_x: np.ndarray  # (n2d, 5) section x as linear form in (b, d, tw, tf, r)
    coef_y: np.ndarray
    tris2d: np.ndarray  # (n_tri, 3) section triangulation
    tets: np.ndarray
    edges: np.ndarray
    fixed_nodes: np.ndarray
    load_faces: np.ndarray
    template_hash: str

    @property
    def n_nodes(self):
        return self.coef_x.shape[0] * (self.resolution.n_len + 1)

    @property
    def n_section_nodes(self):
        return self.coef_x.shape[0]


@dataclass(frozen=True, eq=False)
class TetMesh:
    nodes: np.ndarray
    tets: np.ndarray
    edges: np.ndarray
    fixed_nodes: np.ndarray
    load_faces: np.ndarray
    template_hash: str = ""
    _locator: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    def tet_volumes(self):
        return tet_volumes(self.nodes, self.tets)


# generic section used only to merge coincident template points
_GENERIC_SECTION = np.array([101.37, 149.21, 9.731, 14.613, 11.287])


def _section_blocks():
    """Block corners as coefficient vectors over (b, d, tw, tf, r)."""
    e = np.eye(5)
    b, d, tw, tf, r = e
    X = [-b / 2, -tw / 2 - r, -tw / 2, tw / 2, tw / 2 + r, b / 2]
    Y = [-d / 2, -d / 2 + tf, -d / 2 + tf + r, d / 2 - tf - r, d / 2 - tf, d / 2]
    quads = []
    for j0, j1 in ((0, 1), (4, 5)):
        for c in range(5):
            quads.append(((X[c], Y[j0]), (X[c + 1], Y[j0]), (X[c + 1], Y[j1]), (X[c], Y[j1])))
    for j0, j1 in ((1, 2), (2, 3), (3, 4)):
        quads.append(((X[2], Y[j0]), (X[3], Y[j0]), (X[3], Y[j1]), (X[2], Y[j1])))
    # chamfers: right-angle corner first, counter-clockwise
    tris = [
        ((X[3], Y[1]), (X[4], Y[1]), (X[3], Y[2])),
        ((X[2], Y[1]), (X[2], Y[2]), (X[1], Y[1])),
        ((X[3], Y[4]), (X[3], Y[3]), (X[4], Y[4])),
        ((X[2], Y[4]), (X[1], Y[4]), (X[2], Y[3])),
    ]
    return quads, tris


class _PointPool:
    def __init__(self):
        self.keys = {}
        self.cx = []
        self.cy = []

    def add(self, px, py):
        key = (round(float(px @ _GENERIC_SECTION), 7), round(float(py @ _GENERIC_SECTION), 7))
        idx = self.keys.get(key)
        if idx is None:
            idx = len(self.cx)
            self.keys[key] = idx
            self.cx.append(px)
            self.cy.append(py)
        return idx


def _section_mesh(m):
    pool = _PointPool()
    tris = []
    quads, chamfers = _section_blocks()
    for q in quads:
        (x0, y0), (x1, y1), (x2, y2), (x3, y3) = q
        ids = np.empty((m + 1, m + 1), dtype=np.int64)
        for i in range(m + 1):
            s = i / m
            for j in range(m + 1):
                t = j / m
                w = ((1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t)
                px = w[0] * x0 + w[1] * x1 + w[2] * x2 + w[3] * x3
                py = w[0] * y0 + w[1] * y1 + w[2] * y2 + w[3] * y3
                ids[i, j] = pool.add(px, py)
        for i in range(m):
            for j in range(m):
                bl, br, tr, tl = ids[i, j], ids[i + 1, j], ids[i + 1, j + 1], ids[i, j + 1]
                if (i + j) % 2 == 0:
                    tris += [(bl, br, tr), (bl, tr, tl)]
                else:
                    tris += [(bl, br, tl), (br, tr, tl)]
    for (ax, ay), (bx, by), (cx, cy) in chamfers:
        ids = {}
        for i in range(m + 1):
            for j in range(m + 1 - i):
                s, t = i / m, j / m
                px = ax + s * (bx - ax) + t * (cx - ax)
                py = ay + s * (by - ay) + t * (cy - ay)
                ids[i, j] = pool.add(px, py)
        for i in range(m):
            for j in range(m - i):
                tris.append((ids[i, j], ids[i + 1, j], ids[i, j + 1]))
                if i + j <= m - 2:
                    tris.append((ids[i + 1, j], ids[i + 1, j + 1], ids[i, j + 1]))
    return np.array(pool.cx), np.array(pool.cy), np.array(tris, dtype=np.int64)


def extract_edges(tets) -> np.ndarray:
    """Sorted unique undirected edges of a tetrahedral connectivity array."""
    tets = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
    if tets.shape[0] == 0:
        return np.empty((0, 2), dtype=np.int64)
    pairs = np.concatenate([tets[:, [a, b]] for a, b in
                            ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))])
    pairs.sort(axis=1)
    return np.unique(pairs, axis=0)


def tet_volumes(nodes, tets):
    p = nodes[tets]
    a, b, c = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


def build_template(res: MeshResolution) -> MeshTemplate:
    """Fixed-topology template of the I-beam at the given resolution.

    Section triangles are extruded into prisms along z; each prism is split
    into three tets with each vertical face diagonal anchored at the node
    that comes first in a fixed sweep order (depth, then width), which makes
    neighbouring prisms conform.  Two prisms per section quad
    give the six tets per hexahedral cell.
    """
    cx, cy, tris = _section_mesh(res.n_cross)
    n2 = cx.shape[0]
    nl = res.n_len
    gx, gy = cx @ _GENERIC_SECTION, cy @ _GENERIC_SECTION
    # diagonal anchor order: sweep by depth coordinate, then width
    rank = np.empty(n2, dtype=np.int64)
    rank[np.lexsort((gx, gy))] = np.arange(n2)
    s = np.take_along_axis(tris, np.argsort(rank[tris], axis=1), axis=1)
    p, q, r = s[:, 0], s[:, 1], s[:, 2]
    tets = []
    for k in range(nl):
        lo, hi = k * n2, (k + 1) * n2
        tets.append(np.stack([p + lo, q + lo, r + lo, r + hi], axis=1))
        tets.append(np.stack([p + lo, q + lo, q + hi, r + hi], axis=1))
        tets.append(np.stack([p + lo, p + hi, q + hi, r + hi], axis=1))
    tets = np.concatenate(tets)

    # orient positively on a generic instance; admissible maps keep the sign
    z = np.repeat(np.arange(nl + 1) * (300.0 / nl), n2)
    nodes = np.stack([np.tile(gx, nl + 1), np.tile(gy, nl + 1), z], axis=1)
    neg = tet_volumes(nodes, tets) < 0
    tets[neg] = tets[neg][:, [0, 1, 3, 2]]

    edges = extract_edges(tets)
    fixed = np.arange(n2, dtype=np.int64)
    load = tris + nl * n2
    h = hashlib.sha256()
    for arr in (np.array([res.n_len, res.n_cross]), tets, edges, fixed, load):
        h.update(np.ascontiguousarray(arr, dtype="<i8").tobytes())
    return MeshTemplate(res, cx, cy, tris, tets, edges, fixed, load, h.hexdigest()[:16])


def instantiate_mesh(template: MeshTemplate, p: BeamParams) -> TetMesh:
    g = p.section_vector()
    nl = template.resolution.n_len
    n2 = template.n_section_nodes
    x = template.coef_x @ g
    y = template.coef_y @ g
    z = np.repeat(np.arange(nl + 1) * (p.length / nl), n2)
    z[-n2:] = p.length
    nodes = np.stack([np.tile(x, nl + 1), np.tile(y, nl + 1), z], axis=1)
    vol = tet_volumes(nodes, template.tets)
    if not np.all(vol > 0):
        bad = int(np.argmin(vol))
        raise InvertedElement(f"tet {bad} has volume {vol[bad]:.3e} for {p}")
    return TetMesh(nodes, template.tets, template.edges, template.fixed_nodes,
                   template.load_faces, template.template_hash)


def barycentric(nodes, tets, tet_ids, points):
    """Barycentric weights (Q, 4) of ``points`` w.r.t. the given tets."""
    p = nodes[tets[tet_ids]]
    M = np.transpose(p[:, 1:] - p[:, :1], (0, 2, 1))
    lam = np.linalg.solve(M, (points - p[:, 0])[..., None])[..., 0]
    return np.concatenate([1.0 - lam.sum(axis=1, keepdims=True), lam], axis=1)


def barycentric_gradients(nodes, tets, tet_ids):
    """Spatial gradients (Q, 4, 3) of the barycentric weights (constant per tet)."""
    p = nodes[tets[tet_ids]]
    M = np.transpose(p[:, 1:] - p[:, :1], (0, 2, 1))
    Minv = np.linalg.inv(M)  # rows are grad lambda_1..3
    return np.concatenate([-Minv.sum(axis=1, keepdims=True), Minv], axis=1)


def _build_locator(mesh):
    p = mesh.nodes[mesh.tets]
    lo, hi = p.min(axis=1), p.max(axis=1)
    span = mesh.nodes.max(axis=0) - mesh.nodes.min(axis=0)
    cell = max(float(np.median(hi - lo)), 1e-12)
    origin = mesh.nodes.min(axis=0)
    ilo = np.floor((lo - origin) / cell).astype(np.int64)
    ihi = np.floor((hi - origin) / cell).astype(np.int64)
    grid = {}
    for t in range(len(lo)):
        for i in range(ilo[t, 0], ihi[t, 0] + 1):
            for j in range(ilo[t, 1], ihi[t, 1] + 1):
                for k in range(ilo[t, 2], ihi[t, 2] + 1):
                    grid.setdefault((i, j, k), []).append(t)
    return {"origin": origin, "cell": cell, "grid": grid, "span": span}


def locate_point(mesh: TetMesh, q, tol=1e-12):
    """Containing tet and barycentric weights of ``q``, or None if outside."""
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        return None
    if "grid" not in mesh._locator:
        mesh._locator.update(_build_locator(mesh))
    loc = mesh._locator
    key = tuple(np.floor((q - loc["origin"]) / loc["cell"]).astype(np.int64))
    cand = loc["grid"].get(key)
    if not cand:
        return None
    cand = np.asarray(cand)
    w = barycentric(mesh.nodes, mesh.tets, cand, np.broadcast_to(q, (len(cand), 3)))
    best = int(np.argmax(w.min(axis=1)))
    if w[best].min() < -tol:
        return None
    wb = np.clip(w[best], 0.0, None)
    wb /= wb.sum()
    return int(cand[best]), wb
