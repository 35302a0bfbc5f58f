"""Numerical oracles behind ``beamgnn verify``.

Each check compares an implementation against an independent reference
(closed form, finite differences or beam theory) and returns
:class:`OracleResult` rows with the measured value and its tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import fea
from .geometry import BeamParams, LoadDist, LoadType, MeshResolution, TetMesh, build_template, extract_edges


@dataclass
class OracleResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    seconds: float = 0.0
    detail: str = ""

    def line(self):
        flag = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"[{flag}] {self.name}: {self.measured:.3e} (tol {self.tolerance:.1e}, {self.seconds:.2f}s){extra}"


def _timed(fn):
    def wrapper(*a, **k):
        t0 = time.perf_counter()
        out = fn(*a, **k)
        dt = time.perf_counter() - t0
        for r in out:
            r.seconds = dt
        return out
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# -- FEA ------------------------------------------------------------------------

def cube_mesh(n=2, size=1.0):
    """Unit cube split into n^3 cells of six Kuhn tetrahedra each."""
    g = np.linspace(0.0, size, n + 1)
    X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
    nodes = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    nid = lambda i, j, k: (i * (n + 1) + j) * (n + 1) + k
    paths = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    tets = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                for path in paths:
                    c = [i, j, k]
                    verts = [nid(*c)]
                    for axis in path:
                        c[axis] += 1
                        verts.append(nid(*c))
                    tets.append(verts)
    tets = np.array(tets, dtype=np.int64)
    vol = np.einsum("ij,ij->i", np.cross(nodes[tets[:, 1]] - nodes[tets[:, 0]],
                                         nodes[tets[:, 2]] - nodes[tets[:, 0]]),
                    nodes[tets[:, 3]] - nodes[tets[:, 0]])
    tets[vol < 0] = tets[vol < 0][:, [0, 2, 1, 3]]
    top = []
    for i in range(n):
        for j in range(n):
            a, b, c, d = nid(i, j, n), nid(i + 1, j, n), nid(i + 1, j + 1, n), nid(i, j + 1, n)
            top += [[a, b, c], [a, c, d]]
    fixed = np.flatnonzero(np.isclose(nodes[:, 2], 0.0))
    return TetMesh(nodes, tets, extract_edges(tets), fixed, np.array(top, dtype=np.int64))


def patch_test(E=200e3, nu=0.3, sigma=10.0, n=2):
    """Uniaxial tension of a cube on symmetry rollers; returns (u, exact)."""
    mesh = cube_mesh(n)
    mat = fea.MaterialModel.from_E_nu(E, nu)
    sys = fea.assemble(mesh, mat)
    F = np.zeros((mesh.n_nodes, 3))
    F[:, 2] = sigma * fea.nodal_areas(mesh)
    sys.F = F.ravel()
    x = mesh.nodes
    dofs = np.concatenate([3 * np.flatnonzero(np.isclose(x[:, k], 0.0)) + k for k in range(3)])
    sys = fea.apply_dirichlet_dofs(sys, dofs)
    u, _ = fea.pcg(sys.K, sys.F, rtol=1e-14)
    exact = np.stack([-nu * sigma / E * x[:, 0], -nu * sigma / E * x[:, 1], sigma / E * x[:, 2]], axis=1)
    return u.reshape(-1, 3), exact


@_timed
def check_patch():
    u, exact = patch_test()
    err = float(np.abs(u - exact).max() / np.abs(exact).max())
    return [OracleResult("fea.patch_test", err, 1e-8, err <= 1e-8)]


CANTILEVER_RESOLUTIONS = ((2, 1), (4, 2), (8, 3))


def cantilever_errors(resolutions=CANTILEVER_RESOLUTIONS):
    """Signed relative tip-deflection error vs Timoshenko at each resolution."""
    p = BeamParams.midpoint(force_magnitude=225e3, load_type=LoadType.BENDING_Y,
                            load_dist=LoadDist.UNIFORM)
    ref = fea.timoshenko_tip_deflection(p)
    out = []
    for res in resolutions:
        r = fea.solve_case(build_template(MeshResolution(*res)), p)
        out.append((-fea.tip_deflection(r) - ref) / ref)
    return out


@_timed
def check_cantilever():
    errs = cantilever_errors()
    mags = [abs(e) for e in errs]
    mono = all(b <= a for a, b in zip(mags, mags[1:]))
    detail = " ".join(f"{r}:{e:+.4f}" for r, e in zip(CANTILEVER_RESOLUTIONS, errs))
    return [OracleResult("fea.cantilever_timoshenko_(8,3)", mags[-1], 0.12, mags[-1] <= 0.12, detail=detail),
            OracleResult("fea.cantilever_error_non_increasing", float(not mono), 0.0, mono, detail=detail)]


# -- autodiff ----------------------------------------------------------------------

def _rel(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def random_network_fd_error(seed, step=1e-5):
    """Reverse gradient vs central differences for a random small composite
    network (dense, activation, gather/scatter, softmax, reductions)."""
    rng = np.random.default_rng(seed)
    n_in, n_h = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    act = ("silu", "leaky_relu")[seed % 2]
    theta = {"W1": rng.normal(size=(n_h, n_in)), "b1": rng.normal(size=n_h),
             "W2": rng.normal(size=(1, n_h))}
    x = rng.normal(size=(6, n_in))
    idx = rng.integers(0, 6, size=9)
    seg = rng.integers(0, 3, size=9)

    def f(params, tape=None):
        tape = tape or ad.Tape()
        P = {k: tape.param(k, v) for k, v in params.items()}
        h = ad.activation(ad.linear(tape.constant(x), P["W1"], P["b1"]), act)
        e = ad.gather(h, idx)
        a = ad.segment_softmax(ad.linear(e, P["W2"]), seg, 3)
        y = ad.mul(ad.sum_(ad.mul(e, a), axis=1), ad.sum_(e, axis=1))
        return tape, ad.mean(ad.square(y))

    tape, out = f(theta)
    g = tape.gradient(out)
    worst = 0.0
    for k, v in theta.items():
        fd = np.zeros_like(v)
        for i in np.ndindex(v.shape):
            up = {n: a.copy() for n, a in theta.items()}
            dn = {n: a.copy() for n, a in theta.items()}
            up[k][i] += step
            dn[k][i] -= step
            fd[i] = (f(up)[1].value - f(dn)[1].value) / (2 * step)
        worst = max(worst, _rel(g[k], fd))
    return worst


def jet_hessian_fd_error(seed, step=1e-4):
    """Jet Hessian of a 3-input SiLU MLP vs second-order central differences."""
    rng = np.random.default_rng(seed)
    W1, b1 = rng.normal(size=(5, 3)) * 0.7, rng.normal(size=5)
    W2 = rng.normal(size=(2, 5))
    x0 = rng.normal(size=(4, 3))

    def value(x):
        h = x @ W1.T + b1
        return (h / (1.0 + np.exp(-h))) @ W2.T

    tape = ad.Tape()
    jet = ad.Jet2(tape.constant(x0), [tape.constant(np.tile(np.eye(3)[k], (4, 1))) for k in range(3)])
    y = jet.linear(tape.constant(W1), tape.constant(b1)).apply("silu").linear(tape.constant(W2))
    worst = 0.0
    for (i, j) in ad.HESS_INDEX:
        ei, ej = np.eye(3)[i] * step, np.eye(3)[j] * step
        fd = (value(x0 + ei + ej) - value(x0 + ei - ej) - value(x0 - ei + ej) + value(x0 - ei - ej)) / (4 * step**2)
        worst = max(worst, _rel(y.hessian(i, j).value, fd))
    return worst


def forward_over_reverse_fd_error(theta=0.7, c=0.3, x=1.3, step=1e-5):
    """Loss (d2 f/dx2 - c)^2 with f = theta * silu(x) * x, reverse gradient vs FD."""
    def loss(th, tape=None):
        tape = tape or ad.Tape()
        t = tape.param("theta", np.array([th]))
        xj = ad.Jet2.seed(tape, np.array([x]), 0)
        f = (xj.apply("silu") * xj).scale(1.0)
        f = ad.Jet2(ad.mul(f.v, t), [None if g is None else ad.mul(g, t) for g in f.g],
                    [None if h is None else ad.mul(h, t) for h in f.h])
        return tape, ad.sum_(ad.square(ad.sub(f.hessian(0, 0), c)))

    tape, out = loss(theta)
    g = tape.gradient(out)["theta"][0]
    fd = (loss(theta + step)[1].value - loss(theta - step)[1].value) / (2 * step)
    return abs(g - fd) / abs(fd)


def residual_loss_fd_error(seed=0, step=1e-5):
    """Navier-Cauchy residual loss through a 2-layer SiLU decoder (30 params)
    vs central differences on every parameter."""
    from .physics import navier_cauchy_residual
    rng = np.random.default_rng(seed)
    theta = {"W1": rng.normal(size=(5, 3)) * 0.5, "b1": rng.normal(size=5) * 0.5,
             "W2": rng.normal(size=(2, 5)) * 0.5}
    pts = rng.normal(size=(7, 3))
    lam, mu = 1.7, 1.1

    def loss(params):
        tape = ad.Tape()
        P = {k: tape.param(k, v) for k, v in params.items()}
        jet = ad.Jet2(tape.constant(pts), [tape.constant(np.tile(np.eye(3)[k], (7, 1))) for k in range(3)])
        h = jet.linear(P["W1"], P["b1"]).apply("silu").linear(P["W2"])
        u = ad.jet_concat([h, jet.columns(0, 1).scale(0.0)])
        r = navier_cauchy_residual(u, lam, mu)
        return tape, ad.mean(ad.square(r))

    tape, out = loss(theta)
    g = tape.gradient(out)
    worst = 0.0
    for k, v in theta.items():
        fd = np.zeros_like(v)
        for i in np.ndindex(v.shape):
            up = {n: a.copy() for n, a in theta.items()}
            dn = {n: a.copy() for n, a in theta.items()}
            up[k][i] += step
            dn[k][i] -= step
            fd[i] = (loss(up)[1].value - loss(dn)[1].value) / (2 * step)
        worst = max(worst, _rel(g[k], fd))
    return worst


@_timed
def check_autodiff():
    rev = max(random_network_fd_error(s) for s in range(50))
    jet = max(jet_hessian_fd_error(s) for s in range(10))
    fo = forward_over_reverse_fd_error()
    nc = residual_loss_fd_error()
    return [OracleResult("autodiff.reverse_vs_fd_50_networks", rev, 1e-6, rev <= 1e-6),
            OracleResult("autodiff.jet_hessian_vs_fd", jet, 1e-5, jet <= 1e-5),
            OracleResult("autodiff.forward_over_reverse_toy", fo, 1e-5, fo <= 1e-5),
            OracleResult("autodiff.residual_loss_vs_fd", nc, 1e-5, nc <= 1e-5)]


# -- residual and metric unit oracles ---------------------------------------------

def _field_jet(fn_value, grad, hess, x):
    """Jet of a manufactured field given closed-form value/gradient/Hessian."""
    tape = ad.Tape()
    g = [tape.constant(grad(x, k)) for k in range(3)]
    h = [tape.constant(hess(x, i, j)) for (i, j) in ad.HESS_INDEX]
    return ad.Jet2(tape.constant(fn_value(x)), g, h)


def manufactured_residuals(lam=1.5, mu=0.8, seed=0):
    """Residuals of constant, affine and (x^2, 0, 0) fields at random points."""
    from .physics import navier_cauchy_residual
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 3))
    c = rng.normal(size=3)
    A = rng.normal(size=(3, 3))
    zero = lambda x, *_: np.zeros((len(x), 3))
    const = _field_jet(lambda x: np.tile(c, (len(x), 1)), zero, zero, x)
    affine = _field_jet(lambda x: x @ A.T + c, lambda x, k: np.tile(A[:, k], (len(x), 1)), zero, x)

    def q_grad(x, k):
        out = np.zeros((len(x), 3))
        if k == 0:
            out[:, 0] = 2 * x[:, 0]
        return out

    def q_hess(x, i, j):
        out = np.zeros((len(x), 3))
        if i == j == 0:
            out[:, 0] = 2.0
        return out

    quad = _field_jet(lambda x: np.stack([x[:, 0] ** 2, 0 * x[:, 0], 0 * x[:, 0]], 1), q_grad, q_hess, x)
    return {name: navier_cauchy_residual(j, lam, mu).value for name, j in
            (("constant", const), ("affine", affine), ("quadratic", quad))}, (lam, mu)


@_timed
def check_residual():
    res, (lam, mu) = manufactured_residuals()
    expect = np.zeros_like(res["quadratic"])
    expect[:, 0] = 2 * mu + 2 * (mu + lam)
    return [OracleResult("physics.residual_constant", float(np.abs(res["constant"]).max()), 1e-10,
                         bool(np.abs(res["constant"]).max() <= 1e-10)),
            OracleResult("physics.residual_affine", float(np.abs(res["affine"]).max()), 1e-10,
                         bool(np.abs(res["affine"]).max() <= 1e-10)),
            OracleResult("physics.residual_x_squared", float(np.abs(res["quadratic"] - expect).max()), 0.0,
                         bool(np.array_equal(res["quadratic"], expect)))]


@_timed
def check_metrics():
    from .evaluator import mae, r2, rel_l2
    rng = np.random.default_rng(3)
    u = rng.normal(size=(4, 20, 3))
    d = rng.normal(size=(4, 20, 3))
    d *= 0.5 / np.linalg.norm(d, axis=2, keepdims=True)
    out = []
    v = rel_l2(1.1 * u, u)
    out.append(OracleResult("metrics.rel_l2_ten_percent", abs(v - 10.0), 5e-5, abs(v - 10.0) <= 5e-5))
    v = r2(u, u)
    out.append(OracleResult("metrics.r2_perfect", abs(v - 1.0), 1e-12, abs(v - 1.0) <= 1e-12))
    v = r2(np.full_like(u, u.mean()), u)
    out.append(OracleResult("metrics.r2_pooled_mean", abs(v), 1e-12, abs(v) <= 1e-12))
    v = mae(u + d, u)
    out.append(OracleResult("metrics.mae_half_mm", abs(v - 0.5), 1e-12, abs(v - 0.5) <= 1e-12))
    return out


@_timed
def check_template_counts():
    t = build_template(MeshResolution(2, 1))
    ok = (t.n_nodes, len(t.tets), len(t.edges)) == (84, 180, 341)
    return [OracleResult("geometry.template_(2,1)_counts", float(not ok), 0.0, ok,
                         detail=f"nodes={t.n_nodes} tets={len(t.tets)} edges={len(t.edges)}")]


LEVELS = {
    "unit": (check_residual, check_metrics, check_template_counts),
    "fea": (check_patch, check_cantilever),
    "autodiff": (check_autodiff,),
}


def run(level="all"):
    if level == "all":
        checks = [c for lv in ("unit", "fea", "autodiff") for c in LEVELS[lv]]
    else:
        checks = LEVELS[level]
    results = []
    for c in checks:
        results.extend(c())
    return results
