"""Navier-Cauchy residual loss evaluated at interior collocation points.

The network field between nodes is ``decoder(sum_i w_i(x) h_i, pos(x))``
with barycentric weights ``w_i`` of the containing tet.  Spatial derivatives
come from second-order jets seeded in physical millimetres: the latent lane
gradient is ``sum_i grad(w_i) h_i`` and the position lane gradient is the
inverse of the position half-range.  Output jets are mapped to physical
displacement with the label half-range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .dataset import normalize_positions
from .geometry import barycentric_gradients, tet_volumes


@dataclass
class CollocationSet:
    points: np.ndarray  # (Q, 3) mm
    tet_ids: np.ndarray  # (Q,)
    weights: np.ndarray  # (Q, 4) barycentric

    def __len__(self):
        return self.points.shape[0]


def sample_collocation(nodes, tets, Q, seed, floor=1e-9):
    """Q points uniform in the mesh volume: tets drawn with probability
    proportional to volume, then Dirichlet(1,1,1,1) barycentric weights."""
    rng = np.random.default_rng(seed)
    if Q == 0:
        return CollocationSet(np.empty((0, 3)), np.empty(0, dtype=np.int64), np.empty((0, 4)))
    vol = tet_volumes(nodes, tets)
    ids = rng.choice(len(tets), size=Q, p=vol / vol.sum())
    w = -np.log(rng.random((Q, 4)))
    w /= w.sum(axis=1, keepdims=True)
    bad = w.min(axis=1) <= floor
    while bad.any():
        fresh = -np.log(rng.random((int(bad.sum()), 4)))
        w[bad] = fresh / fresh.sum(axis=1, keepdims=True)
        bad = w.min(axis=1) <= floor
    pts = np.einsum("qi,qij->qj", w, nodes[tets[ids]])
    return CollocationSet(pts, ids, w)


def navier_cauchy_residual(u, lam, mu):
    """mu * lap(u) + (mu + lam) * grad(div u) for a vector jet ``u`` (Q, 3).

    ``lam`` and ``mu`` are scalars or (Q, 1) arrays.  Body force is zero.
    """
    hs = ad.hess_slot
    tape = u.v.tape
    zero = tape.constant(np.zeros(u.v.shape))
    H = [t if t is not None else zero for t in u.h]
    lap = ad.add(ad.add(H[hs(0, 0)], H[hs(1, 1)]), H[hs(2, 2)])
    comps = []
    for i in range(3):
        gd = None
        for j in range(3):
            t = ad.columns(H[hs(i, j)], j, j + 1)
            gd = t if gd is None else ad.add(gd, t)
        comps.append(gd)
    graddiv = ad.concat(comps, axis=1)
    return ad.add(ad.mul(lap, mu), ad.mul(graddiv, np.asarray(mu) + np.asarray(lam)))


def nondimensionalize(r, mu, length, u_scale):
    """r * L^2 / (mu * u_c)."""
    return ad.mul(r, np.asarray(length) ** 2 / (np.asarray(mu) * u_scale))


@dataclass
class PhysicsBatch:
    """Sparse interpolation operators and per-point constants for a batch."""

    interp: sp.csr_matrix  # (Q, N) barycentric weights
    interp_grad: list  # 3 x (Q, N) weight gradients, 1/mm
    pos_norm: np.ndarray  # (Q, 3)
    lam: np.ndarray  # (Q, 1)
    mu: np.ndarray
    length: np.ndarray


def build_physics_batch(samples, offsets, n_nodes, stats):
    """``samples``: list of (nodes, tets, CollocationSet, lam, mu, length);
    ``offsets`` are the node offsets of each graph inside the batch."""
    rows, cols, wv, wg = [], [], [], []
    pos, lam, mu, length = [], [], [], []
    q0 = 0
    for (nodes, tets, col, la, m, L), off in zip(samples, offsets):
        Q = len(col)
        conn = tets[col.tet_ids] + off
        grads = barycentric_gradients(nodes, tets, col.tet_ids)
        rows.append(np.repeat(np.arange(q0, q0 + Q), 4))
        cols.append(conn.ravel())
        wv.append(col.weights.ravel())
        wg.append(grads.reshape(-1, 3))
        pos.append(col.points)
        lam.append(np.full(Q, la))
        mu.append(np.full(Q, m))
        length.append(np.full(Q, L))
        q0 += Q
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    shape = (q0, int(n_nodes))
    interp = sp.csr_matrix((np.concatenate(wv), (rows, cols)), shape=shape)
    wg = np.concatenate(wg)
    igrad = [sp.csr_matrix((wg[:, k], (rows, cols)), shape=shape) for k in range(3)]
    return PhysicsBatch(interp, igrad, normalize_positions(np.concatenate(pos), stats),
                        np.concatenate(lam)[:, None], np.concatenate(mu)[:, None],
                        np.concatenate(length)[:, None])


def field_jet(model, P, latent, pb: PhysicsBatch, stats):
    """Physical displacement jet (Q, 3) of the network field at collocation points."""
    tape = P["_tape"]
    lat = ad.Jet2(ad.spmm(pb.interp, latent), [ad.spmm(g, latent) for g in pb.interp_grad])
    inv = 1.0 / stats.pos_half_range
    Q = pb.pos_norm.shape[0]
    pos_g = []
    for k in range(3):
        e = np.zeros((Q, 3))
        e[:, k] = inv[k]
        pos_g.append(tape.constant(e))
    out = model.decode_field_jet(P, lat, ad.Jet2(tape.constant(pb.pos_norm), pos_g))
    half = stats.disp_half_range
    f = (lambda t: None if t is None else ad.mul(t, half))
    return ad.Jet2(out.v, [f(t) for t in out.g], [f(t) for t in out.h])


def residual_star(model, P, latent, pb: PhysicsBatch, stats):
    """Nondimensional residual (Q, 3) at the batch's collocation points."""
    u = field_jet(model, P, latent, pb, stats)
    r = navier_cauchy_residual(u, pb.lam, pb.mu)
    return nondimensionalize(r, pb.mu, pb.length, residual_scale(stats))


def residual_scale(stats):
    """u_c: the largest displacement half-range among the three components."""
    return float(np.max(stats.disp_half_range))


def physics_loss(model, P, latent, pb: PhysicsBatch, stats):
    """Mean over points and components of the squared nondimensional residual."""
    r = residual_star(model, P, latent, pb, stats)
    return ad.mean(ad.square(r))


def alpha_schedule(epoch, total_epochs, alpha_target=1e-6, ramp_fraction=0.25):
    """Linear ramp from 0 over the first ``ramp_fraction`` of epochs, then flat."""
    ramp = ramp_fraction * total_epochs
    if ramp <= 0:
        return float(alpha_target)
    return float(alpha_target * min(epoch / ramp, 1.0))


def total_loss(data_loss, phys_loss, alpha):
    if alpha == 0 or phys_loss is None:
        return data_loss
    if isinstance(data_loss, ad.Tensor):
        return ad.add(data_loss, ad.scale(phys_loss, alpha))
    return data_loss + alpha * phys_loss
