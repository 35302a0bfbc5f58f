"""Encoder-processor-decoder graph surrogates.

Processor layers: GCN, GAT, MPNN (edge/node MLPs with residual) and a
neighbourhood multi-head transformer.  The decoder is a two-layer MLP on
``latent ⊕ normalised position`` so the displacement field can also be
evaluated between nodes (see :meth:`GnnModel.decode_field_jet`).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .nn import MLP, Dense, ParamStore, glorot_uniform as _glorot

ARCHS = ("gcn", "gat", "mpnn", "transformer")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "mpnn"
    in_dim: int = 14
    hidden: int = 128
    layers: int = 3
    heads: tuple = (4, 4, 1)
    activation: str = "relu"
    out_dim: int = 3

    def __post_init__(self):
        arch = self.arch.lower().replace("graphtransformer", "transformer")
        object.__setattr__(self, "arch", arch)
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if len(self.heads) != self.layers:
            raise ValueError(f"heads {self.heads} must have one entry per layer ({self.layers})")
        if self.activation not in ("relu", "silu"):
            raise ValueError(f"activation must be relu or silu, got {self.activation!r}")

    def to_dict(self):
        d = asdict(self)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GraphBatch:
    """Node features of one or more same-topology graphs stacked together."""

    x: np.ndarray  # (N, F) with normalised position in the first 3 columns
    src: np.ndarray  # directed edges u -> v, both directions, no self loops
    dst: np.ndarray
    n_graphs: int = 1
    offsets: np.ndarray = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self):
        return self.x.shape[0]

    @property
    def pos(self):
        return self.x[:, :3]

    def aggregation(self):
        """(N, E) incidence summing edge messages into their target node."""
        if "agg" not in self._cache:
            E = len(self.dst)
            self._cache["agg"] = sp.csr_matrix(
                (np.ones(E), (self.dst, np.arange(E))), shape=(self.n_nodes, E))
        return self._cache["agg"]

    def with_self_loops(self):
        if "loops" not in self._cache:
            ids = np.arange(self.n_nodes)
            self._cache["loops"] = (np.concatenate([self.src, ids]),
                                    np.concatenate([self.dst, ids]))
        return self._cache["loops"]

    def gcn_matrix(self):
        """Symmetric-normalised adjacency with self loops, 1/sqrt((d_v+1)(d_u+1))."""
        if "gcn" not in self._cache:
            deg = np.bincount(self.dst, minlength=self.n_nodes).astype(np.float64)
            src, dst = self.with_self_loops()
            w = 1.0 / np.sqrt((deg[dst] + 1.0) * (deg[src] + 1.0))
            self._cache["gcn"] = sp.csr_matrix((w, (dst, src)), shape=(self.n_nodes,) * 2)
        return self._cache["gcn"]


def directed_edges(edges):
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    return np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]])


def make_batch(features_list, edges):
    """Stack per-graph feature arrays sharing one undirected edge list."""
    n = [f.shape[0] for f in features_list]
    offsets = np.concatenate([[0], np.cumsum(n)])
    s, d = directed_edges(edges)
    src = np.concatenate([s + o for o in offsets[:-1]])
    dst = np.concatenate([d + o for o in offsets[:-1]])
    return GraphBatch(np.concatenate(features_list), src, dst, len(n), offsets)


class GnnModel:
    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        self.seed = seed
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        act = cfg.activation
        H = cfg.hidden
        self.encoder = Dense("enc", cfg.in_dim, H, act)
        self.encoder.init(self.store, rng)
        self.layers = []
        d_in = H
        for i in range(cfg.layers):
            layer = _make_layer(cfg.arch, f"proc{i}", d_in, H, cfg.heads[i], act)
            layer.init(self.store, rng)
            self.layers.append(layer)
            d_in = layer.d_out
        self.latent_dim = d_in
        self.decoder = MLP("dec", [d_in + 3, H, cfg.out_dim], act)
        self.decoder.init(self.store, rng)

    @property
    def params(self):
        return self.store.arrays

    def param_count(self):
        return self.store.count()

    def latent(self, P, batch):
        x = P["_tape"].constant(batch.x)
        h = self.encoder(P, x)
        for layer in self.layers:
            h = layer(P, h, batch)
        return h

    def decode(self, P, h, pos):
        return self.decoder(P, ad.concat([h, pos], axis=1))

    def forward(self, P, batch, return_latent=False):
        """Nodal outputs (normalised displacement) as a tape tensor."""
        h = self.latent(P, batch)
        out = self.decode(P, h, P["_tape"].constant(batch.pos))
        return (out, h) if return_latent else out

    def bind(self, tape):
        P = self.store.bind(tape)
        P["_tape"] = tape
        return P

    def predict(self, batch):
        tape = ad.Tape()
        P = {k: tape.constant(v) for k, v in self.params.items()}
        P["_tape"] = tape
        return self.forward(P, batch).value

    def decode_field_jet(self, P, latent_jet, pos_jet):
        """Decoder applied to jets of (latent, normalised position)."""
        return self.decoder.jet(P, ad.jet_concat([latent_jet, pos_jet]))


def _make_layer(arch, name, d_in, hidden, heads, act):
    if arch == "gcn":
        return GCNLayer(name, d_in, hidden, act)
    if arch == "gat":
        return GATLayer(name, d_in, hidden, heads, act)
    if arch == "mpnn":
        return MPNNLayer(name, d_in, hidden, act)
    return TransformerLayer(name, d_in, hidden, heads, act)


class GCNLayer:
    def __init__(self, name, d_in, hidden, act):
        self.lin = Dense(name, d_in, hidden)
        self.act = act
        self.d_out = hidden

    def init(self, store, rng):
        # bias is added after aggregation
        store.add(f"{self.lin.name}.W", _glorot(self.d_out, self.lin.n_in, rng))
        store.add(f"{self.lin.name}.b", np.zeros(self.d_out))

    def __call__(self, P, h, batch):
        name = self.lin.name
        hw = ad.linear(h, P[f"{name}.W"])
        agg = ad.spmm(batch.gcn_matrix(), hw)
        return ad.activation(ad.add(agg, P[f"{name}.b"]), self.act)


class GATLayer:
    """Multi-head attention with LeakyReLU(0.2) scores over N(v) ∪ {v};
    each head has width ``hidden`` and heads are concatenated."""

    def __init__(self, name, d_in, hidden, heads, act):
        self.name, self.d_in, self.hidden, self.heads, self.act = name, d_in, hidden, heads, act
        self.d_out = heads * hidden

    def init(self, store, rng):
        n, H, C = self.name, self.heads, self.hidden
        store.add(f"{n}.W", _glorot(H * C, self.d_in, rng))
        store.add(f"{n}.att_dst", _glorot(H, C, rng))
        store.add(f"{n}.att_src", _glorot(H, C, rng))
        store.add(f"{n}.b", np.zeros(H * C))

    def attention(self, P, h, batch):
        n, H, C = self.name, self.heads, self.hidden
        wh = ad.linear(h, P[f"{n}.W"])
        wh3 = ad.reshape(wh, (h.shape[0], H, C))
        s_dst = ad.sum_(ad.mul(wh3, P[f"{n}.att_dst"]), axis=2)
        s_src = ad.sum_(ad.mul(wh3, P[f"{n}.att_src"]), axis=2)
        src, dst = batch.with_self_loops()
        e = ad.leaky_relu(ad.add(ad.gather(s_dst, dst), ad.gather(s_src, src)))
        return ad.segment_softmax(e, dst, h.shape[0]), wh, src, dst

    def __call__(self, P, h, batch):
        alpha, wh, src, dst = self.attention(P, h, batch)
        out = ad.attention_aggregate(alpha, wh, dst, src, h.shape[0], self.heads)
        return ad.activation(ad.add(out, P[f"{self.name}.b"]), self.act)


class MPNNLayer:
    """m_vu = psi([h_v || h_u]);  h'_v = h_v + phi([h_v || sum_u m_vu])."""

    def __init__(self, name, d_in, hidden, act):
        self.name, self.d_in, self.hidden, self.act = name, d_in, hidden, act
        self.edge = MLP(f"{name}.edge", [2 * d_in, hidden, hidden], act)
        self.node = MLP(f"{name}.node", [d_in + hidden, hidden, d_in], act)
        self.d_out = d_in

    def init(self, store, rng):
        self.edge.init(store, rng)
        self.node.init(store, rng)
        # residual branch starts as the identity: summed messages grow the
        # state several-fold per layer otherwise and Adam stalls for epochs
        last = self.node.layers[-1].name
        store.arrays[f"{last}.W"][...] = 0.0

    def messages(self, P, h, batch):
        first, second = self.edge.layers
        W = P[f"{first.name}.W"]
        d = self.d_in
        # first edge layer on [h_v || h_u] split so the matmul runs per node
        a = ad.linear(h, ad.columns(W, 0, d))
        b = ad.linear(h, ad.columns(W, d, 2 * d))
        pre = ad.add(ad.add(ad.gather(a, batch.dst), ad.gather(b, batch.src)), P[f"{first.name}.b"])
        return second(P, ad.activation(pre, first.activation))

    def __call__(self, P, h, batch):
        m = self.messages(P, h, batch)
        agg = ad.spmm(batch.aggregation(), m)
        return ad.add(h, self.node(P, ad.concat([h, agg], axis=1)))


class TransformerLayer:
    """Neighbourhood multi-head attention: softmax(q_v.k_u / sqrt(d)) over
    N(v) ∪ {v}, heads concatenated, plus a learned skip projection of h_v."""

    def __init__(self, name, d_in, hidden, heads, act):
        self.name, self.d_in, self.hidden, self.heads, self.act = name, d_in, hidden, heads, act
        self.d_out = heads * hidden
        self.proj = {k: Dense(f"{name}.{k}", d_in, heads * hidden) for k in ("query", "key", "value", "skip")}

    def init(self, store, rng):
        for d in self.proj.values():
            d.init(store, rng)

    def attention(self, P, h, batch):
        q = self.proj["query"](P, h)
        k = self.proj["key"](P, h)
        src, dst = batch.with_self_loops()
        scores = ad.scale(ad.edge_dot(q, k, dst, src, self.heads), 1.0 / np.sqrt(self.hidden))
        return ad.segment_softmax(scores, dst, h.shape[0]), src, dst

    def __call__(self, P, h, batch):
        alpha, src, dst = self.attention(P, h, batch)
        v = self.proj["value"](P, h)
        out = ad.attention_aggregate(alpha, v, dst, src, h.shape[0], self.heads)
        return ad.activation(ad.add(out, self.proj["skip"](P, h)), self.act)

