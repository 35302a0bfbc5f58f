"""Two-stage training: data-only pre-training, then physics-informed
fine-tuning with a ramped residual weight.  Also the naive joint run used as
a stability baseline, and the checkpoint container.

Checkpoint layout (little-endian)::

    "BGCK" | u32 version | u32 header_len | header JSON
    u32 n_arrays | n_arrays x (u64 offset, u64 nbytes)   offsets from file start
    f64 array payloads
    u32 CRC32 of everything before it
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import struct
import zlib
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import physics as phys
from .dataset import Dataset, NormalizationStats, denormalize_labels, node_features, normalize_labels, stats_of
from .errors import CheckpointFormatError, ConfigMismatch, NonFiniteGradient, NonFiniteLoss
from .fea import lame_params
from .gnn import GnnModel, ModelConfig, make_batch
from .nn import AdamState, PlateauScheduler, adam_step

log = logging.getLogger(__name__)

MODES = ("pretrain", "finetune", "naive_joint")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-5
    seed: int = 0
    mode: str = "pretrain"
    alpha_target: float = 1e-6
    ramp_fraction: float = 0.25
    n_colloc: int = 256  # per sample
    patience: int = 10
    lr_factor: float = 0.5
    min_lr: float = 1e-7
    deterministic: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_rel_l2", "alpha", "lr", "physics_share")


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    final: "Checkpoint" = None

    def append(self, **row):
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("history epochs must increase")
        self.rows.append({k: row[k] for k in HISTORY_COLUMNS})

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in HISTORY_COLUMNS[1:]])
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path):
        h = cls()
        with open(path, newline="") as f:
            for r in csv.DictReader(f):
                h.append(epoch=int(r["epoch"]), **{k: float(r[k]) for k in HISTORY_COLUMNS[1:]})
        return h


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"BGCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: dict
    stats: NormalizationStats
    meta: dict = field(default_factory=dict)

    @property
    def norm_hash(self):
        return self.stats.hash()

    def model(self):
        m = GnnModel(self.model_cfg, seed=self.meta.get("init_seed", 0))
        for k, v in self.params.items():
            m.store.arrays[k] = np.array(v, dtype=np.float64)
        return m


def save_checkpoint(path, ckpt: Checkpoint):
    names = list(ckpt.params)
    header = {
        "model": ckpt.model_cfg.to_dict(),
        "normalization": ckpt.stats.to_dict(),
        "normalization_hash": ckpt.norm_hash,
        "meta": ckpt.meta,
        "arrays": [{"name": n, "shape": list(ckpt.params[n].shape)} for n in names],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    head = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)) + hb
    table_size = 4 + 16 * len(names)
    off = len(head) + table_size
    table = [struct.pack("<I", len(names))]
    blobs = []
    for n in names:
        b = np.ascontiguousarray(ckpt.params[n], dtype="<f8").tobytes()
        table.append(struct.pack("<QQ", off, len(b)))
        blobs.append(b)
        off += len(b)
    body = head + b"".join(table) + b"".join(blobs)
    data = body + struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_checkpoint(path, expect_arch=None, expect_norm_hash=None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    if zlib.crc32(data[:-4]) != struct.unpack_from("<I", data, len(data) - 4)[0]:
        raise CheckpointFormatError(f"{path}: checksum mismatch")
    try:
        header = json.loads(data[12:12 + hlen])
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from None
    pos = 12 + hlen
    (n,) = struct.unpack_from("<I", data, pos)
    specs = header["arrays"]
    if n != len(specs):
        raise CheckpointFormatError(f"{path}: offset table lists {n} arrays, header {len(specs)}")
    pos += 4
    payload_start = pos + 16 * n
    end = len(data) - 4
    params = {}
    expected = payload_start
    for i, s in enumerate(specs):
        o, nb = struct.unpack_from("<QQ", data, pos + 16 * i)
        size = int(np.prod(s["shape"], dtype=np.int64)) * 8
        if o != expected or nb != size or o + nb > end:
            raise CheckpointFormatError(
                f"{path}: offset table entry {i} ({s['name']}) is inconsistent "
                f"(offset {o}, {nb} bytes; expected offset {expected}, {size} bytes)")
        params[s["name"]] = np.frombuffer(data, "<f8", size // 8, o).reshape(s["shape"]).astype(np.float64)
        expected = o + nb
    if expected != end:
        raise CheckpointFormatError(f"{path}: {end - expected} unaccounted payload bytes")
    ckpt = Checkpoint(ModelConfig.from_dict(header["model"]), params,
                      NormalizationStats.from_dict(header["normalization"]), header.get("meta", {}))
    if ckpt.norm_hash != header["normalization_hash"]:
        raise CheckpointFormatError(f"{path}: normalization block does not match its hash")
    if expect_arch is not None and ckpt.model_cfg.arch != expect_arch:
        raise ConfigMismatch(f"checkpoint holds a {ckpt.model_cfg.arch} model, expected {expect_arch}")
    if expect_norm_hash is not None and ckpt.norm_hash != expect_norm_hash:
        raise ConfigMismatch(
            f"checkpoint normalization hash {ckpt.norm_hash} does not match dataset {expect_norm_hash}")
    return ckpt


# -- data plumbing ----------------------------------------------------------------

class _Prepared:
    """Per-sample features and normalised labels, computed once."""

    def __init__(self, ds: Dataset, stats: NormalizationStats):
        gen = ds.task.is_generalist
        self.ds = ds
        self.stats = stats
        self.x = [node_features(c, p, stats, gen) for c, p in zip(ds.coords, ds.params)]
        self.y = normalize_labels(ds.disp, stats)

    def batch(self, idx):
        return make_batch([self.x[i] for i in idx], self.ds.edges)

    def labels(self, idx):
        return self.y[np.asarray(idx)].reshape(-1, 3)

    def physics_batch(self, idx, n_colloc, key, graph):
        """Collocation for samples ``idx``; sample i draws from seed ``key + [i]``."""
        ds = self.ds
        samples = []
        for i in idx:
            p = ds.params[i]
            col = phys.sample_collocation(ds.coords[i], ds.tets, n_colloc, list(key) + [int(i)])
            lam, mu = lame_params(p.youngs_modulus, p.poissons_ratio)
            samples.append((ds.coords[i], ds.tets, col, lam, mu, p.length))
        return phys.build_physics_batch(samples, graph.offsets[:-1], graph.n_nodes, self.stats)


def _thread_guard(deterministic):
    if not deterministic:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def _chunks(idx, size):
    return [idx[k:k + size] for k in range(0, len(idx), size)]


def predict(model: GnnModel, prep: _Prepared, idx, batch=16):
    """Physical displacement predictions (len(idx), N, 3)."""
    out = []
    for chunk in _chunks(np.asarray(idx), batch):
        u = model.predict(prep.batch(chunk))
        out.append(denormalize_labels(u, prep.stats).reshape(len(chunk), -1, 3))
    return np.concatenate(out) if out else np.empty((0, prep.ds.n_nodes, 3))


def _val_metrics(model, prep, idx, batch):
    from .evaluator import rel_l2
    if len(idx) == 0:
        return float("nan"), float("nan")
    losses = []
    preds = []
    for chunk in _chunks(np.asarray(idx), batch):
        u = model.predict(prep.batch(chunk))
        losses.append(((u - prep.labels(chunk)) ** 2).sum())
        preds.append(denormalize_labels(u, prep.stats).reshape(len(chunk), -1, 3))
    val_loss = float(np.sum(losses) / (len(idx) * prep.ds.n_nodes * 3))
    return val_loss, rel_l2(np.concatenate(preds), prep.ds.disp[np.asarray(idx)])


def mean_residual(model: GnnModel, prep: _Prepared, idx, n_colloc, seed, batch=16):
    """Mean squared nondimensional residual over collocation points drawn with
    a fixed seed, so two models can be compared on identical points."""
    total, count = 0.0, 0
    for chunk in _chunks(np.asarray(idx), batch):
        g = prep.batch(chunk)
        tape = ad.Tape()
        P = {k: tape.constant(v) for k, v in model.params.items()}
        P["_tape"] = tape
        pb = prep.physics_batch(chunk, n_colloc, [seed, 4], g)
        r = phys.residual_star(model, P, model.latent(P, g), pb, prep.stats).value
        total += float((r ** 2).sum())
        count += r.size
    return total / count


# -- the loop ---------------------------------------------------------------------

def _run(model: GnnModel, ds: Dataset, stats, cfg: TrainConfig, alpha_of, tolerate_nonfinite=False,
         meta=None):
    train_idx, val_idx, _ = ds.splits()
    prep = _Prepared(ds, stats)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(patience=cfg.patience, factor=cfg.lr_factor, min_lr=cfg.min_lr)
    params = model.params
    hist = TrainHistory()
    best, best_score = None, np.inf
    meta = dict(meta or {})
    meta.update(train=cfg.to_dict(), init_seed=model.seed, task=int(ds.task),
                dataset_norm_hash=ds.manifest.get("normalization_hash") if ds.manifest else None)
    for epoch in range(cfg.epochs):
        alpha = alpha_of(epoch)
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(train_idx)
        data_sum, phys_sum, n_batches = 0.0, 0.0, 0
        for b, chunk in enumerate(_chunks(order, cfg.batch)):
            g = prep.batch(chunk)
            tape = ad.Tape()
            P = model.bind(tape)
            out, h = model.forward(P, g, return_latent=True)
            data = ad.mean(ad.square(ad.sub(out, prep.labels(chunk))))
            loss, pl = data, None
            if alpha > 0:
                pb = prep.physics_batch(chunk, cfg.n_colloc, [cfg.seed, 3, epoch], g)
                pl = phys.physics_loss(model, P, h, pb, stats)
                loss = phys.total_loss(data, pl, alpha)
            lv = float(loss.value)
            try:
                if not np.isfinite(lv):
                    raise NonFiniteLoss(f"non-finite loss {lv} at epoch {epoch}, batch {b}")
                grads = tape.gradient(loss)
                adam_step(opt, params, grads)
            except (NonFiniteLoss, NonFiniteGradient):
                if not tolerate_nonfinite:
                    raise
                log.warning("epoch %d batch %d: non-finite loss or gradient, step skipped", epoch, b)
            tape.release()
            data_sum += float(data.value)
            phys_sum += alpha * float(pl.value) if pl is not None else 0.0
            n_batches += 1
        train_loss = (data_sum + phys_sum) / n_batches
        share = phys_sum / (data_sum + phys_sum) if data_sum + phys_sum > 0 else 0.0
        val_loss, val_rel = _val_metrics(model, prep, val_idx, cfg.batch)
        lr_used = opt.lr
        hist.append(epoch=epoch, train_loss=train_loss, val_loss=val_loss, val_rel_l2=val_rel,
                    alpha=alpha, lr=lr_used, physics_share=share)
        log.info("epoch %d train %.4e val %.4e relL2 %.2f%% alpha %.1e share %.3f",
                 epoch, train_loss, val_loss, val_rel, alpha, share)
        if np.isfinite(val_rel) and val_rel < best_score:
            best_score = val_rel
            best = Checkpoint(model.cfg, {k: v.copy() for k, v in params.items()}, stats,
                              dict(meta, epoch=epoch, val_rel_l2=val_rel))
        if np.isfinite(val_loss):
            sched.step(opt, val_loss)
    final = Checkpoint(model.cfg, {k: v.copy() for k, v in params.items()}, stats,
                       dict(meta, epoch=cfg.epochs - 1, val_rel_l2=hist.rows[-1]["val_rel_l2"]))
    hist.final = final
    return (best if best is not None else final), hist


def _check_features(model_cfg, ds):
    want = ds.task.feature_width
    if model_cfg.in_dim != want:
        raise ConfigMismatch(f"model in_dim {model_cfg.in_dim} but {ds.task.name} features have width {want}")


def pretrain(model_cfg: ModelConfig, ds: Dataset, cfg: TrainConfig, out_dir=None):
    """Data-loss-only training; returns (best checkpoint by val rel-L2, history)."""
    _check_features(model_cfg, ds)
    with _thread_guard(cfg.deterministic):
        model = GnnModel(model_cfg, seed=cfg.seed)
        ckpt, hist = _run(model, ds, stats_of(ds), cfg, lambda e: 0.0, meta={"stage": "pretrain"})
    _emit(out_dir, ckpt, hist)
    return ckpt, hist


def finetune(ckpt: Checkpoint, ds: Dataset, cfg: TrainConfig, out_dir=None):
    """Continue from ``ckpt`` with ``L_data + alpha(t) L_physics``."""
    stats = stats_of(ds)
    if ckpt.norm_hash != stats.hash():
        raise ConfigMismatch(
            f"checkpoint normalization hash {ckpt.norm_hash} does not match dataset {stats.hash()}")
    _check_features(ckpt.model_cfg, ds)
    if ckpt.model_cfg.activation != "silu":
        raise ConfigMismatch("physics fine-tuning needs a twice-differentiable (silu) model; "
                             f"checkpoint uses {ckpt.model_cfg.activation}")
    with _thread_guard(cfg.deterministic):
        model = ckpt.model()
        sched = lambda e: phys.alpha_schedule(e, cfg.epochs, cfg.alpha_target, cfg.ramp_fraction)
        best, hist = _run(model, ds, stats, cfg, sched,
                          meta={"stage": "finetune", "source_epoch": ckpt.meta.get("epoch")})
    _emit(out_dir, best, hist)
    return best, hist


def naive_joint(model_cfg: ModelConfig, ds: Dataset, cfg: TrainConfig, out_dir=None):
    """Fixed alpha from a random initialisation; never raises on divergence."""
    _check_features(model_cfg, ds)
    with _thread_guard(cfg.deterministic):
        model = GnnModel(model_cfg, seed=cfg.seed)
        with np.errstate(all="ignore"):
            _, hist = _run(model, ds, stats_of(ds), cfg, lambda e: cfg.alpha_target,
                           tolerate_nonfinite=True, meta={"stage": "naive_joint"})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        hist.write_csv(Path(out_dir) / "history.csv")
    return hist


def _emit(out_dir, ckpt, hist):
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", ckpt)
    hist.write_csv(out / "history.csv")
