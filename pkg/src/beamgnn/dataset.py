"""Latin-hypercube datasets of FEA solutions, normalisation and storage.

Container layout (little-endian), ``dataset.bin``::

    "IBMS" | u32 version=1
    header   u32 n_samples, u32 n_nodes, u32 n_tets, u32 n_edges, u8 task, 7 pad
    topology u32 tets[n_tets*4], u32 edges[n_edges*2],
             u32 n_fixed, u32 fixed[n_fixed], u32 n_faces, u32 faces[n_faces*3]
    records  n_samples x (f64 params[9], u8 load_type, u8 load_dist, 6 pad,
                          f64 coords[3*n_nodes], f64 disp[3*n_nodes])
    u32 CRC32 of everything between the version field and the CRC

``manifest.json`` holds the DatasetSpec echo, split indices, normalisation stats,
seed and template hash.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import (BadMagic, BeamGnnError, ChecksumMismatch, DatasetFormatError,
                     InvalidParams, InvertedElement, NoConvergence, TruncatedFile,
                     UnsupportedVersion)
from .fea import solve_case
from .geometry import (CONTINUOUS_FIELDS, DEFAULT_RANGES, BeamParams, LoadDist, LoadType,
                       MeshResolution, build_template)

log = logging.getLogger(__name__)

MAGIC = b"IBMS"
SCHEMA_VERSION = 1
_HEADER = struct.Struct("<IIIIB7x")
_REC_HEAD = struct.Struct("<9dBB6x")

LOW_SIGNAL = (50e3, 100e3)
HIGH_SIGNAL = (200e3, 250e3)


class Task(IntEnum):
    GENERALIST = 0
    SPECIALIST_LOW = 1
    SPECIALIST_HIGH = 2

    @property
    def is_generalist(self):
        return self == Task.GENERALIST

    @property
    def feature_width(self):
        return 16 if self.is_generalist else 14


@dataclass
class DatasetSpec:
    n_samples: int = 150
    task: Task = Task.SPECIALIST_HIGH
    force_range: tuple = HIGH_SIGNAL
    load_types: tuple = (LoadType.BENDING_Y,)
    load_dists: tuple = (LoadDist.UNIFORM, LoadDist.LINEAR_Y)
    resolution: MeshResolution = field(default_factory=MeshResolution)
    seed: int = 0
    ranges: dict = field(default_factory=lambda: dict(DEFAULT_RANGES))

    def __post_init__(self):
        self.task = Task(self.task)
        self.force_range = tuple(float(f) for f in self.force_range)
        self.load_types = tuple(LoadType(t) for t in self.load_types)
        self.load_dists = tuple(LoadDist(d) for d in self.load_dists)
        if isinstance(self.resolution, dict):
            self.resolution = MeshResolution(**self.resolution)
        elif not isinstance(self.resolution, MeshResolution):
            self.resolution = MeshResolution(*self.resolution)
        self.ranges = {k: tuple(float(x) for x in v) for k, v in self.ranges.items()}
        self.ranges["force_magnitude"] = self.force_range

    def validate(self):
        if int(self.n_samples) != self.n_samples or self.n_samples < 10:
            raise InvalidParams("n_samples", f"must be an integer >= 10, got {self.n_samples}")
        lo, hi = self.force_range
        regime = HIGH_SIGNAL if self.task == Task.SPECIALIST_HIGH else LOW_SIGNAL
        if not regime[0] <= lo < hi <= regime[1]:
            raise InvalidParams("force_range", f"{self.force_range} not inside {regime} for {self.task.name}")
        if not self.task.is_generalist and set(self.load_types) != {LoadType.BENDING_Y}:
            raise InvalidParams("load_types", "specialist tasks allow BENDING_Y only")
        if not self.load_types or not self.load_dists:
            raise InvalidParams("load_types", "allowed categorical sets must be non-empty")
        for name in CONTINUOUS_FIELDS:
            if name not in self.ranges:
                raise InvalidParams(name, "missing range")
            a, b = self.ranges[name]
            if not (np.isfinite(a) and np.isfinite(b) and a <= b):
                raise InvalidParams(name, f"bad range ({a}, {b})")
        unknown = set(self.ranges) - set(CONTINUOUS_FIELDS)
        if unknown:
            raise InvalidParams(sorted(unknown)[0], "unknown parameter range")
        # corner check of the geometric invariants
        corner = BeamParams(**{k: self.ranges[k][0] for k in CONTINUOUS_FIELDS})
        worst = corner.replace(flange_width=self.ranges["flange_width"][0],
                               web_thickness=self.ranges["web_thickness"][1],
                               depth=self.ranges["depth"][0],
                               flange_thickness=self.ranges["flange_thickness"][1],
                               fillet_radius=self.ranges["fillet_radius"][1])
        worst.validate(ranges={})
        return self

    def to_dict(self):
        return {
            "n_samples": int(self.n_samples),
            "task": self.task.name,
            "force_range": list(self.force_range),
            "load_types": [t.name for t in self.load_types],
            "load_dists": [d.name for d in self.load_dists],
            "resolution": [self.resolution.n_len, self.resolution.n_cross],
            "seed": int(self.seed),
            "ranges": {k: list(v) for k, v in self.ranges.items()},
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "preset" in d:
            base = preset(d.pop("preset"), n_samples=d.pop("n_samples", 150), seed=d.pop("seed", 0)).to_dict()
            base.update(d)
            d = base
        known = {"n_samples", "task", "force_range", "load_types", "load_dists", "resolution", "seed", "ranges"}
        extra = set(d) - known
        if extra:
            raise InvalidParams(sorted(extra)[0], "unknown dataset spec key")
        if isinstance(d.get("task"), str):
            d["task"] = Task[d["task"].upper().replace("-", "_")]
        for key, enum in (("load_types", LoadType), ("load_dists", LoadDist)):
            if key in d:
                d[key] = tuple(enum[v.upper()] if isinstance(v, str) else enum(v) for v in d[key])
        if "ranges" in d:
            merged = dict(DEFAULT_RANGES)
            merged.update(d["ranges"])
            d["ranges"] = merged
        try:
            spec = cls(**d)
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidParams("spec", str(exc)) from exc
        return spec


def preset(name, n_samples=150, seed=0, resolution=(4, 2)):
    """The three dataset presets: generalist-low, specialist-low, specialist-high."""
    name = name.lower().replace("_", "-")
    res = MeshResolution(*resolution)
    if name == "generalist-low":
        return DatasetSpec(n_samples, Task.GENERALIST, LOW_SIGNAL, tuple(LoadType), tuple(LoadDist), res, seed)
    if name == "specialist-low":
        return DatasetSpec(n_samples, Task.SPECIALIST_LOW, LOW_SIGNAL, (LoadType.BENDING_Y,), tuple(LoadDist), res, seed)
    if name == "specialist-high":
        return DatasetSpec(n_samples, Task.SPECIALIST_HIGH, HIGH_SIGNAL, (LoadType.BENDING_Y,), tuple(LoadDist), res, seed)
    raise InvalidParams("preset", f"unknown preset {name!r}")


def lhs_sample(spec: DatasetSpec, stream=0):
    """Latin-hypercube design over the continuous ranges; categoricals uniform."""
    n = int(spec.n_samples)
    rng = np.random.default_rng([int(spec.seed), int(stream)])
    cols = {}
    for name in CONTINUOUS_FIELDS:
        lo, hi = spec.ranges[name]
        u = (rng.permutation(n) + rng.random(n)) / n
        cols[name] = lo + u * (hi - lo)
    lt = rng.integers(0, len(spec.load_types), size=n)
    ld = rng.integers(0, len(spec.load_dists), size=n)
    return [
        BeamParams(**{k: float(cols[k][i]) for k in CONTINUOUS_FIELDS},
                   load_type=spec.load_types[lt[i]], load_dist=spec.load_dists[ld[i]])
        for i in range(n)
    ]


def split(n, seed):
    """80/10/10 train/val/test index arrays; val and test sizes are floored."""
    perm = np.random.default_rng([int(seed), 2]).permutation(n)
    n_val = n_test = n // 10
    n_train = n - n_val - n_test
    return (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
            np.sort(perm[n_train + n_val:]))


# -- in-memory dataset and binary container ------------------------------------

@dataclass
class Dataset:
    task: Task
    tets: np.ndarray
    edges: np.ndarray
    fixed_nodes: np.ndarray
    load_faces: np.ndarray
    params: list
    coords: np.ndarray  # (S, N, 3)
    disp: np.ndarray  # (S, N, 3)
    manifest: dict | None = None

    @property
    def n_samples(self):
        return len(self.params)

    @property
    def n_nodes(self):
        return self.coords.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.task, self.tets, self.edges, self.fixed_nodes, self.load_faces,
                       [self.params[i] for i in idx], self.coords[idx], self.disp[idx], self.manifest)

    def splits(self):
        s = self.manifest["splits"]
        return tuple(np.asarray(s[k], dtype=np.int64) for k in ("train", "val", "test"))


def encode_record(p: BeamParams, coords, disp):
    return (_REC_HEAD.pack(*p.continuous(), int(p.load_type), int(p.load_dist))
            + np.ascontiguousarray(coords, dtype="<f8").tobytes()
            + np.ascontiguousarray(disp, dtype="<f8").tobytes())


def record_size(n_nodes):
    return _REC_HEAD.size + 2 * 3 * n_nodes * 8


def decode_record(buf, n_nodes):
    head = _REC_HEAD.unpack_from(buf, 0)
    p = BeamParams(*head[:9], load_type=LoadType(head[9]), load_dist=LoadDist(head[10]))
    off = _REC_HEAD.size
    k = 3 * n_nodes
    coords = np.frombuffer(buf, "<f8", k, off).reshape(n_nodes, 3).astype(np.float64)
    disp = np.frombuffer(buf, "<f8", k, off + 8 * k).reshape(n_nodes, 3).astype(np.float64)
    return p, coords, disp


def _topology_bytes(tets, edges, fixed, faces):
    u32 = lambda a: np.ascontiguousarray(a, dtype="<u4").tobytes()
    return (u32(tets) + u32(edges) + struct.pack("<I", len(fixed)) + u32(fixed)
            + struct.pack("<I", len(faces)) + u32(faces))


def dataset_bytes(ds: Dataset, records=None):
    head = _HEADER.pack(ds.n_samples, ds.n_nodes, len(ds.tets), len(ds.edges), int(ds.task))
    body = [head, _topology_bytes(ds.tets, ds.edges, ds.fixed_nodes, ds.load_faces)]
    if records is None:
        records = [encode_record(p, c, u) for p, c, u in zip(ds.params, ds.coords, ds.disp)]
    body.extend(records)
    payload = b"".join(body)
    return MAGIC + struct.pack("<I", SCHEMA_VERSION) + payload + struct.pack("<I", zlib.crc32(payload))


def write_dataset(path, ds: Dataset, records=None):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dataset_bytes(ds, records))
    os.replace(tmp, path)


def read_dataset(path, manifest=True) -> Dataset:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 8:
        raise TruncatedFile(f"{path}: {len(buf)} bytes, too short for a header")
    if buf[:4] != MAGIC:
        raise BadMagic(f"{path}: magic {buf[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != SCHEMA_VERSION:
        raise UnsupportedVersion(f"{path}: schema version {version}, this reader supports {SCHEMA_VERSION}")
    if len(buf) < 8 + _HEADER.size + 4:
        raise TruncatedFile(f"{path}: truncated header")
    n_s, n_n, n_t, n_e, task = _HEADER.unpack_from(buf, 8)
    off = 8 + _HEADER.size

    def take(count, what):
        nonlocal off
        end = off + 4 * count
        if end > len(buf) - 4:
            raise TruncatedFile(f"{path}: truncated while reading {what}")
        a = np.frombuffer(buf, "<u4", count, off).astype(np.int64)
        off = end
        return a

    tets = take(4 * n_t, "tets").reshape(n_t, 4)
    edges = take(2 * n_e, "edges").reshape(n_e, 2)
    fixed = take(int(take(1, "fixed count")[0]), "fixed nodes")
    n_f = int(take(1, "face count")[0])
    faces = take(3 * n_f, "load faces").reshape(n_f, 3)
    rs = record_size(n_n)
    expected = off + n_s * rs + 4
    if len(buf) < expected:
        raise TruncatedFile(f"{path}: {len(buf)} bytes, expected {expected}")
    if len(buf) > expected:
        raise DatasetFormatError(f"{path}: {len(buf) - expected} trailing bytes")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[8:-4]) != crc:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")
    params, coords, disp = [], np.empty((n_s, n_n, 3)), np.empty((n_s, n_n, 3))
    for i in range(n_s):
        p, c, u = decode_record(buf[off + i * rs: off + (i + 1) * rs], n_n)
        params.append(p)
        coords[i], disp[i] = c, u
    man = None
    mpath = path.parent / "manifest.json"
    if manifest and mpath.exists():
        man = json.loads(mpath.read_text())
    return Dataset(Task(task), tets, edges, fixed, faces, params, coords, disp, man)


# -- normalisation ----------------------------------------------------------

SCALAR_FEATURES = CONTINUOUS_FIELDS + ("load_dist",)


@dataclass
class NormalizationStats:
    """Min/max per feature and displacement component, from the train split."""

    features: dict  # name -> [min, max]
    displacement: list  # [[min, max]] * 3
    degenerate: list = field(default_factory=list)

    @classmethod
    def from_training(cls, ds: Dataset, train_idx, generalist):
        idx = np.asarray(train_idx, dtype=np.int64)
        c = ds.coords[idx].reshape(-1, 3)
        feats = {f"pos_{a}": [float(c[:, k].min()), float(c[:, k].max())] for k, a in enumerate("xyz")}
        P = np.array([ds.params[i].continuous() for i in idx])
        for k, name in enumerate(CONTINUOUS_FIELDS):
            feats[name] = [float(P[:, k].min()), float(P[:, k].max())]
        ld = [float(ds.params[i].load_dist) for i in idx]
        feats["load_dist"] = [min(ld), max(ld)]
        if not generalist:
            lt = [float(ds.params[i].load_type) for i in idx]
            feats["load_type"] = [min(lt), max(lt)]
        u = ds.disp[idx].reshape(-1, 3)
        disp = [[float(u[:, k].min()), float(u[:, k].max())] for k in range(3)]
        degenerate = [k for k, (lo, hi) in feats.items() if not hi > lo]
        degenerate += [f"disp_{'xyz'[k]}" for k, (lo, hi) in enumerate(disp) if not hi > lo]
        return cls(feats, disp, degenerate)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(d["features"], d["displacement"], list(d.get("degenerate", [])))

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def scale(self, name):
        lo, hi = self.features[name]
        return lo, hi

    @property
    def pos_half_range(self):
        return np.array([0.5 * (self.features[f"pos_{a}"][1] - self.features[f"pos_{a}"][0]) for a in "xyz"])

    @property
    def disp_half_range(self):
        return np.array([0.5 * (hi - lo) for lo, hi in self.displacement])


def minmax(x, lo, hi):
    """Map [lo, hi] to [-1, 1]; a degenerate range maps to constant 0."""
    x = np.asarray(x, dtype=np.float64)
    if not hi > lo:
        return np.zeros_like(x)
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def normalize_labels(disp, stats: NormalizationStats):
    disp = np.asarray(disp, dtype=np.float64)
    out = np.empty_like(disp)
    for k, (lo, hi) in enumerate(stats.displacement):
        out[..., k] = minmax(disp[..., k], lo, hi)
    return out


def denormalize_labels(u, stats: NormalizationStats):
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    for k, (lo, hi) in enumerate(stats.displacement):
        out[..., k] = lo + 0.5 * (u[..., k] + 1.0) * (hi - lo)
    return out


def normalize_positions(coords, stats):
    coords = np.asarray(coords, dtype=np.float64)
    return np.stack([minmax(coords[..., k], *stats.features[f"pos_{a}"]) for k, a in enumerate("xyz")], axis=-1)


def node_features(coords, p: BeamParams, stats: NormalizationStats, generalist):
    """Per-node input vector: pos(3) + params(10) + one-hot(3) | load code(1)."""
    n = coords.shape[0]
    pos = normalize_positions(coords, stats)
    vals = list(p.continuous()) + [float(p.load_dist)]
    scal = np.array([minmax(v, *stats.features[k]) for k, v in zip(SCALAR_FEATURES, vals)])
    if generalist:
        tail = np.zeros(3)
        tail[int(p.load_type)] = 1.0
    else:
        tail = np.array([minmax(float(p.load_type), *stats.features["load_type"])])
    return np.concatenate([pos, np.broadcast_to(np.concatenate([scal, tail]), (n, scal.size + tail.size))], axis=1)


# -- generation -----------------------------------------------------------------

def _solve_one(args):
    template, p, index = args
    try:
        r = solve_case(template, p)
    except (NoConvergence, InvertedElement) as exc:
        return index, None, f"{type(exc).__name__}: {exc}"
    return index, encode_record(p, r.mesh.nodes, r.displacements), None


def _record_path(out, i):
    return Path(out) / "records" / f"{i:06d}.rec"


def generate(spec: DatasetSpec, out_dir, workers=1, max_replacements=8, stop_after=None):
    """Solve every LHS sample and write dataset.bin + manifest.json.

    Per-sample records are cached under ``records/`` so an interrupted run
    resumes where it stopped.  A failed solve is replaced by the same index of
    the next reserve LHS design.  ``stop_after`` limits the number of new
    solves (used to simulate interruption).
    """
    spec.validate()
    out = Path(out_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    echo = spec.to_dict()
    mpath = out / "manifest.json"
    if (out / "dataset.bin").exists() and mpath.exists():
        old = json.loads(mpath.read_text())
        if old.get("spec") == echo:
            log.info("dataset already complete in %s", out)
            return {"n_samples": spec.n_samples, "solved": 0, "failures": len(old.get("replacements", [])),
                    "wall_time_s": time.perf_counter() - t0, "skipped": True}
    template = build_template(spec.resolution)
    n_n = template.n_nodes
    rec_size = record_size(n_n)
    designs = [lhs_sample(spec, 0)]
    replacements_path = out / "records" / "replacements.json"
    replacements = json.loads(replacements_path.read_text()) if replacements_path.exists() else []
    todo = [i for i in range(spec.n_samples)
            if not (_record_path(out, i).exists() and _record_path(out, i).stat().st_size == rec_size)]
    if stop_after is not None:
        todo = todo[:stop_after]
    attempt = {i: 0 for i in todo}
    solved = 0
    failures = 0
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        while todo:
            jobs = []
            for i in todo:
                while len(designs) <= attempt[i]:
                    designs.append(lhs_sample(spec, len(designs)))
                jobs.append((template, designs[attempt[i]][i], i))
            results = pool.map(_solve_one, jobs) if pool else map(_solve_one, jobs)
            retry = []
            for i, rec, err in results:
                if rec is None:
                    failures += 1
                    attempt[i] += 1
                    log.warning("sample %d failed (%s); drawing reserve design %d", i, err, attempt[i])
                    replacements.append({"index": i, "reserve_stream": attempt[i], "error": err})
                    if attempt[i] > max_replacements:
                        raise BeamGnnError(f"sample {i}: {max_replacements} reserve draws all failed")
                    retry.append(i)
                    continue
                path = _record_path(out, i)
                tmp = path.with_suffix(".tmp")
                tmp.write_bytes(rec)
                os.replace(tmp, path)
                solved += 1
            todo = retry
    finally:
        if pool:
            pool.shutdown()
    replacements_path.write_text(json.dumps(replacements, indent=1))
    summary = {"n_samples": spec.n_samples, "solved": solved, "failures": failures,
               "wall_time_s": time.perf_counter() - t0, "skipped": False}
    missing = [i for i in range(spec.n_samples) if not _record_path(out, i).exists()]
    if missing:
        summary["incomplete"] = len(missing)
        return summary
    finalize(spec, out, template, replacements)
    summary["wall_time_s"] = time.perf_counter() - t0
    return summary


def finalize(spec, out, template, replacements=()):
    out = Path(out)
    n_n = template.n_nodes
    records = [_record_path(out, i).read_bytes() for i in range(spec.n_samples)]
    decoded = [decode_record(r, n_n) for r in records]
    ds = Dataset(spec.task, template.tets, template.edges, template.fixed_nodes, template.load_faces,
                 [d[0] for d in decoded], np.stack([d[1] for d in decoded]), np.stack([d[2] for d in decoded]))
    write_dataset(out / "dataset.bin", ds, records)
    train, val, test = split(spec.n_samples, spec.seed)
    stats = NormalizationStats.from_training(ds, train, spec.task.is_generalist)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "spec": spec.to_dict(),
        "seed": int(spec.seed),
        "template_hash": template.template_hash,
        "splits": {"train": train.tolist(), "val": val.tolist(), "test": test.tolist()},
        "normalization": stats.to_dict(),
        "normalization_hash": stats.hash(),
        "degenerate_features": stats.degenerate,
        "replacements": list(replacements),
    }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, out / "manifest.json")
    ds.manifest = manifest
    return ds


def load(out_dir) -> Dataset:
    return read_dataset(Path(out_dir) / "dataset.bin")


def stats_of(ds: Dataset) -> NormalizationStats:
    return NormalizationStats.from_dict(ds.manifest["normalization"])
