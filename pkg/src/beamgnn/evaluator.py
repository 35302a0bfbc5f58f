"""Held-out metrics, inference timing and report artifacts."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ZeroTruthNorm

REPORT_COLUMNS = ("model", "task", "MAE (mm)", "R-L2 (%)", "R2 Score", "Inference (ms)", "Params (M)")


def _as_samples(a):
    a = np.asarray(a, dtype=np.float64)
    return a.reshape((-1,) + a.shape[-2:]) if a.ndim >= 2 else a.reshape(1, -1, 1)


def mae(pred, truth):
    """Mean per-node Euclidean error norm over all nodes and samples (mm)."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    return float(np.mean(np.linalg.norm(d.reshape(-1, d.shape[-1]), axis=1)))


def rel_l2(pred, truth):
    """Per-sample ||pred - truth|| / ||truth|| in percent, averaged over samples."""
    p, t = _as_samples(pred), _as_samples(truth)
    num = np.sqrt(((p - t) ** 2).sum(axis=(1, 2)))
    den = np.sqrt((t ** 2).sum(axis=(1, 2)))
    zero = np.flatnonzero(den == 0)
    if zero.size:
        raise ZeroTruthNorm(f"ground-truth field of sample {int(zero[0])} is identically zero")
    return float(np.mean(num / den) * 100.0)


def r2(pred, truth):
    """1 - SS_res / SS_tot pooled over every component of every sample."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    ss_res = float(((t - p) ** 2).sum())
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else float("-inf")
    return 1.0 - ss_res / ss_tot


@dataclass
class EvalMetrics:
    mae: float
    rel_l2: float
    r2: float
    inference_ms: float
    params_m: float

    def __post_init__(self):
        vals = (self.mae, self.rel_l2, self.r2, self.inference_ms, self.params_m)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite metric in {vals}")
        if self.rel_l2 < 0 or self.r2 > 1 + 1e-12:
            raise ValueError("metric outside its admissible range")


def benchmark_inference(model, batch, warmup=10, repeats=100):
    """Median wall time (ms) of single-sample forward passes on one thread."""
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            model.predict(batch)
        times = []
        for _ in range(max(repeats, 1)):
            t0 = time.perf_counter()
            model.predict(batch)
            times.append(time.perf_counter() - t0)
    return statistics.median(times) * 1e3


def evaluate(ckpt, ds, idx=None, time_inference=True, repeats=100):
    """Metrics of checkpoint ``ckpt`` on split ``idx`` (default: test split)."""
    from .trainer import _Prepared, predict
    if idx is None:
        idx = ds.splits()[2]
    idx = np.asarray(idx)
    model = ckpt.model()
    prep = _Prepared(ds, ckpt.stats)
    pred = predict(model, prep, idx)
    truth = ds.disp[idx]
    ms = benchmark_inference(model, prep.batch(idx[:1]), repeats=repeats) if time_inference else 0.0
    return EvalMetrics(mae(pred, truth), rel_l2(pred, truth), r2(pred, truth), ms,
                       model.param_count() / 1e6)


# -- report ---------------------------------------------------------------------

def _row_values(row):
    m = row["metrics"]
    return [row["model"], row["task"], f"{m.mae:.6f}", f"{m.rel_l2:.4f}", f"{m.r2:.6f}",
            f"{m.inference_ms:.3f}", f"{m.params_m:.6f}"]


def report_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow(_row_values(r))
    return buf.getvalue()


def report_markdown(rows):
    lines = ["| " + " | ".join(REPORT_COLUMNS) + " |",
             "|" + "|".join(["---"] * 2 + ["---:"] * (len(REPORT_COLUMNS) - 2)) + "|"]
    for r in rows:
        lines.append("| " + " | ".join(_row_values(r)) + " |")
    return "\n".join(lines) + "\n"


def plot_histories(curves, path, title, column="val_loss", log_y=True):
    """Line plot of one history column for several labelled runs, as SVG.

    ``curves`` maps label -> TrainHistory.  Output bytes depend only on inputs.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "beamgnn", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, hist in curves.items():
            y = hist.column(column)
            ax.plot(hist.column("epoch"), y, label=label)
        if log_y:
            ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel(column)
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)


def build_report(rows, out_dir, histories=None):
    """Write report.csv, report.md and plots/*.svg.

    ``rows``: list of {"model", "task", "metrics": EvalMetrics}.
    ``histories``: optional {plot_name: {label: TrainHistory}}; each entry
    becomes ``plots/<plot_name>.svg`` showing train and validation curves.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_csv(rows))
    (out / "report.md").write_text(report_markdown(rows))
    written = []
    if histories:
        plots = out / "plots"
        plots.mkdir(exist_ok=True)
        for name in sorted(histories):
            curves = {}
            for label, h in histories[name].items():
                curves[f"{label} train"] = _Column(h, "train_loss")
                curves[f"{label} val"] = _Column(h, "val_loss")
            path = plots / f"{name}.svg"
            plot_histories(curves, path, name, column="loss")
            written.append(path)
    return written


class _Column:
    """Adapter presenting one history column under a common name."""

    def __init__(self, hist, name):
        self.hist, self.name = hist, name

    def column(self, name):
        return self.hist.column("epoch" if name == "epoch" else self.name)
