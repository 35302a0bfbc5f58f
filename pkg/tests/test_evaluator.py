import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamgnn import evaluator as E
from beamgnn.errors import ZeroTruthNorm
from beamgnn.gnn import GnnModel, ModelConfig, make_batch
from beamgnn.trainer import TrainHistory


def test_mae_examples(rng):
    u = rng.normal(size=(2, 5, 3))
    assert E.mae(u, u) == 0.0
    e = rng.normal(size=3)
    e *= 0.5 / np.linalg.norm(e)
    assert E.mae(u + e, u) == pytest.approx(0.5, rel=1e-14)
    p = rng.normal(size=(3, 4, 3))
    total = 0.0
    for s in range(3):
        for n in range(4):
            total += np.sqrt(sum((p[s, n, k] - u[0, 0, k]) ** 2 for k in range(3)))
    assert E.mae(p, np.broadcast_to(u[0, 0], p.shape)) == pytest.approx(total / 12, rel=1e-13)


def test_rel_l2_examples(rng):
    u = rng.normal(size=(4, 6, 3))
    assert E.rel_l2(1.1 * u, u) == pytest.approx(10.0, abs=5e-5)
    assert E.rel_l2(np.zeros_like(u), u) == pytest.approx(100.0, rel=1e-14)
    a = np.array([[[3.0, 4.0, 0.0]], [[1.0, 0.0, 0.0]]])
    p = np.array([[[3.0, 4.0, 1.0]], [[0.0, 0.0, 0.0]]])
    assert E.rel_l2(p, a) == pytest.approx((1 / 5 + 1.0) / 2 * 100, rel=1e-14)
    with pytest.raises(ZeroTruthNorm):
        E.rel_l2(p, np.concatenate([a[:1], np.zeros((1, 1, 3))]))


def test_r2_examples(rng):
    u = rng.normal(size=(3, 5, 3))
    assert E.r2(u, u) == 1.0
    assert E.r2(np.full_like(u, u.mean()), u) == pytest.approx(0.0, abs=1e-15)
    t = np.array([1.0, 2.0, 4.0, 5.0])
    p = np.array([1.5, 2.0, 3.0, 5.5])
    assert E.r2(p, t) == pytest.approx(1 - (0.25 + 0 + 1 + 0.25) / (4 + 1 + 1 + 4), rel=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_metric_scaling(seed, c):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(2, 4, 3))
    p = t + 0.1 * rng.normal(size=t.shape)
    assert E.rel_l2(c * p, c * t) == pytest.approx(E.rel_l2(p, t), rel=1e-10)
    assert E.mae(c * p, c * t) == pytest.approx(c * E.mae(p, t), rel=1e-10)
    assert E.r2(p, t) <= 1.0


def test_eval_metrics_invariants():
    with pytest.raises(ValueError):
        E.EvalMetrics(np.nan, 1.0, 0.5, 1.0, 0.1)
    with pytest.raises(ValueError):
        E.EvalMetrics(0.1, -1.0, 0.5, 1.0, 0.1)


def _fixture_rows():
    return [
        {"model": "MPNN", "task": "specialist-high", "metrics": E.EvalMetrics(0.0123456, 4.5, 0.998765, 12.3456, 0.065)},
        {"model": "GCN", "task": "specialist-high", "metrics": E.EvalMetrics(0.05, 9.125, 0.97, 3.0, 0.0125)},
    ]


GOLDEN_CSV = (
    "model,task,MAE (mm),R-L2 (%),R2 Score,Inference (ms),Params (M)\n"
    "MPNN,specialist-high,0.012346,4.5000,0.998765,12.346,0.065000\n"
    "GCN,specialist-high,0.050000,9.1250,0.970000,3.000,0.012500\n"
)

GOLDEN_MD = (
    "| model | task | MAE (mm) | R-L2 (%) | R2 Score | Inference (ms) | Params (M) |\n"
    "|---|---|---:|---:|---:|---:|---:|\n"
    "| MPNN | specialist-high | 0.012346 | 4.5000 | 0.998765 | 12.346 | 0.065000 |\n"
    "| GCN | specialist-high | 0.050000 | 9.1250 | 0.970000 | 3.000 | 0.012500 |\n"
)


def test_report_golden(tmp_path):
    E.build_report(_fixture_rows(), tmp_path)
    assert (tmp_path / "report.csv").read_text() == GOLDEN_CSV
    assert (tmp_path / "report.md").read_text() == GOLDEN_MD


def test_empty_report_is_header_only(tmp_path):
    E.build_report([], tmp_path)
    assert (tmp_path / "report.csv").read_text() == GOLDEN_CSV.splitlines(True)[0]


def _hist(scale):
    h = TrainHistory()
    for e in range(5):
        h.append(epoch=e, train_loss=scale / (e + 1), val_loss=scale / (e + 2), val_rel_l2=10.0,
                 alpha=0.0, lr=1e-3, physics_share=0.0)
    return h


def test_plots_are_byte_deterministic(tmp_path):
    hists = {"curriculum_vs_naive": {"curriculum": _hist(1.0), "naive": _hist(3.0)}}
    a = E.build_report(_fixture_rows(), tmp_path / "a", hists)
    b = E.build_report(_fixture_rows(), tmp_path / "b", hists)
    assert [p.name for p in a] == ["curriculum_vs_naive.svg"]
    assert a[0].read_bytes() == b[0].read_bytes()
    assert b"<svg" in a[0].read_bytes()


def test_benchmark_positive_and_monotone_in_width(rng):
    x = rng.normal(size=(40, 14))
    edges = np.array([(i, i + 1) for i in range(39)])
    times = []
    for hidden in (8, 128):
        model = GnnModel(ModelConfig(arch="mpnn", in_dim=14, hidden=hidden, layers=3, heads=(1, 1, 1)))
        times.append(E.benchmark_inference(model, make_batch([x], edges), warmup=3, repeats=30))
    assert all(np.isfinite(t) and t > 0 for t in times)
    assert times[1] >= times[0]
