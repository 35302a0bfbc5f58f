import struct

import numpy as np
import pytest

from beamgnn import trainer as T
from beamgnn.dataset import stats_of
from beamgnn.errors import CheckpointFormatError, ConfigMismatch, NonFiniteLoss
from beamgnn.gnn import ModelConfig


def _cfg(ds, arch="mpnn", act="silu"):
    return ModelConfig(arch=arch, in_dim=ds.task.feature_width, hidden=8, layers=2, heads=(1, 1), activation=act)


def _train(**kw):
    base = dict(epochs=3, batch=4, lr=1e-3, seed=5, deterministic=True, n_colloc=16)
    base.update(kw)
    return T.TrainConfig(**base)


@pytest.fixture(scope="module")
def pretrained(tiny_dataset, tmp_path_factory):
    ds, _ = tiny_dataset
    out = tmp_path_factory.mktemp("pre")
    ckpt, hist = T.pretrain(_cfg(ds), ds, _train(), out)
    return ckpt, hist, out


def test_train_config_rejects_unknown_and_bad_values():
    with pytest.raises(ValueError):
        T.TrainConfig.from_dict({"epochs": 2, "learning_rate": 1e-3})
    with pytest.raises(ValueError):
        T.TrainConfig(mode="joint")
    cfg = _train()
    assert T.TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_pretrain_outputs(pretrained):
    ckpt, hist, out = pretrained
    assert (out / "model.ckpt").exists() and (out / "history.csv").exists()
    assert list(hist.column("epoch")) == [0, 1, 2]
    assert np.all(hist.column("alpha") == 0) and np.all(hist.column("physics_share") == 0)
    assert ckpt.meta["val_rel_l2"] == hist.column("val_rel_l2").min()
    assert T.TrainHistory.read_csv(out / "history.csv").to_csv() == hist.to_csv()


def test_pretrain_deterministic(tiny_dataset, pretrained):
    ds, _ = tiny_dataset
    ckpt, hist = T.pretrain(_cfg(ds), ds, _train())
    assert hist.to_csv() == pretrained[1].to_csv()
    for k, v in ckpt.params.items():
        assert v.tobytes() == pretrained[0].params[k].tobytes()


def test_history_epochs_monotone():
    h = T.TrainHistory()
    row = dict(train_loss=1.0, val_loss=1.0, val_rel_l2=1.0, alpha=0.0, lr=1.0, physics_share=0.0)
    h.append(epoch=0, **row)
    with pytest.raises(ValueError):
        h.append(epoch=0, **row)


def test_checkpoint_round_trip_bitwise(pretrained, tmp_path):
    ckpt, _, out = pretrained
    back = T.load_checkpoint(out / "model.ckpt")
    assert back.model_cfg == ckpt.model_cfg and back.meta == ckpt.meta
    assert back.norm_hash == ckpt.norm_hash
    for k, v in ckpt.params.items():
        assert back.params[k].tobytes() == v.tobytes()
    T.save_checkpoint(tmp_path / "again.ckpt", back)
    assert (tmp_path / "again.ckpt").read_bytes() == (out / "model.ckpt").read_bytes()


def _patched(src, dst, fn, fix_crc=True):
    import zlib
    b = bytearray(src.read_bytes())
    fn(b)
    if fix_crc:
        b[-4:] = struct.pack("<I", zlib.crc32(bytes(b[:-4])))
    dst.write_bytes(bytes(b))
    return dst


def test_checkpoint_corruption_errors(pretrained, tmp_path):
    src = pretrained[2] / "model.ckpt"
    (hlen,) = struct.unpack_from("<I", src.read_bytes(), 8)
    entry = 12 + hlen + 4

    def bump_offset(b):
        (o,) = struct.unpack_from("<Q", b, entry)
        b[entry:entry + 8] = struct.pack("<Q", o + 8)

    with pytest.raises(CheckpointFormatError, match="offset table"):
        T.load_checkpoint(_patched(src, tmp_path / "a.ckpt", bump_offset))
    with pytest.raises(CheckpointFormatError, match="checksum"):
        T.load_checkpoint(_patched(src, tmp_path / "b.ckpt", lambda b: b.__setitem__(-20, b[-20] ^ 1), False))
    with pytest.raises(CheckpointFormatError, match="magic"):
        T.load_checkpoint(_patched(src, tmp_path / "c.ckpt", lambda b: b.__setitem__(0, 0)))
    with pytest.raises(CheckpointFormatError, match="version"):
        T.load_checkpoint(_patched(src, tmp_path / "d.ckpt", lambda b: b.__setitem__(slice(4, 8), struct.pack("<I", 9))))


def test_checkpoint_expectations(pretrained):
    src = pretrained[2] / "model.ckpt"
    with pytest.raises(ConfigMismatch):
        T.load_checkpoint(src, expect_arch="gat")
    with pytest.raises(ConfigMismatch):
        T.load_checkpoint(src, expect_norm_hash="0" * 16)
    assert T.load_checkpoint(src, expect_arch="mpnn", expect_norm_hash=pretrained[0].norm_hash)


def test_finetune_refuses_mismatches(tiny_dataset, pretrained):
    ds, _ = tiny_dataset
    ckpt = pretrained[0]
    other = T.Checkpoint(ckpt.model_cfg, ckpt.params, T.NormalizationStats.from_dict(
        dict(ckpt.stats.to_dict(), displacement=[[-1, 1]] * 3)), ckpt.meta)
    with pytest.raises(ConfigMismatch):
        T.finetune(other, ds, _train(mode="finetune"))
    relu, _ = T.pretrain(_cfg(ds, act="relu"), ds, _train(epochs=1))
    with pytest.raises(ConfigMismatch, match="silu"):
        T.finetune(relu, ds, _train(mode="finetune"))


def test_finetune_epoch_zero_is_data_only(tiny_dataset, pretrained):
    ds, _ = tiny_dataset
    _, with_phys = T.finetune(pretrained[0], ds, _train(mode="finetune", epochs=4, alpha_target=1e-6))
    _, no_phys = T.finetune(pretrained[0], ds, _train(mode="finetune", epochs=4, alpha_target=0.0))
    r0, n0 = with_phys.rows[0], no_phys.rows[0]
    assert r0["alpha"] == 0.0 and r0["physics_share"] == 0.0
    assert r0["train_loss"] == n0["train_loss"] and r0["val_loss"] == n0["val_loss"]
    assert with_phys.rows[1]["alpha"] == 1e-6 and with_phys.rows[1]["physics_share"] > 0
    assert with_phys.final.meta["epoch"] == 3


def test_naive_joint_completes_even_if_divergent(tiny_dataset, tmp_path):
    ds, _ = tiny_dataset
    hist = T.naive_joint(_cfg(ds), ds, _train(mode="naive_joint", epochs=3, alpha_target=1e6, lr=1.0), tmp_path)
    assert len(hist) == 3 and list(hist.column("epoch")) == [0, 1, 2]
    assert np.all(hist.column("alpha") == 1e6)
    assert (tmp_path / "history.csv").exists()


def test_scheduler_halves_lr_after_flat_epochs(tiny_dataset):
    ds, _ = tiny_dataset
    _, hist = T.pretrain(_cfg(ds), ds, _train(epochs=12, lr=1e-15, weight_decay=0.0, min_lr=1e-18))
    lr = hist.column("lr")
    assert np.all(lr[:11] == 1e-15) and lr[11] == 5e-16


def test_nonfinite_loss_carries_context(tiny_dataset):
    ds, _ = tiny_dataset
    bad = ds.subset(np.arange(ds.n_samples))
    bad.disp = bad.disp.copy()
    bad.disp[bad.splits()[0]] = np.nan
    with pytest.raises(NonFiniteLoss, match="epoch 0, batch 0"):
        T.pretrain(_cfg(ds), bad, _train(epochs=1))


def test_mean_residual_is_seeded(tiny_dataset, pretrained):
    ds, _ = tiny_dataset
    prep = T._Prepared(ds, stats_of(ds))
    model = pretrained[0].model()
    a = T.mean_residual(model, prep, [0, 1, 2], 16, seed=3)
    assert a == T.mean_residual(model, prep, [0, 1, 2], 16, seed=3)
    assert a != T.mean_residual(model, prep, [0, 1, 2], 16, seed=4)
