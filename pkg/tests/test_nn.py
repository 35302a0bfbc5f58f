import numpy as np
import pytest

from beamgnn import autodiff as ad
from beamgnn.errors import NonFiniteGradient
from beamgnn.nn import MLP, AdamState, Dense, ParamStore, PlateauScheduler, adam_step, init_params


def test_init_deterministic_and_bounded():
    a = init_params((30, 20), seed=4)
    b = init_params((30, 20), seed=4)
    assert a.tobytes() == b.tobytes()
    assert np.abs(a).max() <= np.sqrt(6.0 / 50)


def test_init_mean_near_zero():
    w = init_params((100, 100), seed=0).ravel()
    bound = np.sqrt(6.0 / 200)
    sigma = bound / np.sqrt(3) / np.sqrt(w.size)
    assert abs(w.mean()) < 3 * sigma


def test_dense_param_count():
    assert Dense("d", 4, 3).n_params() == 15


def test_adam_two_steps_by_hand():
    lr, wd = 1e-3, 1e-2
    st = AdamState(lr=lr, weight_decay=wd)
    p = {"w": np.array([1.0])}
    adam_step(st, p, {"w": np.array([1.0])})
    w1 = 1.0 - lr * wd * 1.0 - lr * 1.0 / (1.0 + 1e-8)  # m_hat = sqrt(v_hat) = 1 at t=1
    assert p["w"][0] == pytest.approx(w1, rel=1e-12)
    adam_step(st, p, {"w": np.array([0.5])})
    m = 0.9 * 0.1 + 0.1 * 0.5
    v = 0.999 * 0.001 + 0.001 * 0.25
    mh, vh = m / (1 - 0.9**2), v / (1 - 0.999**2)
    w2 = w1 - lr * wd * w1 - lr * mh / (np.sqrt(vh) + 1e-8)
    assert p["w"][0] == pytest.approx(w2, rel=1e-12)
    assert st.t == 2


def test_adam_zero_gradient_no_decay_is_noop():
    st = AdamState(weight_decay=0.0)
    p = {"w": np.array([0.3, -2.0])}
    adam_step(st, p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [0.3, -2.0])


def test_nonfinite_gradient_aborts_step():
    st = AdamState()
    p = {"a": np.ones(2), "b": np.ones(2)}
    with pytest.raises(NonFiniteGradient) as exc:
        adam_step(st, p, {"a": np.ones(2), "b": np.array([np.nan, 0.0])})
    assert exc.value.name == "b"
    assert st.t == 0 and np.all(p["a"] == 1.0)


def test_scheduler_halves_after_patience():
    st = AdamState(lr=1e-4)
    sch = PlateauScheduler()
    lrs = [sch.step(st, 1.0) for _ in range(11)]
    # first call sets the best; ten flat epochs follow
    assert lrs[9] == 1e-4 and lrs[10] == 5e-5


def test_scheduler_constant_when_improving_and_floor():
    st = AdamState(lr=1e-4)
    sch = PlateauScheduler()
    for k in range(30):
        sch.step(st, 1.0 - 0.01 * k)
    assert st.lr == 1e-4
    st.lr = 1e-7
    for _ in range(25):
        sch.step(st, 5.0)
    assert st.lr == 1e-7


def test_memorisation_of_eight_samples():
    rng = np.random.default_rng(0)
    X, Y = rng.normal(size=(8, 4)), rng.normal(size=(8, 2))
    store = ParamStore()
    mlp = MLP("m", [4, 32, 2], "silu")
    mlp.init(store, np.random.default_rng(1))
    st = AdamState(lr=1e-2, weight_decay=0.0)
    for step in range(2000):
        tape = ad.Tape()
        P = store.bind(tape)
        loss = ad.mean(ad.square(ad.sub(mlp(P, tape.constant(X)), Y)))
        if loss.value < 1e-5:
            break
        adam_step(st, store.arrays, tape.gradient(loss))
    assert loss.value < 1e-5


def test_scheduler_never_raises_lr_below_floor():
    st = AdamState(lr=1e-9)
    sch = PlateauScheduler(patience=1, min_lr=1e-7)
    for _ in range(3):
        sch.step(st, 1.0)
    assert st.lr == 1e-9
