import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from modit import denoiser as dn
from modit import numeric as nm
from modit import training as tr
from modit.schedule import build_schedule


def test_noise_loss_examples():
    assert tr.noise_loss(np.zeros(4), np.zeros(4)) == 0.0
    assert tr.noise_loss(np.zeros(4), np.ones(4)) == 1.0
    assert tr.noise_loss(np.array([0.0, 0.0]), np.array([1.0, 3.0])) == 5.0
    with pytest.raises(ValueError):
        tr.noise_loss(np.zeros(3), np.zeros(4))


def test_velocity_loss_examples():
    x = np.array([[0.0], [1.0], [3.0]])
    assert tr.velocity_loss(x, x) == 0.0
    # diffs [1, 2] vs [0, 0]
    assert tr.velocity_loss(x, np.zeros_like(x)) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        tr.velocity_loss(np.zeros((1, 3)), np.zeros((1, 3)))


@given(st.integers(0, 10_000))
def test_velocity_loss_offset_invariant(seed):
    r = np.random.default_rng(seed)
    x0, xh = r.standard_normal((2, 6, 5))
    c = r.standard_normal(5)
    base = tr.velocity_loss(x0, xh)
    assert abs(tr.velocity_loss(x0, xh + c) - base) <= 1e-12
    assert abs(tr.velocity_loss(x0 + c, xh) - base) <= 1e-12


def test_total_loss_weights():
    assert tr.total_loss(1, 1, 1, 1) == pytest.approx(10.4)
    assert tr.total_loss(0, 0, 0, 0) == 0.0
    w = tr.LossWeights(1, 2, 3, 4)
    assert tr.total_loss(1, 10, 100, 1000, w) == 1 + 20 + 300 + 4000
    with pytest.raises(ValueError):
        tr.LossWeights(lambda_v=-1)


@given(st.lists(st.floats(0, 100), min_size=4, max_size=4), st.floats(0, 10))
def test_total_loss_linear(parts, k):
    assert tr.total_loss(*(k * p for p in parts)) == pytest.approx(k * tr.total_loss(*parts), rel=1e-9, abs=1e-9)


def test_adamw_first_step_closed_form():
    p = {"w": np.array([1.0, -2.0, 0.0])}
    g = {"w": np.array([0.5, 0.5, -3.0])}
    opt = tr.init_optimizer(p, lr=0.1, weight_decay=0.01)
    new, o2 = tr.adamw_update(p, g, opt)
    # bias-corrected m/sqrt(v) equals sign(g) after one step
    expected = p["w"] - 0.1 * (np.sign(g["w"]) * np.abs(g["w"]) / (np.abs(g["w"]) + 1e-8) + 0.01 * p["w"])
    np.testing.assert_allclose(new["w"], expected, rtol=1e-12)
    assert o2.step == 1 and opt.step == 0
    np.testing.assert_array_equal(p["w"], [1.0, -2.0, 0.0])


def test_adamw_zero_lr_noop(rng):
    p = {"a": rng.standard_normal((3, 3))}
    new, _ = tr.adamw_update(p, {"a": rng.standard_normal((3, 3))}, tr.init_optimizer(p, lr=0.0))
    np.testing.assert_array_equal(new["a"], p["a"])


def test_batch_indices_epochs():
    seen = np.concatenate([tr.batch_indices(8, 4, 0, s) for s in range(2)])
    assert sorted(seen) == list(range(8))
    np.testing.assert_array_equal(tr.batch_indices(8, 4, 0, 3), tr.batch_indices(8, 4, 0, 3))
    assert len(tr.batch_indices(5, 2, 0, 7)) == 2
    with pytest.raises(ValueError):
        tr.batch_indices(3, 4, 0, 0)


def _setup(frames=4):
    cfg = dn.DenoiserConfig.desk(width=16, ffn_width=32, frames=frames)
    return tr.TrainSetup(cfg, build_schedule(50, 1e-3, 0.05))


def _pairs(rng, setup, n=4):
    m = setup.model
    return [tr.TrainingPair(rng.standard_normal(m.coeff_dim), rng.standard_normal((m.frames, m.audio_dim)),
                            rng.standard_normal((m.frames, m.coeff_dim))) for _ in range(n)]


def test_train_deterministic_and_loss_drops(rng):
    setup = _setup()
    pairs = _pairs(rng, setup)
    runs = []
    with nm.precision("f64"):
        before = tr.evaluate_noise_loss(pairs, dn.init_params(setup.model, seed=0), setup, 20)
    for _ in range(2):
        with nm.precision("f64"):
            params = dn.init_params(setup.model, seed=0)
        opt = tr.init_optimizer(params, lr=3e-3)
        runs.append(tr.train(pairs, params, opt, setup, 150, 2, seed=1, noise_draws=4))
    (p1, o1, h1), (p2, o2, h2) = runs
    assert [m["L_t"] for m in h1] == [m["L_t"] for m in h2]
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])
    assert o1.step == 150
    assert tr.evaluate_noise_loss(pairs, p1, setup, 20) < 0.9 * before


def test_split_training_equals_continuous(rng):
    setup = _setup()
    pairs = _pairs(rng, setup, 3)
    with nm.precision("f64"):
        params = dn.init_params(setup.model, seed=0)
    opt = tr.init_optimizer(params, lr=1e-3)
    pa, oa, _ = tr.train(pairs, params, opt, setup, 6, 2, seed=2, noise_draws=2)
    pb, ob, _ = tr.train(pairs, params, opt, setup, 2, 2, seed=2, noise_draws=2)
    pb, ob, _ = tr.train(pairs, pb, ob, setup, 4, 2, seed=2, noise_draws=2)
    for k in pa:
        np.testing.assert_array_equal(pa[k], pb[k])


def test_total_metric_uses_weights(rng):
    setup = _setup()
    pairs = _pairs(rng, setup, 2)
    params = dn.init_params(setup.model, seed=0)
    _, _, m = tr.train_step(pairs, params, tr.init_optimizer(params), setup, 0)
    assert m["L_total"] == pytest.approx(10 * m["L_t"] + 0.1 * m["L_v"])
    assert m["L_read"] == 0.0 and m["L_lks"] == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_abort_on_nonfinite(rng):
    setup = _setup()
    pairs = _pairs(rng, setup, 2)
    params = dn.init_params(setup.model, seed=0)
    params["out.b"] = params["out.b"] + np.inf
    with pytest.raises(tr.NumericAbort) as ei:
        tr.train_step(pairs, params, tr.init_optimizer(params), setup, 0)
    assert ei.value.step == 0 and ei.value.component == "L_t"


def test_trainable_hook_contributes_gradient(rng):
    setup = _setup()
    pairs = _pairs(rng, setup, 2)
    with nm.precision("f64"):
        params = dn.init_params(setup.model, seed=0, zero_output=False)
    b0, a, x0 = tr.stack_batch(pairs, np.float64)
    t, eps = tr.draw_noise(setup.sched, x0.shape, 0, 0, np.float64)
    base_m, base_g = tr.loss_and_grads(params, setup, b0, a, x0, t, eps)
    hooked = tr.TrainSetup(setup.model, setup.sched, read_hook=lambda x, xh: (float(np.sum(xh)), np.ones_like(xh)))
    m, g = tr.loss_and_grads(params, hooked, b0, a, x0, t, eps)
    assert m["L_total"] == pytest.approx(base_m["L_total"] + 0.2 * m["L_read"])
    assert not np.allclose(g["out.b"], base_g["out.b"])


def test_evaluate_noise_loss_zero_model_is_unit(rng):
    setup = _setup()
    pairs = _pairs(rng, setup, 4)
    params = dn.init_params(setup.model, seed=0, dtype=np.float64)
    # a zero predictor pays E[eps^2] = 1
    assert tr.evaluate_noise_loss(pairs, params, setup) == pytest.approx(1.0, abs=0.05)
