import math

import numpy as np
import pytest

from modit import denoiser as dn
from modit import sampler as sp
from modit.schedule import build_schedule
from modit.training import NumericAbort


def _oracle(x0, sched):
    def denoise(x, t):
        ab = sched.abar(t)
        return (x - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
    return denoise


@pytest.mark.parametrize("mode", ["ddim", "ddpm"])
@pytest.mark.parametrize("T", [1, 10, 200])
def test_oracle_denoiser_recovers_x0(rng, mode, T):
    sched = build_schedule(T, 1e-4 if T > 1 else 0.1, 0.02 if T > 1 else 0.1)
    x0 = rng.standard_normal((6, 5))
    out = sp.reverse_loop(rng.standard_normal(x0.shape), _oracle(x0, sched), sched, mode, rng)
    np.testing.assert_allclose(out, x0, atol=1e-4)


def test_single_step_collapse(rng):
    sched = build_schedule(1, 0.1, 0.1)
    xT = rng.standard_normal((3, 2))
    eps = rng.standard_normal((3, 2))
    out = sp.reverse_loop(xT, lambda x, t: eps, sched, "ddim", rng)
    np.testing.assert_allclose(out, (xT - math.sqrt(0.1) * eps) / math.sqrt(0.9))


def test_on_step_visits_every_t(rng):
    sched = build_schedule(7, 1e-3, 0.1)
    seen = []
    sp.reverse_loop(np.zeros((2, 2)), lambda x, t: np.zeros_like(x), sched, "ddim", rng,
                    on_step=lambda t, x: seen.append(t))
    assert seen == list(range(7, 0, -1))


def test_resample_keeps_oracle_fixed_point(rng):
    sched = build_schedule(20, 1e-3, 0.1)
    x0 = rng.standard_normal((4, 3))
    out = sp.reverse_loop(rng.standard_normal(x0.shape), _oracle(x0, sched), sched, "ddim", rng,
                          resample_inner=2)
    np.testing.assert_allclose(out, x0, atol=1e-6)


def test_clip_bounds_estimate(rng):
    sched = build_schedule(5, 0.05, 0.2)
    out = sp.reverse_loop(rng.standard_normal((4, 3)), lambda x, t: np.full_like(x, -50.0), sched, "ddim",
                          rng, clip_x0=2.0)
    assert np.all(np.abs(out) <= 2.0 + 1e-12)


def test_nonfinite_aborts(rng):
    sched = build_schedule(3, 0.05, 0.2)
    with pytest.raises(NumericAbort):
        sp.reverse_loop(np.zeros((2, 2)), lambda x, t: np.full_like(x, np.nan), sched, "ddim", rng)


def test_config_validation():
    with pytest.raises(ValueError):
        sp.SamplerConfig(mode="euler")
    with pytest.raises(ValueError):
        sp.SamplerConfig(resample_inner=-1)
    with pytest.raises(ValueError):
        sp.SamplerConfig(clip_x0=0.0)


def test_window_arithmetic():
    assert sp.window_starts(12, 12, 4) == [0]
    assert sp.window_starts(5, 12, 4) == [0]
    assert sp.window_starts(20, 12, 4) == [0, 8]
    assert sp.window_starts(36, 12, 4) == [0, 8, 16, 24]
    assert sp.window_starts(13, 12, 4) == [0, 1]
    with pytest.raises(ValueError):
        sp.window_starts(20, 4, 4)


def test_stitch_crossfade():
    a, b = np.zeros((4, 1)), np.ones((4, 1))
    out = sp.stitch([a, b], [0, 2], 6)
    np.testing.assert_allclose(out[:, 0], [0, 0, 1 / 3, 2 / 3, 1, 1])
    same = np.arange(8.0)[:, None]
    np.testing.assert_allclose(sp.stitch([same[:4], same[3:7], same[4:]], [0, 3, 4], 8), same)


@pytest.fixture(scope="module")
def tiny():
    cfg = dn.DenoiserConfig.desk(width=16, ffn_width=32, frames=6)
    params = dn.init_params(cfg, seed=0, zero_output=False, dtype=np.float64)
    sched = build_schedule(8, 1e-3, 0.2)
    r = np.random.default_rng(9)
    reqs = [(r.standard_normal(64), r.standard_normal((10, 16))) for _ in range(3)]
    return cfg, params, sched, reqs


def test_sample_deterministic_and_windowed(tiny):
    cfg, params, sched, reqs = tiny
    scfg = sp.SamplerConfig(seed=4, overlap=2)
    trace = {}
    a = sp.sample(*reqs[0], params, sched, scfg, cfg, trace=trace)
    b = sp.sample(*reqs[0], params, sched, scfg, cfg)
    assert a.shape == (10, 64) and trace["windows"] == [0, 4]
    np.testing.assert_array_equal(a, b)
    c = sp.sample(*reqs[0], params, sched, sp.SamplerConfig(seed=5, overlap=2), cfg)
    assert not np.array_equal(a, c)


def test_batch_equals_sequential(tiny, monkeypatch):
    cfg, params, sched, reqs = tiny
    scfg = sp.SamplerConfig(seed=1, overlap=2)
    batch = sp.sample_batch(reqs, params, sched, scfg, cfg)
    for i, (b0, au) in enumerate(reqs):
        one = sp.sample(b0, au, params, sched, sp.SamplerConfig(seed=sp.derive_seed(1, i), overlap=2), cfg)
        np.testing.assert_array_equal(batch[i], one)
    monkeypatch.setenv("MODIT_THREADS", "3")
    threaded = sp.sample_batch(reqs, params, sched, scfg, cfg)
    for x, y in zip(batch, threaded):
        np.testing.assert_array_equal(x, y)


def test_identical_requests_identical_outputs(tiny):
    cfg, params, sched, reqs = tiny
    out = sp.sample_batch([reqs[0]] * 3, params, sched, sp.SamplerConfig(overlap=2), cfg, seeds=[7, 7, 7])
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[0], out[2])


def test_batch_reports_failing_index(tiny):
    cfg, params, sched, reqs = tiny
    bad = list(reqs) + [(reqs[0][0], np.zeros((4, 16)))]
    with pytest.raises(sp.SampleError) as ei:
        sp.sample_batch(bad, params, sched, sp.SamplerConfig(overlap=2), cfg)
    assert ei.value.index == 3
    bad = [reqs[0], (np.zeros(3), reqs[1][1])]
    with pytest.raises(sp.SampleError) as ei:
        sp.sample_batch(bad, params, sched, sp.SamplerConfig(overlap=2), cfg)
    assert ei.value.index == 1
