import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from modit import data


def test_gen_pair_shapes_and_determinism():
    spec = data.SynthSpec(seed=3, num_pairs=2)
    a, e, b = data.gen_pair(spec, 1)
    assert a.shape == (12, 16) and e.shape == (12, 64) and b.shape == (12,)
    for x, y in zip((a, e, b), data.gen_pair(spec, 1)):
        np.testing.assert_array_equal(x, y)
    assert not np.array_equal(a, data.gen_pair(spec, 0)[0])
    with pytest.raises(IndexError):
        data.gen_pair(spec, 2)


def test_noise_free_expression_follows_audio():
    spec = data.SynthSpec(seed=1)
    a, e, _ = data.gen_pair(spec, 0)
    np.testing.assert_allclose(e, data.expression_from_audio(spec, a))
    noisy = data.SynthSpec(seed=1, noise_std=0.5)
    a2, e2, _ = data.gen_pair(noisy, 0)
    np.testing.assert_array_equal(a, a2)
    assert 0.3 < np.std(e2 - e) < 0.7


def test_mapping_fixed_by_seed():
    np.testing.assert_array_equal(data.filter_bank(data.SynthSpec(seed=4)),
                                  data.filter_bank(data.SynthSpec(seed=4, num_pairs=9)))
    assert not np.array_equal(data.filter_bank(data.SynthSpec(seed=4)), data.filter_bank(data.SynthSpec(seed=5)))


def test_ar0_frames_uncorrelated():
    rng = np.random.default_rng(0)
    x = data.ar1_sequence(rng, 10_000, 1, 0.0)[:, 0]
    x = x - x.mean()
    assert abs(np.dot(x[1:], x[:-1]) / np.dot(x, x)) < 0.1


def test_ar_coefficient_shows_in_autocorrelation():
    x = data.ar1_sequence(np.random.default_rng(1), 20_000, 1, 0.9)[:, 0]
    x = x - x.mean()
    assert np.dot(x[1:], x[:-1]) / np.dot(x, x) == pytest.approx(0.9, abs=0.02)


def test_spec_validation():
    with pytest.raises(ValueError):
        data.SynthSpec(noise_std=-1)
    with pytest.raises(ValueError):
        data.SynthSpec(ar_coef=1.0)
    with pytest.raises(ValueError):
        data.SynthSpec(kernel=(0.5, 0.5))


@given(st.integers(0, 2**31 - 1))
def test_blink_track_range_and_pulses(seed):
    b = data.blink_track(np.random.default_rng(seed), 24)
    assert np.all((0 <= b) & (b <= 1)) and b.max() > 0


def test_smooth_constant_and_impulse():
    np.testing.assert_allclose(data.smooth(np.ones((5, 2)), (0.25, 0.5, 0.25)), 1.0)
    x = np.zeros((5, 1))
    x[2] = 1
    np.testing.assert_allclose(data.smooth(x, (0.25, 0.5, 0.25))[:, 0], [0, 0.25, 0.5, 0.25, 0])


def test_round_trip_bit_exact(tmp_path):
    pairs = data.gen_corpus(data.SynthSpec(seed=2, num_pairs=3, T_frames=7))
    path = tmp_path / "d.bin"
    data.write_dataset(pairs, path)
    back = data.read_dataset(path)
    assert len(back) == 3
    for p, q in zip(pairs, back):
        for f in ("audio", "expression", "blink"):
            assert getattr(p, f).tobytes() == getattr(q, f).tobytes()
    assert data.encode_dataset(back) == path.read_bytes()


def test_truncated_record_names_pair():
    buf = data.encode_dataset(data.gen_corpus(data.SynthSpec(num_pairs=3)))
    with pytest.raises(data.TruncatedRecordError) as ei:
        data.decode_dataset(buf[:-10])
    assert ei.value.pair_index == 2
    with pytest.raises(data.CorruptHeaderError):
        data.decode_dataset(buf[:10])
    with pytest.raises(data.CorruptHeaderError):
        data.decode_dataset(buf + b"\0")


def test_bad_magic_and_version():
    buf = bytearray(data.encode_dataset(data.gen_corpus(data.SynthSpec(num_pairs=1))))
    bad = bytes(b"XXXXXXXX" + buf[8:])
    with pytest.raises(data.CorruptHeaderError):
        data.decode_dataset(bad)
    struct.pack_into("<I", buf, 8, 99)
    with pytest.raises(data.VersionMismatchError):
        data.decode_dataset(bytes(buf))


def test_inconsistent_shapes_rejected():
    a = data.gen_corpus(data.SynthSpec(num_pairs=1))
    b = data.gen_corpus(data.SynthSpec(num_pairs=1, T_frames=5))
    with pytest.raises(data.DatasetError):
        data.encode_dataset(a + b)
    with pytest.raises(data.DatasetError):
        data.encode_dataset([])


def test_failed_write_leaves_no_partial_file(tmp_path):
    path = tmp_path / "d.bin"
    with pytest.raises(data.DatasetError):
        data.write_dataset([], path)
    assert not path.exists()
    assert not list(tmp_path.iterdir())


def test_as_training_uses_first_frame():
    p = data.gen_corpus(data.SynthSpec(num_pairs=1))[0]
    t = p.as_training()
    np.testing.assert_array_equal(t.beta0, p.expression[0])
    assert t.x0 is p.expression
