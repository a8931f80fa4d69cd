import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csi_ada import csi_ingest as ci


def hand_encode(records):
    """Byte-level CSIR encoder written straight from the format description."""
    out = b"CSIR" + struct.pack("<HI", 1, len(records))
    for ts, pair, values in records:
        out += struct.pack("<QB", ts, pair)
        for v in values:
            out += struct.pack("<ff", v.real, v.imag)
    return out


def uniform_records(n_per_pair, amp=1.0, start_us=0):
    ts = np.repeat(start_us + np.arange(n_per_pair, dtype=np.uint64) * 1000, 2)
    pair = np.tile(np.array([0, 1], dtype=np.uint8), n_per_pair)
    re = np.full((2 * n_per_pair, 30), amp, dtype=np.float32)
    im = np.zeros_like(re)
    return ci.RecordArray.from_fields(ts, pair, re, im)


finite_f32 = st.floats(width=32, allow_nan=False, allow_infinity=False)
# small enough that squares stay finite in float64 arithmetic
modest_f32 = st.floats(-2.0 ** 100, 2.0 ** 100, width=32, allow_nan=False)
record_st = st.tuples(
    st.integers(0, 2 ** 64 - 1),
    st.integers(0, 1),
    st.lists(st.builds(complex, finite_f32, finite_f32), min_size=30, max_size=30),
)


def test_record_size():
    assert ci.RECORD_SIZE == 249


def test_empty_stream():
    assert len(ci.parse_record_stream(hand_encode([]))) == 0


def test_hand_encoded_record():
    values = [3 + 4j] + [0j] * 29
    recs = ci.parse_record_stream(hand_encode([(42, 0, values)]))
    assert len(recs) == 1
    r = recs[0]
    assert r.timestamp_us == 42 and r.pair_id == 0
    assert r.subcarriers[0] == 3 + 4j
    assert all(v == 0 for v in r.subcarriers[1:])


def test_encoder_matches_hand_encoder():
    values = [complex(i, -i) for i in range(30)]
    rec = ci.CsiRecord(7, 1, tuple(values))
    assert ci.encode_record_stream([rec]) == hand_encode([(7, 1, values)])


def test_partial_record_is_truncated():
    buf = hand_encode([(1, 0, [0j] * 30)])
    with pytest.raises(ci.Truncated):
        ci.parse_record_stream(buf[:10 + 5])


def test_stray_bytes_are_truncated():
    with pytest.raises(ci.Truncated):
        ci.parse_record_stream(hand_encode([]) + b"\x00")


def test_bad_magic():
    with pytest.raises(ci.BadMagic):
        ci.parse_record_stream(b"CSIX" + bytes(6))


def test_bad_version():
    with pytest.raises(ci.BadVersion):
        ci.parse_record_stream(b"CSIR" + struct.pack("<HI", 2, 0))


def test_bad_pair_id():
    buf = bytearray(hand_encode([(1, 0, [0j] * 30)]))
    buf[10 + 8] = 2
    with pytest.raises(ci.BadPairId):
        ci.parse_record_stream(bytes(buf))


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_non_finite(bad):
    with pytest.raises(ci.NonFinite):
        ci.parse_record_stream(hand_encode([(1, 0, [complex(0, bad)] + [0j] * 29)]))


def test_record_validation():
    with pytest.raises(ci.BadShape):
        ci.CsiRecord(0, 0, (0j,) * 29)
    with pytest.raises(ci.BadPairId):
        ci.CsiRecord(0, 2, (0j,) * 30)


@settings(max_examples=50, deadline=None)
@given(st.lists(record_st, max_size=6))
def test_round_trip_property(raw):
    records = [ci.CsiRecord(ts, p, tuple(v)) for ts, p, v in raw]
    parsed = ci.parse_record_stream(ci.encode_record_stream(records))
    assert parsed == records
    assert ci.encode_record_stream(parsed) == ci.encode_record_stream(records)


# --- amplitude and phase ------------------------------------------------------------


def _rec(first):
    return ci.CsiRecord(0, 0, (first,) + (0j,) * 29)


@pytest.mark.parametrize("value, expected", [(3 + 4j, 5.0), (0j, 0.0), (1 + 1j, 1.41421356)])
def test_amplitude(value, expected):
    assert ci.amplitude(_rec(value))[0] == pytest.approx(expected, rel=1e-8)


@pytest.mark.parametrize("value, expected", [(1 + 0j, 0.0), (1j, math.pi / 2), (-1 + 0j, math.pi),
                                             (0j, 0.0), (complex(-1, -0.0), math.pi),
                                             (complex(-1, -1e-45), math.pi)])
def test_phase(value, expected):
    assert ci.phase(_rec(value))[0] == pytest.approx(expected, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.builds(complex, modest_f32, modest_f32), min_size=30, max_size=30))
def test_amplitude_squared_property(values):
    rec = ci.CsiRecord(0, 0, tuple(values))
    amp = ci.amplitude(rec)
    sq = np.array([v.real ** 2 + v.imag ** 2 for v in values])
    np.testing.assert_allclose(amp ** 2, sq, rtol=1e-6, atol=0)
    ph = ci.phase(rec)
    assert np.all(ph > -math.pi) and np.all(ph <= math.pi)


def test_vectorized_amplitudes_match():
    rng = np.random.default_rng(0)
    recs = [ci.CsiRecord(i, i % 2, tuple(rng.standard_normal(30) + 1j * rng.standard_normal(30)))
            for i in range(5)]
    expected = np.stack([ci.amplitude(ci.parse_record_stream(ci.encode_record_stream([r]))[0])
                         for r in recs])
    np.testing.assert_array_equal(ci.amplitudes(recs), expected)


# --- windows and downsampling -------------------------------------------------------


def test_constant_window():
    windows = ci.build_windows(uniform_records(10000))
    assert len(windows) == 1
    assert windows[0].data.shape == (10000, 60)
    assert np.all(windows[0].data == 1.0)


def test_remainder_dropped():
    assert len(ci.build_windows(uniform_records(25000))) == 2


def test_missing_pair():
    recs = uniform_records(100)
    only0 = ci.RecordArray(recs.data[recs.data["pair_id"] == 0])
    with pytest.raises(ci.MissingPair):
        ci.build_windows(only0)


def test_gap_in_one_pair_is_missing():
    recs = uniform_records(25000)
    d = recs.data
    # drop pair 1 completely during the second window
    keep = ~((d["pair_id"] == 1) & (d["timestamp_us"] >= 10_000_000) & (d["timestamp_us"] < 20_000_000))
    # records on both sides remain, so interpolation alone would have bridged the gap
    with pytest.raises(ci.MissingPair):
        ci.build_windows(ci.RecordArray(d[keep]))


def test_empty_input():
    with pytest.raises(ci.EmptyInput):
        ci.build_windows([])


def test_irregular_timestamps_interpolate_linearly():
    # pair amplitudes rise linearly with time, sampled with jitter
    rng = np.random.default_rng(3)
    n = 10500
    ts = np.sort(rng.uniform(0, 10.5e6, n)).astype(np.uint64)
    ts[0] = 0
    amp = ts.astype(np.float64) * 1e-6
    re = np.repeat(amp[:, None], 30, axis=1).astype(np.float32)
    recs = ci.RecordArray.from_fields(np.concatenate([ts, ts]), np.repeat([0, 1], n).astype(np.uint8),
                                      np.concatenate([re, re]), np.zeros((2 * n, 30), np.float32))
    (w,) = ci.build_windows(recs)
    grid_s = np.arange(10000) / 1000.0
    np.testing.assert_allclose(w.data[:, 0], grid_s, rtol=1e-5, atol=1e-5)
    np.testing.assert_array_equal(w.data[:, :30], w.data[:, 30:])


def test_pair_column_mapping():
    base = uniform_records(10000)
    perturbed = ci.RecordArray(base.data.copy())
    sel = perturbed.data["pair_id"] == 1
    perturbed.data["subcarriers"][sel] *= 2.0
    (w0,), (w1,) = ci.build_windows(base), ci.build_windows(perturbed)
    np.testing.assert_array_equal(w0.data[:, :30], w1.data[:, :30])
    assert np.all(w1.data[:, 30:] == 2.0)


def test_downsample_constant():
    out = ci.downsample(np.full((10000, 60), 7.0, np.float32))
    assert out.shape == (500, 60)
    assert np.all(out == 7.0)


def test_downsample_first_block_mean():
    x = np.zeros((10000, 60), np.float32)
    x[:20, 0] = np.arange(20)
    assert ci.downsample(x)[0, 0] == 9.5


def test_downsample_bad_factor():
    with pytest.raises(ci.BadFactor):
        ci.downsample(np.zeros((30, 60), np.float32), factor=20)


def test_downsample_linear_and_mean_preserving():
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 2, (10000, 60)).astype(np.float32)
    y = rng.uniform(0, 2, (10000, 60)).astype(np.float32)
    a, b = 1.7, -0.3
    lhs = ci.downsample((a * x + b * y).astype(np.float32))
    rhs = a * ci.downsample(x) + b * ci.downsample(y)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(ci.downsample(x).astype(np.float64).mean(axis=0),
                               x.astype(np.float64).mean(axis=0), rtol=1e-6)


# --- samples --------------------------------------------------------------------


def test_sample_codec_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    s = ci.Sample(rng.uniform(0, 1, (500, 60)), 1, 513)
    path = tmp_path / "s.csiw"
    ci.write_sample(path, s)
    back = ci.read_sample(path)
    assert back.label == 1 and back.domain_id == 513
    np.testing.assert_array_equal(back.data, s.data)
    raw = path.read_bytes()
    assert raw[:4] == b"CSIW"
    assert struct.unpack_from("<HBHII", raw, 4) == (1, 1, 513, 500, 60)


def test_sample_truncation():
    buf = ci.encode_sample(ci.Sample(np.zeros((500, 60)), 0, 0))
    for cut in (0, 3, 10, len(buf) - 1):
        with pytest.raises(ci.Truncated):
            ci.decode_sample(buf[:cut])


def test_sample_validation():
    with pytest.raises(ci.BadShape):
        ci.Sample(np.zeros((10, 60)), 0, 0)
    with pytest.raises(ValueError):
        ci.Sample(np.zeros((500, 60)), 2, 0)
    with pytest.raises(ci.NonFinite):
        ci.Sample(np.full((500, 60), np.nan), 0, 0)


def test_records_to_samples():
    samples = ci.records_to_samples(uniform_records(25000, amp=3.0), 1, 4)
    assert len(samples) == 2
    assert all(s.data.shape == (500, 60) and s.label == 1 and s.domain_id == 4 for s in samples)
    assert all(np.all(s.data == 3.0) for s in samples)
