"""CSI record parsing and preprocessing into fixed-size training samples.

Two little-endian binary formats are handled here:

* ``CSIR`` record streams: ``b"CSIR"``, u16 version, u32 record count, then
  packed records of ``[u64 timestamp_us, u8 pair_id, 30 x (f32 re, f32 im)]``
  (249 bytes each).
* ``CSIW`` samples: ``b"CSIW"``, u16 version, u8 label, u16 domain id,
  u32 rows, u32 cols, then ``rows * cols`` f32 values in row-major order.

Records are held in a :class:`RecordArray`, a sequence of :class:`CsiRecord`
backed by a numpy structured array, so long streams stay cheap.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

N_SUBCARRIERS = 30
N_PAIRS = 2
RATE_HZ = 1000
WINDOW_SECONDS = 10
WINDOW_ROWS = RATE_HZ * WINDOW_SECONDS
SAMPLE_ROWS = 500
SAMPLE_COLS = N_PAIRS * N_SUBCARRIERS
DOWNSAMPLE_FACTOR = WINDOW_ROWS // SAMPLE_ROWS

CSIR_MAGIC = b"CSIR"
CSIW_MAGIC = b"CSIW"
FORMAT_VERSION = 1

_CSIR_HEADER = struct.Struct("<4sHI")
_CSIW_HEADER = struct.Struct("<4sHBHII")

RECORD_DTYPE = np.dtype(
    [
        ("timestamp_us", "<u8"),
        ("pair_id", "u1"),
        ("subcarriers", "<f4", (N_SUBCARRIERS, 2)),
    ]
)
RECORD_SIZE = RECORD_DTYPE.itemsize
assert RECORD_SIZE == 249


class CsiFormatError(ValueError):
    """Base class for malformed CSI input."""


class BadMagic(CsiFormatError):
    pass


class Truncated(CsiFormatError):
    pass


class BadPairId(CsiFormatError):
    pass


class NonFinite(CsiFormatError):
    pass


class BadVersion(CsiFormatError):
    pass


class MissingPair(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class BadFactor(ValueError):
    pass


class BadShape(ValueError):
    pass


@dataclass(frozen=True)
class CsiRecord:
    """One timestamped reading of 30 complex subcarrier responses for one antenna pair."""

    timestamp_us: int
    pair_id: int
    subcarriers: tuple  # 30 complex values

    def __post_init__(self):
        if len(self.subcarriers) != N_SUBCARRIERS:
            raise BadShape(f"expected {N_SUBCARRIERS} subcarriers, got {len(self.subcarriers)}")
        if self.pair_id not in (0, 1):
            raise BadPairId(f"pair_id must be 0 or 1, got {self.pair_id}")
        if not all(np.isfinite(c.real) and np.isfinite(c.imag) for c in self.subcarriers):
            raise NonFinite("subcarrier values must be finite")


class RecordArray(Sequence):
    """Sequence of :class:`CsiRecord` stored as a structured numpy array."""

    def __init__(self, data: np.ndarray):
        if data.dtype != RECORD_DTYPE:
            data = data.astype(RECORD_DTYPE)
        self.data = data

    @classmethod
    def from_records(cls, records: Iterable[CsiRecord]) -> "RecordArray":
        records = list(records)
        data = np.zeros(len(records), dtype=RECORD_DTYPE)
        for i, r in enumerate(records):
            data[i]["timestamp_us"] = r.timestamp_us
            data[i]["pair_id"] = r.pair_id
            sc = np.asarray(r.subcarriers, dtype=np.complex64)
            data[i]["subcarriers"][:, 0] = sc.real
            data[i]["subcarriers"][:, 1] = sc.imag
        return cls(data)

    @classmethod
    def from_fields(cls, timestamp_us, pair_id, re, im) -> "RecordArray":
        n = len(timestamp_us)
        data = np.empty(n, dtype=RECORD_DTYPE)
        data["timestamp_us"] = timestamp_us
        data["pair_id"] = pair_id
        data["subcarriers"][..., 0] = re
        data["subcarriers"][..., 1] = im
        return cls(data)

    def __len__(self):
        return len(self.data)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return RecordArray(self.data[idx])
        row = self.data[idx]
        sc = row["subcarriers"]
        values = tuple(complex(float(re), float(im)) for re, im in sc)
        return CsiRecord(int(row["timestamp_us"]), int(row["pair_id"]), values)

    def __eq__(self, other):
        if isinstance(other, RecordArray):
            other_data = other.data
        elif isinstance(other, Sequence):
            other_data = as_record_array(other).data
        else:
            return NotImplemented
        # compare raw bytes so NaN payloads and signed zeros count as bit-exact
        return self.data.tobytes() == other_data.tobytes()

    __hash__ = None

    @property
    def complex_values(self) -> np.ndarray:
        sc = self.data["subcarriers"].astype(np.float64)
        return sc[..., 0] + 1j * sc[..., 1]


RecordsLike = Union[RecordArray, Sequence[CsiRecord]]


def as_record_array(records: RecordsLike) -> RecordArray:
    if isinstance(records, RecordArray):
        return records
    return RecordArray.from_records(records)


def _check_magic(buf: bytes, magic: bytes, what: str) -> None:
    # a prefix of the magic is a stream cut short, not a foreign one
    if len(buf) < len(magic) and magic.startswith(buf):
        raise Truncated(f"{what} ends inside the magic bytes")
    if buf[:len(magic)] != magic:
        raise BadMagic(f"{what} does not start with {magic!r}")


def encode_record_stream(records: RecordsLike) -> bytes:
    arr = as_record_array(records).data
    header = _CSIR_HEADER.pack(CSIR_MAGIC, FORMAT_VERSION, len(arr))
    return header + arr.tobytes()


def parse_record_stream(buf: bytes) -> RecordArray:
    """Parse a complete CSIR byte stream.

    Raises BadMagic, BadVersion, Truncated, BadPairId or NonFinite; trailing
    bytes beyond the declared record count are treated as a truncated record.
    """
    buf = bytes(buf)
    _check_magic(buf, CSIR_MAGIC, "stream")
    if len(buf) < _CSIR_HEADER.size:
        raise Truncated("stream ends inside the header")
    _, version, count = _CSIR_HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise BadVersion(f"unsupported CSIR version {version}")
    body = len(buf) - _CSIR_HEADER.size
    if body < count * RECORD_SIZE:
        raise Truncated(f"declared {count} records but stream holds {body / RECORD_SIZE:.2f}")
    if body > count * RECORD_SIZE:
        raise Truncated(f"{body - count * RECORD_SIZE} stray bytes after {count} records")
    data = np.frombuffer(buf, dtype=RECORD_DTYPE, count=count, offset=_CSIR_HEADER.size).copy()
    bad = np.flatnonzero(data["pair_id"] > 1)
    if bad.size:
        raise BadPairId(f"record {bad[0]} has pair_id {data['pair_id'][bad[0]]}")
    finite = np.isfinite(data["subcarriers"]).reshape(count, 2 * N_SUBCARRIERS).all(axis=1)
    if not finite.all():
        raise NonFinite(f"record {np.flatnonzero(~finite)[0]} carries NaN/Inf")
    return RecordArray(data)


def amplitude(record: CsiRecord) -> np.ndarray:
    """Per-subcarrier magnitude ``sqrt(re**2 + im**2)``."""
    sc = np.asarray(record.subcarriers, dtype=np.complex128)
    return np.hypot(sc.real, sc.imag)


def phase(record: CsiRecord) -> np.ndarray:
    """Per-subcarrier phase ``atan2(im, re)`` in (-pi, pi]; (0, 0) maps to 0."""
    sc = np.asarray(record.subcarriers, dtype=np.complex128)
    # +0.0 folds a negative-zero imaginary part onto the +pi side of the cut
    out = np.arctan2(sc.imag + 0.0, sc.real)
    # atan2(-tiny, -x) can round to exactly -pi, which lies outside (-pi, pi]
    out[out <= -np.pi] = np.pi
    out[(sc.real == 0) & (sc.imag == 0)] = 0.0
    return out


def amplitudes(records: RecordsLike) -> np.ndarray:
    """Vectorized :func:`amplitude` over a record sequence, shape (n, 30)."""
    sc = as_record_array(records).data["subcarriers"].astype(np.float64)
    return np.hypot(sc[..., 0], sc[..., 1])


@dataclass
class RawWindow:
    data: np.ndarray  # (10000, 60) float32
    start_us: int

    def __post_init__(self):
        if self.data.shape != (WINDOW_ROWS, SAMPLE_COLS):
            raise BadShape(f"raw window must be {WINDOW_ROWS}x{SAMPLE_COLS}, got {self.data.shape}")


def build_windows(records: RecordsLike, rate_hz: int = RATE_HZ,
                  window_rows: int = WINDOW_ROWS) -> list[RawWindow]:
    """Resample both pairs onto a common uniform grid and cut 10 s windows.

    Each pair's amplitude series is linearly interpolated at ``rate_hz``
    starting from the later of the two pairs' first timestamps. Columns
    0..29 hold pair 0, 30..59 pair 1. Windows do not overlap and a trailing
    partial window is dropped.
    """
    arr = as_record_array(records).data
    if len(arr) == 0:
        raise EmptyInput("no records")
    amps = amplitudes(RecordArray(arr))
    ts = arr["timestamp_us"]
    series = []
    for pair in range(N_PAIRS):
        sel = arr["pair_id"] == pair
        if not sel.any():
            raise MissingPair(f"no records for pair {pair}")
        series.append((ts[sel], amps[sel]))

    step_us = 1_000_000 / rate_hz
    start = max(int(s[0][0]) for s in series)
    stop = min(int(s[0][-1]) for s in series)
    n_grid = int(np.floor((stop - start) / step_us)) + 1 if stop >= start else 0
    n_windows = n_grid // window_rows
    if n_windows == 0:
        return []
    grid = start + step_us * np.arange(n_windows * window_rows, dtype=np.float64)

    out = np.empty((len(grid), SAMPLE_COLS), dtype=np.float32)
    for pair, (pts, pamps) in enumerate(series):
        tsf = pts.astype(np.float64)
        # records per half-open window span [start, start + 10 s)
        edges = grid[0] + step_us * window_rows * np.arange(n_windows + 1)
        counts = np.diff(np.searchsorted(tsf, edges, side="left"))
        if (counts == 0).any():
            w = int(np.flatnonzero(counts == 0)[0])
            raise MissingPair(f"pair {pair} has no records in window {w}")
        for j in range(N_SUBCARRIERS):
            out[:, pair * N_SUBCARRIERS + j] = np.interp(grid, tsf, pamps[:, j])

    return [
        RawWindow(out[w * window_rows:(w + 1) * window_rows].copy(),
                  int(round(grid[w * window_rows])))
        for w in range(n_windows)
    ]


def downsample(window, factor: int = DOWNSAMPLE_FACTOR) -> np.ndarray:
    """Block-mean decimation along time: row r is the mean of rows [f*r, f*r+f)."""
    data = window.data if isinstance(window, RawWindow) else np.asarray(window)
    if data.ndim != 2:
        raise BadShape(f"expected a 2-D window, got shape {data.shape}")
    rows, cols = data.shape
    if factor <= 0 or rows % factor:
        raise BadFactor(f"{rows} rows not divisible by factor {factor}")
    blocks = data.reshape(rows // factor, factor, cols).astype(np.float64)
    return blocks.mean(axis=1).astype(np.float32)


@dataclass
class Sample:
    data: np.ndarray  # (500, 60) float32
    label: int
    domain_id: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.shape != (SAMPLE_ROWS, SAMPLE_COLS):
            raise BadShape(f"sample must be {SAMPLE_ROWS}x{SAMPLE_COLS}, got {self.data.shape}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if not 0 <= self.domain_id < 2 ** 16:
            raise ValueError(f"domain_id out of u16 range: {self.domain_id}")
        if not np.isfinite(self.data).all():
            raise NonFinite("sample contains NaN/Inf")


def records_to_samples(records: RecordsLike, label: int, domain_id: int) -> list[Sample]:
    return [Sample(downsample(w), label, domain_id) for w in build_windows(records)]


def encode_sample(sample: Sample) -> bytes:
    rows, cols = sample.data.shape
    header = _CSIW_HEADER.pack(CSIW_MAGIC, FORMAT_VERSION, sample.label, sample.domain_id, rows, cols)
    return header + sample.data.astype("<f4").tobytes()


def decode_sample(buf: bytes) -> Sample:
    buf = bytes(buf)
    _check_magic(buf, CSIW_MAGIC, "sample")
    if len(buf) < _CSIW_HEADER.size:
        raise Truncated("sample ends inside the header")
    _, version, label, domain_id, rows, cols = _CSIW_HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise BadVersion(f"unsupported CSIW version {version}")
    need = _CSIW_HEADER.size + 4 * rows * cols
    if len(buf) != need:
        raise Truncated(f"expected {need} bytes, got {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", offset=_CSIW_HEADER.size).reshape(rows, cols)
    return Sample(data.astype(np.float32), label, domain_id)


def write_sample(path, sample: Sample) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_sample(sample))


def read_sample(path) -> Sample:
    with open(path, "rb") as fh:
        return decode_sample(fh.read())
