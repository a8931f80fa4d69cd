"""Deterministic synthetic CSI streams with controllable domain shift.

Amplitude model per pair ``p`` and subcarrier ``j`` (column ``c = 30p + j``)::

    base(t)  = gain * (1 + 0.1 * sin(2*pi*0.5*t + c))
    burst(t) = gain * exp(-(t - t0) / 0.5) * sin(2*pi*burst_freq_hz*t),  t >= t0
    amp      = lowpass(base + label * burst + N(0, noise_std**2))

with ``t0 = duration_s / 2`` and ``lowpass`` the first-order recursion
``y[n] = smoothing * y[n-1] + (1 - smoothing) * x[n]`` seeded with ``y[-1] = x[0]``.
The stored complex response is ``amp * exp(1j * phi)`` with a fixed,
slowly rotating phase ``phi = 0.2*j + 0.5*t`` (phase carries no label signal).

Randomness comes from numpy's Philox4x32 counter-based generator keyed by a
``SeedSequence`` over ``(seed, domain_id, label)``, so outputs are identical
on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .csi_ingest import (
    N_PAIRS,
    N_SUBCARRIERS,
    RATE_HZ,
    WINDOW_SECONDS,
    RecordArray,
    Sample,
    downsample,
    build_windows,
)

BURST_DECAY_S = 0.5
BASE_FREQ_HZ = 0.5
BASE_DEPTH = 0.1

# 5 environments x 2 collection subsets
DOMAIN_NAMES = tuple(
    f"{env}_{subset}"
    for subset in ("A", "B")
    for env in ("bathroom", "bedroom", "corridor", "kitchen", "lab")
)


@dataclass(frozen=True)
class DomainParams:
    domain_id: int
    gain: float = 1.0
    noise_std: float = 0.05
    burst_freq_hz: float = 0.7
    smoothing: float = 0.0

    def __post_init__(self):
        if not 0 <= self.domain_id < 2 ** 16:
            raise ValueError(f"domain_id out of u16 range: {self.domain_id}")
        if not self.gain > 0:
            raise ValueError(f"gain must be positive, got {self.gain}")
        if not self.noise_std >= 0:
            raise ValueError(f"noise_std must be non-negative, got {self.noise_std}")
        if not self.burst_freq_hz > 0:
            raise ValueError(f"burst_freq_hz must be positive, got {self.burst_freq_hz}")
        if not 0 <= self.smoothing < 1:
            raise ValueError(f"smoothing must lie in [0, 1), got {self.smoothing}")


def domain_id_for(name_or_id) -> int:
    if isinstance(name_or_id, str):
        if name_or_id.isdigit():
            return int(name_or_id)
        try:
            return DOMAIN_NAMES.index(name_or_id)
        except ValueError:
            raise KeyError(f"unknown domain name {name_or_id!r}") from None
    return int(name_or_id)


def _rng(seed: int, *stream) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & (2 ** 64 - 1), *map(int, stream)])
    return np.random.Generator(np.random.Philox(ss))


def amplitude_series(params: DomainParams, label: int, duration_s: float, seed: int) -> np.ndarray:
    """Noisy, smoothed amplitudes, shape (n_ticks, 60), float64."""
    if not duration_s > 0:
        raise ValueError("duration_s must be positive")
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    n = int(round(duration_s * RATE_HZ))
    t = np.arange(n, dtype=np.float64) / RATE_HZ
    cols = np.arange(N_PAIRS * N_SUBCARRIERS, dtype=np.float64)
    shape = 1.0 + BASE_DEPTH * np.sin(2 * np.pi * BASE_FREQ_HZ * t[:, None] + cols[None, :])
    amp = params.gain * shape
    if label == 1:
        t0 = duration_s / 2
        after = t >= t0
        burst = np.zeros(n)
        burst[after] = (np.exp(-(t[after] - t0) / BURST_DECAY_S)
                        * np.sin(2 * np.pi * params.burst_freq_hz * t[after]))
        amp = amp + params.gain * burst[:, None]
    if params.noise_std > 0:
        noise = _rng(seed, params.domain_id, label).standard_normal(amp.shape)
        amp = amp + params.noise_std * noise
    if params.smoothing > 0:
        s = params.smoothing
        amp = lfilter([1 - s], [1, -s], amp, axis=0, zi=s * amp[:1])[0]
    return amp


def generate_stream(params: DomainParams, label: int, duration_s: float, seed: int) -> RecordArray:
    """Interleaved pair-0/pair-1 records at 1000 Hz for ``duration_s`` seconds."""
    amp = amplitude_series(params, label, duration_s, seed)
    n = amp.shape[0]
    t = np.arange(n, dtype=np.float64) / RATE_HZ
    j = np.arange(N_SUBCARRIERS, dtype=np.float64)
    phi = 0.2 * j[None, :] + 0.5 * t[:, None]
    ts_us = np.arange(n, dtype=np.uint64) * np.uint64(1_000_000 // RATE_HZ)

    timestamps = np.repeat(ts_us, N_PAIRS)
    pair_ids = np.tile(np.arange(N_PAIRS, dtype=np.uint8), n)
    # (n, pairs, 30) -> (n * pairs, 30), pair-major within each tick
    a = amp.reshape(n, N_PAIRS, N_SUBCARRIERS)
    re = (a * np.cos(phi)[:, None, :]).reshape(-1, N_SUBCARRIERS)
    im = (a * np.sin(phi)[:, None, :]).reshape(-1, N_SUBCARRIERS)
    return RecordArray.from_fields(timestamps, pair_ids, re.astype(np.float32), im.astype(np.float32))


def sample_seed(seed: int, domain_id: int, index: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(domain_id), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate_dataset(domains, per_domain: int, fall_fraction: float, seed: int) -> list[Sample]:
    """``per_domain`` 10 s samples per domain, the first ``round(fall_fraction*per_domain)`` falls."""
    if not 0 <= fall_fraction <= 1:
        raise ValueError(f"fall_fraction must lie in [0, 1], got {fall_fraction}")
    n_fall = int(round(fall_fraction * per_domain))
    samples = []
    for params in domains:
        for i in range(per_domain):
            label = 1 if i < n_fall else 0
            stream = generate_stream(params, label, WINDOW_SECONDS, sample_seed(seed, params.domain_id, i))
            for window in build_windows(stream):
                samples.append(Sample(downsample(window), label, params.domain_id))
    return samples
