"""Finite-difference gradient suite over every engine op and the model embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diff_core as dc
from .models import CNN, LSTM, CnnConfig, LstmConfig, forward, init_params

NONLINEAR_TOL = 1e-4
LINEAR_TOL = 1e-6
SEEDS = (0, 1, 2, 3, 4)


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28s} max_rel_err={self.max_error:.3e}  tol={self.tolerance:.0e}"


def _away_from_zero(rng, shape):
    # keeps relu inputs clear of the kink so central differences stay valid
    return rng.uniform(0.1, 2.0, shape) * rng.choice([-1.0, 1.0], shape)


def _distinct(rng, shape):
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.05 + rng.uniform(0, 0.01, n)).reshape(shape)


def _small(rng, shape):
    return 0.5 * rng.standard_normal(shape)


def _labels(rng, n, c):
    return rng.integers(0, c, n)


def _model_fn(kind, config, seed):
    state = init_params(kind, config, seed)

    def fn(tensors, graph):
        fw = forward(state, tensors[0], graph)
        return fw.embedding, fw.logits
    return fn


def cases(seed: int):
    """``(name, fn, shapes, tolerance, sampler, eps)`` for one seed.

    Whole-model cases use a 1e-6 step: with thousands of relu/max-pool
    switches a 1e-3 step can straddle a kink and measure a different branch.
    """
    rng = np.random.default_rng(1000 + seed)
    labels = _labels(rng, 3, 4)
    return [
        ("conv2d[same]", lambda t, g: dc.conv2d(t[0], t[1], t[2], "same", g),
         [(2, 6, 5, 2), (3, 3, 2, 3), (3,)], NONLINEAR_TOL, None, 1e-3),
        ("conv2d[valid]", lambda t, g: dc.conv2d(t[0], t[1], t[2], "valid", g),
         [(5, 4, 2), (3, 3, 2, 2), (2,)], NONLINEAR_TOL, None, 1e-3),
        ("maxpool2d", lambda t, g: dc.maxpool2d(t[0], graph=g),
         [(2, 5, 4, 3)], NONLINEAR_TOL, _distinct, 1e-3),
        ("dense", lambda t, g: dc.dense(t[0], t[1], t[2], g),
         [(3, 4), (4, 5), (5,)], LINEAR_TOL, None, 1e-3),
        ("relu", lambda t, g: dc.relu(t[0], g),
         [(4, 6)], NONLINEAR_TOL, _away_from_zero, 1e-3),
        ("lstm_cell", lambda t, g: dc.lstm_cell(*t, graph=g),
         [(2, 3), (2, 4), (2, 4), (3, 16), (4, 16), (16,)], NONLINEAR_TOL, _small, 1e-3),
        ("softmax_cross_entropy", lambda t, g: dc.softmax_cross_entropy(t[0], labels, g),
         [(3, 4)], NONLINEAR_TOL, None, 1e-3),
        ("half_sq_dist", lambda t, g: dc.half_sq_dist(t[0], t[1], g),
         [(3, 5), (3, 5)], NONLINEAR_TOL, None, 1e-3),
        ("block_mean", lambda t, g: dc.block_mean(t[0], (2, 3), g),
         [(2, 4, 6)], LINEAR_TOL, None, 1e-3),
        ("embed[cnn,input]", _model_fn(CNN, CnnConfig.reduced(), seed),
         [(20, 12)], NONLINEAR_TOL, None, 1e-6),
        ("embed[lstm,input]", _model_fn(LSTM, LstmConfig.reduced(), seed),
         [(20, 12)], NONLINEAR_TOL, None, 1e-6),
    ]


def run_suite(seeds=SEEDS) -> list[CheckResult]:
    """Worst relative error per case over ``seeds``."""
    worst = {}
    for seed in seeds:
        for name, fn, shapes, tol, sampler, eps in cases(seed):
            err = dc.grad_check(fn, shapes, seed=seed, eps=eps, sampler=sampler)
            prev = worst.get(name)
            worst[name] = CheckResult(name, max(err, prev.max_error if prev else 0.0), tol)
    return list(worst.values())
