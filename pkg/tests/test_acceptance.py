"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line (also collected in the terminal summary)
before asserting at the stated tolerance.
"""
import math
import time
from collections import Counter
from dataclasses import replace

import numpy as np

from csi_ada import csi_ingest as ci
from csi_ada.ada import (
    INFINITE,
    TrainConfig,
    erm_config,
    maximize_phase,
    surrogate_objective,
    train_ensemble,
    train_one,
    transport_cost,
)
from csi_ada.diff_core import softmax_cross_entropy
from csi_ada.experiment import run_experiment
from csi_ada.gradcheck import run_suite
from csi_ada.lodo import evaluate, lodo_split, select_model
from csi_ada.models import CNN, LSTM, CnnConfig, LstmConfig, forward, init_params
from csi_ada.synth import DomainParams, generate_dataset

RED = CnnConfig.reduced()


def _stack(samples):
    return np.stack([s.data for s in samples]), np.array([s.label for s in samples], dtype=np.int64)


def _toy(n, seed):
    rng = np.random.default_rng(seed)
    ys = np.arange(n) % 2
    xs = rng.normal(1.0, 0.05, (n, 10, 6))
    xs[ys == 1, 5:8] += 0.4
    return xs.astype(np.float32), ys.astype(np.int64)


def _same_params(a, b):
    return all(na == nb and np.array_equal(va, vb)
               for (na, va), (nb, vb) in zip(a.named_params(), b.named_params()))


def test_criterion_1_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = run_suite()
    elapsed = time.perf_counter() - t0
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results) and elapsed < 30
    worst = max(results, key=lambda r: r.max_error / r.tolerance)
    assert verdict(1, "finite-difference gradient suite", ok,
                   f"{len(results)} cases, worst {worst.name} {worst.max_error:.2e}, {elapsed:.1f}s")


def _random_records(rng, n):
    ts = rng.integers(0, 2 ** 63, n, dtype=np.uint64) * np.uint64(2) + rng.integers(0, 2, n, dtype=np.uint64)
    pair = rng.integers(0, 2, n).astype(np.uint8)
    # raw bit patterns cover subnormals and signed zeros; non-finite ones are redrawn
    bits = rng.integers(0, 2 ** 32, (n, 30, 2), dtype=np.uint64).astype(np.uint32)
    vals = bits.view(np.float32)
    bad = ~np.isfinite(vals)
    vals[bad] = rng.standard_normal(bad.sum()).astype(np.float32)
    return ci.RecordArray.from_fields(ts, pair, vals[..., 0], vals[..., 1])


def test_criterion_2_parser_round_trip(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    exact = 0
    for _ in range(1000):
        records = _random_records(rng, int(rng.integers(0, 12)))
        buf = ci.encode_record_stream(records)
        back = ci.parse_record_stream(buf)
        exact += back == records and ci.encode_record_stream(back) == buf
    stream = ci.encode_record_stream(_random_records(rng, 3))
    truncated = 0
    for cut in range(len(stream)):
        try:
            ci.parse_record_stream(stream[:cut])
        except ci.Truncated:
            truncated += 1
    elapsed = time.perf_counter() - t0
    ok = exact == 1000 and truncated == len(stream) and elapsed < 10
    assert verdict(2, "record stream round trip and truncation", ok,
                   f"{exact}/1000 exact, {truncated}/{len(stream)} prefixes Truncated, {elapsed:.1f}s")


def _dual_pair_stream(seconds, values):
    """1000 Hz records for both pairs; ``values(t_index)`` gives (2, 30) amplitudes per tick."""
    n = seconds * 1000
    ts = np.repeat(np.arange(n, dtype=np.uint64) * 1000, 2)
    pair = np.tile(np.array([0, 1], np.uint8), n)
    re = values(n).reshape(2 * n, 30).astype(np.float32)
    return ci.RecordArray.from_fields(ts, pair, re, np.zeros_like(re))


def test_criterion_3_preprocessing(verdict):
    rng = np.random.default_rng(3)
    noisy = _dual_pair_stream(25, lambda n: rng.uniform(0.5, 2.0, (n, 2, 30)))
    samples = ci.records_to_samples(noisy, label=1, domain_id=4)
    shapes_ok = len(samples) == 2 and all(s.data.shape == (500, 60) for s in samples)

    flat = ci.records_to_samples(_dual_pair_stream(25, lambda n: np.full((n, 2, 30), 1.75)), 0, 0)
    constant_ok = len(flat) == 2 and all(np.all(s.data == np.float32(1.75)) for s in flat)

    a = rng.uniform(0, 3, (10000, 60))
    b = rng.uniform(0, 3, (10000, 60))
    alpha, beta = 0.7, -2.3
    lhs = ci.downsample(alpha * a + beta * b)
    rhs = alpha * ci.downsample(a) + beta * ci.downsample(b)
    rel = float(np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)))
    ok = shapes_ok and constant_ok and rel < 1e-5
    assert verdict(3, "preprocessing conformance", ok,
                   f"{len(samples)} samples {samples[0].data.shape if samples else None}, "
                   f"constant={constant_ok}, linearity rel err {rel:.1e}")


def test_criterion_4_surrogate_identities(verdict):
    worst_identity = 0.0
    monotone = True
    for kind, cfg in ((CNN, RED), (LSTM, LstmConfig.reduced())):
        for seed in range(5):
            s = init_params(kind, cfg, seed)
            xs, ys = _toy(6, seed)
            for x0, y0 in zip(xs, ys):
                loss = float(softmax_cross_entropy(forward(s, x0).logits, int(y0)).values)
                worst_identity = max(worst_identity, abs(surrogate_objective(s, x0, x0, int(y0), 2.0) - loss))
            res = maximize_phase(s, xs, ys, 1.0, t_adv=10, eta_adv=1.0)
            monotone &= bool(np.all(np.diff(res.objective_trace, axis=0) >= 0))
    z = np.random.default_rng(4).standard_normal(8)
    ok = (worst_identity < 1e-6 and transport_cost(z, 1, z, 1) == 0.0
          and transport_cost(z, 0, z, 1) == INFINITE and monotone)
    assert verdict(4, "surrogate identities and greedy monotonicity", ok,
                   f"identity err {worst_identity:.1e}, per-step monotone over 5 seeds={monotone}")


def test_criterion_5_penalty_limit(verdict):
    gammas = [10.0 ** p for p in range(10)]
    non_increasing = True
    finals = []
    for seed in range(5):
        s = init_params(CNN, RED, seed)
        xs, ys = _toy(1, seed)
        dist = [float(np.linalg.norm(maximize_phase(s, xs, ys, g, t_adv=15, eta_adv=1.0).samples - xs))
                for g in gammas]
        non_increasing &= all(b <= a for a, b in zip(dist, dist[1:]))
        finals.append(dist[-1])
    ok = non_increasing and max(finals) < 1e-3
    assert verdict(5, "penalty limit as gamma grows", ok,
                   f"non-increasing={non_increasing}, max distance at 1e9 = {max(finals):.1e}")


def test_criterion_6_erm_reduction(verdict):
    data = _toy(24, 6)
    cfg = TrainConfig(rho_grid=(1.0,), k=3, t_adv=0, t_min=3, lr=0.05, batch=8, epochs_warmup=1)
    a, _ = train_one(7, data, 1.0, cfg, CNN, RED)
    b, _ = train_one(7, data, 1.0, cfg, CNN, RED, augment=False)
    identical = _same_params(a, b)
    _, tel, ds = train_one(7, data, 1.0, replace(cfg, t_adv=3), CNN, RED,
                           return_dataset=True)
    growth = len(ds) - ds.n_source
    ok = identical and growth == cfg.k * cfg.batch
    assert verdict(6, "zero perturbation equals plain minimization", ok,
                   f"bit-identical={identical}, growth {growth} vs k*batch {cfg.k * cfg.batch}")


TINY = """\
model = cnn
profile = reduced
synth_per_domain = 4
k = 2
t_min = 2
t_adv = 2
batch = 4
lr = 0.05
workers = {workers}
"""


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_7_determinism(tmp_path, verdict):
    trees = []
    for i, workers in enumerate((1, 1, 3)):
        cfg = tmp_path / f"run{i}.cfg"
        cfg.write_text(TINY.format(workers=workers))
        run_experiment(cfg, tmp_path / f"out{i}")
        trees.append(_tree_bytes(tmp_path / f"out{i}"))
    keys = {k for k in trees[0] if k.startswith(("report", "checkpoints/"))}
    same = all(t == trees[0] for t in trees[1:])
    ok = same and "report.tsv" in keys and "checkpoints/member0.adaw" in keys
    assert verdict(7, "run_experiment determinism across runs and workers", ok,
                   f"{len(trees[0])} files compared over 3 runs (workers 1, 1, 3), identical={same}")


def _shift_trial(seed):
    train_doms = [DomainParams(d, 1.0, 0.05) for d in range(9)]
    samples = generate_dataset(train_doms, 10, 0.5, seed)
    samples += generate_dataset([DomainParams(9, 1.6, 0.15)], 20, 0.5, seed)
    split = lodo_split(samples, 9, seed=seed)
    data = _stack(split.train)
    cfg = TrainConfig(rho_grid=(0.1, 1.0, 4.0), k=20, batch=16, t_min=10, lr=0.01, t_adv=15,
                      eta_adv=1.0, epochs_warmup=3, seed=seed)
    erm_state, _ = train_one(seed, data, 1.0, erm_config(cfg, math.ceil(len(data[0]) / cfg.batch)), CNN, RED)
    ens = train_ensemble(data, cfg, CNN, RED)
    chosen = select_model(ens, split.validation)
    return (evaluate(ens[chosen].state, split.test).accuracy, evaluate(erm_state, split.test).accuracy,
            evaluate(erm_state, split.validation).accuracy, chosen)


def test_criterion_8_domain_shift(verdict):
    t0 = time.perf_counter()
    trials = [_shift_trial(seed) for seed in range(5)]
    elapsed = time.perf_counter() - t0
    for seed, (ada, erm, erm_val, chosen) in enumerate(trials):
        print(f"seed {seed}: selected member {chosen} test {ada:.3f}  ERM test {erm:.3f}  ERM val {erm_val:.3f}")
    ada_med = float(np.median([t[0] for t in trials]))
    erm_med = float(np.median([t[1] for t in trials]))
    val_med = float(np.median([t[2] for t in trials]))
    gap_ok = ada_med >= erm_med + 0.03
    learnable = val_med >= 0.9
    verdict(8, "held-out domain gain over ERM", gap_ok and learnable and elapsed < 300,
            f"median selected {ada_med:.3f} vs ERM {erm_med:.3f}, ERM val {val_med:.3f}, {elapsed:.0f}s")
    assert learnable
    assert gap_ok


def test_criterion_9_lodo_rotation(verdict):
    samples = generate_dataset([DomainParams(d) for d in range(10)], 6, 0.5, 9)
    state = init_params(CNN, RED, 0)
    seen = Counter()
    disjoint = counts_ok = True
    for holdout in range(10):
        split = lodo_split(samples, holdout, seed=0)
        disjoint &= not (split.train_domains & split.test_domains)
        disjoint &= {s.domain_id for s in split.validation} <= split.train_domains
        seen.update(id(s) for s in split.test)
        counts_ok &= evaluate(state, split.test).total == len(split.test)
    once = len(seen) == len(samples) and set(seen.values()) == {1}
    ok = once and disjoint and counts_ok
    assert verdict(9, "leave-one-domain-out rotation", ok,
                   f"covered once={once}, disjoint={disjoint}, counts sum to |test|={counts_ok}")
