"""Adversarial data augmentation with a Wasserstein-style penalty in embedding space.

Each training run alternates two phases ``k`` times:

* maximization: starting from real source samples ``x0``, climb
  ``loss(x, y0) - gamma * 0.5 * ||g(x) - g(x0)||^2`` by gradient ascent on
  the input, keeping only steps that strictly increase it;
* minimization: plain SGD on cross-entropy over the source samples plus
  every adversarial sample generated so far.

One model is trained per radius ``rho`` in the grid, with ``gamma = 1/rho``
by default.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import diff_core as dc
from .diff_core import ShapeMismatch, Tensor
from .models import CNN, ModelState, fit_input_norm, forward, init_params

INFINITE = math.inf

GAMMA_RULES = {
    "inverse": lambda rho: 1.0 / rho,
    "inverse_sqrt": lambda rho: 1.0 / math.sqrt(rho),
    "identity": lambda rho: rho,
}


class DegenerateData(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    rho_grid: tuple = (0.001, 0.01, 0.1, 1.0, 4.0)
    gamma_rule: str = "inverse"
    k: int = 100
    t_adv: int = 15
    eta_adv: float = 1.0
    t_min: int = 100
    lr: float = 1e-3
    batch: int = 32
    epochs_warmup: int = 1
    seed: int = 0
    adv_growth: float = 1.0

    def __post_init__(self):
        grid = tuple(float(r) for r in self.rho_grid)
        object.__setattr__(self, "rho_grid", grid)
        if not grid:
            raise ValueError("rho_grid must not be empty")
        if any(r <= 0 for r in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError(f"rho_grid must be positive and strictly increasing: {grid}")
        if self.gamma_rule not in GAMMA_RULES:
            raise ValueError(f"unknown gamma_rule {self.gamma_rule!r}; choose from {sorted(GAMMA_RULES)}")
        for name in ("k", "t_adv", "t_min", "epochs_warmup"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch <= 0:
            raise ValueError("batch must be positive")
        if self.lr < 0 or self.eta_adv < 0:
            raise ValueError("lr and eta_adv must be non-negative")

    def gamma_of_rho(self, rho: float) -> float:
        return GAMMA_RULES[self.gamma_rule](rho)


# --- transport cost and surrogate ---------------------------------------------------


def transport_cost(z, y, z0, y0) -> float:
    """``0.5 * ||z - z0||^2`` for equal labels, :data:`INFINITE` otherwise."""
    z = np.asarray(getattr(z, "values", z), dtype=np.float64)
    z0 = np.asarray(getattr(z0, "values", z0), dtype=np.float64)
    if z.shape != z0.shape:
        raise ShapeMismatch(f"embeddings differ in shape: {z.shape} vs {z0.shape}")
    if int(y) != int(y0):
        return INFINITE
    d = z - z0
    return 0.5 * float(np.dot(d.ravel(), d.ravel()))


def _surrogate_graph(state: ModelState, xs: np.ndarray, z0: np.ndarray, y0: np.ndarray,
                     gamma: float, need_grad: bool):
    """Per-sample surrogate values for a batch, and optionally d(sum)/dx."""
    graph = dc.Graph() if need_grad else None
    x = Tensor(xs, requires_grad=need_grad)
    fw = forward(state, x, graph)
    loss = dc.softmax_cross_entropy(fw.logits, y0, graph)
    cost = dc.half_sq_dist(fw.embedding, Tensor(z0), graph)
    obj = dc.sub(loss, dc.scale(cost, gamma, graph), graph)
    grad = None
    if need_grad:
        dc.backward(graph, dc.total(obj, graph))
        grad = x.grad
    return obj.values.astype(np.float64), cost.values.astype(np.float64), grad


def surrogate_objective(state: ModelState, x, x0, y0: int, gamma: float) -> float:
    """``loss(x, y0) - gamma * 0.5 * ||g(x) - g(x0)||^2`` for one sample."""
    x = np.asarray(x, dtype=np.float32)
    x0 = np.asarray(x0, dtype=np.float32)
    if x.shape != x0.shape or x.ndim != 2:
        raise ShapeMismatch(f"x {x.shape} and x0 {x0.shape} must be matching 2-D samples")
    z0 = forward(state, x0).embedding.values
    obj, _, _ = _surrogate_graph(state, x[None], z0[None], np.array([int(y0)]), gamma, False)
    return float(obj[0])


@dataclass
class MaxResult:
    samples: np.ndarray
    transport_cost: np.ndarray  # per sample, final retained iterate
    objective_trace: np.ndarray  # (t_adv + 1, N) retained objective per step
    accepted: np.ndarray  # (N,) number of accepted steps


def maximize_phase(state: ModelState, x0: np.ndarray, y0: np.ndarray, gamma: float,
                   t_adv: int, eta_adv: float, backtrack: bool = True,
                   growth: float = 1.0) -> MaxResult:
    """Greedy gradient ascent on the surrogate, started at the origins.

    A proposal ``x + step * grad`` is kept only when it strictly increases
    the objective. A rejected sample halves its step before the next try
    (``backtrack=False`` keeps the step fixed).
    """
    x0 = np.asarray(x0, dtype=np.float32)
    y0 = np.asarray(y0, dtype=np.int64)
    if x0.ndim != 3 or len(y0) != len(x0):
        raise ShapeMismatch(f"origins must be (N, rows, cols) with N labels, got {x0.shape}, {y0.shape}")
    x = x0.copy()
    n = len(x0)
    if t_adv == 0 or n == 0:
        return MaxResult(x, np.zeros(n), np.zeros((1, n)), np.zeros(n, dtype=np.int64))
    z0 = forward(state, x0).embedding.values
    obj, cost, grad = _surrogate_graph(state, x, z0, y0, gamma, True)
    step = np.full(n, float(eta_adv), dtype=np.float32)
    trace = [obj.copy()]
    accepted = np.zeros(n, dtype=np.int64)
    for _ in range(t_adv):
        proposal = x + step[:, None, None] * grad
        p_obj, p_cost, p_grad = _surrogate_graph(state, proposal, z0, y0, gamma, True)
        take = p_obj > obj
        x[take] = proposal[take]
        obj[take] = p_obj[take]
        cost[take] = p_cost[take]
        grad[take] = p_grad[take]
        accepted += take
        if backtrack:
            step[~take] *= 0.5
        if growth != 1.0:
            step[take] *= growth
        trace.append(obj.copy())
    return MaxResult(x, cost, np.array(trace), accepted)


# --- augmented dataset and minimization ---------------------------------------------


class AugmentedDataset:
    """Source samples followed by every adversarial batch appended so far."""

    def __init__(self, xs: np.ndarray, ys: np.ndarray):
        xs = np.asarray(xs, dtype=np.float32)
        self.n_source = len(xs)
        self._x = xs.copy()
        self._y = np.asarray(ys, dtype=np.int64).copy()
        self.origin = np.arange(self.n_source)
        self.iteration = np.full(self.n_source, -1)
        self._size = self.n_source

    def __len__(self):
        return self._size

    @property
    def xs(self):
        return self._x[:self._size]

    @property
    def ys(self):
        return self._y[:self._size]

    def append(self, xs: np.ndarray, origins: np.ndarray, iteration: int) -> None:
        origins = np.asarray(origins, dtype=np.int64)
        need = self._size + len(xs)
        if need > len(self._x):
            cap = max(need, 2 * len(self._x))
            grow = cap - len(self._x)
            self._x = np.concatenate([self._x, np.empty((grow,) + self._x.shape[1:], np.float32)])
            self._y = np.concatenate([self._y, np.empty(grow, np.int64)])
        self._x[self._size:need] = xs
        # labels are copied from the origins: transport across labels costs infinity
        self._y[self._size:need] = self._y[origins]
        self.origin = np.concatenate([self.origin, origins])
        self.iteration = np.concatenate([self.iteration, np.full(len(xs), iteration)])
        self._size = need


def sgd_step(state: ModelState, xs: np.ndarray, ys: np.ndarray, lr: float) -> float:
    graph = dc.Graph()
    fw = forward(state, xs, graph, track_params=True)
    loss = dc.mean(dc.softmax_cross_entropy(fw.logits, ys, graph), graph)
    dc.backward(graph, loss)
    lr32 = np.float32(lr)
    for name, t in fw.params.items():
        if t.grad is None:
            continue
        group, _, key = name.partition("/")
        params = state.embed_params if group == "embed" else state.classifier_params
        params[key] = params[key] - lr32 * t.grad
    return float(loss.values)


def minimize_phase(state: ModelState, dataset: AugmentedDataset, t_min: int, lr: float,
                   batch: int, rng: np.random.Generator) -> float:
    """``t_min`` SGD steps on batches drawn uniformly from the whole dataset; returns the mean loss."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    size = min(batch, len(dataset))
    losses = []
    for _ in range(t_min):
        idx = np.sort(rng.choice(len(dataset), size=size, replace=False))
        losses.append(sgd_step(state, dataset.xs[idx], dataset.ys[idx], lr))
    return float(np.mean(losses)) if losses else float("nan")


# --- training runs ----------------------------------------------------------------


@dataclass
class IterationStats:
    iteration: int
    mean_loss: float
    mean_transport_cost: float
    dataset_size: int


@dataclass
class Telemetry:
    rho: float
    gamma: float
    source_size: int = 0
    warmup_losses: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    final_dataset_size: int = 0

    def to_tsv(self) -> str:
        lines = ["iteration\tmean_loss\tmean_transport_cost\tdataset_size"]
        for i, loss in enumerate(self.warmup_losses):
            lines.append(f"warmup{i}\t{loss:.9g}\t0\t{self.source_size}")
        for r in self.iterations:
            lines.append(f"{r.iteration}\t{r.mean_loss:.9g}\t{r.mean_transport_cost:.9g}\t{r.dataset_size}")
        return "\n".join(lines) + "\n"


def _stack(data):
    if isinstance(data, tuple) and len(data) == 2:
        xs, ys = data
        return np.asarray(xs, dtype=np.float32), np.asarray(ys, dtype=np.int64)
    xs = np.stack([s.data for s in data]).astype(np.float32)
    ys = np.array([s.label for s in data], dtype=np.int64)
    return xs, ys


def _run_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x414441])))


def train_one(seed: int, data, rho: float, config: TrainConfig, kind: str = CNN,
              model_config=None, augment: bool = True, return_dataset: bool = False,
              normalize: bool = True):
    """Train one member for radius ``rho``; returns ``(state, telemetry)``.

    ``data`` is a list of samples or an ``(xs, ys)`` pair. With ``k == 0``
    only the warm-up epochs run, which is plain empirical risk minimization.
    ``augment=False`` appends the unperturbed origins instead of running the
    maximization, for comparing against the adversarial path.
    """
    xs, ys = _stack(data)
    if len(xs) == 0:
        raise DegenerateData("no training data")
    if len(np.unique(ys)) < 2:
        raise DegenerateData("training data holds a single label")
    gamma = config.gamma_of_rho(rho)
    state = init_params(kind, model_config, seed)
    if normalize:
        fit_input_norm(state, xs)
    rng = _run_rng(seed)
    dataset = AugmentedDataset(xs, ys)
    tel = Telemetry(rho=float(rho), gamma=float(gamma), source_size=len(xs))

    n = len(xs)
    size = min(config.batch, n)
    for _ in range(config.epochs_warmup):
        order = rng.permutation(n)
        losses = [sgd_step(state, xs[np.sort(b)], ys[np.sort(b)], config.lr)
                  for b in np.array_split(order, math.ceil(n / size))]
        tel.warmup_losses.append(float(np.mean(losses)))

    for it in range(config.k):
        origins = np.sort(rng.choice(n, size=size, replace=False))
        if augment:
            res = maximize_phase(state, xs[origins], ys[origins], gamma, config.t_adv, config.eta_adv,
                                 growth=config.adv_growth)
            adv, cost = res.samples, res.transport_cost
        else:
            adv, cost = xs[origins].copy(), np.zeros(size)
        dataset.append(adv, origins, it)
        loss = minimize_phase(state, dataset, config.t_min, config.lr, config.batch, rng)
        tel.iterations.append(IterationStats(it, loss, float(np.mean(cost)), len(dataset)))
    tel.final_dataset_size = len(dataset)
    if return_dataset:
        return state, tel, dataset
    return state, tel


@dataclass
class Member:
    rho: float
    gamma: float
    state: ModelState
    telemetry: Telemetry


@dataclass
class Ensemble:
    members: list

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i):
        return self.members[i]

    @property
    def rhos(self):
        return [m.rho for m in self.members]


def train_ensemble(data, config: TrainConfig, kind: str = CNN, model_config=None,
                   workers: int = 1, normalize: bool = True) -> Ensemble:
    """One member per rho, seeded ``config.seed + index``; order follows ``rho_grid``."""
    data = _stack(data)

    def run(i_rho):
        i, rho = i_rho
        state, tel = train_one(config.seed + i, data, rho, config, kind, model_config,
                               normalize=normalize)
        return Member(rho, config.gamma_of_rho(rho), state, tel)

    jobs = list(enumerate(config.rho_grid))
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            members = list(pool.map(run, jobs))
    else:
        members = [run(j) for j in jobs]
    return Ensemble(members)


def erm_config(config: TrainConfig, steps_per_epoch: int) -> TrainConfig:
    """A ``k = 0`` config whose warm-up covers the same number of SGD steps as ``config``."""
    extra = math.ceil(config.k * config.t_min / max(steps_per_epoch, 1))
    return replace(config, k=0, epochs_warmup=config.epochs_warmup + extra)
