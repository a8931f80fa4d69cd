"""CNN and LSTM fall classifiers built on :mod:`csi_ada.diff_core`.

Both expose ``(logits, embedding)`` where the embedding is the activation
fed to the final dense layer. Parameters are split into ``embed_params``
(everything before the classifier) and ``classifier_params`` (the final
dense layer only), which is the split the transport cost relies on.

Samples larger than a model's input profile are block-averaged down to it
(e.g. 500x60 -> 10x6 for the reduced test profile), inside the graph, so
input gradients still reach the original 500x60 sample.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diff_core as dc
from .diff_core import ShapeMismatch, Tensor

CNN = "cnn"
LSTM = "lstm"


@dataclass(frozen=True)
class CnnConfig:
    input_shape: tuple = (500, 60)
    conv1_maps: int = 64
    conv2_maps: int = 128
    kernel: int = 5
    fc1_width: int = 256
    n_classes: int = 2

    @classmethod
    def reduced(cls, **overrides) -> "CnnConfig":
        return cls(**{"input_shape": (10, 6), "fc1_width": 8, **overrides})

    @property
    def pooled_shape(self) -> tuple:
        r, c = self.input_shape
        return (r // 2) // 2, (c // 2) // 2

    @property
    def embedding_dim(self) -> int:
        return self.fc1_width


@dataclass(frozen=True)
class LstmConfig:
    input_shape: tuple = (500, 60)  # (time steps, features per step)
    hidden: int = 200
    n_classes: int = 2

    @classmethod
    def reduced(cls, **overrides) -> "LstmConfig":
        return cls(**{"input_shape": (10, 6), "hidden": 8, **overrides})

    @property
    def embedding_dim(self) -> int:
        return self.hidden


@dataclass
class ModelState:
    kind: str
    config: object
    embed_params: dict = field(default_factory=dict)
    classifier_params: dict = field(default_factory=dict)
    seed: int = 0
    # fixed input standardization, fitted on source data; not trained
    input_mean: float = 0.0
    input_std: float = 1.0

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        return ([(f"embed/{k}", v) for k, v in self.embed_params.items()]
                + [(f"classifier/{k}", v) for k, v in self.classifier_params.items()])

    def param_count(self, group: str | None = None) -> int:
        groups = {"embed": self.embed_params, "classifier": self.classifier_params}
        chosen = groups.values() if group is None else [groups[group]]
        return sum(v.size for g in chosen for v in g.values())

    def copy(self) -> "ModelState":
        return ModelState(self.kind, self.config,
                          {k: v.copy() for k, v in self.embed_params.items()},
                          {k: v.copy() for k, v in self.classifier_params.items()},
                          self.seed, self.input_mean, self.input_std)


@dataclass
class Forward:
    logits: Tensor
    embedding: Tensor
    params: dict  # name -> Tensor, as used in the graph


def _glorot(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform(-a, a, size=shape)).astype(np.float32)


def init_params(kind: str, config=None, seed: int = 0) -> ModelState:
    """Glorot-uniform weights, zero biases (LSTM forget-gate bias 1.0); deterministic in ``seed``."""
    rng = np.random.Generator(np.random.Philox(int(seed)))
    if kind == CNN:
        cfg = config or CnnConfig()
        k = cfg.kernel
        pr, pc = cfg.pooled_shape
        if pr < 1 or pc < 1:
            raise ShapeMismatch(f"input {cfg.input_shape} too small for two 2x2 pools")
        flat = pr * pc * cfg.conv2_maps
        embed = {
            "conv1.w": _glorot(rng, (k, k, 1, cfg.conv1_maps), k * k, k * k * cfg.conv1_maps),
            "conv1.b": np.zeros(cfg.conv1_maps, np.float32),
            "conv2.w": _glorot(rng, (k, k, cfg.conv1_maps, cfg.conv2_maps),
                               k * k * cfg.conv1_maps, k * k * cfg.conv2_maps),
            "conv2.b": np.zeros(cfg.conv2_maps, np.float32),
            "fc1.w": _glorot(rng, (flat, cfg.fc1_width), flat, cfg.fc1_width),
            "fc1.b": np.zeros(cfg.fc1_width, np.float32),
        }
        clf = {
            "fc2.w": _glorot(rng, (cfg.fc1_width, cfg.n_classes), cfg.fc1_width, cfg.n_classes),
            "fc2.b": np.zeros(cfg.n_classes, np.float32),
        }
    elif kind == LSTM:
        cfg = config or LstmConfig()
        f, h = cfg.input_shape[1], cfg.hidden
        bias = np.zeros(4 * h, np.float32)
        bias[h:2 * h] = 1.0
        embed = {
            "lstm.w_x": _glorot(rng, (f, 4 * h), f, 4 * h),
            "lstm.w_h": _glorot(rng, (h, 4 * h), h, 4 * h),
            "lstm.b": bias,
        }
        clf = {
            "out.w": _glorot(rng, (h, cfg.n_classes), h, cfg.n_classes),
            "out.b": np.zeros(cfg.n_classes, np.float32),
        }
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return ModelState(kind, cfg, embed, clf, int(seed))


def _prepare_input(state: ModelState, x, graph) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    if x.values.ndim not in (2, 3):
        raise ShapeMismatch(f"expected a (rows, cols) sample or a batch of them, got {x.shape}")
    rows, cols = x.shape[-2:]
    ir, ic = state.config.input_shape
    if rows % ir or cols % ic:
        raise ShapeMismatch(f"sample {rows}x{cols} cannot be reduced to model input {ir}x{ic}")
    if not np.isfinite(x.values).all():
        raise ValueError("sample contains NaN/Inf")
    x = dc.block_mean(x, (rows // ir, cols // ic), graph)
    if state.input_mean != 0.0 or state.input_std != 1.0:
        x = dc.affine(x, 1.0 / state.input_std, -state.input_mean / state.input_std, graph)
    return x, x.values.ndim == 2


def reduce_input(state: ModelState, xs) -> np.ndarray:
    """Block-average samples down to the model's input profile (no standardization)."""
    xs = np.asarray(xs, dtype=np.float32)
    rows, cols = xs.shape[-2:]
    ir, ic = state.config.input_shape
    return dc.block_mean(Tensor(xs), (rows // ir, cols // ic)).values


def fit_input_norm(state: ModelState, xs) -> ModelState:
    """Set the input standardization from the global mean/std of the reduced source inputs."""
    red = reduce_input(state, xs).astype(np.float64)
    state.input_mean = float(np.float32(red.mean()))
    std = float(np.float32(red.std()))
    state.input_std = std if std > 0 else 1.0
    return state


def _param_tensors(state: ModelState, track: bool, dtype) -> dict:
    return {name: Tensor(v, requires_grad=track, dtype=dtype, name=name)
            for name, v in state.named_params()}


def cnn_forward(state: ModelState, x, graph=None, track_params: bool = False) -> Forward:
    if state.kind != CNN:
        raise ValueError("cnn_forward needs a CNN state")
    x, single = _prepare_input(state, x, graph)
    p = _param_tensors(state, track_params, x.dtype)
    n = 1 if single else x.shape[0]
    r, c = state.config.input_shape
    a = dc.reshape(x, (n, r, c, 1), graph)
    a = dc.relu(dc.conv2d(a, p["embed/conv1.w"], p["embed/conv1.b"], "same", graph), graph)
    a = dc.maxpool2d(a, graph=graph)
    a = dc.relu(dc.conv2d(a, p["embed/conv2.w"], p["embed/conv2.b"], "same", graph), graph)
    a = dc.maxpool2d(a, graph=graph)
    a = dc.reshape(a, (n, -1), graph)
    z = dc.relu(dc.dense(a, p["embed/fc1.w"], p["embed/fc1.b"], graph), graph)
    logits = dc.dense(z, p["classifier/fc2.w"], p["classifier/fc2.b"], graph)
    if single:
        z = dc.reshape(z, z.shape[1:], graph)
        logits = dc.reshape(logits, logits.shape[1:], graph)
    return Forward(logits, z, p)


def lstm_forward(state: ModelState, x, graph=None, track_params: bool = False) -> Forward:
    if state.kind != LSTM:
        raise ValueError("lstm_forward needs an LSTM state")
    x, single = _prepare_input(state, x, graph)
    p = _param_tensors(state, track_params, x.dtype)
    hid = state.config.hidden
    lead = () if single else (x.shape[0],)
    h = Tensor(np.zeros(lead + (hid,), x.dtype))
    c = Tensor(np.zeros(lead + (hid,), x.dtype))
    for x_t in dc.unstack(x, -2, graph):
        h, c = dc.lstm_cell(x_t, h, c, p["embed/lstm.w_x"], p["embed/lstm.w_h"], p["embed/lstm.b"], graph)
    logits = dc.dense(h, p["classifier/out.w"], p["classifier/out.b"], graph)
    return Forward(logits, h, p)


def forward(state: ModelState, x, graph=None, track_params: bool = False) -> Forward:
    fn = cnn_forward if state.kind == CNN else lstm_forward
    return fn(state, x, graph, track_params)


def embed(state: ModelState, x, graph=None) -> Tensor:
    """The embedding ``g(theta_f; x)`` fed to the classifier."""
    return forward(state, x, graph).embedding


def predict_logits(state: ModelState, xs, chunk: int = 64) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float32)
    if xs.ndim == 2:
        return forward(state, xs).logits.values
    return np.concatenate([forward(state, xs[i:i + chunk]).logits.values
                           for i in range(0, len(xs), chunk)]) if len(xs) else np.zeros((0, 2), np.float32)


def predict(state: ModelState, xs) -> np.ndarray:
    """Argmax class per sample; ties go to class 0."""
    return np.argmax(predict_logits(state, xs), axis=-1)


# --- checkpoints -------------------------------------------------------------------


def _config_to_json(config) -> dict:
    d = asdict(config)
    d["input_shape"] = list(d["input_shape"])
    return d


def save_model(state: ModelState, path) -> None:
    """Write ``<path>`` (ADAW tensors) and ``<path>.json`` (kind, config, seed)."""
    path = Path(path)
    path.write_bytes(dc.encode_tensors(state.named_params()))
    meta = {"kind": state.kind, "config": _config_to_json(state.config), "seed": state.seed,
            "input_mean": state.input_mean, "input_std": state.input_std}
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path) -> ModelState:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    cfg_d = dict(meta["config"])
    cfg_d["input_shape"] = tuple(cfg_d["input_shape"])
    cfg = (CnnConfig if meta["kind"] == CNN else LstmConfig)(**cfg_d)
    state = ModelState(meta["kind"], cfg, seed=meta["seed"],
                       input_mean=meta.get("input_mean", 0.0), input_std=meta.get("input_std", 1.0))
    for name, arr in dc.decode_tensors(path.read_bytes()):
        group, _, key = name.partition("/")
        target = state.embed_params if group == "embed" else state.classifier_params
        target[key] = arr
    return state
