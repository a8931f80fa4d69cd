"""Line-oriented ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored. Every key must be known;
anything else is a hard error. Recognized keys:

training (see :class:`csi_ada.ada.TrainConfig`)
    ``rho_grid`` (comma-separated), ``gamma_rule``, ``k``, ``t_adv``, ``eta_adv``,
    ``t_min``, ``lr``, ``batch``, ``epochs_warmup``, ``seed``, ``adv_growth``
model
    ``model`` (cnn | lstm), ``profile`` (full | reduced), ``fc1_width``, ``hidden``,
    ``normalize`` (true | false)
protocol
    ``holdout`` (domain name or id), ``val_fraction``, ``workers``
data, either a directory of CSIW samples
    ``data_dir``
or a synthetic dataset
    ``synth_domains``, ``synth_per_domain``, ``synth_fall_fraction``, ``synth_seed``,
    shared domain defaults ``gain``, ``noise_std``, ``burst_freq_hz``, ``smoothing``,
    and per-domain overrides ``domain.<id>.<field>``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .ada import TrainConfig
from .models import CNN, LSTM, CnnConfig, LstmConfig
from .synth import DomainParams

DOMAIN_FIELDS = ("gain", "noise_std", "burst_freq_hz", "smoothing")
_DOMAIN_KEY = re.compile(r"^domain\.(\d+)\.(\w+)$")


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


_TRAIN_TYPES = {
    "rho_grid": _floats, "gamma_rule": str, "k": int, "t_adv": int, "eta_adv": float,
    "t_min": int, "lr": float, "batch": int, "epochs_warmup": int, "seed": int, "adv_growth": float,
}

_OTHER_TYPES = {
    "model": str, "profile": str, "fc1_width": int, "hidden": int, "normalize": _bool,
    "holdout": str, "val_fraction": float, "workers": int, "data_dir": str,
    "synth_domains": int, "synth_per_domain": int, "synth_fall_fraction": float, "synth_seed": int,
    "gain": float, "noise_std": float, "burst_freq_hz": float, "smoothing": float,
}


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: str = CNN
    profile: str = "full"
    fc1_width: int | None = None
    hidden: int | None = None
    normalize: bool = True
    holdout: str = "lab_B"
    val_fraction: float = 0.1
    workers: int = 1
    data_dir: Path | None = None
    synth_domains: int = 10
    synth_per_domain: int = 20
    synth_fall_fraction: float = 0.5
    synth_seed: int = 0
    domain_defaults: dict = field(default_factory=dict)
    domain_overrides: dict = field(default_factory=dict)

    def model_config(self):
        base = CnnConfig if self.model == CNN else LstmConfig
        cfg = base.reduced() if self.profile == "reduced" else base()
        if self.model == CNN and self.fc1_width is not None:
            cfg = replace(cfg, fc1_width=self.fc1_width)
        if self.model == LSTM and self.hidden is not None:
            cfg = replace(cfg, hidden=self.hidden)
        return cfg

    def domains(self) -> list[DomainParams]:
        """Synthetic domain parameters, defaults first, then per-domain overrides."""
        out = []
        for d in range(self.synth_domains):
            kw = {**self.domain_defaults, **self.domain_overrides.get(d, {})}
            out.append(DomainParams(d, **kw))
        return out


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Parse config text; relative ``data_dir`` paths resolve against ``base_dir``."""
    train_kw, other = {}, {}
    defaults, overrides = {}, {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            if key in _TRAIN_TYPES:
                train_kw[key] = _TRAIN_TYPES[key](value)
            elif key in DOMAIN_FIELDS:
                defaults[key] = float(value)
            elif key in _OTHER_TYPES:
                other[key] = _OTHER_TYPES[key](value)
            elif m := _DOMAIN_KEY.match(key):
                d, fname = int(m.group(1)), m.group(2)
                if fname not in DOMAIN_FIELDS:
                    raise ConfigError(f"line {lineno}: unknown domain field {fname!r}")
                overrides.setdefault(d, {})[fname] = float(value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None

    try:
        train = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig(train=train, domain_defaults=defaults, domain_overrides=overrides)
    for f in fields(ExperimentConfig):
        if f.name in other:
            setattr(cfg, f.name, other[f.name])
    if cfg.data_dir is not None:
        path = Path(cfg.data_dir)
        cfg.data_dir = path if path.is_absolute() or base_dir is None else base_dir / path
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.model not in (CNN, LSTM):
        raise ConfigError(f"model must be 'cnn' or 'lstm', got {cfg.model!r}")
    if cfg.profile not in ("full", "reduced"):
        raise ConfigError(f"profile must be 'full' or 'reduced', got {cfg.profile!r}")
    if cfg.workers < 1:
        raise ConfigError("workers must be at least 1")
    if not 0 <= cfg.val_fraction < 1:
        raise ConfigError("val_fraction must lie in [0, 1)")
    if cfg.data_dir is None:
        if cfg.synth_domains < 2 or cfg.synth_per_domain < 1:
            raise ConfigError("synthetic data needs at least 2 domains and 1 sample per domain")
        if not 0 <= cfg.synth_fall_fraction <= 1:
            raise ConfigError("synth_fall_fraction must lie in [0, 1]")
        bad = [d for d in cfg.domain_overrides if d >= cfg.synth_domains]
        if bad:
            raise ConfigError(f"overrides for domains outside 0..{cfg.synth_domains - 1}: {bad}")
        try:
            cfg.domains()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    try:
        cfg.model_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)
