"""End-to-end leave-one-domain-out runs and their on-disk artifacts.

An output directory holds::

    report.tsv / report.jsonl      evaluation table, tab-separated and line-delimited JSON
    telemetry/member<i>.tsv         per-iteration training telemetry
    checkpoints/member<i>.adaw      parameters (+ .json sidecar), members.json with rho/gamma/selection
    figures/accuracy.png            held-out and validation accuracy per member
    figures/training.png            loss and transport cost curves

The report files are written last, each via a temporary file and a rename,
so a failed run never leaves a report behind.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .ada import Ensemble, Member, Telemetry, train_ensemble
from .config import ExperimentConfig, load_config
from .csi_ingest import read_sample
from .lodo import EvalReport, LodoSplit, build_report, lodo_split
from .models import load_model, save_model
from .plotting import accuracy_figure, training_figure
from .synth import generate_dataset


class DataError(OSError):
    pass


def _atomic_write(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def load_samples(data_dir) -> list:
    """Every ``*.csiw`` file in ``data_dir``, in file-name order."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"sample directory not found: {data_dir}")
    files = sorted(data_dir.glob("*.csiw"))
    if not files:
        raise DataError(f"no .csiw samples in {data_dir}")
    return [read_sample(f) for f in files]


def experiment_samples(cfg: ExperimentConfig) -> list:
    if cfg.data_dir is not None:
        return load_samples(cfg.data_dir)
    return generate_dataset(cfg.domains(), cfg.synth_per_domain, cfg.synth_fall_fraction, cfg.synth_seed)


def _xy(samples):
    return (np.stack([s.data for s in samples]).astype(np.float32),
            np.array([s.label for s in samples], dtype=np.int64))


def train_split(cfg: ExperimentConfig, split: LodoSplit) -> Ensemble:
    return train_ensemble(_xy(split.train), cfg.train, cfg.model, cfg.model_config(),
                          workers=cfg.workers, normalize=cfg.normalize)


# --- artifacts --------------------------------------------------------------------


def save_ensemble(ensemble: Ensemble, ckpt_dir, selected: int, holdout_id: int) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    members = []
    for i, m in enumerate(ensemble):
        name = f"member{i}.adaw"
        save_model(m.state, ckpt_dir / name)
        members.append({"file": name, "rho": m.rho, "gamma": m.gamma})
    index = {"members": members, "selected": selected, "holdout_id": holdout_id}
    (ckpt_dir / "members.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def load_ensemble(ckpt_dir) -> tuple[Ensemble, dict]:
    ckpt_dir = Path(ckpt_dir)
    index_path = ckpt_dir / "members.json"
    if not index_path.is_file():
        raise DataError(f"no members.json in {ckpt_dir}")
    index = json.loads(index_path.read_text())
    members = [Member(e["rho"], e["gamma"], load_model(ckpt_dir / e["file"]), Telemetry(e["rho"], e["gamma"]))
               for e in index["members"]]
    return Ensemble(members), index


def read_telemetry(path) -> tuple[list, list]:
    """Per-iteration (losses, transport costs) from a telemetry TSV, warm-up rows skipped."""
    losses, costs = [], []
    for line in Path(path).read_text().splitlines()[1:]:
        cols = line.split("\t")
        if cols[0].startswith("warmup"):
            continue
        losses.append(float(cols[1]))
        costs.append(float(cols[2]))
    return losses, costs


def render_figures(out_dir, report: EvalReport) -> list[Path]:
    """Draw the accuracy and training figures from a report and its telemetry files."""
    out_dir = Path(out_dir)
    fig_dir = out_dir / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    rows = [(f"{r.rho:g}" if r.rho is not None else r.name, r.val_accuracy, r.test.accuracy)
            for r in report.rows]
    paths = [accuracy_figure(rows, report.selected, report.vote.accuracy if report.vote else None,
                             fig_dir / "accuracy.png")]
    curves = []
    for i, r in enumerate(report.rows):
        tpath = out_dir / "telemetry" / f"member{i}.tsv"
        if tpath.is_file():
            losses, costs = read_telemetry(tpath)
            curves.append((f"rho={r.rho:g}", losses, costs))
    if curves:
        paths.append(training_figure(curves, fig_dir / "training.png"))
    return paths


def write_outputs(out_dir, ensemble: Ensemble, report: EvalReport) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tel_dir = out_dir / "telemetry"
    tel_dir.mkdir(exist_ok=True)
    for i, m in enumerate(ensemble):
        if m.telemetry.iterations or m.telemetry.warmup_losses:
            (tel_dir / f"member{i}.tsv").write_text(m.telemetry.to_tsv())
    save_ensemble(ensemble, out_dir / "checkpoints", report.selected, report.holdout_id)
    render_figures(out_dir, report)
    _atomic_write(out_dir / "report.tsv", report.to_tsv())
    _atomic_write(out_dir / "report.jsonl", report.to_jsonl())


def run_experiment(config_path, out_dir) -> EvalReport:
    """Load data, split, train one member per rho, evaluate, and write every artifact."""
    cfg = load_config(config_path)
    samples = experiment_samples(cfg)
    split = lodo_split(samples, cfg.holdout, seed=cfg.train.seed, val_fraction=cfg.val_fraction)
    ensemble = train_split(cfg, split)
    report = build_report(ensemble, split, cfg.model)
    write_outputs(out_dir, ensemble, report)
    return report


def evaluate_checkpoints(ckpt_dir, data_dir, out_dir) -> EvalReport:
    """Re-evaluate a saved ensemble on every sample in ``data_dir``."""
    ensemble, index = load_ensemble(ckpt_dir)
    samples = load_samples(data_dir)
    kind = ensemble[0].state.kind
    split = LodoSplit([], [], samples, int(index.get("holdout_id", samples[0].domain_id)))
    report = build_report(ensemble, split, kind, selected=int(index["selected"]))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    render_figures(out_dir, report)
    _atomic_write(out_dir / "report.tsv", report.to_tsv())
    _atomic_write(out_dir / "report.jsonl", report.to_jsonl())
    return report


def format_report(report: EvalReport) -> str:
    """The TSV report as an aligned plain-text table."""
    lines = report.to_tsv().splitlines()
    head, table = lines[0], [ln.split("\t") for ln in lines[1:]]
    widths = [max(len(row[c]) for row in table) for c in range(len(table[0]))]
    body = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    return "\n".join([head] + body) + "\n"
