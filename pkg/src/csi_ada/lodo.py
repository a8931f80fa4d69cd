"""Leave-one-domain-out splitting, metrics, and ensemble selection."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .models import predict
from .synth import DOMAIN_NAMES, domain_id_for

VAL_FRACTION = 0.1

# published accuracies (%) for one holdout arrangement, kept as reference metadata only
REFERENCE_ACCURACY = {
    "cnn": {0.001: 64.12, 0.01: 62.45, 0.1: 59.41, 1.0: 56.60, 4.0: 41.51},
    "lstm": {0.001: 40.20, 0.01: 40.81, 0.1: 51.72, 1.0: 63.15, 4.0: 66.03},
    "vada": 52.7,
}


class UnknownDomain(KeyError):
    pass


class SingleDomain(ValueError):
    pass


class EmptySet(ValueError):
    pass


class EmptyEnsemble(ValueError):
    pass


@dataclass
class LodoSplit:
    train: list
    validation: list
    test: list
    holdout_id: int

    @property
    def train_domains(self) -> set:
        return {s.domain_id for s in self.train} | {s.domain_id for s in self.validation}

    @property
    def test_domains(self) -> set:
        return {s.domain_id for s in self.test}


def domain_label(domain_id: int) -> str:
    return DOMAIN_NAMES[domain_id] if domain_id < len(DOMAIN_NAMES) else str(domain_id)


def lodo_split(samples, holdout, seed: int = 0, val_fraction: float = VAL_FRACTION) -> LodoSplit:
    """Hold out one domain for testing and carve a stratified validation set from the rest.

    Validation takes ``round(val_fraction * n)`` samples of every
    (domain, label) group, but at least one from any group of two or more,
    so each training domain keeps both training and validation examples.
    """
    samples = list(samples)
    domains = sorted({s.domain_id for s in samples})
    if len(domains) < 2:
        raise SingleDomain(f"need at least 2 domains, found {domains}")
    try:
        holdout_id = domain_id_for(holdout)
    except KeyError as exc:
        raise UnknownDomain(str(exc)) from None
    if holdout_id not in domains:
        raise UnknownDomain(f"holdout domain {holdout!r} not present in the data")
    if not 0 <= val_fraction < 1:
        raise ValueError(f"val_fraction must lie in [0, 1), got {val_fraction}")

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), holdout_id])))
    in_val = np.zeros(len(samples), dtype=bool)
    for d in domains:
        if d == holdout_id:
            continue
        for label in (0, 1):
            group = [i for i, s in enumerate(samples) if s.domain_id == d and s.label == label]
            n_val = int(round(val_fraction * len(group)))
            if val_fraction > 0 and len(group) >= 2:
                n_val = max(n_val, 1)
            n_val = min(n_val, len(group) - 1) if len(group) > 1 else 0
            if n_val:
                in_val[rng.choice(group, size=n_val, replace=False)] = True

    train, validation, test = [], [], []
    for i, s in enumerate(samples):
        if s.domain_id == holdout_id:
            test.append(s)
        elif in_val[i]:
            validation.append(s)
        else:
            train.append(s)
    return LodoSplit(train, validation, test, holdout_id)


# --- metrics ----------------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    precision: float
    false_alarm: float
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def metrics_from_predictions(pred, labels) -> Metrics:
    """Accuracy, precision, and false-alarm rate (FP / actual negatives) for fall = 1.

    Precision is 0 when nothing is predicted positive, and the false-alarm
    rate is 0 when there are no actual negatives.
    """
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise EmptySet("cannot evaluate on an empty sample set")
    tp = int(np.sum((pred == 1) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    return Metrics(
        accuracy=(tp + tn) / len(labels),
        precision=tp / (tp + fp) if tp + fp else 0.0,
        false_alarm=fp / (fp + tn) if fp + tn else 0.0,
        tp=tp, tn=tn, fp=fp, fn=fn,
    )


def _xy(samples):
    samples = list(samples)
    if not samples:
        raise EmptySet("cannot evaluate on an empty sample set")
    return (np.stack([s.data for s in samples]).astype(np.float32),
            np.array([s.label for s in samples], dtype=np.int64))


def evaluate(state, samples) -> Metrics:
    xs, ys = _xy(samples)
    return metrics_from_predictions(predict(state, xs), ys)


def _states(ensemble):
    members = list(ensemble)
    if not members:
        raise EmptyEnsemble("ensemble has no members")
    return [getattr(m, "state", m) for m in members]


def select_by_accuracy(accuracies) -> int:
    """Index of the highest accuracy; the first one wins ties."""
    acc = list(accuracies)
    if not acc:
        raise EmptyEnsemble("ensemble has no members")
    return int(np.argmax(acc))


def select_model(ensemble, validation) -> int:
    """Member with the best validation accuracy (smallest rho index on ties)."""
    states = _states(ensemble)
    return select_by_accuracy([evaluate(s, validation).accuracy for s in states])


def vote(predictions) -> np.ndarray:
    """Majority over rows of a (members, samples) label matrix; ties go to class 0."""
    p = np.asarray(predictions, dtype=np.int64)
    if p.ndim == 1:
        p = p[:, None]
    if len(p) == 0:
        raise EmptyEnsemble("ensemble has no members")
    ones = p.sum(axis=0)
    return (2 * ones > len(p)).astype(np.int64)


def ensemble_vote(ensemble, sample) -> int:
    """Majority label over the members for a single sample."""
    states = _states(ensemble)
    x = np.asarray(getattr(sample, "data", sample), dtype=np.float32)
    return int(vote([[int(predict(s, x))] for s in states])[0])


# --- report -----------------------------------------------------------------------


@dataclass
class ModelRow:
    name: str
    rho: float
    gamma: float
    val_accuracy: float
    test: Metrics
    reference_accuracy: float | None = None


@dataclass
class EvalReport:
    kind: str
    holdout_id: int
    n_train: int
    n_validation: int
    n_test: int
    rows: list = field(default_factory=list)
    selected: int = 0
    vote: Metrics | None = None

    COLUMNS = ("model", "rho", "gamma", "val_acc", "accuracy", "precision", "false_alarm",
               "tp", "tn", "fp", "fn", "reference_acc")

    def _line(self, name, rho, gamma, val, m: Metrics, ref) -> str:
        fmt = lambda v: "" if v is None else f"{v:.6f}"
        return "\t".join([name, fmt(rho), fmt(gamma), fmt(val), fmt(m.accuracy), fmt(m.precision),
                          fmt(m.false_alarm), str(m.tp), str(m.tn), str(m.fp), str(m.fn),
                          "" if ref is None else f"{ref:.2f}"])

    def to_tsv(self) -> str:
        head = [f"# kind={self.kind} holdout={domain_label(self.holdout_id)} "
                f"train={self.n_train} validation={self.n_validation} test={self.n_test}",
                "\t".join(self.COLUMNS)]
        body = [self._line(r.name, r.rho, r.gamma, r.val_accuracy, r.test, r.reference_accuracy)
                for r in self.rows]
        sel = self.rows[self.selected]
        body.append(self._line(f"selected[{sel.name}]", sel.rho, sel.gamma, sel.val_accuracy, sel.test, None))
        if self.vote is not None:
            body.append(self._line("vote", None, None, None, self.vote, None))
        return "\n".join(head + body) + "\n"

    def to_jsonl(self) -> str:
        out = [json.dumps({"type": "meta", "kind": self.kind, "holdout_id": self.holdout_id,
                           "holdout": domain_label(self.holdout_id), "n_train": self.n_train,
                           "n_validation": self.n_validation, "n_test": self.n_test,
                           "selected": self.selected}, sort_keys=True)]
        for r in self.rows:
            d = {"type": "model", "name": r.name, "rho": r.rho, "gamma": r.gamma,
                 "val_accuracy": r.val_accuracy, "reference_accuracy": r.reference_accuracy,
                 **asdict(r.test)}
            out.append(json.dumps(d, sort_keys=True))
        if self.vote is not None:
            out.append(json.dumps({"type": "vote", **asdict(self.vote)}, sort_keys=True))
        return "\n".join(out) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "EvalReport":
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
        metric_keys = [f.name for f in fields(Metrics)]
        report, rows, vote_m = None, [], None
        for r in records:
            if r["type"] == "meta":
                report = cls(r["kind"], r["holdout_id"], r["n_train"], r["n_validation"], r["n_test"],
                             selected=r["selected"])
            elif r["type"] == "model":
                rows.append(ModelRow(r["name"], r["rho"], r["gamma"], r["val_accuracy"],
                                     Metrics(**{k: r[k] for k in metric_keys}), r["reference_accuracy"]))
            elif r["type"] == "vote":
                vote_m = Metrics(**{k: r[k] for k in metric_keys})
        if report is None:
            raise ValueError("report has no meta record")
        report.rows, report.vote = rows, vote_m
        return report


def build_report(ensemble, split: LodoSplit, kind: str, selected: int | None = None) -> EvalReport:
    """Evaluate every member on the held-out domain, pick one by validation, and vote.

    A given ``selected`` index overrides validation-based selection, for
    re-evaluating saved checkpoints without their validation data.
    """
    states = _states(ensemble)
    xt, yt = _xy(split.test)
    val_acc = ([evaluate(s, split.validation).accuracy for s in states]
               if split.validation else [0.0] * len(states))
    preds = [predict(s, xt) for s in states]
    rows = []
    for i, (m, p) in enumerate(zip(ensemble, preds)):
        rho = getattr(m, "rho", None)
        name = f"{kind}-ada[{rho:g}]" if rho is not None else f"{kind}[{i}]"
        rows.append(ModelRow(name, rho, getattr(m, "gamma", None), val_acc[i],
                             metrics_from_predictions(p, yt),
                             REFERENCE_ACCURACY.get(kind, {}).get(rho)))
    if selected is None:
        selected = select_by_accuracy(val_acc)
    return EvalReport(kind, split.holdout_id, len(split.train), len(split.validation), len(split.test),
                      rows, selected, metrics_from_predictions(vote(preds), yt))
