"""Command-line entry point.

Exit codes: 0 success, 1 validation or assertion failure (malformed data,
failed gradient check), 2 IO or configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import csi_ingest as ci
from .config import ConfigError
from .experiment import evaluate_checkpoints, format_report, render_figures, run_experiment
from .lodo import EvalReport, UnknownDomain
from .plotting import write_heatmap_ppm
from .synth import DOMAIN_NAMES, DomainParams, generate_dataset, generate_stream, sample_seed

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2


def _cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    domains = [DomainParams(d, gain=args.gain, noise_std=args.noise_std) for d in range(args.domains)]
    if args.format == "csiw":
        samples = generate_dataset(domains, args.per_domain, args.fall_fraction, args.seed)
        counters = {}
        for s in samples:
            i = counters.get(s.domain_id, 0)
            counters[s.domain_id] = i + 1
            ci.write_sample(out / f"d{s.domain_id:02d}_{i:04d}_l{s.label}.csiw", s)
        print(f"wrote {len(samples)} samples to {out}")
    else:
        n_fall = int(round(args.fall_fraction * args.per_domain))
        n = 0
        for p in domains:
            for i in range(args.per_domain):
                label = 1 if i < n_fall else 0
                stream = generate_stream(p, label, args.duration, sample_seed(args.seed, p.domain_id, i))
                (out / f"d{p.domain_id:02d}_{i:04d}_l{label}.csir").write_bytes(ci.encode_record_stream(stream))
                n += 1
        print(f"wrote {n} streams to {out}")
    return EXIT_OK


def _cmd_ingest(args) -> int:
    src = Path(args.input)
    records = ci.parse_record_stream(src.read_bytes())
    samples = ci.records_to_samples(records, args.label, args.domain_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        ci.write_sample(out / f"{src.stem}_w{i:03d}.csiw", s)
    print(f"{src.name}: {len(records)} records -> {len(samples)} samples")
    return EXIT_OK


def _cmd_train(args) -> int:
    report = run_experiment(args.config, args.out)
    print(format_report(report), end="")
    return EXIT_OK


def _cmd_eval(args) -> int:
    report = evaluate_checkpoints(args.checkpoint_dir, args.data, args.out)
    print(format_report(report), end="")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(tuple(range(args.seeds)))
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID


def _cmd_report(args) -> int:
    if args.report_dir is None and args.sample is None:
        raise ConfigError("report needs a report directory and/or --sample")
    if args.report_dir is not None:
        rdir = Path(args.report_dir)
        report = EvalReport.from_jsonl((rdir / "report.jsonl").read_text())
        print(format_report(report), end="")
        if not args.no_figures:
            for p in render_figures(rdir, report):
                print(f"figure: {p}")
    if args.sample is not None:
        sample = ci.read_sample(args.sample)
        image = Path(args.image) if args.image else Path(args.sample).with_suffix(".ppm")
        write_heatmap_ppm(sample.data, image)
        print(f"heatmap: {image}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csi-ada", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic CSIW samples or CSIR streams")
    p.add_argument("--domains", type=int, default=len(DOMAIN_NAMES))
    p.add_argument("--per-domain", type=int, default=20)
    p.add_argument("--fall-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gain", type=float, default=1.0)
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--format", choices=("csiw", "csir"), default="csiw")
    p.add_argument("--duration", type=float, default=float(ci.WINDOW_SECONDS),
                   help="stream length in seconds (csir only)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("ingest", help="convert a CSIR stream into CSIW samples")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", type=int, required=True, choices=(0, 1))
    p.add_argument("--domain-id", type=int, required=True)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("train", help="run a leave-one-domain-out experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate saved checkpoints on a sample directory")
    p.add_argument("--checkpoint-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("report", help="print a report, redraw its figures, or draw a sample heatmap")
    p.add_argument("report_dir", nargs="?")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--sample", help="CSIW file to render as a PPM heatmap")
    p.add_argument("--image", help="heatmap output path (default: sample path with .ppm)")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ConfigError, UnknownDomain) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
