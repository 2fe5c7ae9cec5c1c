"""Command-line entry point: ``dcbrs run | gen | report``.

Exit codes: 0 success, 1 configuration error, 2 runtime/numeric failure,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .harness import (RunConfig, export_report, format_table, load_report, merge_reports,
                      prepare_run, run_experiment)
from .samplers import ConfigurationError
from .seeding import run_seed
from .streams import write_idx

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3

_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_DEFAULTS = RunConfig()


def _convert(name: str, text: str):
    default = getattr(_DEFAULTS, name)
    text = text.strip()
    if name in ("data_dir", "synthetic_spec"):
        return text or None
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{name}: expected a boolean, got {text!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if name == "retention":
            return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigurationError(f"{name}: {exc}") from None
    if name == "policies":
        return tuple(v for v in text.replace(",", " ").split())
    return text


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Keys are RunConfig fields."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            key, sep, value = line.partition(":")
        key = key.strip().replace("-", "_")
        if not sep or key not in _FIELDS:
            raise ConfigurationError(f"{path}:{lineno}: cannot parse {line!r}")
        out[key] = _convert(key, value)
    return out


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file supplying defaults")
    p.add_argument("--policy", dest="policies", action="append",
                   help="reservoir, cbrs, dcbrs, dcbrs-oracle or dcbrs-kmeans "
                        "(repeat or comma-separate; default all three)")
    for name in _FIELDS:
        if name == "policies":
            continue
        flag = "--" + name.replace("_", "-")
        p.add_argument(flag, dest=name, default=None, metavar=name.upper(),
                       help=f"default: {getattr(_DEFAULTS, name)!r}")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    for name in _FIELDS:
        raw = getattr(args, name, None)
        if raw is None:
            continue
        if name == "policies":
            values[name] = tuple(v for item in raw for v in item.replace(",", " ").split())
        else:
            values[name] = _convert(name, raw)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    print(f"# dataset={cfg.dataset} scenario={cfg.scenario} policies={','.join(cfg.policies)} "
          f"seed={cfg.seed} runs={cfg.runs} out={args.out}")
    report = run_experiment(cfg)
    print(format_table(report))
    if args.out:
        export_report(report, args.out, args.format)
    return EXIT_OK


def cmd_gen(args) -> int:
    """Materialize the retained/merged training set of one run plus its stream manifest."""
    cfg = config_from_args(args)
    seed = run_seed(cfg.seed, args.run)
    data, _, stream = prepare_run(cfg, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": cfg.to_dict(), "run": args.run, "run_seed": seed,
        "retention": {str(c): f for c, f in data.retention.per_class.items()},
        "merge_map": None if data.merge_map is None else {str(a): b for a, b in data.merge_map.items()},
        "class_sizes": {str(c): n for c, n in data.class_sizes().items()},
        "class_order": [int(c) for c in stream.class_order],
        "n_batches": len(stream), "n_instances": stream.n_instances,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    with open(out / "stream.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stream_id", "batch", "source_id", "label", "sub_label"])
        for b_idx, batch in enumerate(stream.batches):
            for inst in batch:
                w.writerow([inst.id, b_idx, int(stream.source_ids[inst.id]), inst.label,
                            "" if inst.sub_label is None else inst.sub_label])
    if data.dim == 784:
        pixels = (data.features * 255).round().astype("uint8").reshape(-1, 28, 28)
        write_idx(pixels, data.labels, out / "train-images-idx3-ubyte",
                  out / "train-labels-idx1-ubyte")
    print(f"wrote {out} ({stream.n_instances} instances, {len(stream)} batches)")
    return EXIT_OK


def cmd_report(args) -> int:
    report = merge_reports([load_report(p) for p in args.inputs])
    print(format_table(report))
    if args.out:
        export_report(report, args.out, args.format)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcbrs", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment and export its report")
    _add_config_flags(p)
    p.add_argument("--out", help="report path (.json or .csv)")
    p.add_argument("--format", choices=("json", "csv"))
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen", help="materialize a run's dataset and stream manifest")
    _add_config_flags(p)
    p.add_argument("--run", type=int, default=0, help="run index (default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("report", help="merge JSON reports, re-aggregate and export")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out")
    p.add_argument("--format", choices=("json", "csv"))
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
