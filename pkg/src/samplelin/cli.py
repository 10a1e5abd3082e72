"""Command-line entry point ``samplelin``."""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import SampleLinError, SchemaError
from .experiments import ExperimentConfig, run_experiment
from .io import read_csv, write_csv
from .linlap import eval_metrics
from .plotdata import emit_plotdata

__all__ = ["main", "build_parser"]

# subcommand -> experiment kind
KIND = {"gen-data": "gen-data", "exact": "exact", "sample": "sample-fidelity", "em": "em-compare",
        "dual-em": "dual-demo", "linlap-demo": "linlap-demo"}

# flag dest -> (section, key)
OVERRIDES = {
    "instance": ("experiment", "instance"),
    "n": ("problem", "n"), "m": ("problem", "m"), "dim": ("problem", "dim"),
    "problem_kind": ("problem", "kind"), "alpha_true": ("problem", "alpha_true"),
    "noise_precision": ("problem", "noise_precision"), "conditioning": ("problem", "conditioning"),
    "density": ("problem", "density"),
    "k": ("method", "k"), "em_steps": ("method", "em_steps"), "alpha0": ("method", "alpha0"),
    "variant": ("method", "variant"), "gprior": ("method", "gprior"), "task": ("method", "task"),
    "mc_draws": ("method", "mc_draws"),
    "prior_variant": ("prior", "variant"), "layer_sizes": ("prior", "layer_sizes"),
    "lr": ("sgd", "lr"), "epochs": ("sgd", "epochs"), "batch_size": ("sgd", "batch_size"),
    "pcg_tol": ("pcg", "tol"), "pcg_max_iter": ("pcg", "max_iter"), "rank": ("precond", "rank"),
}


def _common(p):
    p.add_argument("--config", type=Path, help="INI experiment config")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samplelin", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic problem instance")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--kind", dest="problem_kind", choices=["identity", "dense", "correlated", "inverse"])
    p.add_argument("--alpha-true", type=float)
    p.add_argument("--noise-precision", type=float)
    p.add_argument("--conditioning", type=float)
    p.add_argument("--density", type=float)

    p = sub.add_parser("exact", help="exact posterior and exact EM on an instance")
    _common(p)
    p.add_argument("--instance", type=Path)
    p.add_argument("--alpha0", type=float)

    p = sub.add_parser("sample", help="sample fidelity of both losses against exact samples")
    _common(p)
    p.add_argument("--instance", type=Path)
    p.add_argument("--k", type=int)
    p.add_argument("--alpha0", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mc-draws", type=int)

    p = sub.add_parser("em", help="exact versus sampled EM")
    _common(p)
    p.add_argument("--instance", type=Path)
    p.add_argument("--k", type=int)
    p.add_argument("--em-steps", type=int)
    p.add_argument("--alpha0", type=float)
    p.add_argument("--variant", choices=["L", "Lprime"])
    p.add_argument("--gprior", action="store_const", const="true")
    p.add_argument("--prior-variant", choices=["isotropic", "layerwise"])
    p.add_argument("--layer-sizes")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("dual-em", help="EM with kernelised Matheron samples")
    _common(p)
    p.add_argument("--instance", type=Path)
    p.add_argument("--k", type=int)
    p.add_argument("--em-steps", type=int)
    p.add_argument("--alpha0", type=float)
    p.add_argument("--gprior", action="store_const", const="true")
    p.add_argument("--pcg-tol", type=float)
    p.add_argument("--pcg-max-iter", type=int)
    p.add_argument("--rank", type=int)

    p = sub.add_parser("linlap-demo", help="linearised-Laplace toy demo")
    _common(p)
    p.add_argument("--task", choices=["regression", "classification"])
    p.add_argument("--k", type=int)
    p.add_argument("--em-steps", type=int)
    p.add_argument("--alpha0", type=float)

    p = sub.add_parser("eval", help="sym. KL and logit W2 between two predictions")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--pred-a", type=Path, required=True, help="CSV with columns p_1..p_m")
    p.add_argument("--pred-b", type=Path, required=True)
    p.add_argument("--logits-a", type=Path, help="CSV with columns item,sample,l_1..l_m")
    p.add_argument("--logits-b", type=Path)

    p = sub.add_parser("plotdata", help="convert output CSVs to gnuplot series")
    p.add_argument("inputs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _config(args) -> ExperimentConfig:
    sections: dict = {}
    if args.config is not None:
        cp = configparser.ConfigParser()
        with open(args.config) as fh:
            cp.read_file(fh)
        sections = {s: dict(cp[s]) for s in cp.sections()}
    for dest, (sec, key) in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            sections.setdefault(sec, {})[key] = str(value)
    sections.setdefault("experiment", {})["kind"] = KIND[args.command]
    return ExperimentConfig.from_mapping(sections, seed=args.seed)


def _read_probs(path) -> np.ndarray:
    header, rows = read_csv(path)
    if list(header) != [f"p_{i + 1}" for i in range(len(header))]:
        raise SchemaError(f"{path}: expected columns p_1..p_m")
    return np.array([[float(v) for v in r] for r in rows])


def _read_logits(path) -> np.ndarray:
    header, rows = read_csv(path)
    if list(header[:2]) != ["item", "sample"] or list(header[2:]) != [f"l_{i + 1}" for i in range(len(header) - 2)]:
        raise SchemaError(f"{path}: expected columns item,sample,l_1..l_m")
    items = sorted({int(r[0]) for r in rows})
    by_item = {i: [] for i in items}
    for r in rows:
        by_item[int(r[0])].append([float(v) for v in r[2:]])
    counts = {len(v) for v in by_item.values()}
    if len(counts) > 1:
        raise SchemaError(f"{path}: items have different sample counts")
    return np.array([by_item[i] for i in items])


def _eval(args) -> int:
    pa, pb = _read_probs(args.pred_a), _read_probs(args.pred_b)
    if pa.shape != pb.shape:
        raise SchemaError("prediction files have different shapes")
    la = lb = None
    if args.logits_a is not None and args.logits_b is not None:
        la, lb = _read_logits(args.logits_a), _read_logits(args.logits_b)
    metrics = eval_metrics(pa, pb, la, lb)
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(args.out / "metrics.csv", ("metric", "value"), sorted(metrics.items()))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "eval":
            return _eval(args)
        if args.command == "plotdata":
            emit_plotdata(args.inputs, args.out)
            return 0
        manifest = run_experiment(_config(args), args.out)
    except (SampleLinError, OSError, configparser.Error, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    if not manifest["valid"]:
        print(json.dumps({"error": "ValidityCheckFailed", "message": "see run.json",
                          "degraded": manifest["degraded"]}), file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
