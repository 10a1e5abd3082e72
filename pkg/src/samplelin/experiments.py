"""Config-driven experiment runner.

A run is described by an INI file (see ``ExperimentConfig.from_ini``) and
writes its CSV outputs plus a ``run.json`` manifest to one directory.  All
randomness derives from the config's root seed, so a rerun reproduces every
file byte for byte.
"""

from __future__ import annotations

import configparser
import json
import platform
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import rng as rngmod
from .demo import run_linlap_demo
from .dual import DualEmConfig, run_dual_em
from .em import EmState, run_em
from .errors import ParameterError
from .io import load_instance, write_csv
from .linlap import probit_predict
from .model import PriorPrecision, apply_gprior, gprior_exact
from .oracle import (
    MAX_DENSE_DIM,
    EmTrace,
    dense_curvature,
    exact_em,
    exact_em_layerwise,
    exact_posterior,
    primal_sample,
    variance_gap_closed_form,
    variance_gap_datapoint_exact,
)
from .sampler import SgdConfig, draw_samples, grad_variance_gap, max_curvature, sgd_minimize
from .synthetic import SyntheticSpec, as_problem, gen_synthetic

__all__ = ["EXPERIMENT_KINDS", "ExperimentConfig", "run_experiment", "load_config"]

EXPERIMENT_KINDS = ("sample-fidelity", "em-compare", "dual-demo", "linlap-demo", "gen-data", "exact")

SAMPLE_ERROR_HEADER = ("variant", "step", "sample_error")
OPT_TRACE_HEADER = ("variant", "step", "sample_index", "objective", "sample_error")
EXACT_LAYER_HEADER = ("step", "layer", "alpha", "gamma", "theta_bar_sq_norm")


DESK_SGD = dict(lr=1.0, momentum=0.9, epochs=300, decay_factor=1.0, clip_norm=None)


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ParameterError(f"not a boolean: {v!r}")


def _opt(cast):
    def conv(v):
        return None if v is None or str(v).strip().lower() in ("", "none", "null") else cast(v)
    return conv


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs.

    INI layout (all keys optional except ``experiment.kind`` and a seed,
    which may come from ``--seed``)::

        [experiment]  kind, seed, instance
        [problem]     n, m, dim, kind, alpha_true, noise_precision,
                      conditioning, density
                      (default: the 2-point identity problem, or an
                      nm = 200 sparse inverse problem for dual-demo)
        [method]      variant, k, em_steps, alpha0, em_tol, gprior,
                      redraw, task, mc_draws
        [prior]       variant, layer_sizes (comma separated)
        [sgd]         lr, auto_lr, momentum, batch_size, epochs,
                      decay_factor, decay_fraction, clip_norm

    Without ``sgd.lr`` the step size is ``auto_lr / lambda_max(M + A)``
    (default ``auto_lr = 0.5``) and SGD runs 300 full-batch epochs without
    decay or clipping, which converges on desk-scale problems.
        [pcg]         tol, max_iter
        [precond]     rank, oversampling
    """

    kind: str
    seed: int
    problem: SyntheticSpec | None = None
    instance: str | None = None
    variant: str = "Lprime"
    k: int = 64
    em_steps: int = 8
    alpha0: float = 1.0
    em_tol: float = 1e-3
    gprior: bool = False
    redraw: bool | None = None
    task: str = "regression"
    mc_draws: int = 0
    prior_variant: str = "isotropic"
    layer_sizes: tuple = ()
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(**DESK_SGD))
    auto_lr: float | None = 0.5
    pcg_tol: float = 1e-3
    pcg_max_iter: int = 150
    precond_rank: int | None = None
    precond_oversampling: int = 10

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ParameterError(f"unknown experiment kind {self.kind!r}; expected one of {EXPERIMENT_KINDS}")
        if self.seed is None or int(self.seed) < 0:
            raise ParameterError("a non-negative seed is required")
        if self.k < 1 or self.em_steps < 0:
            raise ParameterError("k must be positive and em_steps non-negative")
        if self.variant not in ("L", "Lprime"):
            raise ParameterError(f"unknown loss variant {self.variant!r}")
        if self.prior_variant not in ("isotropic", "layerwise"):
            raise ParameterError(f"unknown prior variant {self.prior_variant!r}")
        if self.prior_variant == "layerwise" and not self.layer_sizes:
            raise ParameterError("layerwise prior needs prior.layer_sizes")

    _SECTIONS = {
        "experiment": {"kind": str, "seed": int, "instance": _opt(str)},
        "method": {"variant": str, "k": int, "em_steps": int, "alpha0": float, "em_tol": float,
                   "gprior": _bool, "redraw": _bool, "task": str, "mc_draws": int},
        "pcg": {"tol": ("pcg_tol", float), "max_iter": ("pcg_max_iter", int)},
        "precond": {"rank": ("precond_rank", _opt(int)), "oversampling": ("precond_oversampling", int)},
        "prior": {"variant": ("prior_variant", str),
                  "layer_sizes": ("layer_sizes", lambda v: tuple(int(x) for x in str(v).split(",") if x.strip()))},
    }
    _PROBLEM = {"n": int, "m": int, "dim": int, "kind": str, "alpha_true": float,
                "noise_precision": float, "conditioning": float, "density": float}
    _SGD = {"lr": float, "auto_lr": _opt(float), "momentum": float, "batch_size": _opt(int), "epochs": int,
            "decay_factor": float, "decay_fraction": float, "clip_norm": _opt(float)}

    @classmethod
    def from_mapping(cls, sections: dict, **overrides) -> "ExperimentConfig":
        """Build from ``{section: {key: value}}`` (strings allowed)."""
        kw = {}
        for sec, keys in cls._SECTIONS.items():
            for key, value in sections.get(sec, {}).items():
                if key not in keys:
                    raise ParameterError(f"unknown key {sec}.{key}")
                target = keys[key]
                name, conv = target if isinstance(target, tuple) else (key, target)
                kw[name] = conv(value)
        unknown = set(sections) - set(cls._SECTIONS) - {"problem", "sgd", "DEFAULT"}
        if unknown:
            raise ParameterError(f"unknown config sections {sorted(unknown)}")
        prob = cls._convert(sections.get("problem", {}), cls._PROBLEM, "problem")
        sgd = cls._convert(sections.get("sgd", {}), cls._SGD, "sgd")
        kw.update({k: v for k, v in overrides.items() if v is not None})
        if "seed" not in kw:
            raise ParameterError("a seed is required (experiment.seed or --seed)")
        if prob:
            if "n" not in prob:
                raise ParameterError("problem.n is required when a [problem] section is given")
            kw["problem"] = SyntheticSpec(**prob)
        auto = sgd.pop("auto_lr", None if "lr" in sgd else 0.5)
        kw["sgd"] = SgdConfig(**{**DESK_SGD, "seed": int(kw["seed"]), **sgd})
        kw["auto_lr"] = auto
        return cls(**kw)

    @staticmethod
    def _convert(values: dict, table: dict, sec: str) -> dict:
        out = {}
        for key, value in values.items():
            if key not in table:
                raise ParameterError(f"unknown key {sec}.{key}")
            out[key] = table[key](value)
        return out

    def problem_spec(self) -> SyntheticSpec:
        if self.problem is not None:
            return self.problem
        if self.kind == "dual-demo":
            return SyntheticSpec(n=200, m=1, dim=400, kind="inverse", alpha_true=1.0, noise_precision=100.0)
        return SyntheticSpec(n=2, m=1, dim=2, kind="identity")

    @classmethod
    def from_ini(cls, path, **overrides) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        with open(path) as fh:
            cp.read_file(fh)
        return cls.from_mapping({s: dict(cp[s]) for s in cp.sections()}, **overrides)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "problem":
                v = self.problem_spec()
            out[f.name] = asdict(v) if f.name in ("problem", "sgd") else (list(v) if isinstance(v, tuple) else v)
        return out


def load_config(path, **overrides) -> ExperimentConfig:
    return ExperimentConfig.from_ini(path, **overrides)


def _problem(cfg: ExperimentConfig):
    if cfg.instance:
        problem, _ = load_instance(cfg.instance)
        return problem
    return as_problem(cfg.problem_spec(), cfg.seed)


def _layers(cfg: ExperimentConfig, dim: int):
    layers = np.repeat(np.arange(len(cfg.layer_sizes)), cfg.layer_sizes)
    if layers.shape[0] != dim:
        raise ParameterError(f"layer sizes sum to {layers.shape[0]}, problem has {dim} parameters")
    return layers


def _em_rows(state: EmState):
    return list(state.trace_rows())


def _run_sample_fidelity(cfg, out, res):
    problem = _problem(cfg)
    op, B = problem.design, problem.noise
    A = PriorPrecision.isotropic_prior(cfg.alpha0, op.dim)
    samples = draw_samples(op, B, A, cfg.k, cfg.seed, with_noise=True)
    ref = primal_sample(op, B, A, samples.theta0, samples.eps)
    sgd = cfg.sgd
    if cfg.auto_lr is not None:
        sgd = replace(sgd, lr=cfg.auto_lr / max_curvature(op, B, A))
    opt_rows, err_rows = [], []
    for variant in ("L", "Lprime"):
        trace = []
        sgd_minimize(samples, sgd, variant, op, B, A, reference=ref, trace=trace)
        opt_rows += [(variant, *row) for row in trace]
        by_step = {}
        for step, _, _, err in trace:
            by_step.setdefault(step, []).append(err)
        err_rows += [(variant, step, float(np.mean(v))) for step, v in sorted(by_step.items())]
        res[f"final_sample_error_{variant}"] = err_rows[-1][2]
    write_csv(out / "opt_trace.csv", OPT_TRACE_HEADER, opt_rows)
    write_csv(out / "sample_error.csv", SAMPLE_ERROR_HEADER, err_rows)
    if cfg.mc_draws >= 2:
        M = dense_curvature(op, B)
        for at in ("init", "converged"):
            for form in ("datapoint", "batch"):
                g = rngmod.stream(cfg.seed, f"gap/{at}/{form}")
                gap = grad_variance_gap(op, B, A, cfg.mc_draws, g, at=at, form=form)
                res[f"variance_gap_{at}_{form}"] = [gap.estimate, gap.stderr]
            res[f"variance_gap_{at}_closed_form"] = variance_gap_closed_form(M, A, at)
        res["variance_gap_converged_datapoint_exact"] = variance_gap_datapoint_exact(op, B, A)
    return ["opt_trace.csv", "sample_error.csv"], all(np.isfinite(r[2]) for r in err_rows)


def _run_em_compare(cfg, out, res):
    problem = _problem(cfg)
    op, B = problem.design, problem.noise
    files = []
    layers = _layers(cfg, op.dim) if cfg.prior_variant == "layerwise" else None
    exact_op = op
    if cfg.gprior:
        exact_op = apply_gprior(op, gprior_exact(op, B))
    if op.dim <= MAX_DENSE_DIM:
        if layers is None:
            a_exact, trace = exact_em(exact_op, B, problem.Y, cfg.alpha0, tol=1e-6)
            write_csv(out / "em_exact.csv", EmTrace.HEADER, trace.rows())
            res["exact_alpha"] = a_exact
            res["exact_monotone"] = trace.monotone
        else:
            a_exact, trace = exact_em_layerwise(exact_op, B, problem.Y, layers, cfg.alpha0, tol=1e-6)
            rows = [(t, l, float(r["alpha"][l]), float(r["gamma"][l]), float(r["theta_bar_sq_norm"][l]))
                    for t, r in enumerate(trace) for l in range(len(r["alpha"]))]
            write_csv(out / "em_exact.csv", EXACT_LAYER_HEADER, rows)
            res["exact_alpha"] = [float(a) for a in a_exact]
        files.append("em_exact.csv")
    state = run_em(problem, cfg.k, cfg.em_steps, cfg.sgd, cfg.sgd, cfg.seed, alpha0=cfg.alpha0,
                   prior=cfg.prior_variant, layers=layers, gprior=cfg.gprior, variant=cfg.variant,
                   tol=cfg.em_tol, redraw=bool(cfg.redraw), k_pred=0, auto_lr=cfg.auto_lr)
    header = EmState.TRACE_HEADER if layers is None else EmState.LAYER_TRACE_HEADER
    write_csv(out / "em_trace.csv", header, _em_rows(state))
    files.append("em_trace.csv")
    res["sampled_alpha"] = state.alpha if layers is None else [float(a) for a in state.alpha]
    res["sampled_steps"] = state.step
    finite = bool(np.all(np.isfinite(np.asarray(state.alpha, dtype=float))))
    return files, finite


def _run_dual(cfg, out, res):
    problem = _problem(cfg)
    dcfg = DualEmConfig(tol=cfg.pcg_tol, max_iter=cfg.pcg_max_iter, rank=cfg.precond_rank,
                        oversampling=cfg.precond_oversampling, em_tol=cfg.em_tol)
    state = run_dual_em(problem, cfg.k, cfg.em_steps, dcfg, cfg.seed, alpha0=cfg.alpha0,
                        gprior=cfg.gprior, redraw=cfg.redraw is not False)
    write_csv(out / "em_trace.csv", EmState.TRACE_HEADER, _em_rows(state))
    write_csv(out / "pcg_stats.csv", state.PCG_HEADER, state.pcg_stats)
    res["alpha"] = state.alpha
    res["max_pcg_residual"] = max((r[2] for r in state.pcg_stats), default=0.0)
    res["pcg_tol"] = cfg.pcg_tol
    if state.degraded:
        res["degraded_reason"] = "conjugate gradients hit max_iter above tolerance"
    return ["em_trace.csv", "pcg_stats.csv"], not state.degraded


def _run_linlap(cfg, out, res):
    r = run_linlap_demo(cfg.task, k=cfg.k, em_steps=cfg.em_steps, alpha0=cfg.alpha0, seed=cfg.seed)
    write_csv(out / "em_trace.csv", EmState.TRACE_HEADER, _em_rows(r.state))
    pred = r.predictive
    if cfg.task == "regression":
        rows = [(float(x[0]), float(pred.base[i, 0]), float(pred.std[i, 0])) for i, x in enumerate(pred.inputs)]
        write_csv(out / "predictive.csv", ("x", "mean", "std"), rows)
    else:
        probs = probit_predict(pred.base, pred.deviations)
        rows = [(float(x[0]), float(x[1]), float(probs[i, 1]), float(pred.std[i, 1]))
                for i, x in enumerate(pred.inputs)]
        write_csv(out / "predictive.csv", ("x_1", "x_2", "mean", "std"), rows)
    res["alpha"] = float(r.state.alpha)
    res["fixed_point_residual"] = r.state.fixed_point_residual() if r.state.alpha_history else None
    res["mean_std"] = float(pred.std.mean())
    res["prior_mean_std"] = float(r.prior_predictive.std.mean())
    return ["em_trace.csv", "predictive.csv"], bool(np.all(np.isfinite(pred.std)))


def _run_exact(cfg, out, res):
    problem = _problem(cfg)
    op, B = problem.design, problem.noise
    a, trace = exact_em(op, B, problem.Y, cfg.alpha0, tol=1e-6)
    write_csv(out / "em_exact.csv", EmTrace.HEADER, trace.rows())
    post = exact_posterior(op, B, PriorPrecision.isotropic_prior(a, op.dim), problem.Y)
    sd = np.sqrt(np.diag(post.covariance))
    write_csv(out / "posterior.csv", ("index", "mean", "std"), zip(range(op.dim), post.mean, sd))
    res["alpha"] = a
    res["monotone"] = trace.monotone
    return ["em_exact.csv", "posterior.csv"], trace.monotone


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Run ``cfg`` into ``out_dir`` and return the manifest (also written as
    ``run.json``).  ``manifest["valid"]`` is false when an internal check
    failed; ``degraded`` marks solvers that stopped above tolerance."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res: dict = {}
    if cfg.kind == "gen-data":
        meta = gen_synthetic(cfg.problem_spec(), cfg.seed, out)
        files, ok = ["phi.csv", "noise.csv", "dataset.csv", "meta.json"], True
        res["meta"] = meta
    else:
        runner = {"sample-fidelity": _run_sample_fidelity, "em-compare": _run_em_compare,
                  "dual-demo": _run_dual, "linlap-demo": _run_linlap, "exact": _run_exact}[cfg.kind]
        files, ok = runner(cfg, out, res)
    manifest = {
        "kind": cfg.kind,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": {"instance": cfg.instance},
        "outputs": files,
        "results": res,
        "versions": {"samplelin": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "valid": bool(ok),
        "degraded": "degraded_reason" in res,
    }
    with open(out / "run.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return manifest


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")
