"""End-to-end linearised-Laplace demos on small synthetic tasks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .em import EmState, run_em
from .errors import ParameterError
from .linlap import PredictiveSampleSet, SurrogateModel, curvature_blocks, linearize, predictive_samples
from .mlp import MLP, fit_mlp
from .sampler import SgdConfig

__all__ = ["toy_regression", "two_moons", "DemoResult", "run_linlap_demo"]


def toy_regression(n: int = 64, seed: int = 0, noise_std: float = 0.1):
    """1D inputs in two clusters with a gap in the middle; ``y = sin(3x) + noise``."""
    g = rngmod.stream(seed, "data")
    x = np.concatenate([g.uniform(-2.0, -0.6, n - n // 2), g.uniform(0.6, 2.0, n // 2)])
    y = np.sin(3.0 * x) + noise_std * g.standard_normal(n)
    return x[:, None], y[:, None]


def two_moons(n: int = 100, seed: int = 0, noise_std: float = 0.15):
    """Two interleaved half circles, labels 0 and 1."""
    g = rngmod.stream(seed, "data")
    n0 = n - n // 2
    t0 = g.uniform(0.0, np.pi, n0)
    t1 = g.uniform(0.0, np.pi, n // 2)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    X = np.vstack([upper, lower]) + noise_std * g.standard_normal((n, 2))
    labels = np.concatenate([np.zeros(n0, dtype=np.intp), np.ones(n // 2, dtype=np.intp)])
    return X, labels


@dataclass
class DemoResult:
    task: str
    model: MLP
    surrogate: SurrogateModel
    state: EmState
    predictive: PredictiveSampleSet
    prior_predictive: PredictiveSampleSet
    test_inputs: np.ndarray


def run_linlap_demo(task: str = "regression", *, n: int = 64, width: int = 16, k: int = 16,
                    em_steps: int = 12, alpha0: float = 1e-4, seed: int = 0, noise_std: float = 0.1,
                    epochs: int = 400, test_inputs: np.ndarray | None = None) -> DemoResult:
    """Train the toy network, linearise it, select the prior precision by
    sampled EM and draw predictive samples.

    ``prior_predictive`` holds samples from the same pipeline run without EM
    steps, i.e. at the (deliberately broad) initial precision ``alpha0``.
    """
    if task == "regression":
        X, Y = toy_regression(n, seed, noise_std)
        net = fit_mlp(MLP.two_hidden(1, 1, width, seed=seed), X, Y, noise_variance=noise_std**2,
                      weight_decay=1.0)
        likelihood, targets = "gaussian", Y
        B = curvature_blocks("gaussian", net.forward(X), noise_std**2)
        if test_inputs is None:
            test_inputs = np.linspace(-3.0, 3.0, 61)[:, None]
    elif task == "classification":
        X, labels = two_moons(n, seed)
        net = fit_mlp(MLP.two_hidden(2, 2, width, seed=seed), X, labels, likelihood="categorical",
                      weight_decay=1.0)
        likelihood, targets = "categorical", labels
        B = curvature_blocks("categorical", net.forward(X))
        if test_inputs is None:
            g = np.linspace(-1.5, 2.5, 9)
            test_inputs = np.array([(a, b) for a in g for b in g])
    else:
        raise ParameterError(f"unknown demo task {task!r}")
    sur = linearize(net, X, likelihood)
    problem = sur.problem(targets, B)
    # the linearised network's curvature spectrum decays steeply, so heavy
    # momentum without decay converges far better than the defaults here
    cfg = SgdConfig(lr=1.0, momentum=0.99, epochs=epochs, decay_factor=1.0, clip_norm=None, seed=seed)
    common = dict(alpha0=alpha0, k_pred=k, auto_lr=0.5, gprior=True)
    prior_state = run_em(problem, k, 0, cfg, cfg, seed, **common)
    state = run_em(problem, k, em_steps, cfg, cfg, seed, **common)
    return DemoResult(
        task, net, sur, state,
        predictive_samples(test_inputs, state.original(state.prediction_samples), net),
        predictive_samples(test_inputs, prior_state.original(prior_state.prediction_samples), net),
        np.asarray(test_inputs, dtype=np.float64),
    )
