"""Sample-based evidence maximisation.

The M-step needs only posterior samples: the effective dimension
``gamma = Tr{H^{-1} M}`` equals ``E[zeta^T M zeta]`` for
``zeta ~ N(0, H^{-1})``, so ``k`` samples give a Hutchinson estimate and the
update ``alpha <- gamma_hat / ||theta_bar||^2`` avoids any log-determinant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateDataError, ParameterError
from .model import (
    DesignOperator,
    NoisePrecision,
    PriorPrecision,
    Problem,
    apply_gprior,
    gprior_exact,
    gprior_sampled,
)
from .sampler import SampleSet, SgdConfig, draw_samples, max_curvature, minimize, sgd_minimize

__all__ = [
    "EmState",
    "estimate_gamma",
    "estimate_gamma_layerwise",
    "mstep_update",
    "rescale_regularizers",
    "posterior_mode",
    "run_em",
]

log = logging.getLogger(__name__)


def _as_columns(samples) -> np.ndarray:
    if isinstance(samples, (list, tuple)):
        return np.stack([np.asarray(s, dtype=np.float64) for s in samples], axis=1)
    s = np.asarray(samples, dtype=np.float64)
    return s[:, None] if s.ndim == 1 else s


def estimate_gamma(samples, op: DesignOperator, B: NoisePrecision) -> float:
    """Hutchinson estimate ``(1/k) sum_j zeta_j^T Phi^T B Phi zeta_j``."""
    Z = _as_columns(samples)
    if Z.shape[1] == 0:
        raise ParameterError("need at least one sample")
    F = op.matvec(Z)
    return float(np.mean(B.quad(F)))


def estimate_gamma_layerwise(samples, op: DesignOperator, B: NoisePrecision, layers) -> np.ndarray:
    """Per-layer split ``(1/k) sum_j <zeta_j|_l, (M zeta_j)|_l>``.

    The pieces add up to ``estimate_gamma`` exactly and each is unbiased for
    the trace of its diagonal block of ``H^{-1} M``.
    """
    Z = _as_columns(samples)
    layers = np.asarray(layers, dtype=np.intp)
    n_layers = int(layers.max()) + 1
    counts = np.bincount(layers, minlength=n_layers)
    if np.any(counts == 0):
        raise ParameterError("empty layer in layer map")
    MZ = op.rmatvec(B.apply(op.matvec(Z)))
    per_coord = np.mean(Z * MZ, axis=1)
    return np.bincount(layers, weights=per_coord, minlength=n_layers)


def mstep_update(gamma_hat, theta_bar, layers=None):
    """``alpha' = gamma_hat / ||theta_bar||^2`` (per layer if ``layers``).

    ``theta_bar`` must be expressed in the coordinates where the prior is
    isotropic (normalised coordinates under the g-prior).
    """
    theta_bar = np.asarray(theta_bar, dtype=np.float64)
    if layers is None:
        tsq = float(theta_bar @ theta_bar)
        if tsq == 0.0:
            raise DegenerateDataError("posterior mean is zero; alpha update undefined")
        if gamma_hat <= 0:
            raise DegenerateDataError("effective dimension estimate is zero; would remove the prior")
        return float(gamma_hat) / tsq
    layers = np.asarray(layers, dtype=np.intp)
    gamma_hat = np.asarray(gamma_hat, dtype=np.float64)
    tsq = np.bincount(layers, weights=theta_bar**2, minlength=gamma_hat.shape[0])
    if np.any(tsq == 0.0):
        raise DegenerateDataError("a layer's posterior mean is zero; alpha update undefined")
    if np.any(gamma_hat <= 0):
        raise DegenerateDataError("a layer's effective dimension estimate is zero")
    return gamma_hat / tsq


def rescale_regularizers(samples: SampleSet, alpha_old, alpha_new, layers=None) -> SampleSet:
    """Move cached regularisers from precision ``alpha_old`` to ``alpha_new``.

    ``theta0`` scales as ``alpha^{-1/2}`` and ``theta'`` as ``alpha^{-1}``.
    The current iterates ``z`` are kept as warm starts.
    """
    a_old = np.asarray(alpha_old, dtype=np.float64)
    a_new = np.asarray(alpha_new, dtype=np.float64)
    if np.any(a_old <= 0) or np.any(a_new <= 0):
        raise ParameterError("precisions must be positive")
    ratio = a_old / a_new
    if layers is not None:
        ratio = ratio[np.asarray(layers)]
    if np.ndim(ratio) == 1:
        ratio = ratio[:, None]
    return replace(samples, theta0=samples.theta0 * np.sqrt(ratio), theta_prime=samples.theta_prime * ratio)


def posterior_mode(problem: Problem, A: PriorPrecision, config: SgdConfig, warm_start=None,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Minimise the regularised data fit of the linear model by SGD.

    Gaussian problems minimise ``||Y - c - Phi theta||_B^2 / 2 +
    ||theta||_A^2 / 2``; categorical ones replace the first term with the
    softmax cross-entropy of ``c + Phi theta``.
    """
    theta = np.zeros(problem.dim) if warm_start is None else np.array(warm_start, dtype=np.float64)
    n = problem.n

    def grad(t, idx):
        _, g = problem.data_fit(t, idx)
        scale = 1.0 if idx is None else n / len(idx)
        return scale * g + A.apply(t)

    def objective(t):
        return problem.data_fit(t)[0] + 0.5 * A.norm_sq(t)

    return minimize(theta, grad, objective, n, config, rng=rng)


@dataclass
class EmState:
    """State and history of a sampled EM run.

    Coordinates are those the prior is isotropic in: when a g-prior is used
    (``scale`` set) ``theta_bar`` and ``samples`` live in normalised
    coordinates and ``original`` maps them back.
    """

    alpha: float | np.ndarray
    theta_bar: np.ndarray
    samples: SampleSet | None
    prediction_samples: np.ndarray | None = None
    scale: np.ndarray | None = None
    layers: np.ndarray | None = None
    alpha_history: list = field(default_factory=list)
    gamma_history: list = field(default_factory=list)
    theta_bar_sq_history: list = field(default_factory=list)
    step: int = 0
    converged: bool = False

    TRACE_HEADER = ("step", "alpha", "gamma_hat", "theta_bar_sq_norm")
    LAYER_TRACE_HEADER = ("step", "layer", "alpha", "gamma_hat", "theta_bar_sq_norm")

    def original(self, v: np.ndarray) -> np.ndarray:
        if self.scale is None:
            return v
        return v * (self.scale if np.ndim(v) == 1 else self.scale[:, None])

    def trace_rows(self):
        if self.layers is None:
            for t, row in enumerate(zip(self.alpha_history, self.gamma_history, self.theta_bar_sq_history)):
                yield (t, *(float(x) for x in row))
        else:
            for t, (a, g, s) in enumerate(zip(self.alpha_history, self.gamma_history, self.theta_bar_sq_history)):
                for layer in range(len(a)):
                    yield (t, layer, float(a[layer]), float(g[layer]), float(s[layer]))

    def fixed_point_residual(self) -> float:
        """``|alpha ||theta_bar||^2 - gamma_hat| / gamma_hat`` at the last step."""
        if not self.alpha_history:
            raise ParameterError("no EM steps recorded")
        a = np.asarray(self.alpha_history[-1])
        g = np.asarray(self.gamma_history[-1])
        s = np.asarray(self.theta_bar_sq_history[-1])
        return float(np.max(np.abs(a * s - g) / g))


def _prior(variant: str, alpha, dim: int, layers) -> PriorPrecision:
    if variant == "layerwise":
        return PriorPrecision.layerwise(alpha, layers)
    return PriorPrecision.isotropic_prior(float(np.asarray(alpha).reshape(-1)[0]), dim)


def run_em(problem: Problem, k: int, em_steps: int, sample_config: SgdConfig, mode_config: SgdConfig,
           seed: int, *, alpha0=1.0, prior: str = "isotropic", layers=None, gprior: bool = False,
           gprior_method: str = "exact", variant: str = "Lprime", tol: float = 1e-3,
           redraw: bool = False, k_pred: int | None = None, auto_lr: float | None = None,
           theta_init: np.ndarray | None = None) -> EmState:
    """Sampled EM: alternate SGD posterior mode / samples and the
    Hutchinson M-step.

    Regularisers are drawn once and rescaled after every update of
    ``alpha`` unless ``redraw`` is set.  ``prior`` is ``"isotropic"`` or
    ``"layerwise"`` (with ``layers``); ``gprior`` first normalises the
    features, either with exact column norms or (``gprior_method="sampled"``)
    from the first batch of noise regularisers.  Stops after ``em_steps``
    updates or when the relative change of ``alpha`` drops below ``tol``.
    Finally ``k_pred`` (default ``k``) fresh samples are optimised at the
    selected ``alpha``.  With ``auto_lr`` both learning rates are reset at
    every step to ``auto_lr / lambda_max`` of the current ``M + A``.
    ``theta_init`` (original coordinates) warm-starts the first mode search,
    e.g. at the trained weights of a linearised network.
    """
    if k < 1:
        raise ParameterError("need at least one sample")
    if em_steps < 0:
        raise ParameterError("em_steps must be non-negative")
    if prior == "layerwise":
        layers = np.asarray(layers, dtype=np.intp)
        n_layers = int(layers.max()) + 1
        alpha = np.broadcast_to(np.asarray(alpha0, dtype=np.float64), (n_layers,)).copy()
    elif prior == "isotropic":
        alpha = float(alpha0)
        layers = None
    else:
        raise ParameterError(f"unknown prior {prior!r}")
    with_noise = variant == "L"
    B = problem.noise
    scale = None
    A = _prior(prior, alpha, problem.dim, layers)
    samples = None
    if gprior:
        if gprior_method == "exact":
            scale = gprior_exact(problem.design, B)
        elif gprior_method == "sampled":
            if prior == "layerwise":
                raise ParameterError("sampled g-prior scales need a scalar alpha")
            raw = draw_samples(problem.design, B, A, k, seed, with_noise=with_noise)
            scale = gprior_sampled(raw.theta_prime, alpha)
            # theta'_norm = alpha^-1 diag(s) Phi^T B E
            samples = replace(raw, theta_prime=raw.theta_prime * scale[:, None])
        else:
            raise ParameterError(f"unknown g-prior method {gprior_method!r}")
        problem = problem.with_design(apply_gprior(problem.design, scale))
    op = problem.design
    if samples is None:
        samples = draw_samples(op, B, A, k, seed, with_noise=with_noise)

    theta_bar = np.zeros(op.dim)
    if theta_init is not None:
        theta_bar = np.asarray(theta_init, dtype=np.float64) / (1.0 if scale is None else scale)
    state = EmState(alpha=alpha, theta_bar=theta_bar, samples=samples, scale=scale, layers=layers)
    mode_rng = np.random.default_rng(np.random.SeedSequence(mode_config.seed))
    def tuned(cfg, A):
        if auto_lr is None:
            return cfg
        return replace(cfg, lr=auto_lr / max_curvature(op, B, A, seed=seed))

    for step in range(em_steps):
        A = _prior(prior, alpha, op.dim, layers)
        mode_config_t, sample_config_t = tuned(mode_config, A), tuned(sample_config, A)
        state.theta_bar = posterior_mode(problem, A, mode_config_t, warm_start=state.theta_bar, rng=mode_rng)
        cfg = replace(sample_config_t, seed=sample_config.seed + step)
        Z = sgd_minimize(samples, cfg, variant, op, B, A)
        samples = samples.with_z(Z)
        if layers is None:
            gamma = estimate_gamma(Z, op, B)
            tsq = float(state.theta_bar @ state.theta_bar)
        else:
            gamma = estimate_gamma_layerwise(Z, op, B, layers)
            tsq = np.bincount(layers, weights=state.theta_bar**2, minlength=len(alpha))
        new_alpha = mstep_update(gamma, state.theta_bar, layers)
        state.alpha_history.append(np.copy(alpha) if layers is not None else alpha)
        state.gamma_history.append(gamma)
        state.theta_bar_sq_history.append(tsq)
        log.info("EM step %d: alpha=%s gamma_hat=%s", step, alpha, gamma)
        change = np.max(np.abs(np.asarray(new_alpha) - alpha) / np.asarray(alpha))
        if redraw:
            A_new = _prior(prior, new_alpha, op.dim, layers)
            fresh = draw_samples(op, B, A_new, k, seed, with_noise=with_noise, tag=f"/em{step + 1}")
            samples = fresh.with_z(samples.z)
        else:
            samples = rescale_regularizers(samples, alpha, new_alpha, layers)
        alpha = new_alpha
        state.step = step + 1
        if change < tol:
            state.converged = True
            break
    state.alpha = alpha
    state.samples = samples

    k_pred = k if k_pred is None else k_pred
    if k_pred > 0:
        A = _prior(prior, alpha, op.dim, layers)
        pred = draw_samples(op, B, A, k_pred, seed, with_noise=with_noise, tag="/pred")
        cfg = replace(tuned(sample_config, A), seed=sample_config.seed + 1_000_003)
        state.prediction_samples = sgd_minimize(pred, cfg, variant, op, B, A)
    return state
