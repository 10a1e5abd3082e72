"""Linearised-Laplace uncertainty for a trained differentiable model.

The model is replaced by its first-order expansion in the parameters around
the trained point ``w_bar``: ``h(theta, x) = c(x) + phi(x) theta`` with
``phi(x)`` the Jacobian and ``c(x) = f(w_bar, x) - phi(x) w_bar``.  The
Jacobian is only touched through jvp/vjp products, so the surrogate plugs
into the sample-based inference routines as an ordinary design operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ContractError, ModelDefinitionError, ParameterError
from .mlp import DifferentiableModel
from .model import DesignOperator, NoisePrecision, Problem, ScaledDesign, softmax

__all__ = [
    "JacobianDesign",
    "SurrogateModel",
    "linearize",
    "curvature_blocks",
    "PredictiveSampleSet",
    "predictive_samples",
    "probit_predict",
    "kadic_partitions",
    "kadic_joint_ll_from_sets",
    "kadic_joint_ll",
    "stabilized_covariance",
    "sym_kl",
    "wasserstein2",
    "gaussian_fit",
    "eval_metrics",
    "block_rescaled",
]


class JacobianDesign(DesignOperator):
    """Design operator whose blocks are the model Jacobians at ``X``."""

    def __init__(self, model: DifferentiableModel, X: np.ndarray):
        self.model = model
        self.X = np.asarray(X, dtype=np.float64)
        self.n = len(self.X)
        self.m = model.n_out
        self.dim = model.dim

    def matvec_rows(self, v, idx):
        v = self._check_param_vec(v)
        X = self.X if idx is None else self.X[np.asarray(idx)]
        out = self.model.jvp(X, v)
        return out.reshape(len(X) * self.m, *v.shape[1:])

    def rmatvec_rows(self, u, idx):
        X = self.X if idx is None else self.X[np.asarray(idx)]
        u = self._check_obs_vec(u, len(X) * self.m)
        return self.model.vjp(X, u.reshape(len(X), self.m, *u.shape[1:]))


@dataclass(frozen=True)
class SurrogateModel:
    """Affine surrogate ``h(theta, x_i) = c_i + phi(x_i) theta``.

    ``offset`` holds the ``c_i`` as ``(n, m)``; ``delta = -offset`` stacked
    is the target shift used by observation-space solves; ``base`` holds
    ``f(w_bar, x_i)``.
    """

    design: DesignOperator
    offset: np.ndarray
    base: np.ndarray
    params: np.ndarray
    likelihood: str

    @property
    def delta(self) -> np.ndarray:
        return -self.offset.reshape(-1)

    def predict(self, theta: np.ndarray) -> np.ndarray:
        return self.offset + self.design.matvec(theta).reshape(self.offset.shape)

    def problem(self, targets, noise: NoisePrecision) -> Problem:
        return Problem(self.design, noise, targets, self.offset, self.likelihood)


def linearize(model: DifferentiableModel, X: np.ndarray, likelihood: str = "gaussian", *,
              probes: int = 3, seed: int = 0, rtol: float = 1e-8) -> SurrogateModel:
    """Build the affine surrogate of ``model`` around its current parameters.

    A few random adjoint probes ``<jvp(v), u> = <v, vjp(u)>`` guard against
    inconsistent Jacobian products.
    """
    if likelihood not in ("gaussian", "categorical"):
        raise ParameterError(f"unknown likelihood {likelihood!r}")
    X = np.asarray(X, dtype=np.float64)
    op = JacobianDesign(model, X)
    rng = np.random.default_rng(seed)
    for _ in range(probes):
        v = rng.standard_normal(op.dim)
        u = rng.standard_normal(op.n * op.m)
        lhs, rhs = float(op.matvec(v) @ u), float(v @ op.rmatvec(u))
        if abs(lhs - rhs) > rtol * max(np.linalg.norm(v) * np.linalg.norm(u), 1e-300) * math.sqrt(op.n * op.m):
            raise ModelDefinitionError(f"jvp/vjp are not adjoint: {lhs!r} vs {rhs!r}")
    base = model.forward(X).reshape(op.n, op.m)
    offset = base - op.matvec(model.params).reshape(op.n, op.m)
    return SurrogateModel(op, offset, base, model.params.copy(), likelihood)


def curvature_blocks(likelihood: str, predictions: np.ndarray, noise_variance: float = 1.0) -> NoisePrecision:
    """Loss curvature in the outputs at the given predictions.

    Gaussian: ``sigma^-2 I``.  Categorical: ``diag(p) - p p^T`` with ``p``
    the softmax of the logits; singular, so only the ``B E ~ N(0, B)`` sampling
    path applies.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    if preds.ndim == 1:
        preds = preds[:, None]
    n, m = preds.shape
    if likelihood == "gaussian":
        if noise_variance <= 0:
            raise ParameterError("noise variance must be positive")
        return NoisePrecision.isotropic(n, m, 1.0 / noise_variance)
    if likelihood == "categorical":
        p = softmax(preds, axis=1)
        blocks = p[:, :, None] * np.eye(m)[None] - p[:, :, None] * p[:, None, :]
        return NoisePrecision(blocks)
    raise ParameterError(f"unknown likelihood {likelihood!r}")


@dataclass(frozen=True)
class PredictiveSampleSet:
    """``psi_j = f(w_bar, x) + phi(x) zeta_j`` for a batch of inputs.

    ``base`` is ``(n, m)`` and ``deviations`` is ``(n, m, k)``.
    """

    inputs: np.ndarray
    base: np.ndarray
    deviations: np.ndarray

    @property
    def k(self) -> int:
        return self.deviations.shape[2]

    @property
    def samples(self) -> np.ndarray:
        return self.base[:, :, None] + self.deviations

    @property
    def std(self) -> np.ndarray:
        """Per-output standard deviation around ``base`` (zero-mean samples)."""
        return np.sqrt(np.mean(self.deviations**2, axis=2))


def predictive_samples(X, samples: np.ndarray, model: DifferentiableModel) -> PredictiveSampleSet:
    """Push zero-mean parameter samples (columns) through the Jacobian at ``X``."""
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(samples, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] != model.dim:
        raise ContractError(f"samples have length {Z.shape[0]}, model has {model.dim} parameters")
    dev = model.jvp(X, Z).reshape(len(X), model.n_out, Z.shape[1])
    return PredictiveSampleSet(X, model.forward(X).reshape(len(X), model.n_out), dev)


def probit_predict(logits: np.ndarray, deviations: np.ndarray) -> np.ndarray:
    """Probit-style predictive ``softmax(f / sqrt(1 + pi/(2k) sum_j dev_j^2))``.

    ``logits`` is ``(..., m)`` and ``deviations`` ``(..., m, k)``.
    """
    f = np.asarray(logits, dtype=np.float64)
    dev = np.asarray(deviations, dtype=np.float64)
    k = dev.shape[-1]
    if k < 1:
        raise ParameterError("need at least one sample")
    var = np.sum(dev**2, axis=-1) * (math.pi / (2.0 * k))
    return softmax(f / np.sqrt(1.0 + var), axis=-1)


def kadic_partitions(n_items: int, kappa: int, tau: int, shuffles: int, rng: np.random.Generator):
    """Group items into sets of ``kappa`` distinct points with multiplicities.

    Each shuffle permutes the items and cuts them into consecutive groups of
    ``kappa`` (a remainder is dropped).  Every point of a group appears once
    and the other ``tau - kappa`` slots are filled uniformly at random from
    the group, giving counts ``b`` with ``b_l >= 1`` and ``sum(b) = tau``.
    Returns a list of ``(items, counts)`` pairs.
    """
    if kappa < 1 or kappa > tau:
        raise ParameterError(f"need 1 <= kappa <= tau, got kappa={kappa}, tau={tau}")
    if n_items < kappa:
        raise ParameterError("fewer items than kappa")
    sets = []
    for _ in range(shuffles):
        perm = rng.permutation(n_items)
        for g in range(n_items // kappa):
            items = perm[g * kappa:(g + 1) * kappa]
            counts = 1 + rng.multinomial(tau - kappa, np.full(kappa, 1.0 / kappa))
            sets.append((items, counts))
    return sets


def kadic_joint_ll_from_sets(loglik: np.ndarray, sets) -> float:
    """Mean over sets of ``log (1/k) sum_j exp(sum_l b_l loglik[j, item_l])``.

    ``loglik`` is ``(k, N)``: the log-likelihood of test item ``i`` under
    sample ``j``.
    """
    L = np.asarray(loglik, dtype=np.float64)
    if L.ndim == 1:
        L = L[None, :]
    k = L.shape[0]
    vals = [float(logsumexp(L[:, items] @ counts) - math.log(k)) for items, counts in sets]
    return float(np.mean(vals))


def kadic_joint_ll(loglik: np.ndarray, kappa: int, tau: int, shuffles: int,
                   rng: np.random.Generator) -> float:
    """Joint log-likelihood on batches of ``tau`` points with ``kappa``
    distinct members, averaged over groups and shuffles."""
    L = np.asarray(loglik, dtype=np.float64)
    if L.ndim == 1:
        L = L[None, :]
    return kadic_joint_ll_from_sets(L, kadic_partitions(L.shape[1], kappa, tau, shuffles, rng))


def stabilized_covariance(deviations: np.ndarray) -> np.ndarray:
    """``(D + S) / 2`` where ``S`` is the empirical second moment of the
    ``(k, p)`` deviations and ``D`` its diagonal."""
    x = np.asarray(deviations, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] < 1:
        raise ParameterError("need at least one sample")
    S = x.T @ x / x.shape[0]
    return 0.5 * (np.diag(np.diag(S)) + S)


def sym_kl(p: np.ndarray, q: np.ndarray, eps: float = 1e-12, atol: float = 1e-8) -> np.ndarray:
    """``KL(p||q) + KL(q||p)`` along the last axis after smoothing
    ``p -> (1 - m eps) p + eps``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    for name, v in (("p", p), ("q", q)):
        if np.any(v < 0) or np.any(np.abs(v.sum(axis=-1) - 1.0) > atol):
            raise ParameterError(f"{name} is not a normalised categorical distribution")
    m = p.shape[-1]
    ps = (1.0 - m * eps) * p + eps
    qs = (1.0 - m * eps) * q + eps
    return np.sum((ps - qs) * (np.log(ps) - np.log(qs)), axis=-1)


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def wasserstein2(mean_a, cov_a, mean_b, cov_b) -> float:
    """2-Wasserstein distance between Gaussians (Bures metric on covariances)."""
    mean_a, mean_b = np.atleast_1d(mean_a), np.atleast_1d(mean_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    ra = _psd_sqrt(cov_a)
    cross = _psd_sqrt(ra @ cov_b @ ra)
    d2 = float(np.sum((mean_a - mean_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return math.sqrt(max(d2, 0.0))


def gaussian_fit(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and (biased) covariance of ``(k, m)`` samples."""
    x = np.asarray(samples, dtype=np.float64)
    mu = x.mean(axis=0)
    c = x - mu
    return mu, c.T @ c / x.shape[0]


def eval_metrics(pred_a: np.ndarray, pred_b: np.ndarray, logits_a: np.ndarray | None = None,
                 logits_b: np.ndarray | None = None) -> dict:
    """Mean symmetrised KL between categorical predictions ``(N, m)`` and
    mean logit W2 between Gaussian fits of logit samples ``(N, k, m)``."""
    out = {"sym_kl": float(np.mean(sym_kl(pred_a, pred_b)))}
    if logits_a is not None and logits_b is not None:
        la, lb = np.asarray(logits_a), np.asarray(logits_b)
        vals = [wasserstein2(*gaussian_fit(la[i]), *gaussian_fit(lb[i])) for i in range(la.shape[0])]
        out["w2"] = float(np.mean(vals))
    return out


def block_rescaled(op: DesignOperator, indices, factor: float) -> DesignOperator:
    """Scale the feature columns in ``indices`` by ``factor`` (the effect of
    rescaling the weights feeding a normalisation layer)."""
    s = np.ones(op.dim)
    s[np.asarray(indices)] = factor
    return ScaledDesign(op, s)
