"""Sample-then-optimise posterior sampling.

A draw from the zero-mean posterior ``N(0, H^{-1})`` is the minimiser of a
randomly perturbed quadratic.  Two equivalent losses are provided:

``L(z)  = ||Phi z - E||_B^2 / 2 + ||z - theta0||_A^2 / 2``
``L'(z) = ||Phi z||_B^2 / 2     + ||z - theta_n||_A^2 / 2``,
with ``theta_n = theta0 + A^{-1} Phi^T B E``.

They share gradients exactly, but the minibatch estimate of ``L'`` keeps all
the injected noise in the (exactly differentiated) regulariser.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np
import scipy.sparse

from . import rng as rngmod
from .errors import ContractError, DivergenceError, ParameterError
from .model import DenseDesign, DesignOperator, NoisePrecision, PriorPrecision, sample_noise
from .oracle import ExactPosterior, dense_curvature, primal_sample

__all__ = [
    "SgdConfig",
    "SampleJob",
    "SampleSet",
    "draw_samples",
    "loss_L",
    "loss_Lprime",
    "minibatch_grad",
    "minimize",
    "sgd_minimize",
    "VarianceGap",
    "grad_variance_gap",
    "prefers_Lprime_at_convergence",
    "max_curvature",
    "VARIANTS",
]

log = logging.getLogger(__name__)

VARIANTS = ("L", "Lprime")


@dataclass(frozen=True)
class SgdConfig:
    """Nesterov SGD with linear learning-rate decay and gradient clipping.

    The learning rate falls linearly by ``decay_factor`` over the first
    ``decay_fraction`` of all steps and then stays flat.  ``batch_size=None``
    means full batch.  ``clip_norm=None`` disables clipping; clipping is per
    sample when several samples are optimised together.
    """

    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int | None = None
    epochs: int = 20
    decay_factor: float = 330.0
    decay_fraction: float = 0.75
    clip_norm: float | None = 1.0
    seed: int = 0
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0:
            raise ParameterError("lr must be positive and epochs non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError("momentum must lie in [0, 1)")
        if self.batch_size is not None and self.batch_size < 1:
            raise ParameterError("batch_size must be positive")
        if self.decay_factor < 1.0:
            raise ParameterError("decay_factor must be >= 1")
        if not 0.0 < self.decay_fraction <= 1.0:
            raise ParameterError("decay_fraction must lie in (0, 1]")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ParameterError("clip_norm must be positive")

    def lr_at(self, step: int, total: int) -> float:
        ramp = max(1.0, self.decay_fraction * total)
        frac = min(step / ramp, 1.0)
        return self.lr * (1.0 - (1.0 - 1.0 / self.decay_factor) * frac)


@dataclass(frozen=True)
class SampleJob:
    """One sample's regularisers and current iterate."""

    index: int
    theta0: np.ndarray
    theta_prime: np.ndarray
    z: np.ndarray
    eps: np.ndarray | None = None

    @property
    def theta_n(self) -> np.ndarray:
        return self.theta0 + self.theta_prime


@dataclass(frozen=True)
class SampleSet:
    """``k`` samples stored column-wise.

    ``theta0`` and ``theta_prime`` are ``(d, k)``; ``eps`` is the ``(n*m, k)``
    noise draw, kept only when the ``L`` loss will be used (it is not needed
    for ``L'``, and cannot be drawn when ``B`` is singular).
    """

    theta0: np.ndarray
    theta_prime: np.ndarray
    z: np.ndarray
    index: np.ndarray
    eps: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.theta0.shape[1]

    @property
    def theta_n(self) -> np.ndarray:
        return self.theta0 + self.theta_prime

    def job(self, j: int) -> SampleJob:
        return SampleJob(
            int(self.index[j]), self.theta0[:, j], self.theta_prime[:, j], self.z[:, j],
            None if self.eps is None else self.eps[:, j],
        )

    def with_z(self, z: np.ndarray) -> "SampleSet":
        return replace(self, z=z)

    @classmethod
    def from_jobs(cls, jobs: list[SampleJob]) -> "SampleSet":
        eps = None
        if all(j.eps is not None for j in jobs):
            eps = np.stack([j.eps for j in jobs], axis=1)
        return cls(
            np.stack([j.theta0 for j in jobs], axis=1),
            np.stack([j.theta_prime for j in jobs], axis=1),
            np.stack([j.z for j in jobs], axis=1),
            np.array([j.index for j in jobs]),
            eps,
        )


def draw_samples(op: DesignOperator, B: NoisePrecision, A: PriorPrecision, k: int, seed: int,
                 *, with_noise: bool = False, start: int = 0, tag: str = "") -> SampleSet:
    """Draw ``k`` regularisers; sample ``j`` uses its own prior/noise streams.

    With ``with_noise`` the noise ``E ~ N(0, B^-1)`` itself is kept (needed by
    ``L``; requires definite ``B``).  Otherwise only ``B E ~ N(0, B)`` is
    drawn, which also works for singular curvature blocks.
    """
    if k < 1:
        raise ParameterError("need at least one sample")
    idx = np.arange(start, start + k)
    zp = np.empty((A.dim, k))
    zn = np.empty((B.n, B.m, k))
    for c, j in enumerate(idx):
        zp[:, c] = rngmod.stream(seed, "prior" + tag, j).standard_normal(A.dim)
        zn[:, :, c] = rngmod.stream(seed, "noise" + tag, j).standard_normal((B.n, B.m))
    theta0 = zp / np.sqrt(A.diag)[:, None]
    eps = None
    if with_noise:
        B._require_definite("sample N(0, B^-1)")
        eps = np.linalg.solve(B.factor.transpose(0, 2, 1), zn).reshape(B.n * B.m, k)
        weighted = B.apply(eps)
    else:
        weighted = np.einsum("nij,njk->nik", B.factor, zn).reshape(B.n * B.m, k)
    theta_prime = A.solve(op.rmatvec(weighted))
    return SampleSet(theta0, theta_prime, theta0.copy(), idx, eps)


def loss_L(z, op: DesignOperator, B: NoisePrecision, A: PriorPrecision, eps, theta0):
    """Value and gradient of ``L``; ``z`` may hold several samples as columns."""
    r = op.matvec(z) - eps
    Br = B.apply(r)
    dz = z - theta0
    Adz = A.apply(dz)
    value = 0.5 * np.sum(r * Br, axis=0) + 0.5 * np.sum(dz * Adz, axis=0)
    return value, op.rmatvec(Br) + Adz


def loss_Lprime(z, op: DesignOperator, B: NoisePrecision, A: PriorPrecision, theta_n):
    """Value and gradient of ``L'``."""
    f = op.matvec(z)
    Bf = B.apply(f)
    dz = z - theta_n
    Adz = A.apply(dz)
    value = 0.5 * np.sum(f * Bf, axis=0) + 0.5 * np.sum(dz * Adz, axis=0)
    return value, op.rmatvec(Bf) + Adz


def minibatch_grad(z, batch, variant: str, op: DesignOperator, B: NoisePrecision, A: PriorPrecision,
                   *, eps=None, theta0=None, theta_n=None) -> np.ndarray:
    """Unbiased gradient estimate from the datapoints in ``batch``.

    The data term is rescaled by ``n / |batch|``; the regulariser gradient is
    exact.  ``batch=None`` gives the full gradient.
    """
    n = op.n
    if batch is not None:
        batch = np.asarray(batch)
        if batch.size == 0:
            raise ContractError("empty batch")
        if batch.min() < 0 or batch.max() >= n:
            raise ContractError(f"batch index out of range [0, {n})")
        scale = n / batch.size
    else:
        scale = 1.0
    f = op.matvec_rows(z, batch)
    if variant == "L":
        eb = eps if batch is None else eps.reshape(n, op.m, *eps.shape[1:])[batch].reshape(f.shape)
        data = op.rmatvec_rows(B.apply(f - eb, batch), batch)
        reg = A.apply(z - theta0)
    elif variant == "Lprime":
        data = op.rmatvec_rows(B.apply(f, batch), batch)
        reg = A.apply(z - theta_n)
    else:
        raise ParameterError(f"unknown loss variant {variant!r}")
    return scale * data + reg


def _clip(g: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return g
    norms = np.linalg.norm(g, axis=0)
    factor = np.minimum(1.0, max_norm / np.maximum(norms, 1e-300))
    return g * factor


def minimize(z0: np.ndarray, batch_grad: Callable, objective: Callable, n: int, config: SgdConfig,
             rng: np.random.Generator | None = None,
             callback: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Generic Nesterov-SGD driver over ``n`` datapoints.

    ``batch_grad(z, idx)`` returns an unbiased gradient (``idx=None`` for the
    full batch) and ``objective(z)`` the full objective, evaluated once per
    epoch for divergence detection.  Batches are drawn by shuffling once per
    epoch.  ``callback(epoch, z)`` runs after every epoch.
    """
    if rng is None:
        rng = rngmod.stream(config.seed, "batch")
    z = np.array(z0, dtype=np.float64, copy=True)
    vel = np.zeros_like(z)
    batch = n if config.batch_size is None else min(config.batch_size, n)
    per_epoch = max(1, math.ceil(n / batch))
    total = config.epochs * per_epoch
    start = np.atleast_1d(objective(z))
    limit = config.divergence_factor * np.maximum(np.abs(start), 1.0)
    if callback is not None:
        callback(0, z)
    step = 0
    mu = config.momentum
    for epoch in range(config.epochs):
        perm = rng.permutation(n) if batch < n else None
        for b in range(per_epoch):
            idx = None if perm is None else perm[b * batch:(b + 1) * batch]
            g = _clip(batch_grad(z, idx), config.clip_norm)
            vel = mu * vel + g
            z -= config.lr_at(step, total) * (g + mu * vel)
            step += 1
        obj = np.atleast_1d(objective(z))
        if not np.all(np.isfinite(obj)) or np.any(obj > limit):
            raise DivergenceError(
                f"objective grew from {np.max(start):.3g} to {np.max(obj):.3g} by epoch {epoch + 1}; "
                "reduce the learning rate"
            )
        if callback is not None:
            callback(epoch + 1, z)
    return z


def sgd_minimize(samples, config: SgdConfig, variant: str, op: DesignOperator, B: NoisePrecision,
                 A: PriorPrecision, *, reference: np.ndarray | None = None,
                 trace: list | None = None) -> np.ndarray:
    """Optimise one ``SampleJob`` or a whole ``SampleSet`` from its current
    iterate and return the final iterate(s).

    All samples in a set share one batch schedule (drawn from the ``batch``
    stream of ``config.seed``); each sample's minimiser depends only on its
    own regularisers.  If ``trace`` is a list, rows
    ``(step, sample_index, objective, sample_error)`` are appended after every
    epoch, where ``sample_error = ||z - ref||^2 / ||ref||^2`` against
    ``reference`` (NaN when absent).
    """
    single = isinstance(samples, SampleJob)
    s = SampleSet.from_jobs([samples]) if single else samples
    if variant == "L" and s.eps is None:
        raise ParameterError("loss L needs the raw noise draw; use draw_samples(with_noise=True)")
    theta_n = s.theta_n
    if reference is not None:
        reference = np.asarray(reference).reshape(s.z.shape)

    def grad(z, idx):
        return minibatch_grad(z, idx, variant, op, B, A, eps=s.eps, theta0=s.theta0, theta_n=theta_n)

    def objective(z):
        if variant == "L":
            return loss_L(z, op, B, A, s.eps, s.theta0)[0]
        return loss_Lprime(z, op, B, A, theta_n)[0]

    callback = None
    if trace is not None:
        def callback(epoch, z):
            obj = np.atleast_1d(objective(z))
            if reference is not None:
                err = np.sum((z - reference) ** 2, axis=0) / np.sum(reference**2, axis=0)
            else:
                err = np.full(s.k, np.nan)
            for c in range(s.k):
                trace.append((epoch, int(s.index[c]), float(obj[c]), float(err[c])))

    z = minimize(s.z, grad, objective, op.n, config, callback=callback)
    return z[:, 0] if single else z


class VarianceGap(NamedTuple):
    estimate: float
    stderr: float


def _blocks(op: DesignOperator) -> np.ndarray:
    if isinstance(op, DenseDesign) and not scipy.sparse.issparse(op.matrix):
        return op.matrix.reshape(op.n, op.m, op.dim)
    return np.stack([op.block(i) for i in range(op.n)])


def grad_variance_gap(op: DesignOperator, B: NoisePrecision, A: PriorPrecision, mc_draws: int,
                      rng: np.random.Generator, at="init", chunk: int = 256,
                      form: str = "datapoint") -> VarianceGap:
    """Monte Carlo estimate of the gradient-variance gap ``Tr Delta``.

    ``form="datapoint"`` estimates ``(Tr Var g - Tr Var g') / n`` where ``g``
    and ``g'`` are the single-datapoint data-term gradient estimates of ``L``
    and ``L'``, with variance over the datapoint index (enumerated exactly)
    and over ``(E, theta0)``.  ``form="batch"`` estimates
    ``Tr{Var(Phi^T B E) - 2 Cov(Phi^T B Phi z, Phi^T B E)}`` over
    ``(E, theta0)`` only.  Both equal ``Tr M`` when ``z`` is independent of
    ``E``; when ``z`` depends on ``E`` only the batch form has the closed
    form of ``variance_gap_closed_form`` (the datapoint form drops the
    cross-datapoint covariance, see ``variance_gap_datapoint_exact``).

    ``at`` selects the evaluation point: ``"init"`` (``z = theta0``),
    ``"converged"`` (``z`` the exact minimiser) or a callable
    ``at(theta0, eps) -> z``.
    """
    if mc_draws < 2:
        raise ParameterError("need at least two Monte Carlo draws")
    if form not in ("datapoint", "batch"):
        raise ParameterError(f"unknown form {form!r}")
    n = op.n
    P = _blocks(op)  # (n, m, d)
    if at == "init":
        zfn = lambda t0, e: t0  # noqa: E731
    elif at == "converged":
        M = dense_curvature(op, B)
        H = M + np.diag(A.diag)
        post = ExactPosterior(np.zeros(op.dim), H, np.linalg.cholesky(H), M)
        zfn = lambda t0, e: primal_sample(op, B, A, t0, e, post)  # noqa: E731
    elif callable(at):
        zfn = at
    else:
        raise ParameterError(f"unknown evaluation point {at!r}")

    per_draw = []
    sum_a = np.zeros(op.dim)
    sum_b = np.zeros(op.dim)
    done = 0
    while done < mc_draws:
        c = min(chunk, mc_draws - done)
        t0 = (rng.standard_normal((op.dim, c))) / np.sqrt(A.diag)[:, None]
        eps = sample_noise(B, rng, size=c)
        z = zfn(t0, eps)
        f = np.einsum("nid,dk->nik", P, z)
        e3 = eps.reshape(n, op.m, c)
        a = np.einsum("nid,nij,njk->nkd", P, B.blocks, f)  # per-datapoint Phi^T B Phi z
        b = np.einsum("nid,nij,njk->nkd", P, B.blocks, e3)  # per-datapoint Phi^T B E
        if form == "datapoint":
            a, b = n * a, n * b
            diff = np.sum(b * b, axis=2) - 2.0 * np.sum(a * b, axis=2)  # ||g||^2 - ||g'||^2
            per_draw.append(diff.mean(axis=0) / n)
            sum_a += np.sum(a, axis=(0, 1))
            sum_b += np.sum(b, axis=(0, 1))
        else:
            u, v = b.sum(axis=0), a.sum(axis=0)  # (c, d)
            per_draw.append(np.sum(u * u, axis=1) - 2.0 * np.sum(v * u, axis=1))
            sum_a += v.sum(axis=0)
            sum_b += u.sum(axis=0)
        done += c
    D = np.concatenate(per_draw)
    if form == "datapoint":
        count = n * mc_draws
        mean_g, mean_gp = (sum_a - sum_b) / count, sum_a / count
        correction = (mean_g @ mean_g - mean_gp @ mean_gp) / n
    else:
        ma, mb = sum_a / mc_draws, sum_b / mc_draws
        correction = mb @ mb - 2.0 * ma @ mb
    est = float(D.mean() - correction)
    return VarianceGap(est, float(D.std(ddof=1) / math.sqrt(mc_draws)))


def prefers_Lprime_at_convergence(alpha: float, gamma: float, trace_M: float) -> bool:
    """True when ``L'`` has lower gradient variance at the optimum:
    ``2 alpha gamma > Tr M``."""
    if alpha <= 0 or gamma <= 0 or trace_M <= 0:
        raise ParameterError("alpha, gamma and Tr M must be positive")
    return bool(2.0 * alpha * gamma > trace_M)


def max_curvature(op: DesignOperator, B: NoisePrecision, A: PriorPrecision, iters: int = 50,
                  seed: int = 0) -> float:
    """Power-iteration estimate of the largest eigenvalue of ``Phi^T B Phi + A``."""
    v = rngmod.stream(seed, "power").standard_normal(op.dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = op.rmatvec(B.apply(op.matvec(v))) + A.apply(v)
        lam = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
    return lam
