"""Observation-space (kernelised) inference.

Posterior samples and the posterior mean are obtained from solves against
``K = Phi A^{-1} Phi^T + B^{-1}`` (size ``nm``), which is cheaper than the
parameter-space route when ``nm << d``.  Solves use conjugate gradients with
a randomised low-rank preconditioner.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import rng as rngmod
from .errors import ContractError, NumericalError, ParameterError
from .model import DesignOperator, NoisePrecision, PriorPrecision, Problem, apply_gprior, gprior_exact
from .em import EmState, mstep_update

__all__ = [
    "KernelOperator",
    "LowRankPreconditioner",
    "PcgResult",
    "kernel_vec_product",
    "build_preconditioner",
    "pcg_solve",
    "matheron_sample",
    "dual_posterior_mean",
    "DualEmConfig",
    "run_dual_em",
]

log = logging.getLogger(__name__)


class KernelOperator:
    """``v -> Phi A^{-1} Phi^T v + B^{-1} v`` on stacked observation vectors."""

    def __init__(self, op: DesignOperator, A: PriorPrecision, B: NoisePrecision):
        if not B.definite:
            raise ParameterError("kernel form needs strictly positive definite noise blocks")
        if (B.n, B.m) != (op.n, op.m) or A.dim != op.dim:
            raise ContractError("design, prior and noise dimensions disagree")
        self.op, self.A, self.B = op, A, B
        self.size = op.n * op.m

    def lowrank_matvec(self, v: np.ndarray) -> np.ndarray:
        """``Phi A^{-1} Phi^T v`` only."""
        return self.op.matvec(self.A.solve(self.op.rmatvec(v)))

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.size:
            raise ContractError(f"vector has length {v.shape[0]}, expected {self.size}")
        return self.lowrank_matvec(v) + self.B.solve(v)

    __matmul__ = matvec

    def to_dense(self) -> np.ndarray:
        return self.matvec(np.eye(self.size))


def kernel_vec_product(K: KernelOperator, v: np.ndarray) -> np.ndarray:
    return K.matvec(v)


class LowRankPreconditioner:
    """Inverse of ``P = B^{-1} + U diag(lam) U^T`` via the Woodbury identity.

    ``P^{-1} v = B v - B U S (I + S U^T B U S)^{-1} S U^T B v`` with
    ``S = diag(lam)^{1/2}``.  With rank 0 this is just ``B``.
    """

    def __init__(self, basis: np.ndarray, eigvals: np.ndarray, B: NoisePrecision):
        self.basis = np.asarray(basis, dtype=np.float64)
        self.eigvals = np.clip(np.asarray(eigvals, dtype=np.float64), 0.0, None)
        self.B = B
        r = self.eigvals.shape[0]
        self.rank = r
        if r:
            W = self.basis * np.sqrt(self.eigvals)[None, :]
            self._W = W
            self._BW = B.apply(W)
            core = np.eye(r) + W.T @ self._BW
            self._core = scipy.linalg.cho_factor(0.5 * (core + core.T), lower=True)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        Bv = self.B.apply(v)
        if not self.rank:
            return Bv
        return Bv - self._BW @ scipy.linalg.cho_solve(self._core, self._W.T @ Bv)

    def forward(self, v: np.ndarray) -> np.ndarray:
        """``P v`` (for testing the inverse)."""
        out = self.B.solve(v)
        if self.rank:
            lam = self.eigvals if v.ndim == 1 else self.eigvals[:, None]
            out = out + self.basis @ (lam * (self.basis.T @ v))
        return out


def build_preconditioner(K: KernelOperator, rank: int, oversampling: int = 10,
                         rng: np.random.Generator | None = None, power_iters: int = 1) -> LowRankPreconditioner:
    """Randomised eigen-sketch of ``G = Phi A^{-1} Phi^T``, the part of ``K``
    above the ``B^{-1}`` floor.

    A Gaussian test matrix with ``rank + oversampling`` columns is pushed
    through ``G`` (plus ``power_iters`` subspace iterations), orthonormalised,
    and the projected ``Q^T G Q`` is diagonalised; the top ``rank`` pairs
    are kept.
    """
    N = K.size
    if rank < 0 or rank >= N:
        raise ContractError(f"preconditioner rank must lie in [0, {N}), got {rank}")
    if rank == 0:
        return LowRankPreconditioner(np.zeros((N, 0)), np.zeros(0), K.B)
    if rng is None:
        rng = rngmod.stream(0, "sketch")
    ell = min(N, rank + oversampling)
    Q = np.linalg.qr(K.lowrank_matvec(rng.standard_normal((N, ell))))[0]
    for _ in range(power_iters):
        Q = np.linalg.qr(K.lowrank_matvec(Q))[0]
    GQ = K.lowrank_matvec(Q)
    T = Q.T @ GQ
    w, V = np.linalg.eigh(0.5 * (T + T.T))
    order = np.argsort(w)[::-1][:rank]
    return LowRankPreconditioner(Q @ V[:, order], w[order], K.B)


@dataclass
class PcgResult:
    solution: np.ndarray
    iterations: np.ndarray
    final_residual: np.ndarray
    converged: np.ndarray

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))


def _apply(op, v):
    return op.matvec(v) if hasattr(op, "matvec") else op @ v


def pcg_solve(K, rhs: np.ndarray, P=None, tol: float = 1e-3, max_iter: int = 150,
              x0: np.ndarray | None = None) -> PcgResult:
    """Preconditioned CG on every column of ``rhs`` at once.

    ``K`` and ``P`` expose ``matvec`` (``P`` applies the inverse
    preconditioner) or are arrays.  Stops a column when
    ``||K x - b|| <= tol ||b||``; the reported residual is recomputed from
    scratch at the end.  Columns that hit ``max_iter`` are flagged in
    ``converged`` rather than raising.
    """
    b = np.asarray(rhs, dtype=np.float64)
    single = b.ndim == 1
    if single:
        b = b[:, None]
    N, k = b.shape
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64).reshape(N, k)
    bnorm = np.linalg.norm(b, axis=0)
    target = tol * bnorm
    precond = (lambda v: v) if P is None else (lambda v: _apply(P, v))
    iters = np.zeros(k, dtype=np.intp)
    active = bnorm > 0
    x[:, ~active] = 0.0
    total = 0
    # restart once from the current iterate if recurrence drift hides a true residual above tol
    for _attempt in range(2):
        r = b - _apply(K, x)
        done = ~active | (np.linalg.norm(r, axis=0) <= target)
        z = precond(r)
        p = z.copy()
        rz = np.sum(r * z, axis=0)
        while total < max_iter and not np.all(done):
            Kp = _apply(K, p)
            pKp = np.sum(p * Kp, axis=0)
            live = ~done
            step = np.where(live, rz / np.where(live, pKp, 1.0), 0.0)
            x += step * p
            r -= step * Kp
            total += 1
            iters[live] += 1
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(r))):
                raise NumericalError(f"non-finite value in conjugate gradients at iteration {total}")
            done = done | (np.linalg.norm(r, axis=0) <= target)
            z = precond(r)
            rz_new = np.sum(r * z, axis=0)
            beta = np.where(~done, rz_new / np.where(rz != 0, rz, 1.0), 0.0)
            p = z + beta * p
            rz = rz_new
        true_res = np.linalg.norm(b - _apply(K, x), axis=0)
        if np.all(true_res <= target) or total >= max_iter:
            break
    rel = np.where(bnorm > 0, true_res / np.where(bnorm > 0, bnorm, 1.0), 0.0)
    converged = rel <= tol
    if not np.all(converged):
        log.warning("conjugate gradients stopped at %d iterations with residual %.3g > %.3g",
                    total, float(rel.max()), tol)
    if single:
        return PcgResult(x[:, 0], iters[:1], rel[:1], converged[:1])
    return PcgResult(x, iters, rel, converged)


def matheron_sample(theta0: np.ndarray, eps: np.ndarray, op: DesignOperator, A: PriorPrecision,
                    B: NoisePrecision, *, P=None, tol: float = 1e-3, max_iter: int = 150,
                    K: KernelOperator | None = None):
    """Posterior sample ``theta0 + A^{-1} Phi^T c`` with ``K c = E - Phi theta0``.

    Returns ``(zeta, PcgResult)``; columns of ``theta0``/``eps`` are
    independent samples.
    """
    K = KernelOperator(op, A, B) if K is None else K
    res = pcg_solve(K, eps - op.matvec(theta0), P, tol, max_iter)
    return theta0 + A.solve(op.rmatvec(res.solution)), res


def dual_posterior_mean(Y: np.ndarray, delta, op: DesignOperator, A: PriorPrecision, B: NoisePrecision,
                        *, P=None, tol: float = 1e-3, max_iter: int = 150, K: KernelOperator | None = None):
    """Posterior mean ``A^{-1} Phi^T c`` with ``K c = Y + delta``.

    ``delta`` is the target offset (minus the affine constant of a
    linearised model); pass ``None`` or zeros when it cancels.
    Returns ``(theta_bar, PcgResult)``.
    """
    K = KernelOperator(op, A, B) if K is None else K
    rhs = np.asarray(Y, dtype=np.float64).reshape(-1)
    if delta is not None:
        rhs = rhs + np.asarray(delta, dtype=np.float64).reshape(-1)
    res = pcg_solve(K, rhs, P, tol, max_iter)
    return A.solve(op.rmatvec(res.solution)), res


@dataclass(frozen=True)
class DualEmConfig:
    tol: float = 1e-3
    max_iter: int = 150
    rank: int | None = None
    oversampling: int = 10
    power_iters: int = 1
    em_tol: float = 1e-3

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1:
            raise ParameterError("CG tolerance must be positive and max_iter >= 1")
        if self.rank is not None and self.rank < 0:
            raise ParameterError("preconditioner rank must be non-negative")

    def rank_for(self, size: int) -> int:
        r = min(400, size // 4) if self.rank is None else self.rank
        return min(r, size - 1)


@dataclass
class DualEmState(EmState):
    pcg_stats: list = field(default_factory=list)
    degraded: bool = False

    PCG_HEADER = ("solve_id", "iterations", "final_residual")


def run_dual_em(problem: Problem, k: int, em_steps: int, config: DualEmConfig, seed: int, *,
                alpha0: float = 1.0, gprior: bool = False, redraw: bool = True) -> DualEmState:
    """EM with Matheron-rule E-steps solved by preconditioned CG.

    Every step draws fresh ``(theta0, E)`` (unless ``redraw=False``, which
    rescales the first draw instead), rebuilds the preconditioner at the
    current ``alpha`` and solves for the mean and ``k`` samples in one
    batched CG call.  With ``gprior`` the features are normalised once by
    exact column norms before the loop.
    """
    if k < 1:
        raise ParameterError("need at least one sample")
    if em_steps < 0:
        raise ParameterError("em_steps must be non-negative")
    B = problem.noise
    if not B.definite:
        raise ParameterError("kernel form needs strictly positive definite noise blocks")
    scale = None
    if gprior:
        scale = gprior_exact(problem.design, B, method="probe")
        problem = problem.with_design(apply_gprior(problem.design, scale))
    op = problem.design
    N = op.n * op.m
    delta = -problem.offset.reshape(-1)
    alpha = float(alpha0)
    state = DualEmState(alpha=alpha, theta_bar=np.zeros(op.dim), samples=None, scale=scale)

    def draws(tag):
        z0 = np.stack([rngmod.stream(seed, "prior" + tag, j).standard_normal(op.dim) for j in range(k)], 1)
        zn = np.stack([rngmod.stream(seed, "noise" + tag, j).standard_normal((B.n, B.m)) for j in range(k)], -1)
        eps = np.linalg.solve(B.factor.transpose(0, 2, 1), zn).reshape(N, k)
        return z0, eps

    base0, eps = draws("")
    solve_id = 0
    step = 0
    while True:
        final = step >= em_steps or state.converged
        A = PriorPrecision.isotropic_prior(alpha, op.dim)
        if redraw and step > 0:
            base0, eps = draws(f"/em{step}")
        theta0 = base0 / math.sqrt(alpha)
        K = KernelOperator(op, A, B)
        P = build_preconditioner(K, config.rank_for(N), config.oversampling,
                                 rngmod.stream(seed, "sketch", step), config.power_iters)
        rhs = np.column_stack([problem.Y + delta, eps - op.matvec(theta0)])
        res = pcg_solve(K, rhs, P, config.tol, config.max_iter)
        for c in range(rhs.shape[1]):
            state.pcg_stats.append((solve_id, int(res.iterations[c]), float(res.final_residual[c])))
            solve_id += 1
        if not res.all_converged:
            state.degraded = True
        upd = A.solve(op.rmatvec(res.solution))
        theta_bar = upd[:, 0]
        Z = theta0 + upd[:, 1:]
        state.theta_bar = theta_bar
        if final:
            state.prediction_samples = Z
            break
        gamma = float(np.mean(B.quad(op.matvec(Z))))
        new_alpha = mstep_update(gamma, theta_bar)
        state.alpha_history.append(alpha)
        state.gamma_history.append(gamma)
        state.theta_bar_sq_history.append(float(theta_bar @ theta_bar))
        log.info("dual EM step %d: alpha=%g gamma_hat=%g", step, alpha, gamma)
        change = abs(new_alpha - alpha) / alpha
        alpha = new_alpha
        step += 1
        state.step = step
        # on convergence one more pass runs at the selected alpha for the final mean and samples
        state.converged = change < config.em_tol
    state.alpha = alpha
    return state
