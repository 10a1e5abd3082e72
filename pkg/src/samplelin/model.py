"""The conjugate Gaussian multi-output linear model.

Observations are ``y_i = phi(x_i) theta + eta_i`` with ``phi(x_i)`` an
``m x d`` block, ``theta ~ N(0, A^{-1})`` and ``eta_i ~ N(0, B_i^{-1})``.
Stacked vectors in observation space are datapoint-major: entry ``i*m + o``
is output ``o`` of datapoint ``i``.  Everything that acts on a vector also
accepts a matrix whose columns are independent vectors, which is how many
samples are processed at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse

from .errors import ContractError, FactorizationError, ParameterError

__all__ = [
    "Dataset",
    "DesignOperator",
    "DenseDesign",
    "ScaledDesign",
    "NoisePrecision",
    "PriorPrecision",
    "Problem",
    "apply_design",
    "apply_design_transpose",
    "sample_prior",
    "sample_noise",
    "sample_weighted_noise",
    "gprior_exact",
    "gprior_sampled",
    "apply_gprior",
    "softmax",
]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class Dataset:
    """Inputs ``x_1..x_n`` (any per-item objects or rows of an array) and
    ``m``-dimensional targets stacked as an ``(n, m)`` array."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.targets, dtype=np.float64)
        if t.ndim == 1:
            t = t[:, None]
        if t.ndim != 2:
            raise ContractError("targets must be an (n, m) array")
        if len(self.inputs) != t.shape[0]:
            raise ContractError(
                f"{len(self.inputs)} inputs but {t.shape[0]} targets"
            )
        object.__setattr__(self, "targets", t)

    @property
    def n(self) -> int:
        return self.targets.shape[0]

    @property
    def m(self) -> int:
        return self.targets.shape[1]

    @property
    def Y(self) -> np.ndarray:
        return self.targets.reshape(-1)


class DesignOperator:
    """Stacked design matrix ``Phi`` of shape ``(n*m, d)``, seen through
    products only.

    Subclasses implement ``matvec``/``rmatvec`` and the minibatch variants
    ``matvec_rows``/``rmatvec_rows`` which restrict to a subset of
    datapoints.  ``block`` and ``to_dense`` have generic (slow) fallbacks.
    """

    n: int
    m: int
    dim: int

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n * self.m, self.dim)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.matvec_rows(v, None)

    def rmatvec(self, u: np.ndarray) -> np.ndarray:
        return self.rmatvec_rows(u, None)

    def matvec_rows(self, v, idx) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def rmatvec_rows(self, u, idx) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def block(self, i: int) -> np.ndarray:
        """Materialise ``phi(x_i)`` with ``m`` transpose products."""
        u = np.zeros((self.m, self.m))
        np.fill_diagonal(u, 1.0)
        return self.rmatvec_rows(u, np.array([i])).T

    def to_dense(self) -> np.ndarray:
        return self.matvec(np.eye(self.dim))

    def column_scaled(self, s: np.ndarray) -> "DesignOperator":
        return ScaledDesign(self, s)

    # shape checks shared by subclasses
    def _check_param_vec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.dim or v.ndim > 2:
            raise ContractError(
                f"expected parameter vector of length {self.dim}, got shape {v.shape}"
            )
        return v

    def _check_obs_vec(self, u: np.ndarray, rows: int) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if u.shape[0] != rows or u.ndim > 2:
            raise ContractError(
                f"expected observation vector of length {rows}, got shape {u.shape}"
            )
        return u


def _row_index(idx: np.ndarray, m: int) -> np.ndarray:
    return (np.asarray(idx)[:, None] * m + np.arange(m)[None, :]).reshape(-1)


class DenseDesign(DesignOperator):
    """Design operator backed by an explicit ``(n*m, d)`` array or a scipy
    sparse matrix."""

    def __init__(self, phi, m: int = 1):
        if scipy.sparse.issparse(phi):
            self._phi = scipy.sparse.csr_matrix(phi, dtype=np.float64)
        else:
            self._phi = _readonly(np.atleast_2d(phi))
        rows, self.dim = self._phi.shape
        if m < 1 or rows % m:
            raise ContractError(f"{rows} rows cannot be split into blocks of {m}")
        self.m = int(m)
        self.n = rows // self.m

    @classmethod
    def from_blocks(cls, blocks: Sequence[np.ndarray]) -> "DenseDesign":
        blocks = [np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in blocks]
        return cls(np.vstack(blocks), m=blocks[0].shape[0])

    @property
    def matrix(self):
        return self._phi

    def matvec_rows(self, v, idx):
        v = self._check_param_vec(v)
        if idx is None:
            return np.asarray(self._phi @ v)
        return np.asarray(self._phi[_row_index(idx, self.m)] @ v)

    def rmatvec_rows(self, u, idx):
        if idx is None:
            u = self._check_obs_vec(u, self.n * self.m)
            return np.asarray(self._phi.T @ u)
        rows = _row_index(idx, self.m)
        u = self._check_obs_vec(u, len(rows))
        return np.asarray(self._phi[rows].T @ u)

    def block(self, i):
        b = self._phi[i * self.m:(i + 1) * self.m]
        return b.toarray() if scipy.sparse.issparse(b) else np.array(b)

    def to_dense(self):
        return self._phi.toarray() if scipy.sparse.issparse(self._phi) else np.array(self._phi)


class ScaledDesign(DesignOperator):
    """``Phi diag(s)``: every column of the wrapped operator rescaled."""

    def __init__(self, base: DesignOperator, s: np.ndarray):
        s = np.asarray(s, dtype=np.float64).reshape(-1)
        if s.shape[0] != base.dim:
            raise ContractError(f"scale has length {s.shape[0]}, operator has {base.dim} columns")
        self.base = base
        self.scale = _readonly(s)
        self.n, self.m, self.dim = base.n, base.m, base.dim

    def _scale(self, v):
        return v * (self.scale if v.ndim == 1 else self.scale[:, None])

    def matvec_rows(self, v, idx):
        v = self._check_param_vec(v)
        return self.base.matvec_rows(self._scale(v), idx)

    def rmatvec_rows(self, u, idx):
        return self._scale(self.base.rmatvec_rows(u, idx))

    def block(self, i):
        return self.base.block(i) * self.scale[None, :]


def apply_design(op: DesignOperator, v: np.ndarray) -> np.ndarray:
    """``Phi v``, stacked over datapoints."""
    return op.matvec(v)


def apply_design_transpose(op: DesignOperator, u: np.ndarray) -> np.ndarray:
    """``Phi^T u``."""
    return op.rmatvec(u)


class NoisePrecision:
    """Block-diagonal noise precision ``B = diag(B_1, ..., B_n)``.

    Blocks may be merely positive semi-definite (categorical curvature).  A
    lower Cholesky factor is cached when every block is positive definite;
    otherwise an eigendecomposition factor with negative eigenvalues clamped
    to zero is kept, so ``B_i = L_i L_i^T`` holds in both cases but only the
    definite case supports drawing ``eps ~ N(0, B^{-1})`` or solving.
    """

    def __init__(self, blocks: np.ndarray, *, symmetry_tol: float = 1e-12):
        blocks = np.asarray(blocks, dtype=np.float64)
        if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2]:
            raise ContractError("noise blocks must have shape (n, m, m)")
        asym = np.max(np.abs(blocks - blocks.transpose(0, 2, 1)), initial=0.0)
        scale = max(1.0, np.max(np.abs(blocks), initial=0.0))
        if asym > symmetry_tol * scale:
            raise ParameterError(f"noise blocks not symmetric (max asymmetry {asym:.3g})")
        self.blocks = _readonly(0.5 * (blocks + blocks.transpose(0, 2, 1)))
        self.n, self.m = blocks.shape[0], blocks.shape[1]
        self._isotropic = None
        try:
            factor = np.linalg.cholesky(self.blocks)
            self.definite = True
        except np.linalg.LinAlgError:
            w, V = np.linalg.eigh(self.blocks)
            if np.min(w, initial=0.0) < -1e-10 * scale:
                raise ParameterError("noise blocks must be positive semi-definite")
            factor = V * np.sqrt(np.clip(w, 0.0, None))[:, None, :]
            self.definite = False
        self.factor = _readonly(factor)

    @classmethod
    def isotropic(cls, n: int, m: int, precision: float = 1.0) -> "NoisePrecision":
        if precision <= 0:
            raise ParameterError("noise precision must be positive")
        out = cls(np.broadcast_to(precision * np.eye(m), (n, m, m)))
        out._isotropic = float(precision)
        return out

    @property
    def isotropic_precision(self) -> float | None:
        return self._isotropic

    def _blocked(self, u, n):
        u = np.asarray(u, dtype=np.float64)
        if u.shape[0] != n * self.m:
            raise ContractError(f"expected length {n * self.m}, got {u.shape[0]}")
        return u.reshape(n, self.m, *u.shape[1:])

    def _select(self, arr, idx):
        return arr if idx is None else arr[np.asarray(idx)]

    def apply(self, u: np.ndarray, idx=None) -> np.ndarray:
        """``B u`` (or the rows ``idx`` of it for a minibatch vector)."""
        blocks = self._select(self.blocks, idx)
        ub = self._blocked(u, blocks.shape[0])
        if ub.ndim == 2:
            out = np.einsum("nij,nj->ni", blocks, ub)
        else:
            out = np.einsum("nij,njk->nik", blocks, ub)
        return out.reshape(u.shape)

    def solve(self, u: np.ndarray, idx=None) -> np.ndarray:
        """``B^{-1} u``; only for positive-definite blocks."""
        self._require_definite("solve")
        L = self._select(self.factor, idx)
        ub = self._blocked(u, L.shape[0])
        if ub.ndim == 2:
            ub = ub[:, :, None]
        # B^{-1} u = L^{-T} L^{-1} u, one small triangular pair per block
        y = np.linalg.solve(L, ub)
        x = np.linalg.solve(L.transpose(0, 2, 1), y)
        return x.reshape(np.shape(u))

    def quad(self, u: np.ndarray) -> np.ndarray:
        """``u^T B u`` per column of ``u``."""
        return np.sum(u * self.apply(u), axis=0)

    def _require_definite(self, what: str):
        if not self.definite:
            raise FactorizationError(
                f"cannot {what}: noise precision has singular blocks"
            )

    def logdet(self) -> float:
        self._require_definite("take log-determinant")
        return 2.0 * float(np.sum(np.log(np.diagonal(self.factor, axis1=1, axis2=2))))

    def to_dense(self) -> np.ndarray:
        return scipy.linalg.block_diag(*self.blocks) if self.n else np.zeros((0, 0))


@dataclass(frozen=True)
class PriorPrecision:
    """Diagonal prior precision ``A``.

    ``variant`` is one of ``"isotropic"`` (``alpha I``), ``"gprior"``
    (``alpha diag(s^-2)``) or ``"layerwise"`` (``alpha_l`` on the
    coordinates of layer ``l``).  All three are diagonal, so ``A`` is carried
    as its diagonal.
    """

    variant: str
    alpha: np.ndarray
    dim: int
    scale: np.ndarray | None = None
    layers: np.ndarray | None = None
    diag: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64))
        if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
            raise ParameterError(f"prior precision must be positive, got {alpha}")
        if self.variant == "isotropic":
            diag = np.full(self.dim, alpha[0])
        elif self.variant == "gprior":
            s = np.asarray(self.scale, dtype=np.float64)
            if s.shape != (self.dim,) or np.any(s <= 0) or not np.all(np.isfinite(s)):
                raise ParameterError("g-prior scale must be finite, positive, length dim")
            diag = alpha[0] / s**2
        elif self.variant == "layerwise":
            layers = np.asarray(self.layers, dtype=np.intp)
            if layers.shape != (self.dim,):
                raise ContractError("layer index map must have length dim")
            if layers.min(initial=0) < 0 or layers.max(initial=-1) >= alpha.shape[0]:
                raise ContractError("layer index out of range")
            if np.any(np.bincount(layers, minlength=alpha.shape[0]) == 0):
                raise ParameterError("every layer must own at least one coordinate")
            object.__setattr__(self, "layers", layers)
            diag = alpha[layers]
        else:
            raise ParameterError(f"unknown prior variant {self.variant!r}")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "diag", _readonly(diag))

    @classmethod
    def isotropic_prior(cls, alpha: float, dim: int) -> "PriorPrecision":
        return cls("isotropic", alpha, dim)

    @classmethod
    def gprior(cls, alpha: float, scale: np.ndarray) -> "PriorPrecision":
        scale = np.asarray(scale, dtype=np.float64)
        return cls("gprior", alpha, scale.shape[0], scale=scale)

    @classmethod
    def layerwise(cls, alphas, layers) -> "PriorPrecision":
        layers = np.asarray(layers)
        return cls("layerwise", alphas, layers.shape[0], layers=layers)

    def with_alpha(self, alpha) -> "PriorPrecision":
        return PriorPrecision(self.variant, alpha, self.dim, self.scale, self.layers)

    @property
    def scalar_alpha(self) -> float:
        if self.variant == "layerwise":
            raise ParameterError("layerwise prior has no single alpha")
        return float(self.alpha[0])

    @property
    def shape_diag(self) -> np.ndarray:
        """``diag(A) / alpha`` per coordinate: 1 (isotropic), ``s^-2``
        (g-prior) or 1 (layerwise)."""
        if self.variant == "gprior":
            return 1.0 / self.scale**2
        return np.ones(self.dim)

    def _d(self, v):
        return self.diag if np.ndim(v) == 1 else self.diag[:, None]

    def apply(self, v):
        return self._d(v) * v

    def solve(self, v):
        return v / self._d(v)

    def norm_sq(self, v) -> float:
        """``||v||_A^2``."""
        return float(np.sum(self.diag * v**2))


def sample_prior(A: PriorPrecision, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``theta0 ~ N(0, A^{-1})`` (``size`` draws as columns)."""
    shape = (A.dim,) if size is None else (A.dim, size)
    z = rng.standard_normal(shape)
    std = 1.0 / np.sqrt(A.diag)
    return z * (std if size is None else std[:, None])


def sample_noise(B: NoisePrecision, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``E ~ N(0, B^{-1})`` stacked over datapoints."""
    B._require_definite("sample N(0, B^-1)")
    k = 1 if size is None else size
    z = rng.standard_normal((B.n, B.m, k))
    # eps_i = L_i^{-T} z_i has covariance (L_i L_i^T)^{-1}
    eps = np.linalg.solve(B.factor.transpose(0, 2, 1), z)
    eps = eps.reshape(B.n * B.m, k)
    return eps[:, 0] if size is None else eps


def sample_weighted_noise(B: NoisePrecision, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``B E ~ N(0, B)``; defined for singular blocks too."""
    k = 1 if size is None else size
    z = rng.standard_normal((B.n, B.m, k))
    out = np.einsum("nij,njk->nik", B.factor, z).reshape(B.n * B.m, k)
    return out[:, 0] if size is None else out


def _cap_scale(raw: np.ndarray, cap: float) -> np.ndarray:
    finite = raw[np.isfinite(raw)]
    if finite.size == 0:
        raise ParameterError("every feature has zero second moment; g-prior undefined")
    limit = cap * float(np.median(finite))
    return np.where(np.isfinite(raw), np.minimum(raw, limit), limit)


def design_weighted_diag(op: DesignOperator, B: NoisePrecision, method: str = "blocks") -> np.ndarray:
    """``diag(Phi^T B Phi)``.

    ``method="blocks"`` sums ``diag(phi_i^T B_i phi_i)`` over datapoints;
    ``method="probe"`` pushes the ``d`` unit vectors through ``Phi`` instead,
    for operators that only expose products.
    """
    if method == "blocks":
        if isinstance(op, DenseDesign) and not scipy.sparse.issparse(op.matrix):
            P = op.matrix.reshape(op.n, op.m, op.dim)
            return np.einsum("nid,nij,njd->d", P, B.blocks, P)
        out = np.zeros(op.dim)
        for i in range(op.n):
            b = op.block(i)
            out += np.einsum("id,ij,jd->d", b, B.blocks[i], b)
        return out
    if method == "probe":
        out = np.empty(op.dim)
        for c in range(op.dim):
            e = np.zeros(op.dim)
            e[c] = 1.0
            col = op.matvec(e)
            out[c] = col @ B.apply(col)
        return out
    raise ParameterError(f"unknown method {method!r}")


def gprior_exact(op: DesignOperator, B: NoisePrecision, *, cap: float = 1e6, method: str = "blocks") -> np.ndarray:
    """Feature scales ``s_i = [Phi^T B Phi]_ii^{-1/2}``.

    Dead features (zero diagonal) get ``cap * median(s)`` instead of
    infinity.
    """
    diag = design_weighted_diag(op, B, method)
    with np.errstate(divide="ignore"):
        raw = np.where(diag > 0, 1.0 / np.sqrt(np.clip(diag, 0.0, None)), np.inf)
    return _cap_scale(raw, cap)


def gprior_sampled(theta_primes, alpha: float, *, cap: float = 1e6) -> np.ndarray:
    """Estimate the g-prior scales from ``theta'_j = alpha^{-1} Phi^T B E_j``.

    ``theta_primes`` holds one vector per column (or is a list of vectors).
    Uses ``E[theta' theta'^T] = alpha^{-2} Phi^T B Phi``.
    """
    if alpha <= 0:
        raise ParameterError("alpha must be positive")
    T = np.asarray(theta_primes, dtype=np.float64)
    if isinstance(theta_primes, (list, tuple)):
        T = T.T
    if T.ndim == 1:
        T = T[:, None]
    if T.shape[1] < 1:
        raise ParameterError("need at least one theta' vector")
    second = np.mean(T**2, axis=1)
    with np.errstate(divide="ignore"):
        raw = np.where(second > 0, 1.0 / (alpha * np.sqrt(np.clip(second, 0.0, None))), np.inf)
    return _cap_scale(raw, cap)


def apply_gprior(op: DesignOperator, s: np.ndarray) -> DesignOperator:
    """Normalised operator with blocks ``phi(x_i) diag(s)``."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (op.dim,):
        raise ContractError(f"scale has shape {s.shape}, expected ({op.dim},)")
    return ScaledDesign(op, s)


@dataclass(frozen=True)
class Problem:
    """A linear model ready for inference: design, noise precision, targets
    and the affine offset ``c`` of ``h(theta, x_i) = c_i + phi(x_i) theta``.

    ``likelihood`` is ``"gaussian"`` (targets are ``(n, m)`` reals and the
    data fit is ``||Y - c - Phi theta||_B^2 / 2``) or ``"categorical"``
    (targets are ``n`` integer labels, data fit is softmax cross-entropy and
    ``B`` holds its curvature).
    """

    design: DesignOperator
    noise: NoisePrecision
    targets: np.ndarray
    offset: np.ndarray | None = None
    likelihood: str = "gaussian"

    def __post_init__(self):
        op, B = self.design, self.noise
        if (B.n, B.m) != (op.n, op.m):
            raise ContractError(f"noise is {B.n}x{B.m} blocks, design is {op.n}x{op.m}")
        if self.likelihood == "gaussian":
            t = np.asarray(self.targets, dtype=np.float64).reshape(op.n, op.m)
        elif self.likelihood == "categorical":
            t = np.asarray(self.targets).astype(np.intp).reshape(op.n)
            if t.min(initial=0) < 0 or t.max(initial=0) >= op.m:
                raise ContractError("class label out of range")
        else:
            raise ParameterError(f"unknown likelihood {self.likelihood!r}")
        object.__setattr__(self, "targets", t)
        c = np.zeros((op.n, op.m)) if self.offset is None else np.asarray(self.offset, dtype=np.float64)
        object.__setattr__(self, "offset", c.reshape(op.n, op.m))

    @property
    def n(self) -> int:
        return self.design.n

    @property
    def m(self) -> int:
        return self.design.m

    @property
    def dim(self) -> int:
        return self.design.dim

    @property
    def Y(self) -> np.ndarray:
        if self.likelihood != "gaussian":
            raise ParameterError("stacked real targets exist only for gaussian likelihood")
        return self.targets.reshape(-1)

    def with_design(self, design: DesignOperator) -> "Problem":
        return Problem(design, self.noise, self.targets, self.offset, self.likelihood)

    def data_fit(self, theta: np.ndarray, idx=None) -> tuple[float, np.ndarray]:
        """Data-fit value and gradient over datapoints ``idx`` (all if None)."""
        op = self.design
        rows = slice(None) if idx is None else np.asarray(idx)
        pred = op.matvec_rows(theta, idx).reshape(-1, op.m) + self.offset[rows]
        if self.likelihood == "gaussian":
            r = (pred - self.targets[rows]).reshape(-1)
            w = self.noise.apply(r, idx)
            return 0.5 * float(r @ w), op.rmatvec_rows(w, idx)
        labels = self.targets[rows]
        z = pred - pred.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        value = -float(np.sum(logp[np.arange(len(labels)), labels]))
        g = np.exp(logp)
        g[np.arange(len(labels)), labels] -= 1.0
        return value, op.rmatvec_rows(g.reshape(-1), idx)
