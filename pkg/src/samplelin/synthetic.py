"""Synthetic conjugate problems drawn from the generative model."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse

from . import rng as rngmod
from .errors import ParameterError
from .io import save_instance
from .model import DenseDesign, NoisePrecision, Problem

__all__ = ["SyntheticSpec", "generate", "as_problem", "gen_synthetic", "ill_conditioned_kernel"]

KINDS = ("identity", "dense", "correlated", "inverse")


@dataclass(frozen=True)
class SyntheticSpec:
    """Problem shape and generation settings.

    ``kind``:

    * ``identity``: ``Phi = I`` (needs ``n*m = dim``), ``B = I`` and fixed
      targets ``y = 2, 4, 6, ...``;
    * ``dense``: Gaussian ``Phi`` whose singular values fall geometrically
      by ``conditioning``, isotropic noise;
    * ``correlated``: as ``dense`` with random SPD ``m x m`` noise blocks;
    * ``inverse``: sparse forward operator where each measurement sums a
      random contiguous run of parameters (a stand-in for tomographic line
      integrals), stored in COO form.

    Targets (except ``identity``) are ``Phi theta + eta`` with
    ``theta ~ N(0, I / alpha_true)`` and ``eta_i ~ N(0, B_i^{-1})``.
    """

    n: int
    m: int = 1
    dim: int = 2
    kind: str = "dense"
    alpha_true: float = 1.0
    noise_precision: float = 1.0
    conditioning: float = 1.0
    density: float = 0.1

    def __post_init__(self):
        if min(self.n, self.m, self.dim) < 1:
            raise ParameterError("n, m and dim must be positive")
        if self.kind not in KINDS:
            raise ParameterError(f"unknown problem kind {self.kind!r}; expected one of {KINDS}")
        if self.alpha_true <= 0 or self.noise_precision <= 0 or self.conditioning < 1:
            raise ParameterError("alpha_true and noise_precision must be positive, conditioning >= 1")
        if self.kind == "identity" and self.n * self.m != self.dim:
            raise ParameterError("identity problems need n*m == dim")


def _spectrum_matrix(g, rows, cols, conditioning):
    U = np.linalg.qr(g.standard_normal((rows, rows)))[0]
    V = np.linalg.qr(g.standard_normal((cols, cols)))[0]
    r = min(rows, cols)
    sv = np.sqrt(max(rows, cols)) * conditioning ** (-np.arange(r) / max(r - 1, 1))
    return (U[:, :r] * sv) @ V[:, :r].T


def generate(spec: SyntheticSpec, seed: int):
    """Return ``(Phi, noise_blocks, Y, theta_true)``; ``Phi`` may be sparse."""
    g = rngmod.stream(seed, "data")
    n, m, d = spec.n, spec.m, spec.dim
    if spec.kind == "identity":
        blocks = np.broadcast_to(np.eye(m), (n, m, m)).copy()
        Y = (2.0 * np.arange(1, n * m + 1)).reshape(n, m)
        return np.eye(d), blocks, Y, np.full(d, np.nan)
    if spec.kind in ("dense", "correlated"):
        Phi = _spectrum_matrix(g, n * m, d, spec.conditioning) / np.sqrt(n * m)
    else:
        rows, cols, vals = [], [], []
        width = max(1, int(round(spec.density * d)))
        for i in range(n * m):
            start = int(g.integers(0, d - width + 1))
            rows += [i] * width
            cols += list(range(start, start + width))
            vals += list(g.uniform(0.5, 1.5, width))
        Phi = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(n * m, d))
    if spec.kind == "correlated":
        F = g.standard_normal((n, m, m)) / np.sqrt(m)
        blocks = spec.noise_precision * (np.einsum("nij,nkj->nik", F, F) + np.eye(m))
    else:
        blocks = np.broadcast_to(spec.noise_precision * np.eye(m), (n, m, m)).copy()
    theta = g.standard_normal(d) / np.sqrt(spec.alpha_true)
    L = np.linalg.cholesky(blocks)
    eta = np.linalg.solve(L.transpose(0, 2, 1), g.standard_normal((n, m, 1)))[:, :, 0]
    Y = np.asarray(Phi @ theta).reshape(n, m) + eta
    return Phi, blocks, Y, theta


def as_problem(spec: SyntheticSpec, seed: int) -> Problem:
    Phi, blocks, Y, _ = generate(spec, seed)
    return Problem(DenseDesign(Phi, m=spec.m), NoisePrecision(blocks), Y)


def gen_synthetic(spec: SyntheticSpec, seed: int, out_dir) -> dict:
    """Write an instance directory and return its metadata."""
    Phi, blocks, Y, theta = generate(spec, seed)
    meta = {"seed": int(seed), "spec": asdict(spec)}
    if spec.kind != "identity":
        meta["theta_true_sq_norm"] = float(theta @ theta)
    save_instance(out_dir, Phi, blocks, Y, meta)
    return meta


def ill_conditioned_kernel(N: int, rank: int, condition: float, seed: int = 0):
    """An ``N x N`` problem whose kernel ``Phi Phi^T + I`` has an exactly
    rank-``rank`` low-rank part with eigenvalues spread up to ``condition``.

    Returns ``Phi`` of shape ``(N, rank)``; with ``A = I`` and ``B = I``
    the kernel condition number is ``condition``.
    """
    g = rngmod.stream(seed, "kernel")
    U = np.linalg.qr(g.standard_normal((N, rank)))[0]
    lam = np.geomspace(condition - 1.0, 1.0, rank)
    return U * np.sqrt(lam)

