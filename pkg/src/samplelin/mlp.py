"""Small differentiable predictors with hand-written Jacobian products.

Every model maps an ``(n, p)`` input array to ``(n, m)`` outputs and exposes
``jvp`` (tangent in parameter space to output space) and ``vjp`` (cotangent
in output space back to parameters, summed over datapoints).  Tangents and
cotangents may carry a trailing axis of ``k`` independent directions.
"""

from __future__ import annotations

import numpy as np
import scipy.optimize

from .errors import ContractError, ParameterError
from .model import softmax

__all__ = ["DifferentiableModel", "LinearPredictor", "ConstantPredictor", "MLP", "fit_mlp"]


class DifferentiableModel:
    """Interface: ``params`` (``d``), ``n_out`` (``m``), ``layer_index``
    (``d`` ints), ``forward``, ``jvp``, ``vjp`` and ``with_params``."""

    params: np.ndarray
    n_out: int

    @property
    def dim(self) -> int:
        return self.params.shape[0]

    @property
    def layer_index(self) -> np.ndarray:
        return np.zeros(self.dim, dtype=np.intp)

    def forward(self, X: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def jvp(self, X: np.ndarray, V: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def vjp(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def with_params(self, w: np.ndarray) -> "DifferentiableModel":  # pragma: no cover - abstract
        raise NotImplementedError

    def __call__(self, X):
        return self.forward(X)


def _inputs(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X[:, None] if X.ndim == 1 else X


class LinearPredictor(DifferentiableModel):
    """``f(w, x) = x W`` with ``W`` a ``(p, m)`` matrix flattened row-major."""

    def __init__(self, weights: np.ndarray, n_out: int = 1):
        self.params = np.asarray(weights, dtype=np.float64).reshape(-1).copy()
        if self.params.shape[0] % n_out:
            raise ContractError("parameter count not divisible by output dimension")
        self.n_out = n_out
        self.n_in = self.params.shape[0] // n_out

    def with_params(self, w):
        return LinearPredictor(w, self.n_out)

    def forward(self, X):
        return _inputs(X) @ self.params.reshape(self.n_in, self.n_out)

    def jvp(self, X, V):
        V = np.asarray(V, dtype=np.float64)
        return np.einsum("np,pm...->nm...", _inputs(X), V.reshape(self.n_in, self.n_out, *V.shape[1:]))

    def vjp(self, X, U):
        U = np.asarray(U, dtype=np.float64)
        out = np.einsum("np,nm...->pm...", _inputs(X), U)
        return out.reshape(self.dim, *U.shape[2:])


class ConstantPredictor(DifferentiableModel):
    """``f(w, x) = c`` regardless of the ``d`` parameters."""

    def __init__(self, value, dim: int):
        self.value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        self.n_out = self.value.shape[0]
        self.params = np.zeros(dim)

    def with_params(self, w):
        return ConstantPredictor(self.value, len(w))

    def forward(self, X):
        return np.broadcast_to(self.value, (len(X), self.n_out)).copy()

    def jvp(self, X, V):
        V = np.asarray(V)
        return np.zeros((len(X), self.n_out, *V.shape[1:]))

    def vjp(self, X, U):
        U = np.asarray(U)
        return np.zeros((self.dim, *U.shape[2:]))


class MLP(DifferentiableModel):
    """Fully connected tanh network ``p -> h -> ... -> h -> m``.

    Parameters are packed layer by layer as ``(W_l, b_l)`` with ``W_l`` of
    shape ``(fan_in, fan_out)`` flattened row-major.
    """

    def __init__(self, sizes, params: np.ndarray | None = None, *, seed: int = 0):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ParameterError("need at least input and output sizes, all positive")
        self.n_out = self.sizes[-1]
        self._shapes = list(zip(self.sizes[:-1], self.sizes[1:]))
        d = sum(a * b + b for a, b in self._shapes)
        if params is None:
            rng = np.random.default_rng(seed)
            chunks = []
            for a, b in self._shapes:
                chunks.append(rng.standard_normal(a * b) / np.sqrt(a))
                chunks.append(np.zeros(b))
            params = np.concatenate(chunks)
        self.params = np.asarray(params, dtype=np.float64).reshape(-1).copy()
        if self.params.shape[0] != d:
            raise ContractError(f"MLP with sizes {self.sizes} has {d} parameters, got {self.params.shape[0]}")

    @classmethod
    def two_hidden(cls, n_in: int, n_out: int, width: int = 16, seed: int = 0) -> "MLP":
        return cls((n_in, width, width, n_out), seed=seed)

    def with_params(self, w):
        return MLP(self.sizes, w)

    @property
    def layer_index(self) -> np.ndarray:
        return np.concatenate([np.full(a * b + b, l, dtype=np.intp) for l, (a, b) in enumerate(self._shapes)])

    def _unpack(self, w):
        out, pos = [], 0
        extra = w.shape[1:]
        for a, b in self._shapes:
            W = w[pos:pos + a * b].reshape(a, b, *extra)
            pos += a * b
            out.append((W, w[pos:pos + b]))
            pos += b
        return out

    def _pack(self, grads, extra):
        return np.concatenate([np.concatenate([gW.reshape(-1, *extra), gb.reshape(-1, *extra)])
                               for gW, gb in grads])

    def _activations(self, X):
        acts = [_inputs(X)]
        layers = self._unpack(self.params)
        for l, (W, b) in enumerate(layers):
            a = acts[-1] @ W + b
            acts.append(np.tanh(a) if l < len(layers) - 1 else a)
        return acts, layers

    def forward(self, X):
        return self._activations(X)[0][-1]

    def jvp(self, X, V):
        V = np.asarray(V, dtype=np.float64)
        single = V.ndim == 1
        Vk = V[:, None] if single else V
        acts, layers = self._activations(X)
        tangents = self._unpack(Vk)
        dh = np.zeros(acts[0].shape + (Vk.shape[1],))
        for l, ((W, _), (dW, db)) in enumerate(zip(layers, tangents)):
            da = np.einsum("nik,ij->njk", dh, W) + np.einsum("ni,ijk->njk", acts[l], dW) + db[None]
            if l < len(layers) - 1:
                da = (1.0 - acts[l + 1] ** 2)[:, :, None] * da
            dh = da
        return dh[:, :, 0] if single else dh

    def vjp(self, X, U):
        U = np.asarray(U, dtype=np.float64)
        single = U.ndim == 2
        g = U[:, :, None] if single else U
        acts, layers = self._activations(X)
        grads = []
        for l in range(len(layers) - 1, -1, -1):
            W, _ = layers[l]
            if l < len(layers) - 1:
                g = (1.0 - acts[l + 1] ** 2)[:, :, None] * g
            grads.append((np.einsum("ni,njk->ijk", acts[l], g), g.sum(axis=0)))
            g = np.einsum("njk,ij->nik", g, W)
        out = self._pack(grads[::-1], (g.shape[-1],))
        return out[:, 0] if single else out


def fit_mlp(model: MLP, X, targets, *, likelihood: str = "gaussian", weight_decay: float = 1e-2,
            noise_variance: float = 1.0, max_iter: int = 2000) -> MLP:
    """Train by L-BFGS on ``loss + weight_decay * ||w||^2 / 2``.

    Gaussian loss is ``||y - f||^2 / (2 noise_variance)``; categorical
    targets are integer labels with softmax cross-entropy.
    """
    X = _inputs(X)
    if likelihood == "gaussian":
        Y = np.asarray(targets, dtype=np.float64).reshape(len(X), model.n_out)
    elif likelihood == "categorical":
        labels = np.asarray(targets).astype(np.intp)
        onehot = np.eye(model.n_out)[labels]
    else:
        raise ParameterError(f"unknown likelihood {likelihood!r}")

    def fun(w):
        net = model.with_params(w)
        f = net.forward(X)
        if likelihood == "gaussian":
            r = f - Y
            loss = 0.5 * np.sum(r**2) / noise_variance
            dout = r / noise_variance
        else:
            z = f - f.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            loss = -np.sum(onehot * logp)
            dout = softmax(f) - onehot
        return loss + 0.5 * weight_decay * w @ w, net.vjp(X, dout) + weight_decay * w

    res = scipy.optimize.minimize(fun, model.params, jac=True, method="L-BFGS-B",
                                  options={"maxiter": max_iter})
    return model.with_params(res.x)
