"""Dense feed-forward networks with explicit backpropagation and Adam.

Everything runs on float64 numpy arrays. Networks are plain values: a list
of weight matrices and bias vectors with LeakyReLU(0.01) between layers and
an identity (or optionally LeakyReLU) output. No graph autodiff -- forward
caches activations, backward consumes them.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

LEAKY_SLOPE = 0.01


class DimensionError(ValueError):
    """Shape mismatch between a network and its input/gradient."""


class NumericError(ValueError):
    """Non-finite value encountered where a finite one is required."""


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, x, LEAKY_SLOPE * x)


def leaky_relu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, 1.0, LEAKY_SLOPE)


class FeedForwardNet:
    """MLP with LeakyReLU(0.01) hidden activations.

    ``final_nonlinear`` keeps the LeakyReLU on the last layer (used for
    encoder trunks); heads use the default identity output.
    """

    def __init__(self, layer_sizes, weights, biases, final_nonlinear=False):
        if len(weights) != len(layer_sizes) - 1 or len(biases) != len(weights):
            raise DimensionError("layer list and parameter lists do not chain")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (layer_sizes[i], layer_sizes[i + 1]) or b.shape != (layer_sizes[i + 1],):
                raise DimensionError(
                    f"layer {i}: expected {(layer_sizes[i], layer_sizes[i + 1])}, got {w.shape}"
                )
        self.layer_sizes = list(layer_sizes)
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.final_nonlinear = final_nonlinear

    @classmethod
    def init(cls, layer_sizes, rng, scale=1.0, final_nonlinear=False):
        """He-uniform initialization scaled by fan-in (seeded via ``rng``)."""
        weights, biases = [], []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = scale * np.sqrt(6.0 / n_in)
            weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
            biases.append(np.zeros(n_out))
        return cls(layer_sizes, weights, biases, final_nonlinear=final_nonlinear)

    @classmethod
    def from_flat(cls, layer_sizes, flat, final_nonlinear=False):
        """Build a net whose parameters are views into ``flat`` (row-major W then b per layer)."""
        flat = np.asarray(flat, dtype=np.float64)
        weights, biases, off = [], [], 0
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            weights.append(flat[off:off + n_in * n_out].reshape(n_in, n_out))
            off += n_in * n_out
            biases.append(flat[off:off + n_out])
            off += n_out
        if off != flat.size:
            raise DimensionError(f"flat vector length {flat.size}, need {off}")
        return cls(layer_sizes, weights, biases, final_nonlinear=final_nonlinear)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def set_flat_params(self, flat: np.ndarray) -> None:
        off = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = np.asarray(flat[off:off + w.size], dtype=np.float64).reshape(w.shape)
            off += w.size
            self.biases[i] = np.asarray(flat[off:off + b.size], dtype=np.float64).copy()
            off += b.size
        if off != len(flat):
            raise DimensionError(f"flat vector length {len(flat)}, need {off}")

    def clone(self) -> "FeedForwardNet":
        return FeedForwardNet(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            final_nonlinear=self.final_nonlinear,
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Pure forward pass; accepts a vector or a (batch, in) matrix."""
        y, _ = self.forward_cached(x, keep_cache=False)
        return y

    def forward_cached(self, x, keep_cache=True, dropout=0.0, rng=None):
        """Forward pass caching pre-activations for :meth:`backward`.

        ``dropout`` masks hidden activations (inverted dropout); the masks are
        stored in the cache so backward sees the same network as forward.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.layer_sizes[0]:
            raise DimensionError(f"input width {x.shape[1]}, net expects {self.layer_sizes[0]}")
        pre, masks = [], []
        a = x
        acts = [a]
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            pre.append(z)
            last = i == n_layers - 1
            a = leaky_relu(z) if (not last or self.final_nonlinear) else z
            if dropout > 0.0 and not last:
                if rng is None:
                    raise ValueError("dropout requires an rng")
                mask = (rng.random(a.shape) >= dropout) / (1.0 - dropout)
                a = a * mask
                masks.append(mask)
            else:
                masks.append(None)
            acts.append(a)
        out = a[0] if single else a
        cache = {"acts": acts, "pre": pre, "masks": masks, "single": single} if keep_cache else None
        return out, cache

    def backward(self, cache, grad_out):
        """Backprop ``grad_out`` (d loss / d output) through a cached forward.

        Returns ``(param_grads, grad_input)`` where ``param_grads`` is a list
        of ``(dW, db)`` congruent to the parameters.
        """
        if cache is None:
            raise RuntimeError("backward requires the cache from forward_cached")
        grad = np.asarray(grad_out, dtype=np.float64)
        if cache["single"] and grad.ndim == 1:
            grad = grad[None, :]
        acts, pre, masks = cache["acts"], cache["pre"], cache["masks"]
        n_layers = len(self.weights)
        param_grads = [None] * n_layers
        for i in range(n_layers - 1, -1, -1):
            last = i == n_layers - 1
            if masks[i] is not None:
                grad = grad * masks[i]
            if not last or self.final_nonlinear:
                grad = grad * leaky_relu_grad(pre[i])
            dw = acts[i].T @ grad
            db = grad.sum(axis=0)
            param_grads[i] = (dw, db)
            grad = grad @ self.weights[i].T
        grad_input = grad[0] if cache["single"] else grad
        return param_grads, grad_input

    def flat_grads(self, param_grads) -> np.ndarray:
        return np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in param_grads])


class AdamState:
    """Adam optimizer state over a flat parameter vector (bias-corrected)."""

    def __init__(self, n_params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One Adam update; returns the new parameter vector and mutates ``state``."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionError("params, grads and moments must be congruent")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise NumericError(f"non-finite gradient at parameter index {int(bad[0])}")
    state.step_count += 1
    t = state.step_count
    # in-place moment updates: the parameter vector can run to millions of
    # entries, so avoiding temporaries here dominates the step cost
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    sq = grads * grads
    sq *= 1.0 - state.beta2
    state.v += sq
    update = state.m / (1.0 - state.beta1 ** t)
    denom = state.v / (1.0 - state.beta2 ** t)
    np.sqrt(denom, out=denom)
    denom += state.eps
    update /= denom
    update *= state.lr
    return params - update


def clip_global_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    """Rescale ``grads`` so its L2 norm is at most ``max_norm``."""
    norm = float(np.linalg.norm(grads))
    if norm > max_norm and norm > 0.0:
        return grads * (max_norm / norm)
    return grads


def save_params(path, named_arrays) -> None:
    """Serialize (name, array) pairs to JSON, bit-exact at float64.

    Python's json float repr round-trips IEEE doubles exactly.
    """
    payload = [
        {"name": name, "shape": list(arr.shape), "data": [float(v) for v in np.asarray(arr, dtype=np.float64).ravel()]}
        for name, arr in named_arrays
    ]
    Path(path).write_text(json.dumps({"params": payload}))


def load_params(path):
    """Load a checkpoint written by :func:`save_params` as (name, array) pairs."""
    payload = json.loads(Path(path).read_text())
    out = []
    for entry in payload["params"]:
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        out.append((entry["name"], arr))
    return out
