"""Dense float64 kernel: forward primitives, a replayable gradient tape and a
central-difference gradient oracle.

Matrices are plain 2-D ``numpy.float64`` arrays. Every exported operation checks
its output for NaN/Inf and raises :class:`NumericError` instead of letting
non-finite values travel further.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from dcd.errors import NumericError, ShapeError

FLOAT = np.float64


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array (vectors become a single row)."""
    arr = np.asarray(x, dtype=FLOAT)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"{name} must be at most 2-D, got shape {arr.shape}")
    return arr


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(np.asarray(x)))
        raise NumericError(f"non-finite value in {what} at index {tuple(int(j) for j in bad[0])}")
    return x


def dense_forward(input, weights, bias) -> np.ndarray:
    x = as_matrix(input, "input")
    w = as_matrix(weights, "weights")
    b = as_matrix(bias, "bias")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"input has {x.shape[1]} columns but weights have {w.shape[0]} rows "
            f"(input {x.shape}, weights {w.shape})"
        )
    if b.shape != (1, w.shape[1]):
        raise ShapeError(f"bias shape {b.shape} does not match weights {w.shape}")
    return check_finite(x @ w + b, "dense_forward output")


def stable_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Softmax over the last axis, shifted by the max for stability."""
    if not temperature > 0:
        raise NumericError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=FLOAT)
    if z.size == 0 or z.shape[-1] < 1:
        raise ShapeError("softmax needs at least one logit")
    check_finite(z, "softmax logits")
    shifted = (z - z.max(axis=-1, keepdims=True)) / temperature
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise NumericError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=FLOAT)
    check_finite(z, "log_softmax logits")
    shifted = (z - z.max(axis=-1, keepdims=True)) / temperature
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def finite_diff_grad(f: Callable[[np.ndarray], float], params, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``params`` (any shape)."""
    if not step > 0:
        raise NumericError(f"step must be positive, got {step}")
    theta = np.array(params, dtype=FLOAT, copy=True)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(f(theta))
        flat[i] = orig - step
        down = float(f(theta))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            idx = tuple(int(j) for j in np.unravel_index(i, theta.shape))
            raise NumericError(f"non-finite function value at coordinate {idx}")
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Worst element-wise relative error; entries below ``floor`` in both are compared absolutely."""
    a = np.asarray(analytic, dtype=FLOAT).reshape(-1)
    n = np.asarray(numeric, dtype=FLOAT).reshape(-1)
    scale = np.maximum(np.abs(a), np.abs(n))
    diff = np.abs(a - n)
    small = scale < floor
    rel = np.where(small, diff, diff / np.where(small, 1.0, scale))
    return float(rel.max()) if rel.size else 0.0


class GradTape:
    """Ordered record of dense/tanh applications for one forward pass.

    Dense records keep the layer index so ``backward`` can route parameter
    gradients; replaying an empty tape yields zero gradients.
    """

    def __init__(self):
        self.records: list[tuple] = []

    def __len__(self):
        return len(self.records)

    def dense(self, layer: int, input, weights, bias) -> np.ndarray:
        out = dense_forward(input, weights, bias)
        self.records.append(("dense", layer, as_matrix(input), weights))
        return out

    def tanh(self, input) -> np.ndarray:
        out = np.tanh(input)
        self.records.append(("tanh", out))
        return out

    def backward(self, grad_output, param_shapes: list[tuple[tuple, tuple]]):
        """Accumulate gradients of ``sum(grad_output * output)``.

        Returns ``(param_grads, grad_input)`` where ``param_grads`` is a list of
        ``(dW, db)`` per layer in ``param_shapes`` order.
        """
        grads = [(np.zeros(ws, dtype=FLOAT), np.zeros(bs, dtype=FLOAT)) for ws, bs in param_shapes]
        if not self.records:
            return grads, None
        g = as_matrix(grad_output, "grad_output")
        for rec in reversed(self.records):
            if rec[0] == "tanh":
                g = g * (1.0 - rec[1] ** 2)
            else:
                _, layer, x, w = rec
                dw, db = grads[layer]
                dw += x.T @ g
                db += g.sum(axis=0, keepdims=True)
                g = g @ w.T
        for dw, db in grads:
            check_finite(dw, "weight gradient")
            check_finite(db, "bias gradient")
        return grads, g
