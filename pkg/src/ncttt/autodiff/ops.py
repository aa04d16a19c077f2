"""Differentiable operations.

Every function takes Tensors (or array-likes for constant operands) and
returns a Tensor whose backward closure produces one gradient per parent.
Probabilities never appear as intermediate values in the losses: both BCE
and the log-likelihood terms are written in terms of logits.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor

LEAKY_SLOPE = 0.01
BN_MOMENTUM = 0.1
BN_VAR_FLOOR = 1e-5
WHITEN_SHRINK = 0.0


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")


def square(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._from_op(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(a.data @ b.data, (a, b), bw, "matmul")


def affine(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in_features, out_features)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine: input shape {x.shape} does not match weight shape {weight.shape}")
    if bias is None:
        return matmul(x, weight)
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: bias shape {bias.shape} does not match weight shape {weight.shape}")

    def bw(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return Tensor._from_op(x.data @ weight.data + bias.data, (x, weight, bias), bw, "affine")


# -- activations -----------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return Tensor._from_op(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _log_sigmoid(v: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -v)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log_sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _log_sigmoid(x.data)
    # d/dx log sigmoid(x) = sigmoid(-x)
    return Tensor._from_op(out, (x,), lambda g: (g * _sigmoid(-x.data),), "log_sigmoid")


def _log_softmax(v: np.ndarray, axis: int) -> np.ndarray:
    shifted = v - v.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    s = np.exp(_log_softmax(x.data, axis))

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(s, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = _log_softmax(x.data, axis)
    s = np.exp(out)
    return Tensor._from_op(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),), "log_softmax")


# -- reductions and reshapes -------------------------------------------------------

def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(out, (x,), bw, "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    count = x.size if axis is None else x.shape[axis]
    out = x.data.mean(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return Tensor._from_op(out, (x,), bw, "mean")


def norm_sq_rows(x) -> Tensor:
    """Squared Euclidean norm of each row of a matrix."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"norm_sq_rows expects a matrix, got shape {x.shape}")
    return Tensor._from_op((x.data ** 2).sum(axis=1), (x,), lambda g: (2.0 * x.data * g[:, None],), "norm_sq_rows")


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take_rows(x, index) -> Tensor:
    """Gather rows ``x[index]``; the backward pass scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._from_op(x.data[idx], (x,), bw, "take_rows")


def concat_rows(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    tails = {p.shape[1:] for p in parts}
    if len(tails) != 1:
        raise ShapeError(f"concat_rows: trailing shapes differ: {sorted(tails)}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Tensor._from_op(np.concatenate([p.data for p in parts], axis=0), parts, bw, "concat_rows")


# -- batch normalization -------------------------------------------------------------

def batchnorm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = BN_MOMENTUM,
    var_floor: float = BN_VAR_FLOOR,
) -> Tensor:
    """Per-column normalization of an (N, C) matrix followed by ``gamma * x_hat + beta``.

    mode ``train`` normalizes with batch statistics and updates the running
    buffers in place; ``batch`` uses batch statistics without touching the
    buffers; ``eval`` uses the running buffers only. The batch variance is the
    biased estimate clamped below at ``var_floor``; the running variance
    accumulates the unbiased estimate.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise ShapeError(f"batchnorm expects (N, C) input, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: input shape {x.shape} does not match affine shapes {gamma.shape}, {beta.shape}")

    if mode == "eval":
        scale = 1.0 / np.sqrt(np.maximum(running_var, var_floor))
        x_hat = (x.data - running_mean) * scale

        def bw_eval(g):
            return g * gamma.data * scale, (g * x_hat).sum(axis=0), g.sum(axis=0)

        return Tensor._from_op(gamma.data * x_hat + beta.data, (x, gamma, beta), bw_eval, "batchnorm_eval")

    if mode not in ("train", "batch"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    n = x.shape[0]
    if n < 2:
        raise ShapeError(f"batchnorm with batch statistics needs at least 2 rows, got shape {x.shape}")
    mu = x.data.mean(axis=0)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=0)
    floored = var <= var_floor
    std = np.sqrt(np.where(floored, var_floor, var))
    x_hat = centered / std
    if mode == "train":
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)

    def bw_batch(g):
        gx_hat = g * gamma.data
        mean_g = gx_hat.mean(axis=0)
        mean_gx = (gx_hat * x_hat).mean(axis=0)
        # a clamped variance is a constant, so its branch drops out
        dx = np.where(floored, gx_hat - mean_g, gx_hat - mean_g - x_hat * mean_gx) / std
        return dx, (g * x_hat).sum(axis=0), g.sum(axis=0)

    return Tensor._from_op(gamma.data * x_hat + beta.data, (x, gamma, beta), bw_batch, "batchnorm")


def _inv_sqrt_divided_difference(lam: np.ndarray, floor: float) -> tuple[np.ndarray, np.ndarray]:
    """f(l) = max(l, floor)^(-1/2) and its first divided-difference matrix."""
    lf = np.maximum(lam, floor)
    f = lf ** -0.5
    a, b = lam[:, None], lam[None, :]
    sa, sb = np.sqrt(lf)[:, None], np.sqrt(lf)[None, :]
    both = (lam[:, None] > floor) & (lam[None, :] > floor)
    # closed form of (f(a) - f(b)) / (a - b) for unclamped pairs, exact also when a == b
    k_free = -1.0 / (sa * sb * (sa + sb))
    diff = a - b
    with np.errstate(divide="ignore", invalid="ignore"):
        k_mixed = np.where(diff != 0, (f[:, None] - f[None, :]) / diff, 0.0)
    return f, np.where(both, k_free, k_mixed)


def whiten(
    x,
    running_mean: np.ndarray,
    running_cov: np.ndarray,
    mode: str = "train",
    momentum: float = BN_MOMENTUM,
    eig_floor: float = BN_VAR_FLOOR,
    shrink: float = WHITEN_SHRINK,
) -> Tensor:
    """Decorrelating normalization ``(x - mean) @ S^(-1/2)`` of an (N, C) matrix.

    ``S = cov + shrink * mean_eigenvalue(cov) * I``: the shrinkage keeps
    directions with almost no variance from being blown up to unit scale.
    Same ``train`` / ``batch`` / ``eval`` modes as :func:`batchnorm`.
    Eigenvalues of ``S`` are clamped below at ``eig_floor``; the running
    covariance accumulates the unbiased estimate.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"whiten expects (N, C) input, got shape {x.shape}")
    c = x.shape[1]
    if running_mean.shape != (c,) or running_cov.shape != (c, c):
        raise ShapeError(f"whiten: input shape {x.shape} does not match buffers "
                         f"{running_mean.shape}, {running_cov.shape}")

    def shrunk(cov):
        return cov + shrink * (np.trace(cov) / c) * np.eye(c)

    if mode == "eval":
        lam, vec = np.linalg.eigh(shrunk(running_cov))
        w = (vec * np.maximum(lam, eig_floor) ** -0.5) @ vec.T

        def bw_eval(g):
            return (g @ w,)

        return Tensor._from_op((x.data - running_mean) @ w, (x,), bw_eval, "whiten_eval")

    if mode not in ("train", "batch"):
        raise ValueError(f"unknown whiten mode {mode!r}")
    n = x.shape[0]
    if n < 2:
        raise ShapeError(f"whiten with batch statistics needs at least 2 rows, got shape {x.shape}")
    mu = x.data.mean(axis=0)
    centered = x.data - mu
    cov = centered.T @ centered / n
    lam, vec = np.linalg.eigh(shrunk(cov))
    f, k = _inv_sqrt_divided_difference(lam, eig_floor)
    w = (vec * f) @ vec.T
    if mode == "train":
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_cov *= 1.0 - momentum
        running_cov += momentum * cov * n / (n - 1)

    def bw_batch(g):
        gw = centered.T @ g
        gw = 0.5 * (gw + gw.T)
        gs = vec @ (k * (vec.T @ gw @ vec)) @ vec.T
        gcov = gs + shrink * (np.trace(gs) / c) * np.eye(c)
        dx = g @ w + centered @ (gcov + gcov.T) / n
        # the centering term: column sums of `centered` vanish, so only dx's mean drops out
        return (dx - dx.mean(axis=0),)

    return Tensor._from_op(centered @ w, (x,), bw_batch, "whiten")


# -- losses --------------------------------------------------------------------------

def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy against integer class labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits shape {logits.shape} does not match labels shape {labels.shape}")
    if labels.size and (not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"cross_entropy: labels must be integers in [0, {logits.shape[1]})")
    n = logits.shape[0]
    logp = _log_softmax(logits.data, axis=1)
    rows = np.arange(n)
    out = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return Tensor._from_op(out, (logits,), bw, "cross_entropy")


def bce_with_soft_targets(logits, targets) -> Tensor:
    """Mean binary cross-entropy between sigmoid(logits) and soft targets in [0, 1].

    Uses ``softplus(u) - p * u``, which stays finite for any finite logit.
    """
    logits = as_tensor(logits)
    p = np.asarray(targets, dtype=np.float64)
    if logits.shape != p.shape:
        raise ShapeError(f"bce_with_soft_targets: logits shape {logits.shape} does not match targets shape {p.shape}")
    if p.size == 0:
        raise ShapeError("bce_with_soft_targets of an empty batch")
    u = logits.data
    out = (np.logaddexp(0.0, u) - p * u).mean()
    n = u.size
    return Tensor._from_op(out, (logits,), lambda g: ((_sigmoid(u) - p) * (g / n),), "bce_with_soft_targets")


_FORWARD = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "affine": affine,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "log_sigmoid": log_sigmoid,
    "softmax": softmax,
    "mean": mean,
    "sum": sum,
    "square": square,
    "norm_sq_rows": norm_sq_rows,
    "batchnorm": batchnorm,
    "whiten": whiten,
    "cross_entropy": cross_entropy,
    "bce_with_soft_targets": bce_with_soft_targets,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an operation by name."""
    try:
        fn = _FORWARD[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(_FORWARD)}") from None
    return fn(*inputs, **kwargs)
