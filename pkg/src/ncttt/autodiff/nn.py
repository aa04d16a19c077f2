"""Parameter containers and the two layer kinds the model is built from."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterable, Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class ParamSet:
    """Ordered, uniquely named trainable tensors plus non-trainable buffers.

    Buffers (BatchNorm running statistics) are plain arrays: an optimizer
    never sees them.
    """

    def __init__(self) -> None:
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        self._check_new(name)
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._check_new(name)
        arr = np.array(value, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def _check_new(self, name: str) -> None:
        if name in self._params or name in self._buffers:
            raise KeyError(f"duplicate parameter name {name!r}")

    def params(self, prefixes: Iterable[str] | None = None) -> "OrderedDict[str, Tensor]":
        if prefixes is None:
            return OrderedDict(self._params)
        prefixes = tuple(prefixes)
        return OrderedDict((k, v) for k, v in self._params.items() if k.startswith(prefixes))

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(self._buffers)

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Every tensor value and buffer, parameters first, in registration order."""
        out: "OrderedDict[str, np.ndarray]" = OrderedDict((k, t.data) for k, t in self._params.items())
        out.update(self._buffers)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy values in place so layer references stay valid."""
        expected = set(self._params) | set(self._buffers)
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise KeyError(f"array names do not match: missing={missing} unexpected={extra}")
        for name, value in arrays.items():
            target = self._params[name].data if name in self._params else self._buffers[name]
            if target.shape != np.shape(value):
                raise ValueError(f"{name}: stored shape {np.shape(value)} != expected {target.shape}")
            target[...] = value

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def __iter__(self) -> Iterator[str]:
        yield from self._params
        yield from self._buffers

    def __len__(self) -> int:
        return len(self._params) + len(self._buffers)


def kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    # fan-in Kaiming-uniform with leaky-ReLU gain a=sqrt(5): bound = 1/sqrt(fan_in)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear:
    def __init__(self, params: ParamSet, name: str, in_features: int, out_features: int,
                 rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = params.add_param(f"{name}.weight", kaiming_uniform(rng, in_features, out_features))
        self.bias = params.add_param(f"{name}.bias", np.zeros(out_features)) if bias else None

    def __call__(self, x) -> Tensor:
        return ops.affine(x, self.weight, self.bias)


class BatchNorm:
    """BatchNorm over the columns of an (N, C) matrix.

    Spatial inputs are handled by the caller flattening locations into rows,
    which makes this equivalent to 2-D batch normalization.
    """

    def __init__(self, params: ParamSet, name: str, channels: int, affine: bool = True):
        if affine:
            self.gamma = params.add_param(f"{name}.gamma", np.ones(channels))
            self.beta = params.add_param(f"{name}.beta", np.zeros(channels))
        else:
            self.gamma = Tensor(np.ones(channels))
            self.beta = Tensor(np.zeros(channels))
        self.running_mean = params.add_buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = params.add_buffer(f"{name}.running_var", np.ones(channels))

    def __call__(self, x, mode: str) -> Tensor:
        return ops.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var, mode=mode)


class Whitening:
    """Decorrelating normalization with running mean and covariance buffers."""

    def __init__(self, params: ParamSet, name: str, channels: int, shrink: float = 0.0):
        self.shrink = shrink
        self.running_mean = params.add_buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_cov = params.add_buffer(f"{name}.running_cov", np.eye(channels))

    def __call__(self, x, mode: str) -> Tensor:
        return ops.whiten(x, self.running_mean, self.running_cov, mode=mode, shrink=self.shrink)


ACTIVATIONS = {
    "relu": ops.relu,
    "leaky_relu": ops.leaky_relu,
    "identity": lambda x: x,
}


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}") from None
