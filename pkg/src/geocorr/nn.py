"""Parameters, module tree, and the small layer zoo used by the model."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, add, gelu, layer_norm, matmul, mul, relu

_ACTS = {"gelu": gelu, "relu": relu}


class Parameter(Tensor):
    """A leaf tensor that the optimizer updates.

    ``name`` is assigned lazily from the module path; it is what the
    checkpoint container and error messages use.
    """

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape})"


class Module:
    """Minimal module tree: parameters discovered by attribute walk.

    Attribute insertion order is deterministic, so parameter naming and
    checkpoint layout are reproducible across runs.
    """

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out: list[tuple[str, Parameter]] = []
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            out.extend(_collect(path, value))
        for name, p in out:
            p.name = name
        return out

    def load_state(self, arrays: dict[str, np.ndarray]):
        """Copy arrays into parameters by name; names and shapes must match."""
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ConfigError(
                f"checkpoint/model parameter mismatch: missing={missing[:5]}, extra={extra[:5]}"
            )
        for name, p in params.items():
            arr = arrays[name]
            if tuple(arr.shape) != p.shape:
                raise ConfigError(
                    f"checkpoint shape mismatch for {name!r}: {tuple(arr.shape)} vs {p.shape}"
                )
            # asarray keeps rank-0 shapes; ascontiguousarray would promote them
            p.data = np.asarray(arr, dtype=np.float64, order="C").copy()
            p.version += 1

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}


def _collect(path: str, value) -> list[tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        return [(path, value)]
    if isinstance(value, Module):
        return value.named_parameters(prefix=path + ".")
    if isinstance(value, (list, tuple)):
        out = []
        for i, item in enumerate(value):
            out.extend(_collect(f"{path}.{i}", item))
        return out
    return []


# -- layers ------------------------------------------------------------


class Linear(Module):
    """x @ w + b with (in, out) weight layout."""

    def __init__(self, dim_in: int, dim_out: int, rng: np.random.Generator,
                 bias: bool = True, init: str = "xavier"):
        if init == "xavier":
            bound = math.sqrt(6.0 / (dim_in + dim_out))
            w = rng.uniform(-bound, bound, size=(dim_in, dim_out))
        elif init == "zero":
            w = np.zeros((dim_in, dim_out))
        elif init == "identity":
            if dim_in != dim_out:
                raise ConfigError(f"identity init needs square weights, got {dim_in}x{dim_out}")
            w = np.eye(dim_in)
        else:
            raise ConfigError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias_p = Parameter(np.zeros(dim_out)) if bias else None
        self.dim_in = dim_in
        self.dim_out = dim_out

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias_p is not None:
            y = add(y, self.bias_p)
        return y


class MLP(Module):
    """Feed-forward stack with a nonlinearity between consecutive layers."""

    def __init__(self, dims: list[int], rng: np.random.Generator, act: str = "gelu",
                 final_init: str = "xavier"):
        if len(dims) < 2:
            raise ConfigError("MLP needs at least input and output dims")
        if act not in _ACTS:
            raise ConfigError(f"unknown activation {act!r}")
        self.layers = [
            Linear(dims[i], dims[i + 1], rng,
                   init=final_init if i == len(dims) - 2 else "xavier")
            for i in range(len(dims) - 1)
        ]
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        fn = _ACTS[self.act]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = fn(x)
        return x


class LayerNorm(Module):
    """Last-axis normalization with learnable scale and shift."""

    def __init__(self, dim: int, eps: float = 1e-6):
        self.scale = Parameter(np.ones(dim))
        self.shift = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return add(mul(layer_norm(x, self.eps), self.scale), self.shift)
