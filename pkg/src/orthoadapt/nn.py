"""Layers and a module container on top of :mod:`orthoadapt.autodiff`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigurationError, DimensionError


class Module:
    """Minimal module tree: parameters and child modules registered by attribute."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        params, modules = self.__dict__.get("_params"), self.__dict__.get("_modules")
        if params is None:
            raise AttributeError("Module.__init__ must run before assigning attributes")
        # replacing in place keeps registration order stable
        if isinstance(value, Parameter):
            modules.pop(name, None)
            params[name] = value
        elif isinstance(value, Module):
            params.pop(name, None)
            modules[name] = value
        else:
            params.pop(name, None)
            modules.pop(name, None)
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        for name, m in self._modules.items():
            full = prefix + name
            yield full, m
            yield from m.named_modules(full + ".")

    def get_submodule(self, path: str) -> "Module":
        mod = self
        for part in path.split("."):
            mod = mod._modules[part]
        return mod

    def set_submodule(self, path: str, new: "Module") -> None:
        parent_path, _, leaf = path.rpartition(".")
        parent = self.get_submodule(parent_path) if parent_path else self
        if leaf not in parent._modules:
            raise KeyError(path)
        setattr(parent, leaf, new)

    def freeze(self) -> None:
        for p in self.parameters():
            p.trainable = False

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def num_parameters(self, trainable_only: bool = False) -> int:
        ps = self.trainable_parameters() if trainable_only else self.parameters()
        return int(sum(p.size for p in ps))


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Linear(Module):
    """``y = W x + b`` with ``W`` of shape (d, k)."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(he_normal(rng, (out_features, in_features), in_features), "weight")
        self.bias = Parameter(np.zeros(out_features), "bias") if bias else None

    @property
    def matrix_shape(self) -> tuple[int, int]:
        return self.weight.shape

    def forward(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        k = self.weight.shape[1]
        if x.shape[-1] != k:
            raise DimensionError(f"Linear expects trailing extent {k}, got {x.shape}")
        if x.ndim == 1:
            y = ad.matmul(self.weight, x)
        else:
            y = ad.matmul(x, ad.transpose(self.weight))
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    """Zero-padded cross-correlation layer with weight (F, C, k, k)."""

    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, pad: int = 0,
                 bias: bool = True, rng=None):
        super().__init__()
        if k < 1 or stride < 1 or pad < 0:
            raise ConfigurationError(f"bad conv geometry k={k} stride={stride} pad={pad}")
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * k * k
        self.weight = Parameter(he_normal(rng, (out_ch, in_ch, k, k), fan_in), "weight")
        self.bias = Parameter(np.zeros(out_ch), "bias") if bias else None
        self.k, self.stride, self.pad = k, stride, pad

    @property
    def matrix_shape(self) -> tuple[int, int]:
        f, c, k, _ = self.weight.shape
        return f, c * k * k

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.pad)
