"""Low-rank adapters with a soft orthogonality penalty on the weight update.

A frozen weight ``W0`` (d x k) gets a trainable update ``dW = B @ A`` with
``B`` (d x r) zero-initialised and ``A`` (r x k) Gaussian-initialised, so the
adapted layer starts out computing exactly what the frozen layer computed.
The forward pass evaluates ``W0 x + B (A x)`` and never forms ``B @ A``.
Convolution kernels (F, C, k, k) are treated as the matrix (F, C*k*k).

The penalty pushes ``dW^T dW`` toward the identity. When ``r < k`` the Gram
matrix has rank at most ``r`` and the penalty cannot reach zero; it then acts
purely as a soft regulariser.
"""

from __future__ import annotations

import fnmatch
import logging
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .autodiff import Parameter, Tensor
from .errors import ConfigurationError, DimensionError, UsageError
from .nn import Conv2d, Linear, Module

log = logging.getLogger(__name__)

ORTH_REDUCTIONS = ("mean", "sum", "norm")


class LowRankAdapter(Module):
    def __init__(self, A: np.ndarray, B: np.ndarray):
        super().__init__()
        A, B = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
        if A.ndim != 2 or B.ndim != 2 or B.shape[1] != A.shape[0]:
            raise DimensionError(f"adapter factors do not chain: B{B.shape} @ A{A.shape}")
        self.A = Parameter(A, "A")
        self.B = Parameter(B, "B")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def k(self) -> int:
        return self.A.shape[1]

    def delta(self) -> Tensor:
        """``B @ A`` as a graph node (used by the penalty and by merging)."""
        return ad.matmul(self.B, self.A)


def adapter_init(d: int, k: int, r: int, sigma: float = 0.02, seed: int = 0) -> LowRankAdapter:
    """A ~ N(0, sigma^2) drawn from ``seed``; B = 0."""
    if not 1 <= r <= min(d, k):
        raise ConfigurationError(f"rank r={r} must satisfy 1 <= r <= min(d={d}, k={k})")
    if sigma <= 0:
        raise ConfigurationError("sigma must be positive")
    gen = np.random.default_rng(seed)
    return LowRankAdapter(gen.normal(0.0, sigma, size=(r, k)), np.zeros((d, r)))


def orth_loss(adapter: LowRankAdapter, reduction: str = "mean") -> Tensor:
    """Distance of ``(BA)^T (BA)`` from the k x k identity.

    ``mean`` averages the squared entries over the k^2 positions, ``sum`` adds
    them, ``norm`` takes the Frobenius norm (non-differentiable at zero).
    """
    if reduction not in ORTH_REDUCTIONS:
        raise ConfigurationError(f"unknown reduction {reduction!r}")
    dw = adapter.delta()
    gram = ad.matmul(ad.transpose(dw), dw)
    resid = gram - np.eye(adapter.k)
    sq = resid * resid
    if reduction == "mean":
        return ad.mean(sq)
    total = ad.tsum(sq)
    return total if reduction == "sum" else ad.power(total, 0.5)


class _AdaptedBase(Module):
    """Shared plumbing: frozen base layer plus one adapter."""

    base: Module
    adapter: LowRankAdapter

    def __init__(self, base, adapter: LowRankAdapter):
        super().__init__()
        d, k = base.matrix_shape
        if (adapter.d, adapter.k) != (d, k):
            raise DimensionError(f"adapter ({adapter.d}x{adapter.k}) does not fit weight ({d}x{k})")
        base.freeze()
        self.base = base
        self.adapter = adapter

    @property
    def W0(self) -> Parameter:
        return self.base.weight

    @property
    def bias(self) -> Parameter | None:
        return self.base.bias

    def merged_weight(self) -> np.ndarray:
        dw = self.adapter.B.data @ self.adapter.A.data
        return self.W0.data + dw.reshape(self.W0.shape)


class AdaptedLinear(_AdaptedBase):
    def forward(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        k = self.adapter.k
        if x.shape[-1] != k:
            raise DimensionError(f"expected trailing extent {k}, got {x.shape}")
        A, B = self.adapter.A, self.adapter.B
        if x.ndim == 1:
            h = ad.matmul(self.W0, x)
            h = h + ad.matmul(B, ad.matmul(A, x))
        else:
            h = ad.matmul(x, ad.transpose(self.W0))
            h = h + ad.matmul(ad.matmul(x, ad.transpose(A)), ad.transpose(B))
        return h + self.bias if self.bias is not None else h

    def merge(self) -> Linear:
        d, k = self.W0.shape
        out = Linear(k, d, bias=self.bias is not None)
        out.weight.data = self.merged_weight()
        if self.bias is not None:
            out.bias.data = self.bias.data.copy()
        out.freeze()
        return out


class AdaptedConv2d(_AdaptedBase):
    def forward(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        single = x.ndim == 3
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        conv: Conv2d = self.base
        f, c, k, _ = self.W0.shape
        if x.shape[1] != c:
            raise DimensionError(f"input has {x.shape[1]} channels, layer expects {c}")
        n, _, h, w = x.shape
        ho = ad.conv_out_extent(h, k, conv.stride, conv.pad)
        wo = ad.conv_out_extent(w, k, conv.stride, conv.pad)
        cols = ad.unfold(x, k, conv.stride, conv.pad)
        A, B = self.adapter.A, self.adapter.B
        y = ad.matmul(cols, ad.transpose(ad.reshape(self.W0, (f, c * k * k))))
        y = y + ad.matmul(ad.matmul(cols, ad.transpose(A)), ad.transpose(B))
        if self.bias is not None:
            y = y + self.bias
        out = ad.fold_output(y, n, ho, wo)
        return ad.reshape(out, out.shape[1:]) if single else out

    def merge(self) -> Conv2d:
        f, c, k, _ = self.W0.shape
        base: Conv2d = self.base
        out = Conv2d(c, f, k, base.stride, base.pad, bias=self.bias is not None)
        out.weight.data = self.merged_weight()
        if self.bias is not None:
            out.bias.data = self.bias.data.copy()
        out.freeze()
        return out


def adapted_forward(layer: _AdaptedBase, x) -> Tensor:
    return layer(x)


def merge(layer: _AdaptedBase) -> Module:
    """Fold ``B @ A`` into the base weight: a plain frozen layer of the original shape."""
    return layer.merge()


def iter_adapters(model: Module) -> Iterator[tuple[str, LowRankAdapter]]:
    for name, m in model.named_modules():
        if isinstance(m, LowRankAdapter):
            yield name, m


def adapted_layers(model: Module) -> list[tuple[str, _AdaptedBase]]:
    return [(n, m) for n, m in model.named_modules() if isinstance(m, _AdaptedBase)]


def total_orth_loss(model: Module, reduction: str = "mean") -> Tensor:
    """Sum of :func:`orth_loss` over every adapter in ``model``."""
    adapters = [a for _, a in iter_adapters(model)]
    if not adapters:
        raise UsageError("model has no adapters")
    total = orth_loss(adapters[0], reduction)
    for a in adapters[1:]:
        total = total + orth_loss(a, reduction)
    return total


@dataclass
class PlacementSpec:
    """Glob patterns over layer names (``enc*``, ``head`` ...) selecting adapted layers."""

    patterns: list[str] = field(default_factory=list)

    def resolve(self, model: Module) -> list[str]:
        if not self.patterns:
            raise ConfigurationError("placement has no patterns")
        candidates = [
            n for n, m in model.named_modules()
            if isinstance(m, (Linear, Conv2d)) and not _inside_adapted(model, n)
        ]
        chosen: list[str] = []
        for pat in self.patterns:
            hits = fnmatch.filter(candidates, pat)
            if not hits:
                raise ConfigurationError(f"placement pattern {pat!r} matches no adaptable layer")
            chosen.extend(h for h in hits if h not in chosen)
        return chosen


def _inside_adapted(model: Module, name: str) -> bool:
    parts = name.split(".")
    for i in range(1, len(parts)):
        if isinstance(model.get_submodule(".".join(parts[:i])), _AdaptedBase):
            return True
    return False


def inject_adapters(model: Module, placement: PlacementSpec, r: int, sigma: float = 0.02,
                    seed: int = 0) -> Module:
    """Freeze ``model`` and wrap the layers selected by ``placement`` in place.

    Adapter ``i`` (in placement order) draws its ``A`` from the ``init``
    sub-stream of ``seed`` specialised by ``i``. Returns ``model``.
    """
    names = placement.resolve(model)
    model.freeze()
    for i, name in enumerate(names):
        layer = model.get_submodule(name)
        d, k = layer.matrix_shape
        adapter = adapter_init(d, k, r, sigma, seed=rngmod.derive_seed(seed, "init", i))
        wrapped = AdaptedConv2d(layer, adapter) if isinstance(layer, Conv2d) else AdaptedLinear(layer, adapter)
        model.set_submodule(name, wrapped)
    log.info("injected %d adapters (rank %d): %d trainable parameters",
             len(names), r, model.num_parameters(trainable_only=True))
    return model


def merge_model(model: Module) -> Module:
    """Replace every adapted layer of ``model`` by its merged plain layer, in place."""
    layers = adapted_layers(model)
    if not layers:
        raise UsageError("model has no adapters to merge")
    for name, layer in layers:
        model.set_submodule(name, layer.merge())
    return model
