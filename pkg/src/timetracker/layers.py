"""Parameter containers and the small set of layers the model is built from."""

from __future__ import annotations

import math
from collections.abc import Iterator

import numpy as np

from . import tensor as T
from .tensor import RngStream, Tensor


class Module:
    """Attribute-walking parameter container (Tensors, Modules, lists of Modules).

    Every Tensor attribute is a parameter; freezing flips ``requires_grad``
    without hiding the tensor from ``named_parameters``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` shaped (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: RngStream, bias: bool = True):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = _param(rng.uniform((n_in, n_out), -bound, bound), "weight")
        self.bias = _param(np.zeros(n_out), "bias") if bias else None

    def __call__(self, x) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class RMSNorm(Module):
    def __init__(self, d: int, eps: float = T.GUARD_EPS):
        self.gain = _param(np.ones(d), "gain")
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return T.rmsnorm(x, self.gain, eps=self.eps)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = _param(np.ones(d), "gain")
        self.shift = _param(np.zeros(d), "shift")
        self.eps = eps

    def __call__(self, x) -> Tensor:
        centered = x - T.mean_axis(x, axis=-1, keepdims=True)
        var = T.mean_axis(centered * centered, axis=-1, keepdims=True)
        return centered / T.sqrt(var + self.eps) * self.gain + self.shift


def make_norm(kind: str, d: int) -> Module:
    if kind == "rms":
        return RMSNorm(d)
    if kind == "layer":
        return LayerNorm(d)
    raise ValueError(f"unknown norm {kind!r}; expected 'rms' or 'layer'")


class FFN(Module):
    """Two-layer GELU feed-forward network d -> hidden -> d."""

    def __init__(self, d: int, hidden: int, rng: RngStream, bias: bool = True):
        self.up = Linear(d, hidden, rng, bias=bias)
        self.down = Linear(hidden, d, rng, bias=bias)

    def __call__(self, x) -> Tensor:
        return self.down(T.gelu(self.up(x)))
