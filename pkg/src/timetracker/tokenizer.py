"""Instance normalization, patching and the linear patch <-> token maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class PatchConfig:
    """Look-back ``L``, horizon ``F``, patch length ``P``, stride ``S``, width ``d``."""

    L: int
    P: int
    d: int
    S: int | None = None
    F: int | None = None

    def __post_init__(self):
        if self.S is None:
            object.__setattr__(self, "S", self.P)
        if self.F is None:
            object.__setattr__(self, "F", self.P)
        if self.F != self.P:
            raise ValueError(f"horizon F={self.F} must equal patch length P={self.P}")
        if self.P < 1 or self.S < 1 or self.d < 1:
            raise ValueError("P, S and d must be positive")
        if self.L < self.P:
            raise ValueError(f"look-back L={self.L} shorter than patch length P={self.P}")
        if (self.L - self.P) % self.S:
            excess = (self.L - self.P) % self.S
            raise ValueError(
                f"(L - P) = {self.L - self.P} is not divisible by stride S={self.S}; "
                f"trim {excess} samples from the head of the window"
            )

    @property
    def N(self) -> int:
        return math.ceil((self.L - self.P) / self.S + 1)

    @property
    def window(self) -> int:
        return self.L + self.F


@dataclass
class SeriesBatch:
    """``values`` are B x C x L look-backs; ``future`` the B x C x F horizon (optional)."""

    values: np.ndarray
    future: np.ndarray | None = None
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    normalized: bool = False
    floored: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_windows(cls, windows: np.ndarray, L: int) -> SeriesBatch:
        """Split B x C x (L + F) windows into look-back and horizon."""
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3:
            raise ValueError(f"windows must be B x C x (L+F), got shape {windows.shape}")
        future = windows[..., L:] if windows.shape[-1] > L else None
        return cls(values=windows[..., :L], future=future)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass
class TokenGrid:
    tokens: Tensor
    layer_index: int = 0


def normalize(batch: SeriesBatch) -> SeriesBatch:
    """Per-(b, c) zero-mean unit-std scaling using look-back statistics only.

    The horizon is scaled with the same statistics.  Channels whose std falls
    below ``STD_FLOOR`` use the floor and are flagged in ``floored``.
    """
    x = np.asarray(batch.values, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("normalize: non-finite values in look-back window")
    mean = x.mean(axis=-1)
    std = x.std(axis=-1)
    floored = std < STD_FLOOR
    std = np.where(floored, STD_FLOOR, std)
    values = (x - mean[..., None]) / std[..., None]
    future = None
    if batch.future is not None:
        future = (np.asarray(batch.future, dtype=np.float64) - mean[..., None]) / std[..., None]
    return SeriesBatch(values, future, mean, std, normalized=True, floored=floored)


def denormalize(x, batch: SeriesBatch) -> np.ndarray:
    """Map normalized values (B x C x ...) back to raw units."""
    if batch.norm_mean is None:
        raise ValueError("denormalize: batch carries no normalization statistics")
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    extra = x.ndim - batch.norm_mean.ndim
    shape = batch.norm_mean.shape + (1,) * extra
    return x * batch.norm_std.reshape(shape) + batch.norm_mean.reshape(shape)


def patchify(values, cfg: PatchConfig) -> np.ndarray:
    """B x C x L -> B x C x N x P sliding-window patches (copies)."""
    values = np.asarray(values.values if isinstance(values, SeriesBatch) else values)
    L = values.shape[-1]
    if L != cfg.L:
        raise ValueError(f"patchify: series length {L} != configured L={cfg.L}")
    windows = np.lib.stride_tricks.sliding_window_view(values, cfg.P, axis=-1)
    return np.ascontiguousarray(windows[..., :: cfg.S, :][..., : cfg.N, :])


def next_patch_targets(full, cfg: PatchConfig) -> np.ndarray:
    """Target for token tau: the P values that follow the end of patch tau.

    ``full`` is B x C x (L + F); the last token's target is the horizon.
    """
    full = np.asarray(full)
    if full.shape[-1] != cfg.window:
        raise ValueError(f"next_patch_targets: need length L+F={cfg.window}, got {full.shape[-1]}")
    starts = np.arange(cfg.N) * cfg.S + cfg.P
    idx = starts[:, None] + np.arange(cfg.P)[None, :]
    return full[..., idx]


def embed_patches(patches, weight, bias=None) -> TokenGrid:
    """Linear patch projector ``h = p @ W_p (+ b)``."""
    weight = weight if isinstance(weight, Tensor) else Tensor(weight)
    p = patches if isinstance(patches, Tensor) else Tensor(patches)
    if p.shape[-1] != weight.shape[0]:
        raise ValueError(
            f"embed_patches: patch length {p.shape[-1]} != projector rows {weight.shape[0]}"
        )
    h = T.matmul(p, weight)
    if bias is not None:
        h = h + bias
    return TokenGrid(h, layer_index=0)


def project_output(tokens, weight, bias=None) -> Tensor:
    """Map tokens (... x d) to next-patch predictions (... x P)."""
    h = tokens.tokens if isinstance(tokens, TokenGrid) else tokens
    weight = weight if isinstance(weight, Tensor) else Tensor(weight)
    if h.shape[-1] != weight.shape[0]:
        raise ValueError(f"project_output: token width {h.shape[-1]} != head rows {weight.shape[0]}")
    out = T.matmul(h, weight)
    if bias is not None:
        out = out + bias
    return out

