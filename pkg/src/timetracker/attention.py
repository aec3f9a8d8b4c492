"""Any-variate causal attention over the flattened C*N token sequence."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Linear, Module
from .tensor import RngStream, Tensor

MASK_VALUE = -1e9
ROPE_BASE = 10000.0


def temporal_mask(N: int) -> np.ndarray:
    """N x N lower-triangular visibility, diagonal included."""
    if N < 1:
        raise ValueError(f"temporal_mask: N must be >= 1, got {N}")
    return np.tril(np.ones((N, N), dtype=np.int8))


@dataclass
class AttentionMask:
    raw: np.ndarray  # (..., C*N, C*N) in {0, 1}
    additive: np.ndarray  # 0 where visible, MASK_VALUE where blocked


def kronecker_mask(G, T_mask) -> AttentionMask:
    """``raw[(i, m), (j, n)] = G[i, j] * T[m, n]`` for C x C (or B x C x C) graphs."""
    G = np.asarray(G)
    T_mask = np.asarray(T_mask)
    C = G.shape[-1]
    if G.shape[-2] != C:
        raise ValueError(f"kronecker_mask: adjacency must be square, got {G.shape}")
    if np.any(np.diagonal(G, axis1=-2, axis2=-1) == 0):
        raise ValueError("kronecker_mask: adjacency diagonal must be all ones")
    N = T_mask.shape[0]
    lead = G.shape[:-2]
    raw = G.reshape(lead + (C, 1, C, 1)) * T_mask.reshape((1, N, 1, N))
    raw = raw.reshape(lead + (C * N, C * N)).astype(np.int8)
    additive = np.where(raw > 0, 0.0, MASK_VALUE)
    return AttentionMask(raw=raw, additive=additive)


def _rotate_half_matrix(dh: int) -> np.ndarray:
    half = dh // 2
    R = np.zeros((dh, dh))
    idx = np.arange(half)
    R[idx + half, idx] = -1.0
    R[idx, idx + half] = 1.0
    return R


def rope_tables(N: int, dh: int, base: float = ROPE_BASE) -> tuple[np.ndarray, np.ndarray]:
    """cos / sin tables (N x dh) for intra-variable positions 0..N-1."""
    if dh % 2:
        raise ValueError(f"rotary embedding needs an even head dim, got {dh}")
    inv_freq = base ** (-np.arange(0, dh, 2) / dh)
    angles = np.arange(N)[:, None] * inv_freq[None, :]
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles), np.sin(angles)


class AnyVariateAttention(Module):
    """Multi-head attention with RoPE, per-head same/different-variable offsets.

    ``ident[0]`` holds u (same variable) and ``ident[1]`` holds v (different
    variable) for each head; both start at zero.
    """

    def __init__(
        self,
        d: int,
        n_heads: int,
        rng: RngStream,
        bias: bool = True,
        paper_scale: bool = False,
        rope_base: float = ROPE_BASE,
    ):
        if d % n_heads:
            raise ValueError(f"d={d} is not divisible by n_heads={n_heads}")
        self.d = d
        self.n_heads = n_heads
        self.d_head = d // n_heads
        if self.d_head % 2:
            raise ValueError(f"head dim {self.d_head} must be even for rotary embedding")
        self.w_q = Linear(d, d, rng, bias=bias)
        self.w_k = Linear(d, d, rng, bias=bias)
        self.w_v = Linear(d, d, rng, bias=bias)
        self.w_o = Linear(d, d, rng, bias=bias)
        self.ident = Tensor(np.zeros((2, n_heads)), requires_grad=True, name="ident")
        self.paper_scale = paper_scale
        self.rope_base = rope_base
        self._rot = _rotate_half_matrix(self.d_head)
        self.last_weights: np.ndarray | None = None
        self.record_weights = False

    @property
    def scale(self) -> float:
        return math.sqrt(self.d if self.paper_scale else self.d_head)

    def _heads(self, x: Tensor, B: int, C: int, N: int, rotate: bool) -> Tensor:
        h, dh = self.n_heads, self.d_head
        x = x.reshape(B, C, N, h, dh)
        if rotate:
            cos, sin = rope_tables(N, dh, self.rope_base)
            cos = cos[:, None, :]
            sin = sin[:, None, :]
            x = x * cos + T.matmul(x, self._rot) * sin
        return x.reshape(B, C * N, h, dh).transpose(0, 2, 1, 3)

    def scores(self, H: Tensor) -> Tensor:
        """Pre-mask scores B x h x CN x CN for tokens H (B x C x N x d)."""
        B, C, N, _ = H.shape
        q = self._heads(self.w_q(H), B, C, N, rotate=True)
        k = self._heads(self.w_k(H), B, C, N, rotate=True)
        s = T.matmul(q, k.T)
        same = np.kron(np.eye(C), np.ones((N, N)))
        u = self.ident[0].reshape(1, self.n_heads, 1, 1)
        v = self.ident[1].reshape(1, self.n_heads, 1, 1)
        return s + u * same + v * (1.0 - same)

    def __call__(self, H: Tensor, mask: AttentionMask, graph_grad: Tensor | None = None) -> Tensor:
        """Masked attention for tokens H (B x C x N x d).

        ``graph_grad`` is an optional zero-valued B x C x C tensor (see
        ``AdjacencyMatrix.straight_through``) that routes gradients from the
        visible logits back to the soft adjacency.
        """
        B, C, N, d = H.shape
        logits = self.scores(H)
        additive = mask.additive
        if additive.ndim == 2:
            additive = additive[None, None]
        else:
            additive = additive[:, None]
        logits = logits + additive
        if graph_grad is not None:
            T_mask = temporal_mask(N).astype(np.float64)
            lead = graph_grad.shape[:-2]
            spread = graph_grad.reshape(lead + (C, 1, C, 1)) * T_mask.reshape(1, N, 1, N)
            spread = spread.reshape(lead + (C * N, C * N))
            if spread.ndim == 2:
                spread = spread.reshape(1, 1, C * N, C * N)
            else:
                spread = spread.reshape(spread.shape[0], 1, C * N, C * N)
            logits = logits + spread
        weights = T.softmax_lastdim(logits / self.scale)
        if self.record_weights:
            self.last_weights = weights.data.copy()
        v = self._heads(self.w_v(H), B, C, N, rotate=False)
        out = T.matmul(weights, v)  # B x h x CN x dh
        out = out.transpose(0, 2, 1, 3).reshape(B, C, N, d)
        return self.w_o(out)


def attention_scores(H_flat, attn: AnyVariateAttention, C: int, N: int) -> Tensor:
    """Scores for a variable-major flattened (C*N) x d (or B x CN x d) token matrix."""
    H_flat = H_flat if isinstance(H_flat, Tensor) else Tensor(H_flat)
    squeeze = H_flat.ndim == 2
    B = 1 if squeeze else H_flat.shape[0]
    s = attn.scores(H_flat.reshape(B, C, N, H_flat.shape[-1]))
    return s[0] if squeeze else s


def attention_forward(H, G_hard, attn: AnyVariateAttention, graph_grad: Tensor | None = None) -> Tensor:
    """Any-variate attention for C x N x d (or B x C x N x d) tokens under graph ``G_hard``."""
    H = H if isinstance(H, Tensor) else Tensor(H)
    squeeze = H.ndim == 3
    if squeeze:
        H = H.reshape((1,) + H.shape)
    mask = kronecker_mask(G_hard, temporal_mask(H.shape[2]))
    out = attn(H, mask, graph_grad)
    return out[0] if squeeze else out
