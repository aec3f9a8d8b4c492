"""Channel-wise mixture of experts with sign-rule (auxiliary-loss-free) load balancing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AnyVariateAttention, AttentionMask, kronecker_mask, temporal_mask
from .layers import FFN, Module, make_norm
from .tensor import RngStream, Tensor


@dataclass(frozen=True)
class MoEConfig:
    n_shared: int = 1
    n_private: int = 4
    top_k: int = 2
    d_ff_expert: int | None = None  # default: (4 * d) // top_k
    d_ff_shared: int | None = None  # default: same as d_ff_expert
    bias_rate: float = 1e-3
    routing: str = "channel"  # "channel" or "token" (ablation)
    renormalize: bool = False

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_private:
            raise ValueError(f"need 1 <= top_k <= n_private, got K={self.top_k}, n_p={self.n_private}")
        if self.n_shared < 0:
            raise ValueError("n_shared must be >= 0")
        if self.routing not in ("channel", "token"):
            raise ValueError(f"routing must be 'channel' or 'token', got {self.routing!r}")

    def expert_width(self, d: int) -> int:
        width = self.d_ff_expert if self.d_ff_expert is not None else (4 * d) // self.top_k
        if width < 1:
            raise ValueError(f"expert hidden width must be >= 1, got {width}")
        return width

    def shared_width(self, d: int) -> int:
        return self.d_ff_shared if self.d_ff_shared is not None else self.expert_width(d)


class RouterState(Module):
    """Learnable token-cluster matrix plus the non-learnable selection bias and load counts."""

    def __init__(self, n_private: int, d: int, rng: RngStream, init_std: float = 0.02):
        self.cluster = Tensor(rng.normal((n_private, d), 0.0, init_std), requires_grad=True, name="cluster")
        self.bias = np.zeros(n_private)
        self.counts = np.zeros(n_private, dtype=np.int64)

    @property
    def n_private(self) -> int:
        return self.cluster.shape[0]


@dataclass
class ExpertAssignment:
    """Per-unit (channel, or token in the ablation) routing result.

    ``gates`` is U x n_p with exactly K nonzero entries per row; ``selected``
    is U x K expert indices; ``probs`` the softmaxed mean scores.
    """

    gates: Tensor
    selected: np.ndarray
    probs: Tensor

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.probs.shape, dtype=bool)
        np.put_along_axis(m, self.selected, True, axis=1)
        return m


def _units(H: Tensor) -> Tensor:
    if H.ndim == 3:
        return H
    return H.reshape((-1,) + H.shape[-2:])


def top_k_lowest_index(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties go to the lower index."""
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def route_channels(
    H_hat: Tensor,
    state: RouterState,
    K: int,
    record: bool = True,
    renormalize: bool = False,
) -> ExpertAssignment:
    """Route every unit (its N tokens together) to K private experts.

    Scores are averaged over the unit's tokens and softmaxed over experts; the
    bias shifts the top-K selection only, the gate keeps the softmax value.
    """
    if not 1 <= K <= state.n_private:
        raise ValueError(f"route_channels: K={K} outside [1, {state.n_private}]")
    units = _units(H_hat)
    s = T.matmul(units, state.cluster.T)  # U x N x n_p
    probs = T.softmax_lastdim(T.mean_axis(s, axis=1))  # U x n_p
    selected = top_k_lowest_index(probs.data + state.bias, K)
    mask = np.zeros(probs.shape)
    np.put_along_axis(mask, selected, 1.0, axis=1)
    gates = probs * mask
    if renormalize:
        gates = gates / T.sum_axis(gates, axis=-1, keepdims=True)
    if record:
        state.counts += mask.sum(axis=0).astype(np.int64)
    return ExpertAssignment(gates=gates, selected=selected, probs=probs)


def update_bias(state: RouterState, bias_rate: float) -> RouterState:
    """``b_i += rate * sign(mean(c) - c_i)``, then reset the counts."""
    c = state.counts.astype(np.float64)
    state.bias = state.bias + bias_rate * np.sign(c.mean() - c)
    state.counts = np.zeros_like(state.counts)
    return state


def moe_forward(
    H_hat: Tensor,
    assignment: ExpertAssignment,
    shared: list[FFN],
    private: list[FFN],
    norm: Module | None = None,
) -> Tensor:
    """``norm(mean(shared(H)) + sum_e gate_e * private_e(H) + H)`` over U x N x d units.

    Private experts only see the units that selected them.  Without ``norm``
    the pre-residual mixture is returned.
    """
    units = _units(H_hat)
    U = units.shape[0]
    mixed = None
    if shared:
        total = shared[0](units)
        for expert in shared[1:]:
            total = total + expert(units)
        mixed = total / float(len(shared))
    mask = assignment.mask
    for e, expert in enumerate(private):
        idx = np.nonzero(mask[:, e])[0]
        if idx.size == 0:
            continue
        y = expert(units[idx]) * assignment.gates[idx, e].reshape(-1, 1, 1)
        contrib = T.scatter_rows(y, idx, U)
        mixed = contrib if mixed is None else mixed + contrib
    if mixed is None:
        mixed = Tensor(np.zeros(units.shape))
    mixed = mixed.reshape(H_hat.shape)
    if norm is None:
        return mixed
    return norm(mixed + H_hat)


class MoELayer(Module):
    def __init__(self, d: int, cfg: MoEConfig, rng: RngStream, bias: bool = True):
        self.cfg = cfg
        self.router = RouterState(cfg.n_private, d, rng)
        self.shared = [FFN(d, cfg.shared_width(d), rng, bias=bias) for _ in range(cfg.n_shared)]
        self.private = [FFN(d, cfg.expert_width(d), rng, bias=bias) for _ in range(cfg.n_private)]
        self.last_assignment: ExpertAssignment | None = None

    def __call__(self, H_hat: Tensor, record: bool = True) -> Tensor:
        """Pre-residual mixture for tokens B x C x N x d."""
        if self.cfg.routing == "token":
            units = H_hat.reshape(-1, 1, H_hat.shape[-1])
        else:
            units = _units(H_hat)
        assignment = route_channels(
            units, self.router, self.cfg.top_k, record=record, renormalize=self.cfg.renormalize
        )
        self.last_assignment = assignment
        out = moe_forward(units, assignment, self.shared, self.private)
        return out.reshape(H_hat.shape)

    def update_bias(self) -> None:
        update_bias(self.router, self.cfg.bias_rate)


class DecoderLayer(Module):
    """Attention block followed by a dense FFN or an MoE block, each with residual + norm."""

    def __init__(
        self,
        d: int,
        n_heads: int,
        rng: RngStream,
        use_moe: bool,
        moe_cfg: MoEConfig | None = None,
        norm: str = "rms",
        bias: bool = True,
        paper_scale: bool = False,
    ):
        self.attn = AnyVariateAttention(d, n_heads, rng, bias=bias, paper_scale=paper_scale)
        self.norm1 = make_norm(norm, d)
        self.use_moe = use_moe
        if use_moe:
            if moe_cfg is None:
                raise ValueError("MoE layer needs an MoEConfig")
            self.ffn = MoELayer(d, moe_cfg, rng, bias=bias)
        else:
            self.ffn = FFN(d, 4 * d, rng, bias=bias)
        self.norm2 = make_norm(norm, d)

    def __call__(
        self,
        H: Tensor,
        mask: AttentionMask,
        graph_grad: Tensor | None = None,
        record: bool = True,
    ) -> Tensor:
        H_hat = self.norm1(self.attn(H, mask, graph_grad) + H)
        if self.use_moe:
            mixed = self.ffn(H_hat, record=record)
        else:
            mixed = self.ffn(H_hat)
        return self.norm2(mixed + H_hat)


def decoder_layer_forward(H, G_hard, layer: DecoderLayer, graph_grad: Tensor | None = None) -> Tensor:
    """Run one layer on C x N x d (or B x C x N x d) tokens under graph ``G_hard``."""
    H = H if isinstance(H, Tensor) else Tensor(H)
    squeeze = H.ndim == 3
    if squeeze:
        H = H.reshape((1,) + H.shape)
    mask = kronecker_mask(G_hard, temporal_mask(H.shape[2]))
    out = layer(H, mask, graph_grad)
    return out[0] if squeeze else out
