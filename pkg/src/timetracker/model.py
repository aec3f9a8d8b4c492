"""Decoder stack, CI/CM forward passes, next-patch loss and parameter accounting."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .attention import kronecker_mask, temporal_mask
from .graph import AdjacencyMatrix, FreqSimilarityParams, gumbel_adjacency, similarity_matrix
from .layers import Linear, Module
from .moe import DecoderLayer, MoEConfig, MoELayer
from .tensor import RngStream, Tensor
from .tokenizer import PatchConfig, patchify

PLACEMENTS = ("all", "every2", "every4", "first_half", "last_half", "none", "custom")


@dataclass(frozen=True)
class ModelConfig:
    lookback: int = 32
    patch_len: int = 8
    stride: int | None = None
    d_model: int = 16
    n_heads: int = 2
    n_layers: int = 2
    moe_placement: str = "every2"
    moe_layers: tuple[int, ...] = ()
    j_cm: int = 1
    norm: str = "rms"
    bias: bool = True
    paper_scale: bool = False
    loss: str = "all"
    tau: float = 0.5
    tau_final: float | None = None
    graph_logits: str = "calibrated"
    use_edge_bias: bool = False
    moe: MoEConfig = field(default_factory=MoEConfig)

    def __post_init__(self):
        if self.moe_placement not in PLACEMENTS:
            raise ValueError(f"unknown moe_placement {self.moe_placement!r}; expected one of {PLACEMENTS}")
        if not 0 <= self.j_cm <= self.n_layers:
            raise ValueError(f"j_cm={self.j_cm} must lie in [0, n_layers={self.n_layers}]")
        if self.loss not in ("all", "last_only"):
            raise ValueError(f"loss must be 'all' or 'last_only', got {self.loss!r}")
        if self.lookback % 2:
            raise ValueError(f"lookback {self.lookback} must be even (spectral graph uses L/2 bins)")
        moe_layer_indices(self)  # validates custom lists
        self.patch  # validates patch geometry

    @property
    def patch(self) -> PatchConfig:
        return PatchConfig(L=self.lookback, P=self.patch_len, d=self.d_model, S=self.stride)

    @property
    def j_ci(self) -> int:
        return self.n_layers - self.j_cm

    def to_dict(self) -> dict:
        out = asdict(self)
        out["moe_layers"] = list(self.moe_layers)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        data = dict(data)
        moe = data.pop("moe", {})
        if isinstance(moe, dict):
            moe = MoEConfig(**moe)
        if "moe_layers" in data:
            data["moe_layers"] = tuple(data["moe_layers"])
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(moe=moe, **data)


def moe_layer_indices(cfg: ModelConfig) -> list[int]:
    """1-based indices of the layers that carry an MoE block."""
    J = cfg.n_layers
    placement = cfg.moe_placement
    if placement == "all":
        return list(range(1, J + 1))
    if placement == "every2":
        return list(range(2, J + 1, 2))
    if placement == "every4":
        return list(range(4, J + 1, 4))
    if placement == "first_half":
        return list(range(1, J // 2 + 1))
    if placement == "last_half":
        return list(range(J // 2 + 1, J + 1))
    if placement == "none":
        return []
    layers = sorted(set(cfg.moe_layers))
    if not layers or any(i < 1 or i > J for i in layers):
        raise ValueError(f"custom moe_layers {list(cfg.moe_layers)} must be non-empty and within 1..{J}")
    return layers


class Model(Module):
    """Patch embedding, J decoder layers, linear output head and the graph learner."""

    def __init__(self, cfg: ModelConfig, rng: RngStream):
        self.cfg = cfg
        d, P = cfg.d_model, cfg.patch_len
        self.embed = Linear(P, d, rng, bias=cfg.bias)
        moe_at = set(moe_layer_indices(cfg))
        self.layers = [
            DecoderLayer(
                d,
                cfg.n_heads,
                rng,
                use_moe=(i + 1) in moe_at,
                moe_cfg=cfg.moe,
                norm=cfg.norm,
                bias=cfg.bias,
                paper_scale=cfg.paper_scale,
            )
            for i in range(cfg.n_layers)
        ]
        self.head = Linear(d, P, rng, bias=cfg.bias)
        self.graph = FreqSimilarityParams(cfg.lookback // 2, use_edge_bias=cfg.use_edge_bias)
        self.frozen_layers = 0

    # -- structure helpers --------------------------------------------------
    def moe_blocks(self) -> list[tuple[int, MoELayer]]:
        return [(i, layer.ffn) for i, layer in enumerate(self.layers) if layer.use_moe]

    def update_router_biases(self) -> dict[int, np.ndarray]:
        """Apply the sign rule on every non-frozen MoE layer; returns the loads used."""
        loads = {}
        for i, block in self.moe_blocks():
            if i < self.frozen_layers:
                continue
            loads[i] = block.router.counts.copy()
            block.update_bias()
        return loads

    def reset_router_counts(self) -> None:
        for _, block in self.moe_blocks():
            block.router.counts[:] = 0

    def freeze(self, n_layers: int) -> None:
        """Freeze the embedding and the first ``n_layers`` decoder layers."""
        self.frozen_layers = n_layers
        self.embed.set_trainable(n_layers == 0)
        for i, layer in enumerate(self.layers):
            layer.set_trainable(i >= n_layers)

    # -- forward ------------------------------------------------------------
    def tokens(self, x) -> Tensor:
        """Normalized look-backs B x C x L -> tokens B x C x N x d."""
        patches = patchify(np.asarray(x), self.cfg.patch)
        return self.embed(Tensor(patches))

    def learn_graph(self, x, rng: RngStream | None = None, train: bool = True, tau: float | None = None) -> AdjacencyMatrix:
        z = similarity_matrix(np.asarray(x), self.graph)
        return gumbel_adjacency(
            z,
            tau if tau is not None else self.cfg.tau,
            rng,
            mode="train" if train else "eval",
            logits=self.cfg.graph_logits,
            params=self.graph,
        )

    def _run(self, H: Tensor, layers, mask, graph_grad, offset: int, record: bool) -> Tensor:
        for i, layer in enumerate(layers, start=offset):
            H = layer(H, mask, graph_grad, record=record and i >= self.frozen_layers)
        return H

    def forward(self, x, mode: str = "ci", graph=None, record: bool = True) -> Tensor:
        """Next-patch predictions B x C x N x P for normalized look-backs B x C x L.

        ``ci``: every channel is its own univariate instance.  ``cm``: the first
        J_CI layers run channel-independently, the last J_CM layers attend
        across variables under ``graph`` (AdjacencyMatrix or 0/1 array).
        """
        x = np.asarray(x)
        if x.ndim != 3:
            raise ValueError(f"forward: expected B x C x L input, got shape {x.shape}")
        B, C, _ = x.shape
        N, d = self.cfg.patch.N, self.cfg.d_model
        H = self.tokens(x).reshape(B * C, 1, N, d)
        uni = kronecker_mask(np.ones((1, 1)), temporal_mask(N))
        if mode == "ci":
            H = self._run(H, self.layers, uni, None, 0, record)
        elif mode == "cm":
            if graph is None:
                raise ValueError("forward: cm mode needs an adjacency graph")
            if isinstance(graph, AdjacencyMatrix):
                hard, graph_grad = graph.hard, graph.straight_through
            else:
                hard, graph_grad = np.asarray(graph, dtype=np.float64), None
            if hard.shape[-1] != C or hard.shape[-2] != C:
                raise ValueError(f"forward: graph is {hard.shape[-2:]} but input has C={C}")
            j_ci = self.cfg.j_ci
            H = self._run(H, self.layers[:j_ci], uni, None, 0, record)
            H = H.reshape(B, C, N, d)
            mixed = kronecker_mask(hard, temporal_mask(N))
            H = self._run(H, self.layers[j_ci:], mixed, graph_grad, j_ci, record)
        else:
            raise ValueError(f"forward: mode must be 'ci' or 'cm', got {mode!r}")
        return self.head(H.reshape(B, C, N, d))


def build_model(cfg: ModelConfig, rng: RngStream | int = 0) -> Model:
    if not isinstance(rng, RngStream):
        rng = RngStream(int(rng))
    return Model(cfg, rng)


def next_patch_loss(pred: Tensor, target, last_only: bool = False) -> Tensor:
    """Mean squared error over next-patch positions (or only the horizon patch)."""
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"next_patch_loss: prediction {pred.shape} vs target {target.shape}")
    if last_only:
        pred = pred[..., -1, :]
        target = target[..., -1, :]
    diff = pred - target
    return T.mean_axis(diff * diff)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


@dataclass
class ParamCount:
    total: int
    breakdown: dict[str, int]

    def report(self) -> str:
        width = max(len(k) for k in self.breakdown) if self.breakdown else 0
        lines = [f"{k:<{width}}  {v:>14,}" for k, v in self.breakdown.items()]
        lines.append(f"{'total':<{width}}  {self.total:>14,}")
        return "\n".join(lines)


def _linear(n_in: int, n_out: int, bias: bool) -> int:
    return n_in * n_out + (n_out if bias else 0)


def _ffn(d: int, hidden: int, bias: bool) -> int:
    return _linear(d, hidden, bias) + _linear(hidden, d, bias)


def count_parameters(cfg: ModelConfig, mode: str = "pretrain") -> ParamCount:
    """Analytic parameter count.

    ``pretrain`` counts every expert; ``finetune`` counts only the K active
    private experts per MoE layer and adds the graph learner (L/2 + 3).
    """
    if mode not in ("pretrain", "finetune"):
        raise ValueError(f"mode must be 'pretrain' or 'finetune', got {mode!r}")
    d, P, h, J, bias = cfg.d_model, cfg.patch_len, cfg.n_heads, cfg.n_layers, cfg.bias
    moe = cfg.moe
    moe_at = set(moe_layer_indices(cfg))
    n_moe = len(moe_at)
    n_dense = J - n_moe
    norm_each = d if cfg.norm == "rms" else 2 * d

    active_private = moe.top_k if mode == "finetune" else moe.n_private
    breakdown = {
        "patch_embedding": _linear(P, d, bias),
        "identifier_embeddings": 2 * h * J,
        "attention": J * 4 * _linear(d, d, bias),
        "norms": J * 2 * norm_each,
        "dense_ffn": n_dense * _ffn(d, 4 * d, bias),
        "moe_gating": n_moe * moe.n_private * d,
        "moe_shared_experts": n_moe * moe.n_shared * _ffn(d, moe.shared_width(d), bias),
        "moe_private_experts": n_moe * active_private * _ffn(d, moe.expert_width(d), bias),
        "output_head": _linear(d, P, bias),
    }
    if mode == "finetune":
        breakdown["graph_alpha"] = cfg.lookback // 2
        breakdown["graph_edge_biases"] = 3
    return ParamCount(total=sum(breakdown.values()), breakdown=breakdown)


PAPER_PRETRAIN_TOTAL = 79_911_648
PAPER_FINETUNE_TOTAL = 16_850_883


def paper_config(**overrides) -> ModelConfig:
    """Published defaults: L=672, P=F=96, d=512, 8 layers, alternating MoE."""
    base = dict(
        lookback=672,
        patch_len=96,
        d_model=512,
        n_heads=8,
        n_layers=8,
        moe_placement="every2",
        j_cm=1,
        norm="layer",
        bias=False,
    )
    moe = overrides.pop("moe", MoEConfig(n_shared=1, n_private=8, top_k=2))
    base.update(overrides)
    return ModelConfig(moe=moe, **base)


def _trainable_finetune_count(cfg: ModelConfig) -> int:
    """Parameters updated by finetuning: last J_CM layers, head and graph learner."""
    full = count_parameters(cfg, "pretrain").breakdown
    J = cfg.n_layers
    moe_at = set(moe_layer_indices(cfg))
    d, bias = cfg.d_model, cfg.bias
    norm_each = d if cfg.norm == "rms" else 2 * d
    per_layer = 2 * cfg.n_heads + 4 * _linear(d, d, bias) + 2 * norm_each
    total = 0
    for i in range(J - cfg.j_cm + 1, J + 1):
        total += per_layer
        if i in moe_at:
            m = cfg.moe
            total += m.n_private * d + m.n_shared * _ffn(d, m.shared_width(d), bias)
            total += m.top_k * _ffn(d, m.expert_width(d), bias)
        else:
            total += _ffn(d, 4 * d, bias)
    return total + full["output_head"] + cfg.lookback // 2 + 3


def reconcile_paper_counts(top: int = 5) -> list[dict]:
    """Search unstated hyper-parameters for the counts nearest the published totals.

    Returns the ``top`` candidates per target, each a dict with the setting,
    the count and the signed gap.  The published totals are not asserted.
    """
    rows = []
    grid = itertools.product(
        (0, 1, 2),  # n_shared
        (2, 4, 8, 16, 32, 64),  # n_private
        (1, 2, 4),  # top_k
        (8, 16),  # heads
        ("layer", "rms"),
        (False, True),  # biases
        ("every2", "all"),
        (8, 4, 2),  # layers; the multivariate runs use J=4 / J=2
        (672, 96),  # look-back
    )
    for n_s, n_p, k, h, norm, bias, placement, J, L in grid:
        if k > n_p:
            continue
        cfg = paper_config(
            moe=MoEConfig(n_shared=n_s, n_private=n_p, top_k=k),
            n_heads=h,
            norm=norm,
            bias=bias,
            moe_placement=placement,
            n_layers=J,
            lookback=L,
        )
        setting = dict(n_shared=n_s, n_private=n_p, top_k=k, n_heads=h, norm=norm, bias=bias,
                       placement=placement, n_layers=J, lookback=L)
        pre = count_parameters(cfg, "pretrain").total
        pre_active = count_parameters(cfg, "finetune").total - cfg.lookback // 2 - 3
        rows.append(dict(target="pretrain", counting="all experts", count=pre, **setting))
        rows.append(dict(target="pretrain", counting="active experts", count=pre_active, **setting))
        rows.append(dict(target="finetune", counting="active experts + graph",
                         count=count_parameters(cfg, "finetune").total, **setting))
        rows.append(dict(target="finetune", counting="trainable (last layer + head + graph)",
                         count=_trainable_finetune_count(cfg), **setting))
    out = []
    for target, value in (("pretrain", PAPER_PRETRAIN_TOTAL), ("finetune", PAPER_FINETUNE_TOTAL)):
        cands = [dict(r, gap=r["count"] - value) for r in rows if r["target"] == target]
        cands.sort(key=lambda r: abs(r["gap"]))
        out.extend(cands[:top])
    return out


def paper_gap_report(top: int = 5) -> str:
    """Human-readable gap analysis against the published parameter totals."""
    cfg = paper_config()
    lines = [
        "Parameter count for the published defaults (n_s=1, n_p=8, K=2, h=8, LayerNorm, no biases):",
        count_parameters(cfg, "pretrain").report(),
        "",
        f"published pretrain total: {PAPER_PRETRAIN_TOTAL:,}",
        f"published finetune total: {PAPER_FINETUNE_TOTAL:,}",
        "",
        "nearest settings found by grid search (expert counts, heads, norm, biases and placement are unpublished):",
    ]
    for r in reconcile_paper_counts(top):
        lines.append(
            f"  {r['target']:<8} count={r['count']:>12,} gap={r['gap']:>+12,}  [{r['counting']}] "
            f"n_s={r['n_shared']} n_p={r['n_private']} K={r['top_k']} h={r['n_heads']} "
            f"norm={r['norm']} bias={r['bias']} placement={r['placement']} J={r['n_layers']} L={r['lookback']}"
        )
    return "\n".join(lines)


def with_moe(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, moe=replace(cfg.moe, **changes))
