import numpy as np
import pytest
from dataclasses import replace

from timetracker.model import (
    PAPER_FINETUNE_TOTAL,
    PAPER_PRETRAIN_TOTAL,
    ModelConfig,
    build_model,
    count_parameters,
    moe_layer_indices,
    next_patch_loss,
    paper_config,
    paper_gap_report,
)
from timetracker.moe import MoEConfig
from timetracker.tensor import Tensor


@pytest.mark.parametrize(
    "placement,expected",
    [("every2", [2, 4, 6, 8]), ("first_half", [1, 2, 3, 4]), ("all", list(range(1, 9))), ("every4", [4, 8]),
     ("last_half", [5, 6, 7, 8]), ("none", [])],
)
def test_placements(placement, expected):
    cfg = ModelConfig(n_layers=8, moe_placement=placement)
    assert moe_layer_indices(cfg) == expected
    model = build_model(cfg, 0)
    assert [i + 1 for i, l in enumerate(model.layers) if l.use_moe] == expected


def test_custom_placement():
    cfg = ModelConfig(n_layers=4, moe_placement="custom", moe_layers=(1, 3))
    assert moe_layer_indices(cfg) == [1, 3]
    with pytest.raises(ValueError):
        ModelConfig(n_layers=4, moe_placement="custom", moe_layers=(5,))
    with pytest.raises(ValueError):
        ModelConfig(moe_placement="sometimes")


def test_dense_hidden_is_4d():
    model = build_model(ModelConfig(d_model=16, moe_placement="none"), 0)
    assert model.layers[0].ffn.up.weight.shape == (16, 64)


def test_deterministic_init():
    a = build_model(ModelConfig(), 3)
    b = build_model(ModelConfig(), 3)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n


def test_cm_identity_equals_ci():
    model = build_model(ModelConfig(), 1)
    x = np.random.default_rng(0).normal(size=(2, 3, 32))
    ci = model.forward(x, "ci", record=False).data
    cm = model.forward(x, "cm", graph=np.eye(3), record=False).data
    assert np.max(np.abs(cm - ci)) / np.max(np.abs(ci)) < 1e-6


def test_single_channel_modes_coincide():
    model = build_model(ModelConfig(), 2)
    x = np.random.default_rng(1).normal(size=(2, 1, 32))
    np.testing.assert_allclose(
        model.forward(x, "cm", graph=np.ones((1, 1)), record=False).data,
        model.forward(x, "ci", record=False).data,
        rtol=1e-12,
    )


def test_cm_needs_graph():
    model = build_model(ModelConfig(), 0)
    x = np.zeros((1, 2, 32))
    with pytest.raises(ValueError, match="graph"):
        model.forward(x, "cm")
    with pytest.raises(ValueError, match="C=2"):
        model.forward(x, "cm", graph=np.eye(3))


def test_no_parameter_depends_on_channel_count():
    model = build_model(ModelConfig(), 0)
    for C in (1, 2, 5):
        assert model.forward(np.random.default_rng(C).normal(size=(1, C, 32)), "cm", graph=np.ones((C, C))).shape == (1, C, 4, 8)


def test_loss_trivial_cases():
    t = np.random.default_rng(2).normal(size=(2, 3, 4, 8))
    assert next_patch_loss(Tensor(t), t).item() == 0.0
    assert next_patch_loss(Tensor(t + 1.0), t).item() == pytest.approx(1.0)


def test_loss_matches_loop():
    rng = np.random.default_rng(3)
    p, t = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(2, 3, 4, 5))
    total, n = 0.0, 0
    for idx in np.ndindex(p.shape):
        total += (p[idx] - t[idx]) ** 2
        n += 1
    assert abs(next_patch_loss(Tensor(p), t).item() - total / n) / (total / n) < 1e-12
    last = np.mean((p[..., -1, :] - t[..., -1, :]) ** 2)
    assert next_patch_loss(Tensor(p), t, last_only=True).item() == pytest.approx(last, rel=1e-12)


# -- parameter counting -------------------------------------------------------


def test_tiny_hand_count():
    cfg = ModelConfig(lookback=4, patch_len=2, d_model=4, n_heads=1, n_layers=1, moe_placement="none", bias=False, j_cm=0)
    # embed 2*4, ident 2*1, attention 4*4*4, two RMS gains 2*4, FFN 4*16 + 16*4, head 4*2
    hand = 8 + 2 + 64 + 8 + 128 + 8
    count = count_parameters(cfg)
    assert count.total == hand
    model = build_model(cfg, 0)
    assert model.num_parameters() - model.graph.num_parameters() == hand


def test_count_matches_built_model():
    for cfg in (ModelConfig(), ModelConfig(norm="layer", bias=False, moe_placement="all", n_layers=3),
                ModelConfig(moe=MoEConfig(n_shared=2, n_private=5, top_k=3))):
        model = build_model(cfg, 0)
        graph = model.graph.num_parameters()
        assert count_parameters(cfg).total == model.num_parameters() - graph


def test_extra_private_expert_cost():
    d = 16
    base = ModelConfig(n_layers=2, moe_placement="every2", d_model=d, moe=MoEConfig(n_private=4, top_k=2))
    more = replace(base, moe=replace(base.moe, n_private=5))
    f = base.moe.expert_width(d)
    assert count_parameters(more).total - count_parameters(base).total == 2 * d * f + f + d + d  # weights, biases, gating row
    no_bias = replace(base, bias=False)
    more_nb = replace(no_bias, moe=replace(no_bias.moe, n_private=5))
    assert count_parameters(more_nb).total - count_parameters(no_bias).total == 2 * d * f + d


def test_finetune_mode_counts_active_and_graph():
    cfg = ModelConfig(moe=MoEConfig(n_private=4, top_k=2))
    pre, fine = count_parameters(cfg, "pretrain"), count_parameters(cfg, "finetune")
    assert fine.breakdown["graph_alpha"] == 16 and fine.breakdown["graph_edge_biases"] == 3
    per = pre.breakdown["moe_private_experts"] // 4
    assert fine.breakdown["moe_private_experts"] == 2 * per


def test_paper_gap_report_mentions_targets():
    text = paper_gap_report(top=2)
    assert "79,911,648" in text and "16,850,883" in text
    assert PAPER_PRETRAIN_TOTAL == 79_911_648 and PAPER_FINETUNE_TOTAL == 16_850_883
    assert paper_config().patch.N == 7
