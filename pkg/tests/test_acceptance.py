"""The fourteen acceptance criteria, one test each, at their stated tolerances.

Every test records a one-line PASS/FAIL verdict (shown in the terminal summary
and printed inline with ``-s``) before asserting.
"""

import itertools
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from timetracker import tensor as T
from timetracker.attention import AnyVariateAttention, attention_forward, kronecker_mask, temporal_mask
from timetracker.checkpoint import load_state
from timetracker.data import load_dataset
from timetracker.experiments import (
    decoupling_benefit,
    expert_load_windows,
    load_balance_run,
    max_min_ratio,
    routing_ablation,
    sinusoid_mixture,
)
from timetracker.graph import gumbel_adjacency
from timetracker.model import ModelConfig, build_model, count_parameters, next_patch_loss, paper_gap_report
from timetracker.moe import MoEConfig, MoELayer
from timetracker.tensor import RngStream, Tensor, finite_diff_check
from timetracker.tokenizer import SeriesBatch, next_patch_targets, normalize
from timetracker.training import TrainSpec, extract_pretrain_samples, finetune, pretrain, sliding_windows

from .conftest import ACCEPTANCE_LINES
from .test_attention import brute_force_mask


def verdict(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE #{n} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


# 1 ---------------------------------------------------------------------------


def test_01_mask_oracle():
    start = time.perf_counter()
    checked = mismatches = 0
    for C in (1, 2, 3):
        off = [(i, j) for i in range(C) for j in range(C) if i != j]
        for bits in itertools.product((0, 1), repeat=len(off)):
            G = np.eye(C, dtype=int)
            for (i, j), b in zip(off, bits):
                G[i, j] = b
            for N in range(1, 5):
                checked += 1
                mismatches += not np.array_equal(kronecker_mask(G, temporal_mask(N)).raw, brute_force_mask(G, N))
    elapsed = time.perf_counter() - start
    verdict(1, "mask oracle equivalence", mismatches == 0 and elapsed < 5,
            f"{checked} (G, N) cases, {mismatches} mismatches, {elapsed:.2f}s")


# 2 ---------------------------------------------------------------------------


def test_02_causality_perturbation():
    start = time.perf_counter()
    C, N, d = 3, 4, 8
    rng = np.random.default_rng(0)
    attn = AnyVariateAttention(d, 2, RngStream(1))
    attn.ident.data[:] = rng.normal(size=(2, 2))
    G = np.array([[1, 0, 1], [1, 1, 0], [0, 1, 1]])
    H = rng.normal(size=(C, N, d))
    base = attention_forward(H, G, attn).data
    worst_blocked, rows_without_visible_change = 0.0, 0
    visible_change = np.zeros((C, N))
    for j, n in itertools.product(range(C), range(N)):
        Hp = H.copy()
        Hp[j, n] += rng.normal(size=d)
        delta = np.abs(attention_forward(Hp, G, attn).data - base).max(axis=-1)
        for i, m in itertools.product(range(C), range(N)):
            if n <= m and G[i, j]:
                visible_change[i, m] = max(visible_change[i, m], delta[i, m])
            else:
                worst_blocked = max(worst_blocked, delta[i, m])
    rows_without_visible_change = int((visible_change <= 1e-6).sum())
    elapsed = time.perf_counter() - start
    ok = worst_blocked < 1e-12 and rows_without_visible_change == 0 and elapsed < 10
    verdict(2, "causality perturbation", ok,
            f"max blocked change {worst_blocked:.1e}, rows lacking a visible change {rows_without_visible_change}, {elapsed:.2f}s")


# 3 ---------------------------------------------------------------------------


def test_03_identity_graph_equivalence():
    rng = np.random.default_rng(3)
    placements = ["all", "every2", "first_half", "last_half", "none", "every4"]
    worst = 0.0
    for k in range(20):
        J = int(rng.integers(1, 5))
        cfg = ModelConfig(n_layers=J, j_cm=int(rng.integers(0, J + 1)), moe_placement=placements[k % 6],
                          norm=["rms", "layer"][k % 2], moe=MoEConfig(n_private=int(rng.integers(2, 5)), top_k=1))
        model = build_model(cfg, k)
        C = int(rng.integers(1, 5))
        x = rng.normal(size=(2, C, 32))
        ci = model.forward(x, "ci", record=False).data
        cm = model.forward(x, "cm", graph=np.eye(C), record=False).data
        worst = max(worst, rel(cm, ci))
    verdict(3, "identity-graph equivalence", worst < 1e-6, f"20 configs, max rel err {worst:.1e}")


# 4 ---------------------------------------------------------------------------


def test_04_permutation_equivariance():
    rng = np.random.default_rng(4)
    model = build_model(ModelConfig(n_layers=2, j_cm=2, moe=MoEConfig(n_private=4, top_k=2)), 4)
    for layer in model.layers:
        layer.attn.ident.data[:] = rng.normal(size=layer.attn.ident.shape)
    C = 4
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=(1, C, 32))
        G = (rng.uniform(size=(C, C)) < 0.5).astype(float)
        np.fill_diagonal(G, 1.0)
        perm = rng.permutation(C)
        out = model.forward(x, "cm", graph=G, record=False).data
        out_p = model.forward(x[:, perm], "cm", graph=G[np.ix_(perm, perm)], record=False).data
        worst = max(worst, rel(out_p, out[:, perm]))
    verdict(4, "permutation equivariance", worst < 1e-6, f"100 permutations at C=4, max rel err {worst:.1e}")


# 5 ---------------------------------------------------------------------------


def test_05_whole_model_gradient_check():
    start = time.perf_counter()
    cfg = ModelConfig(lookback=24, patch_len=8, d_model=8, n_heads=2, n_layers=2, j_cm=1,
                      moe_placement="every2", moe=MoEConfig(n_private=3, top_k=2))
    model = build_model(cfg, 5)
    rng = np.random.default_rng(5)
    for layer in model.layers:
        layer.attn.ident.data[:] = rng.normal(scale=0.5, size=layer.attn.ident.shape)
    windows = rng.normal(size=(2, 2, 32))
    batch = normalize(SeriesBatch.from_windows(windows, 24))
    targets = next_patch_targets(np.concatenate([batch.values, batch.future], -1), cfg.patch)
    G = np.ones((2, 2))
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if not n.startswith("graph.")])
    results = {}
    for mode in ("ci", "cm"):
        f = lambda: next_patch_loss(model.forward(batch.values, mode, graph=G if mode == "cm" else None, record=False), targets)
        errs = finite_diff_check(f, params, per_param=True)
        results[mode] = max(zip(errs, names))
    elapsed = time.perf_counter() - start
    worst = max(results.values())
    verdict(5, "whole-model gradient check", worst[0] < 1e-4 and elapsed < 60,
            f"{len(params)} parameter groups x 2 modes, worst {worst[0]:.1e} at {worst[1]}, {elapsed:.1f}s")


# 6 ---------------------------------------------------------------------------


def test_06_gumbel_calibration():
    levels = [0.1, 0.3, 0.5, 0.7, 0.9]
    freq = {}
    for tau in (0.5, 0.05):
        row = []
        for k, z in enumerate(levels):
            Z = np.broadcast_to(np.array([[1.0, z], [z, 1.0]]), (10_000, 2, 2)).copy()
            row.append(gumbel_adjacency(Tensor(Z), tau, RngStream(600 + k)).hard[:, 0, 1].mean())
        freq[tau] = np.array(row)
    monotone = bool(np.all(np.diff(freq[0.5]) > 0))
    close = float(np.max(np.abs(freq[0.05] - levels)))
    verdict(6, "Gumbel-Bernoulli calibration", monotone and close <= 0.05,
            f"tau=0.5 freqs {np.round(freq[0.5], 3).tolist()}, tau=0.05 max |freq - Z| {close:.3f}")


# 7 ---------------------------------------------------------------------------


class Recorder:
    """Stands in for a private expert and logs which (unit, token) rows it saw."""

    def __init__(self, expert, e, log):
        self.expert, self.e, self.log = expert, e, log

    def __call__(self, units):
        self.log.append((self.e, units.data.copy()))
        return self.expert(units)


def test_07_routing_contract():
    d, K, n_p = 8, 2, 5
    layer = MoELayer(d, MoEConfig(n_private=n_p, top_k=K), RngStream(7))
    log = []
    layer.private = [Recorder(e, i, log) for i, e in enumerate(layer.private)]
    rng = np.random.default_rng(7)
    violations = 0
    for _ in range(1000):
        log.clear()
        B, C, N = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        H = rng.normal(size=(B, C, N, d))
        layer(Tensor(H))
        units = H.reshape(B * C, N, d)
        seen = [[set() for _ in range(N)] for _ in range(B * C)]
        for e, block in log:
            for row in block:
                (u,) = [u for u in range(B * C) if np.array_equal(units[u], row)]
                for t in range(N):
                    seen[u][t].add(e)
        gates = layer.last_assignment.gates.data
        for u in range(B * C):
            expected = set(np.nonzero(gates[u])[0])
            violations += len(expected) != K or any(s != expected for s in seen[u])
    verdict(7, "MoE routing contract", violations == 0, f"1000 batches, {violations} violations")


# 8 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_08_load_balance():
    history, layer = load_balance_run(steps=10_500, seed=0)
    early = expert_load_windows(history.expert_loads, layer, 0, 100)
    late = expert_load_windows(history.expert_loads, layer, 9500, 10_500)
    r_early, r_late = max_min_ratio(early), max_min_ratio(late)
    verdict(8, "expert load balance", r_early < 1.5 and r_late < 1.5,
            f"max/min load {r_early:.3f} in steps 0-100, {r_late:.3f} in steps 9500-10500")


# 9 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_09_channel_vs_token_routing():
    runs = [routing_ablation(seed) for seed in range(5)]
    channel = float(np.mean([r["channel"] for r in runs]))
    token = float(np.mean([r["token"] for r in runs]))
    verdict(9, "channel-wise vs token-wise routing", channel <= token,
            f"mean test MSE channel {channel:.4f} vs token {token:.4f} over 5 seeds")


# 10 --------------------------------------------------------------------------


def test_10_finetune_freeze():
    cfg = ModelConfig(n_layers=3, j_cm=1, moe_placement="every2")
    data = sinusoid_mixture(3, 400, 10)
    ckpt, _ = pretrain(build_model(cfg, 10), extract_pretrain_samples([data], 32, 8, seed=10), TrainSpec(steps=20))
    before = load_state(ckpt)
    out, history, model = finetune(ckpt, sliding_windows(data, 32, 8), 1, TrainSpec(steps=25, batch_size=4))
    frozen = [n for n in ckpt.arrays if n.startswith(("embed.", "layers.0.", "layers.1."))]
    changed = [n for n in frozen if ckpt.arrays[n].tobytes() != out.arrays[n].tobytes()]
    grads = [p.grad for n, p in model.named_parameters() if n in frozen and p.grad is not None]
    nonzero_steps = sum(g != 0.0 for g in history.frozen_grad_norm)
    ok = not changed and nonzero_steps == 0 and all(not np.any(g) for g in grads) and len(history.frozen_grad_norm) == 25
    verdict(10, "finetune freeze", ok,
            f"{len(frozen)} frozen arrays, {len(changed)} changed, {nonzero_steps} steps with nonzero frozen grad norm")
    del before


# 11 --------------------------------------------------------------------------


@pytest.mark.slow
def test_11_decoupled_pipeline_benefit():
    start = time.perf_counter()
    lagged = [decoupling_benefit(seed, structured=True) for seed in range(5)]
    independent = [decoupling_benefit(seed, structured=False) for seed in range(5)]
    wins = sum(r.cm_mse < r.ci_mse for r in lagged)
    gap = max(abs(r.cm_mse - r.ci_mse) / r.ci_mse for r in independent)
    elapsed = time.perf_counter() - start
    verdict(11, "decoupled-pipeline benefit", wins >= 4 and gap <= 0.05 and elapsed < 600,
            f"cm wins {wins}/5 on lagged data, max independent-data gap {gap:.1%}, {elapsed:.0f}s")


# 12 --------------------------------------------------------------------------


def test_12_sample_count_formula():
    rng = np.random.default_rng(12)
    L, F = 16, 8
    bad = 0
    for _ in range(10):
        shapes = [(int(rng.integers(1, 5)), int(rng.integers(L + F - 3, L + F + 40))) for _ in range(int(rng.integers(1, 5)))]
        data = [rng.normal(size=s) for s in shapes]
        with pytest.warns(UserWarning) if any(T_ < L + F for _, T_ in shapes) else _nullcontext():
            n = len(extract_pretrain_samples(data, L, F))
        formula = sum(C * max(T_ - L - F, 0) for C, T_ in shapes)
        bad += n != formula
    verdict(12, "sample-count formula", bad == 0, f"10 random collections, {bad} mismatches")


class _nullcontext:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# 13 --------------------------------------------------------------------------


def test_13_parameter_counting():
    cfg = ModelConfig(lookback=4, patch_len=2, d_model=4, n_heads=1, n_layers=1, moe_placement="none", bias=False, j_cm=0)
    hand = 2 * 4 + 2 * 1 + 4 * 4 * 4 + 2 * 4 + (4 * 16 + 16 * 4) + 4 * 2
    tiny = count_parameters(cfg).total
    report = paper_gap_report()
    emitted = "79,911,648" in report and "16,850,883" in report and "gap=" in report
    verdict(13, "parameter counting", tiny == hand and emitted,
            f"tiny count {tiny} vs hand {hand}; paper gap report emitted: {emitted}")


# 14 --------------------------------------------------------------------------


def _find_public(name: str):
    roots = [os.environ.get("TIMETRACKER_DATA_DIR"), Path(__file__).resolve().parents[1] / "data"]
    for root in roots:
        if root:
            for candidate in Path(root).rglob(name):
                return candidate
    return None


def test_14_public_dataset_ingestion():
    expected = {"ETTh1.csv": (7, 17420), "weather.csv": (21, 52696)}
    found, notes = {}, []
    for name, shape in expected.items():
        path = _find_public(name)
        if path is None:
            notes.append(f"{name} not found (set TIMETRACKER_DATA_DIR)")
            continue
        found[name] = load_dataset(path).shape
        notes.append(f"{name} -> {found[name]}")
    ok = all(found.get(n) == s for n, s in expected.items())
    verdict(14, "public dataset ingestion", ok, "; ".join(notes))
