"""Desk-scale synthetic experiments: load balance, routing ablation, decoupled finetuning."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import LagCopy, Sinusoid, SynthSpec, split, synth_generate
from .model import ModelConfig, build_model
from .moe import MoEConfig
from .training import TrainSpec, evaluate, extract_pretrain_samples, finetune, pretrain

TINY = ModelConfig(lookback=32, patch_len=8, d_model=16, n_heads=2, n_layers=2, j_cm=1)


def sinusoid_mixture(C: int, T: int, seed: int, noise: float = 0.1) -> np.ndarray:
    """C channels, each two random-period sinusoids plus AR(1) noise."""
    rng = np.random.default_rng(seed)
    waves = tuple(
        tuple(Sinusoid(float(rng.uniform(6, 40)), float(rng.uniform(0.5, 2.0)), float(rng.uniform(0, 2 * np.pi))) for _ in range(2))
        for _ in range(C)
    )
    spec = SynthSpec(C=C, T=T, seed=seed, sinusoids=waves, ar_coef=(0.5,) * C, noise_std=(noise,) * C)
    return synth_generate(spec)


# ---------------------------------------------------------------------------
# expert load balance
# ---------------------------------------------------------------------------


def expert_load_windows(loads: list[dict], layer: str, start: int, stop: int) -> np.ndarray:
    """Sum of the per-100-step load records whose window lies in [start, stop)."""
    total = None
    for rec in loads:
        last = rec["step"]
        if start <= last < stop:
            c = np.asarray(rec["loads"][layer])
            total = c if total is None else total + c
    if total is None:
        raise ValueError(f"no load records in [{start}, {stop})")
    return total


def load_balance_run(steps: int = 10_500, seed: int = 0, n_private: int = 8, top_k: int = 2, bias_rate: float = 1e-3):
    """Pretrain a tiny model with one MoE layer; returns (history, MoE layer key)."""
    cfg = replace(TINY, d_model=8, moe=MoEConfig(n_private=n_private, top_k=top_k, bias_rate=bias_rate))
    model = build_model(cfg, seed)
    data = sinusoid_mixture(6, 2000, seed)
    windows = extract_pretrain_samples([data], cfg.lookback, cfg.patch_len, seed=seed)
    _, history = pretrain(model, windows, TrainSpec(steps=steps, batch_size=8, seed=seed, log_every=100))
    (layer, _), = model.moe_blocks()
    return history, str(layer)


def max_min_ratio(counts: np.ndarray) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    return float(counts.max() / counts.min()) if counts.min() > 0 else float("inf")


# ---------------------------------------------------------------------------
# channel-wise vs token-wise routing
# ---------------------------------------------------------------------------


def regime_series(T: int, seed: int) -> np.ndarray:
    """Four channels with distinct dynamics: fast sinusoid, slow sinusoid,
    strongly autocorrelated noise and a harmonic-rich square-like wave."""
    square = tuple(Sinusoid(16.0 / k, 1.0 / k) for k in (1, 3, 5, 7))
    spec = SynthSpec(
        C=4,
        T=T,
        seed=seed,
        sinusoids=((Sinusoid(6.0, 1.0),), (Sinusoid(40.0, 2.0, 1.0),), (), square),
        ar_coef=(0.3, 0.3, 0.95, 0.3),
        noise_std=(0.1, 0.1, 0.5, 0.1),
    )
    return synth_generate(spec)


def routing_ablation(seed: int, steps: int = 600, T: int = 2000) -> dict[str, float]:
    """Test MSE of channel-wise and token-wise routing from identical initializations."""
    data = regime_series(T, seed)
    cfg = replace(TINY, moe=MoEConfig(n_private=4, top_k=1))
    parts = split(T, "standard", cfg.lookback, cfg.patch_len)
    train = extract_pretrain_samples([data[:, slice(*parts.train)]], cfg.lookback, cfg.patch_len, seed=seed)
    test = parts.windows(data, "test", cfg.lookback, cfg.patch_len)
    out = {}
    for routing in ("channel", "token"):
        model = build_model(replace(cfg, moe=replace(cfg.moe, routing=routing)), seed)
        pretrain(model, train, TrainSpec(steps=steps, batch_size=16, seed=seed, log_every=steps))
        out[routing] = evaluate(model, test, "ci")["MSE"]
    return out


# ---------------------------------------------------------------------------
# channel-mixed vs channel-independent finetuning
# ---------------------------------------------------------------------------


def lagged_series(T: int, seed: int, delta: int, structured: bool = True) -> np.ndarray:
    """Three channels driven by noisy sources.

    ``structured``: channels 1 and 2 copy channel 0 with lags ``delta`` and
    ``2 * delta``, so their next patch is already visible in channel 0.
    Otherwise all three are independent draws of the same process.
    """
    base = dict(ar_coef=(0.7,) * 3, noise_std=(1.0,) * 3, sinusoids=((Sinusoid(24.0, 0.5),),) * 3)
    copies = (LagCopy(0, 1, delta, 0.05), LagCopy(0, 2, 2 * delta, 0.05)) if structured else ()
    return synth_generate(SynthSpec(C=3, T=T, seed=seed, lag_copies=copies, **base))


@dataclass
class DecouplingResult:
    seed: int
    structured: bool
    cm_mse: float
    ci_mse: float


def decoupling_benefit(
    seed: int,
    structured: bool = True,
    pretrain_steps: int = 300,
    finetune_steps: int = 300,
    T: int = 1500,
) -> DecouplingResult:
    """Pretrain channel-independently, then finetune the last layer in cm and in ci mode."""
    cfg = TINY
    L, F = cfg.lookback, cfg.patch_len
    data = lagged_series(T, seed, delta=cfg.patch_len, structured=structured)
    parts = split(T, "standard", L, F)
    pre = extract_pretrain_samples([data[:, slice(*parts.train)]], L, F, seed=seed)
    ckpt, _ = pretrain(build_model(cfg, seed), pre, TrainSpec(steps=pretrain_steps, batch_size=16, seed=seed, log_every=pretrain_steps))
    train = parts.windows(data, "train", L, F)
    test = parts.windows(data, "test", L, F)
    spec = TrainSpec(steps=finetune_steps, batch_size=8, seed=seed, log_every=finetune_steps)
    scores = {}
    for mode in ("cm", "ci"):
        _, _, model = finetune(ckpt, train, cfg.j_cm, spec, mode=mode)
        scores[mode] = evaluate(model, test, mode)["MSE"]
    return DecouplingResult(seed, structured, scores["cm"], scores["ci"])
