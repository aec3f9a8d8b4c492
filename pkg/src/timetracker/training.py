"""Sample extraction, optimizers, pretraining, finetuning and evaluation."""

from __future__ import annotations

import logging
import math
import warnings
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .graph import anneal_tau
from .checkpoint import Checkpoint, load_state, model_state
from .model import Model, next_patch_loss
from .tensor import RngStream, Tensor
from .tokenizer import SeriesBatch, next_patch_targets, normalize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSpec:
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 500
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 100

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


def window_count(T_len: int, L: int, F: int) -> int:
    return max(T_len - L - F, 0)


def sliding_windows(series: np.ndarray, L: int, F: int) -> np.ndarray:
    """All C x (L + F) windows of a C x T array, starts 0 .. T-L-F-1."""
    series = np.asarray(series, dtype=np.float64)
    n = window_count(series.shape[-1], L, F)
    if n == 0:
        return np.zeros((0, series.shape[0], L + F))
    view = np.lib.stride_tricks.sliding_window_view(series, L + F, axis=-1)[:, :n]
    return np.ascontiguousarray(view.transpose(1, 0, 2))


def extract_pretrain_samples(
    datasets: Sequence[np.ndarray],
    L: int,
    F: int,
    seed: int | None = 0,
) -> np.ndarray:
    """Channel-independent 1 x (L + F) training windows from C_i x T_i subsets.

    Yields sum_i C_i * (T_i - L - F) windows, shuffled deterministically when
    ``seed`` is not None.  Subsets shorter than L + F are skipped with a warning.
    """
    parts = []
    for i, data in enumerate(datasets):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 1:
            data = data[None]
        if data.shape[-1] < L + F:
            warnings.warn(f"subset {i} has T={data.shape[-1]} < L+F={L + F}; skipped", stacklevel=2)
            continue
        w = sliding_windows(data, L, F)  # n x C x (L+F)
        parts.append(w.reshape(-1, 1, L + F))
    if not parts:
        return np.zeros((0, 1, L + F))
    out = np.concatenate(parts, axis=0)
    if seed is not None:
        out = out[RngStream(seed).permutation(len(out))]
    return out


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params: Sequence[Tensor], spec: TrainSpec):
    if spec.optimizer == "sgd":
        return SGD(params, spec.lr)
    return Adam(params, spec.lr, spec.beta1, spec.beta2, spec.adam_eps)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


@dataclass
class History:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    val_loss: list[tuple[int, float]] = field(default_factory=list)
    expert_loads: list[dict] = field(default_factory=list)
    frozen_grad_norm: list[float] = field(default_factory=list)

    def records(self) -> list[dict]:
        """Line-oriented training log: one dict per logged step."""
        val = dict(self.val_loss)
        loads = {r["step"]: r["loads"] for r in self.expert_loads}
        out = []
        for s, l in zip(self.steps, self.loss):
            if s in val or s in loads:
                out.append({"step": s, "loss": l, "val_loss": val.get(s), "expert_loads": loads.get(s)})
        return out


def prepare_batch(windows: np.ndarray, L: int) -> SeriesBatch:
    return normalize(SeriesBatch.from_windows(windows, L))


def batch_loss(
    model: Model,
    windows: np.ndarray,
    mode: str = "ci",
    rng: RngStream | None = None,
    graph=None,
    tau: float | None = None,
    record: bool = True,
) -> Tensor:
    """Next-patch MSE (normalized units) for raw B x C x (L + F) windows."""
    cfg = model.cfg
    batch = prepare_batch(windows, cfg.lookback)
    full = np.concatenate([batch.values, batch.future], axis=-1)
    targets = next_patch_targets(full, cfg.patch)
    if mode == "cm" and graph is None:
        graph = model.learn_graph(batch.values, rng, train=rng is not None, tau=tau)
    pred = model.forward(batch.values, mode=mode, graph=graph, record=record)
    return next_patch_loss(pred, targets, last_only=cfg.loss == "last_only")


def _batches(n: int, batch_size: int, rng: RngStream):
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[start:start + batch_size]


def _eval_loss(model: Model, windows: np.ndarray, mode: str, batch_size: int = 256) -> float:
    if len(windows) == 0:
        return float("nan")
    total, count = 0.0, 0
    with T.no_grad():
        for start in range(0, len(windows), batch_size):
            chunk = windows[start:start + batch_size]
            total += batch_loss(model, chunk, mode, record=False).item() * len(chunk)
            count += len(chunk)
    return total / count


def _train(
    model: Model,
    windows: np.ndarray,
    spec: TrainSpec,
    mode: str,
    params: list[Tensor],
    frozen: list[Tensor],
    val_windows: np.ndarray | None,
    on_step: Callable[[int, Model], None] | None = None,
) -> History:
    windows = np.asarray(windows, dtype=np.float64)
    if len(windows) == 0:
        raise ValueError("no training windows")
    rng = RngStream(spec.seed)
    data_rng, graph_rng = rng.split(2)
    opt = make_optimizer(params, spec)
    history = History()
    cfg = model.cfg
    batches = _batches(len(windows), min(spec.batch_size, len(windows)), data_rng)
    window_loads: dict[int, np.ndarray] = {}
    if val_windows is not None and len(val_windows):
        history.val_loss.append((0, _eval_loss(model, val_windows, mode)))
    for step in range(spec.steps):
        idx = next(batches)
        tau = anneal_tau(step, spec.steps, cfg.tau, cfg.tau_final) if mode == "cm" else None
        model.zero_grad()
        try:
            loss = batch_loss(model, windows[idx], mode, rng=graph_rng, tau=tau)
            loss.backward()
        except FloatingPointError as exc:
            raise RuntimeError(f"training diverged at step {step}: {exc}") from exc
        if not math.isfinite(loss.item()):
            raise RuntimeError(f"training diverged at step {step}: loss={loss.item()}")
        history.frozen_grad_norm.append(
            float(sum(np.linalg.norm(p.grad) for p in frozen if p.grad is not None))
        )
        opt.step()
        loads = model.update_router_biases()
        for layer, c in loads.items():
            window_loads[layer] = window_loads.get(layer, 0) + c
        history.steps.append(step)
        history.loss.append(loss.item())
        if on_step is not None:
            on_step(step, model)
        if (step + 1) % spec.log_every == 0 or step == spec.steps - 1:
            history.expert_loads.append(
                {"step": step, "loads": {str(k): v.tolist() for k, v in window_loads.items()}}
            )
            window_loads = {}
            if val_windows is not None and len(val_windows):
                history.val_loss.append((step + 1, _eval_loss(model, val_windows, mode)))
            log.info("step %d loss %.6f", step, loss.item())
    return history


def pretrain(
    model: Model,
    windows: np.ndarray,
    spec: TrainSpec,
    val_windows: np.ndarray | None = None,
) -> tuple[Checkpoint, History]:
    """Channel-independent next-patch training on 1 x (L + F) (or C x (L + F)) windows."""
    model.freeze(0)
    params = [p for name, p in model.named_parameters() if not name.startswith("graph.")]
    history = _train(model, windows, spec, "ci", params, [], val_windows)
    return model_state(model, extra={"stage": "pretrain", "train": asdict(spec)}), history


def stack_batches(windows) -> np.ndarray:
    """One n x C x (L + F) array from an array or a list of batches sharing C."""
    if isinstance(windows, (list, tuple)):
        chans = sorted({np.shape(w)[1] for w in windows})
        if len(chans) > 1:
            raise ValueError(f"finetune data mixes channel counts {chans}; C must be constant")
        windows = np.concatenate([np.asarray(w, dtype=np.float64) for w in windows], axis=0)
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3:
        raise ValueError(f"finetune windows must be n x C x (L+F), got {windows.shape}")
    return windows


def finetune(
    model_or_ckpt,
    windows: np.ndarray,
    j_cm: int,
    spec: TrainSpec,
    mode: str = "cm",
    val_windows: np.ndarray | None = None,
) -> tuple[Checkpoint, History, Model]:
    """Freeze the embedding and the first J - j_cm layers, train the rest.

    In ``cm`` mode the last ``j_cm`` layers attend across variables under a
    freshly sampled graph each step and the graph weights are trained too.
    ``ci`` mode is the univariate-finetuning baseline with the same freezing.
    """
    if isinstance(model_or_ckpt, Checkpoint):
        model = load_state(model_or_ckpt)
    else:
        model = model_or_ckpt
    cfg = model.cfg
    if j_cm != cfg.j_cm:
        if not 0 <= j_cm <= cfg.n_layers:
            raise ValueError(f"j_cm={j_cm} outside [0, {cfg.n_layers}]")
        model.cfg = replace(cfg, j_cm=j_cm)
        cfg = model.cfg
    windows = stack_batches(windows)
    j_ci = cfg.n_layers - j_cm
    model.freeze(j_ci)
    trainable_names = []
    for name, p in model.named_parameters():
        if name.startswith("graph."):
            use = mode == "cm" and (name == "graph.alpha_raw" or cfg.use_edge_bias)
            p.requires_grad = use
        if p.requires_grad:
            trainable_names.append(name)
    named = dict(model.named_parameters())
    params = [named[n] for n in trainable_names]
    frozen = [p for n, p in named.items() if n.startswith("embed.") or _layer_index(n) < j_ci]
    history = _train(model, windows, spec, mode, params, frozen, val_windows)
    ckpt = model_state(model, extra={"stage": f"finetune-{mode}", "j_cm": j_cm, "train": asdict(spec)})
    return ckpt, history, model


def _layer_index(name: str) -> int:
    if name.startswith("layers."):
        return int(name.split(".")[1])
    return 1 << 30


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict_horizon(model: Model, windows: np.ndarray, mode: str = "ci", graph=None) -> np.ndarray:
    """Denormalized horizon forecasts B x C x F for raw windows (look-back part used)."""
    windows = np.asarray(windows, dtype=np.float64)
    L = model.cfg.lookback
    batch = normalize(SeriesBatch(values=windows[..., :L]))
    with T.no_grad():
        if mode == "cm" and graph is None:
            graph = model.learn_graph(batch.values, train=False)
        pred = model.forward(batch.values, mode=mode, graph=graph, record=False)
    last = pred.data[..., -1, :]
    return last * batch.norm_std[..., None] + batch.norm_mean[..., None]


def regression_metrics(pred: np.ndarray, target: np.ndarray) -> dict[str, float]:
    """MSE, MAE and R^2 over n x C x F arrays (R^2 against per-channel means)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    err = pred - target
    channel_mean = target.mean(axis=(0, 2), keepdims=True)
    ss_tot = float(((target - channel_mean) ** 2).sum())
    ss_res = float((err**2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return {"MSE": float((err**2).mean()), "MAE": float(np.abs(err).mean()), "R2": r2}


def evaluate(model: Model, windows: np.ndarray, mode: str = "ci", batch_size: int = 256) -> dict[str, float]:
    """Metrics on denormalized horizon forecasts of raw n x C x (L + F) windows."""
    windows = np.asarray(windows, dtype=np.float64)
    L = model.cfg.lookback
    preds = [
        predict_horizon(model, windows[s:s + batch_size], mode)
        for s in range(0, len(windows), batch_size)
    ]
    return regression_metrics(np.concatenate(preds, axis=0), windows[..., L:])
