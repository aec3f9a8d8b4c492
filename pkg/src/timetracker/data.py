"""CSV ingestion, synthetic multivariate series and chronological splits."""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import RngStream
from .training import sliding_windows


@dataclass
class Dataset:
    values: np.ndarray  # C x T
    names: list[str]
    timestamps: list[str] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_dataset(path) -> Dataset:
    """Read a header + one-row-per-step CSV into a C x T array.

    A leading column whose first data cell is not numeric is treated as a
    timestamp and dropped.  Row numbers in errors are 1-based file lines.
    """
    path = os.fspath(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if not body:
        raise ValueError(f"{path}: header only, no data rows")
    width = len(header)
    for i, row in enumerate(body):
        if len(row) != width:
            raise ValueError(f"{path}: row {i + 2} has {len(row)} columns, header has {width}")
    has_time = not _is_number(body[0][0].strip())
    start = 1 if has_time else 0
    if width - start < 1:
        raise ValueError(f"{path}: no value columns")
    values = np.empty((len(body), width - start))
    for i, row in enumerate(body):
        for j in range(start, width):
            cell = row[j].strip()
            try:
                v = float(cell)
            except ValueError:
                raise ValueError(f"{path}: row {i + 2}, column {j + 1} ({header[j]!r}): cannot parse {cell!r}") from None
            if not math.isfinite(v):
                raise ValueError(f"{path}: row {i + 2}, column {j + 1} ({header[j]!r}): non-finite value {cell!r}")
            values[i, j - start] = v
    stamps = [r[0] for r in body] if has_time else None
    return Dataset(values=np.ascontiguousarray(values.T), names=header[start:], timestamps=stamps)


def write_csv(path, values: np.ndarray, names: list[str] | None = None) -> None:
    """Atomic write of a C x T array in the dataset layout (17 significant digits)."""
    values = np.asarray(values, dtype=np.float64)
    names = names or [f"ch{i}" for i in range(values.shape[0])]
    lines = [",".join(names)]
    lines += [",".join(format(v, ".17g") for v in col) for col in values.T]
    atomic_write_text(path, "\n".join(lines) + "\n")


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sinusoid:
    period: float
    amplitude: float = 1.0
    phase: float = 0.0


@dataclass(frozen=True)
class LagCopy:
    """Channel ``dst`` = channel ``src`` delayed by ``delta`` steps, plus N(0, sigma^2)."""

    src: int
    dst: int
    delta: int
    sigma: float = 0.0


@dataclass(frozen=True)
class SynthSpec:
    C: int
    T: int
    seed: int = 0
    sinusoids: tuple[tuple[Sinusoid, ...], ...] = ()  # per channel; missing -> none
    ar_coef: tuple[float, ...] = ()  # per channel AR(1) coefficient; missing -> 0
    noise_std: tuple[float, ...] = ()  # per channel innovation std; missing -> 0
    lag_copies: tuple[LagCopy, ...] = field(default=())

    def __post_init__(self):
        if self.C < 1 or self.T < 1:
            raise ValueError(f"SynthSpec needs C >= 1 and T >= 1, got C={self.C}, T={self.T}")
        dsts = [lc.dst for lc in self.lag_copies]
        if len(set(dsts)) != len(dsts):
            raise ValueError("a channel can copy at most one source")
        for lc in self.lag_copies:
            if not (0 <= lc.src < self.C and 0 <= lc.dst < self.C) or lc.src == lc.dst:
                raise ValueError(f"bad lag copy {lc}: channels must be distinct and in [0, {self.C})")
            if not 0 <= lc.delta < self.T:
                raise ValueError(f"lag copy delta {lc.delta} must lie in [0, T={self.T})")
        self.copy_order()  # raises on cycles

    def copy_order(self) -> list[LagCopy]:
        """Lag copies sorted so every source is final before it is copied."""
        by_dst = {lc.dst: lc for lc in self.lag_copies}
        order, state = [], {}

        def visit(c: int):
            if state.get(c) == 1:
                raise ValueError(f"lag-copy map has a cycle through channel {c}")
            if state.get(c) == 2 or c not in by_dst:
                return
            state[c] = 1
            visit(by_dst[c].src)
            state[c] = 2
            order.append(by_dst[c])

        for c in sorted(by_dst):
            visit(c)
        return order


def ar1_noise(n: int, coef: float, std: float, rng: RngStream) -> np.ndarray:
    """Stationary AR(1): e_t = coef e_{t-1} + eta_t, eta ~ N(0, std^2)."""
    if std == 0.0:
        return np.zeros(n)
    eta = rng.normal(n, 0.0, std)
    if abs(coef) < 1.0:
        eta[0] /= math.sqrt(1.0 - coef * coef)
    out = np.empty(n)
    prev = 0.0
    for t in range(n):
        prev = coef * prev + eta[t]
        out[t] = prev
    return out


def synth_generate(spec: SynthSpec) -> np.ndarray:
    """Deterministic C x T series from sinusoids, AR(1) noise and lag copies.

    Series are generated with a warm-up prefix as long as the summed copy
    delays, so every copied channel is an exact shift of its source over the
    whole returned range (before its own noise).
    """
    pad = sum(lc.delta for lc in spec.lag_copies)
    n = spec.T + pad
    t = np.arange(n, dtype=np.float64) - pad
    rng = RngStream(spec.seed)
    streams = rng.split(spec.C + 1)
    out = np.zeros((spec.C, n))
    for c in range(spec.C):
        for s in spec.sinusoids[c] if c < len(spec.sinusoids) else ():
            out[c] += s.amplitude * np.sin(2.0 * np.pi * t / s.period + s.phase)
        coef = spec.ar_coef[c] if c < len(spec.ar_coef) else 0.0
        std = spec.noise_std[c] if c < len(spec.noise_std) else 0.0
        out[c] += ar1_noise(n, coef, std, streams[c])
    copy_rng = streams[-1]
    for lc in spec.copy_order():
        shifted = np.zeros(n)
        shifted[lc.delta:] = out[lc.src, : n - lc.delta]
        if lc.sigma > 0:
            shifted += copy_rng.normal(n, 0.0, lc.sigma)
        out[lc.dst] = shifted
    return np.ascontiguousarray(out[:, pad:])


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Split:
    """Half-open row ranges [start, stop) of a chronological split."""

    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]
    scheme: str

    def windows(self, values: np.ndarray, part: str, L: int, F: int) -> np.ndarray:
        """All n x C x (L + F) windows lying entirely inside one segment."""
        a, b = getattr(self, part)
        return sliding_windows(np.asarray(values)[:, a:b], L, F)


def split(T_len: int, scheme: str = "standard", L: int = 0, F: int = 0) -> Split:
    """Chronological train/val/test ranges.

    standard: 70/10/20.  fewshot: first 20% is the training segment, its last
    10% held out for validation; last 20% is test.  Train and test segments
    shorter than L + F are an error; a too-short validation segment only warns.
    """
    if scheme == "standard":
        a, b = T_len * 7 // 10, T_len * 8 // 10
        parts = Split((0, a), (a, b), (b, T_len), scheme)
    elif scheme == "fewshot":
        seg = T_len * 2 // 10
        n_val = seg // 10
        parts = Split((0, seg - n_val), (seg - n_val, seg), (T_len - T_len * 2 // 10, T_len), scheme)
    else:
        raise ValueError(f"split scheme must be 'standard' or 'fewshot', got {scheme!r}")
    need = L + F
    for name in ("train", "test"):
        a, b = getattr(parts, name)
        if b - a < need:
            raise ValueError(f"{scheme} split: {name} segment has {b - a} rows < L+F={need}")
    a, b = parts.val
    if b - a < need:
        warnings.warn(f"{scheme} split: validation segment has {b - a} rows < L+F={need}; no val windows", stacklevel=2)
    return parts
