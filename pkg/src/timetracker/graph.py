"""Instance-wise variable graph from spectral similarity plus Gumbel-Softmax sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Module
from .tensor import RngStream, Tensor

DEN_EPS = 1e-8
SIGMA_FLOOR = 1e-6
Z_CLAMP = 1e-6


class FreqSimilarityParams(Module):
    """Per-frequency weights ``alpha = sigmoid(alpha_raw)`` and three spare edge biases.

    ``edge_bias`` is allocated but only used when ``use_edge_bias`` is set:
    entries 0 and 1 shift the edge / no-edge logits, entry 2 belongs to the
    diagonal, which is forced to 1 regardless.
    """

    def __init__(self, n_freq: int, use_edge_bias: bool = False):
        self.alpha_raw = Tensor(np.zeros(n_freq), requires_grad=True, name="alpha_raw")
        self.edge_bias = Tensor(np.zeros(3), requires_grad=True, name="edge_bias")
        self.use_edge_bias = use_edge_bias

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.alpha_raw.data))


@dataclass
class AdjacencyMatrix:
    """``soft``: first Gumbel-Softmax component (diag 1); ``hard``: 0/1 edges."""

    soft: Tensor
    hard: np.ndarray
    tau: float

    @property
    def straight_through(self) -> Tensor:
        """Zero-valued tensor carrying the soft gradient; add it to anything built from ``hard``."""
        return self.soft - self.soft.detach()


def _offdiag_mask(C: int) -> np.ndarray:
    return 1.0 - np.eye(C)


def similarity_matrix(x, params: FreqSimilarityParams) -> Tensor:
    """Spectral similarity Z for C x L (or B x C x L) windows.

    Distances between DFT amplitudes are log-compressed, weighted by alpha and
    inverted; the off-diagonal scores are z-scored and squashed by a sigmoid,
    the diagonal is 1.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    B, C, L = x.shape
    if params.alpha_raw.shape != (L // 2,):
        raise ValueError(f"similarity_matrix: alpha has {params.alpha_raw.shape[0]} bins, window needs {L // 2}")
    if C == 1:
        z = Tensor(np.ones((B, 1, 1)))
        return z[0] if squeeze else z

    amp = T.rfft_magnitudes(x)  # B x C x L/2
    dist = np.abs(amp[:, :, None, :] - amp[:, None, :, :])  # B x C x C x L/2
    log_dist = np.log1p(dist)
    alpha = T.sigmoid(params.alpha_raw)
    weighted = T.matmul(Tensor(log_dist.reshape(B, C * C, L // 2)), alpha.reshape(L // 2, 1))
    z_tilde = T.div(1.0, weighted.reshape(B, C, C), eps=DEN_EPS)

    off = _offdiag_mask(C)
    count = C * (C - 1)
    mu = T.sum_axis(z_tilde * off, axis=(1, 2), keepdims=True) / count
    centered = (z_tilde - mu) * off
    var = T.sum_axis(centered * centered, axis=(1, 2), keepdims=True) / count
    # degenerate instances (e.g. C == 2) have sigma_Omega == 0: use sigma = 1
    ok = (np.sqrt(var.data) >= SIGMA_FLOOR).astype(np.float64)
    sigma = T.sqrt(var * ok + (1.0 - ok))
    z = T.sigmoid(centered / sigma) * off + np.eye(C)
    return z[0] if squeeze else z


def gumbel_adjacency(
    z: Tensor,
    tau: float,
    rng: RngStream | None = None,
    mode: str = "train",
    logits: str = "calibrated",
    params: FreqSimilarityParams | None = None,
) -> AdjacencyMatrix:
    """Sample a 0/1 adjacency from similarity ``z`` (C x C or B x C x C).

    ``logits="calibrated"`` uses the two-class logits [log Z, log(1 - Z)], so a
    hard draw is an exact Bernoulli(Z) sample.  ``logits="paper"`` uses
    [logit Z, -logit Z], which sharpens the edge probability to
    Z^2 / (Z^2 + (1 - Z)^2).  Train mode returns straight-through samples; eval
    mode thresholds Z at 0.5.  The diagonal is always 1.
    """
    if tau <= 0:
        raise ValueError(f"gumbel_adjacency: temperature must be positive, got {tau}")
    z = z if isinstance(z, Tensor) else Tensor(z)
    C = z.shape[-1]
    off = _offdiag_mask(C)
    eye = np.eye(C)

    if mode == "eval":
        hard = np.where(eye > 0, 1.0, (z.data > 0.5).astype(np.float64))
        return AdjacencyMatrix(soft=z.detach(), hard=hard, tau=tau)
    if mode != "train":
        raise ValueError(f"gumbel_adjacency: mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ValueError("gumbel_adjacency: train mode needs an RngStream")

    zc = T.clip(z, Z_CLAMP, 1.0 - Z_CLAMP)
    if logits == "calibrated":
        edge, no_edge = T.log(zc), T.log(1.0 - zc)
    elif logits == "paper":
        edge = T.log(zc) - T.log(1.0 - zc)
        no_edge = edge * -1.0
    else:
        raise ValueError(f"unknown logits form {logits!r}")
    if params is not None and params.use_edge_bias:
        edge = edge + params.edge_bias[0]
        no_edge = no_edge + params.edge_bias[1]
    pair = T.stack([edge, no_edge], axis=-1)
    eps = T.sample_gumbel(pair.shape, rng)
    probs = T.softmax_lastdim((pair + eps) / tau)
    first = probs[..., 0]
    soft = first * off + eye
    hard = np.where(eye > 0, 1.0, (first.data > 0.5).astype(np.float64))
    return AdjacencyMatrix(soft=soft, hard=hard, tau=tau)


def anneal_tau(step: int, total: int, tau_start: float = 0.5, tau_end: float | None = None) -> float:
    """Linear temperature schedule; constant when ``tau_end`` is None."""
    if tau_end is None or total <= 1:
        return tau_start
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return tau_start + (tau_end - tau_start) * frac
