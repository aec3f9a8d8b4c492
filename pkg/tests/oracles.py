import numpy as np


def naive_dft_magnitudes(x):
    """O(L^2) DFT amplitudes at bins 1..L/2."""
    x = np.asarray(x, dtype=np.float64)
    L = len(x)
    t = np.arange(L)
    out = []
    for k in range(1, L // 2 + 1):
        re = sum(x[n] * np.cos(2 * np.pi * k * n / L) for n in t)
        im = -sum(x[n] * np.sin(2 * np.pi * k * n / L) for n in t)
        out.append(np.hypot(re, im))
    return np.array(out)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
