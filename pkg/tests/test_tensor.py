import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timetracker import tensor as T
from timetracker.tensor import RngStream, Tensor, backward, finite_diff_check, forward_op

from .oracles import naive_dft_magnitudes, rel_err


def param(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- forward ops ---------------------------------------------------------------


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = forward_op("matmul", [a, Tensor(np.eye(2))])
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_softmax_symmetric():
    np.testing.assert_allclose(T.softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_rmsnorm_hand_value():
    out = T.rmsnorm(Tensor([3.0, 4.0]), Tensor(np.ones(2)))
    denom = math.sqrt(12.5 + 1e-8)
    np.testing.assert_allclose(out.data, [3 / denom, 4 / denom], rtol=1e-15)


def test_shape_mismatch_is_descriptive():
    with pytest.raises(ValueError, match="shape"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_domain_errors_and_guards():
    with pytest.raises(ValueError, match="non-positive"):
        T.log(Tensor([0.0, 1.0]))
    with pytest.raises(ZeroDivisionError):
        T.div(1.0, Tensor([0.0]))
    assert np.isfinite(T.log(Tensor([0.0]), eps=1e-8).data).all()
    assert np.isfinite(T.div(1.0, Tensor([0.0]), eps=1e-8).data).all()


def test_unknown_op():
    with pytest.raises(ValueError, match="unknown op"):
        forward_op("conv", [Tensor(1.0)])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmax_is_distribution(seed):
    x = np.random.default_rng(seed).normal(scale=10, size=(3, 7))
    p = T.softmax_lastdim(Tensor(x)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)


# -- backward ------------------------------------------------------------------


def test_sum_of_squares_grad():
    x = param([1.0, 2.0, 3.0])
    (g,) = backward((x * x).sum(), [x])
    np.testing.assert_array_equal(g, [2, 4, 6])


def test_sigmoid_grad_at_zero():
    x = param(0.0)
    (g,) = backward(T.sigmoid(x), [x])
    assert g == pytest.approx(0.25)


def test_non_scalar_loss_rejected():
    x = param([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_unreachable_param_warns_zero():
    x, y = param([1.0]), param([5.0])
    with pytest.warns(RuntimeWarning):
        gx, gy = backward((x * 3.0).sum(), [x, y])
    np.testing.assert_array_equal(gy, [0.0])


def test_softmax_sum_composite_matches_fd():
    rng = np.random.default_rng(0)
    x = param(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 4)))
    assert finite_diff_check(lambda: (T.softmax_lastdim(x) * w).sum(), [x]) < 1e-6


def test_fd_quadratic_and_constant():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(4, 4))
    x = param(rng.normal(size=(4, 1)))
    quad = lambda: T.matmul(T.matmul(x.T, Tensor(A)), x).sum()
    assert finite_diff_check(quad, [x]) < 1e-8
    c = param([1.0, 2.0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert finite_diff_check(lambda: Tensor(3.0) + c.sum() * 0.0, [c]) == 0.0


def test_fd_rejects_nondeterministic():
    x = param([1.0])
    rng = RngStream(0)
    with pytest.raises(RuntimeError, match="deterministic"):
        finite_diff_check(lambda: (x * Tensor(rng.normal(1))).sum(), [x])


def _unary_cases():
    return {
        "exp": lambda x: T.exp(x),
        "log": lambda x: T.log(T.abs_(x) + 0.5),
        "log1p": lambda x: T.log1p(T.abs_(x)),
        "sigmoid": T.sigmoid,
        "abs": lambda x: T.abs_(x + 0.01),
        "power": lambda x: T.power(T.abs_(x) + 0.5, 1.7),
        "sqrt": lambda x: T.sqrt(T.abs_(x) + 0.5),
        "gelu": T.gelu,
        "softmax": T.softmax_lastdim,
        "rmsnorm": lambda x: T.rmsnorm(x, Tensor(np.arange(1.0, 5.0))),
        "sum_axis": lambda x: T.sum_axis(x, axis=0) * T.sum_axis(x, axis=0),
        "mean_axis": lambda x: T.mean_axis(x * x, axis=1),
        "transpose": lambda x: T.transpose(x) * Tensor(np.arange(12.0).reshape(4, 3)),
        "reshape": lambda x: T.reshape(x, (2, 6)) * T.reshape(x, (2, 6)),
        "concat": lambda x: T.concat([x, x * x], axis=1),
        "slice": lambda x: x[1:, ::2] * x[:2, 1::2],
        "fancy_slice": lambda x: x[np.array([0, 0, 2])] * 2.0,
        "div": lambda x: T.div(x, T.abs_(x) + 1.0),
        "sub": lambda x: x - x * x,
        "matmul_batched": lambda x: T.matmul(T.stack([x, x * 2.0]), T.transpose(x)),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_every_op_passes_fd(name, seed):
    """Property: differentiable ops agree with central differences (64-bit)."""
    rng = np.random.default_rng(seed)
    x = param(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=_unary_cases()[name](Tensor(x.data)).shape))
    f = lambda: (_unary_cases()[name](x) * w).sum()
    assert finite_diff_check(f, [x], h=1e-6) < 1e-6


def test_broadcast_grad_unbroadcasts():
    a = param(np.ones((3, 1)))
    b = param(np.arange(4.0))
    ga, gb = backward((a * b).sum(), [a, b])
    np.testing.assert_array_equal(ga, np.full((3, 1), 6.0))
    np.testing.assert_array_equal(gb, np.full(4, 3.0))


def test_scatter_rows_grad():
    src = param(np.random.default_rng(2).normal(size=(2, 3)))
    f = lambda: (T.scatter_rows(src, np.array([3, 0]), 5) * Tensor(np.arange(15.0).reshape(5, 3))).sum()
    assert finite_diff_check(f, [src]) < 1e-8


def test_nan_surfaces():
    with pytest.raises(FloatingPointError):
        Tensor([np.inf]) * 1.0


def test_no_grad_builds_no_graph():
    x = param([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_float32_mode():
    T.set_default_dtype(np.float32)
    try:
        assert Tensor([1.0]).dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
    assert Tensor([1.0]).dtype == np.float64


# -- rfft ----------------------------------------------------------------------


def test_rfft_constant_zero():
    np.testing.assert_allclose(T.rfft_magnitudes(np.full(8, 3.0)), 0.0, atol=1e-12)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_rfft_cosine_single_bin(k):
    L = 16
    x = np.cos(2 * np.pi * k * np.arange(L) / L)
    amp = T.rfft_magnitudes(x)
    assert amp[k - 1] == pytest.approx(L / 2)
    assert np.delete(amp, k - 1) == pytest.approx(np.zeros(L // 2 - 1), abs=1e-10)
    np.testing.assert_allclose(amp, naive_dft_magnitudes(x), atol=1e-10)


@pytest.mark.parametrize("L", [4, 8, 16, 32, 64])
def test_rfft_matches_naive_dft(L):
    x = np.random.default_rng(L).normal(size=L)
    assert rel_err(T.rfft_magnitudes(x), naive_dft_magnitudes(x)) < 1e-10


def test_rfft_odd_length_error():
    with pytest.raises(ValueError, match="truncate"):
        T.rfft_magnitudes(np.ones(7))


# -- randomness ----------------------------------------------------------------


def test_gumbel_moments():
    g = T.sample_gumbel(100_000, RngStream(7)).data
    assert g.mean() == pytest.approx(0.5772, abs=0.02)
    assert g.var() == pytest.approx(math.pi**2 / 6, abs=0.05)


def test_gumbel_reproducible():
    a = T.sample_gumbel(3, RngStream(42)).data
    b = T.sample_gumbel(3, RngStream(42)).data
    assert a.tobytes() == b.tobytes()


def test_rng_stream_reproducible_and_split():
    a, b = RngStream(99), RngStream(99)
    np.testing.assert_array_equal(a.uniform(10_000), b.uniform(10_000))
    c1, c2 = RngStream(5).split(2)
    assert not np.array_equal(c1.uniform(5), c2.uniform(5))
    d1, _ = RngStream(5).split(2)
    np.testing.assert_array_equal(RngStream(5).split(2)[0].normal(4), d1.normal(4))
