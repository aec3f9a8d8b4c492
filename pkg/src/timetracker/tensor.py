"""Dense tensors with reverse-mode autodiff, real FFT helpers and seeded randomness.

Everything numeric in the package sits on top of this module.  A ``Tensor``
wraps a numpy array; operations on tensors that require gradients record a
closure on a tape so that :func:`backward` can replay the chain rule in reverse
topological order.

Graph policy: :func:`backward` frees the recorded graph after use unless
``retain_graph=True`` is passed.  Leaf gradients accumulate in ``Tensor.grad``.
"""

from __future__ import annotations

import contextlib
import math
import warnings
from collections.abc import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "RngStream",
    "backward",
    "concat",
    "default_dtype",
    "finite_diff_check",
    "forward_op",
    "no_grad",
    "rfft_magnitudes",
    "sample_gumbel",
    "scatter_rows",
    "set_default_dtype",
    "stack",
]

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True

GUARD_EPS = 1e-8


def default_dtype() -> type:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Switch between float64 (tests, oracles) and float32 (faster training)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them on the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value, dtype=dtype or _DEFAULT_DTYPE)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, *shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ValueError(
            f"{op}: shapes {' and '.join(str(s) for s in shapes)} are not broadcast-compatible"
        ) from None


class Tensor:
    """N-dimensional array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    # method sugar
    def exp(self):
        return exp(self)

    def log(self, eps: float | None = None):
        return log(self, eps=eps)

    def sigmoid(self):
        return sigmoid(self)

    def softmax(self):
        return softmax_lastdim(self)

    def abs(self):
        return abs_(self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_axis(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean_axis(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise binary ops (numpy broadcasting)
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a.shape, b.shape)
    return _result(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a.shape, b.shape)
    return _result(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a.shape, b.shape)
    return _result(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b, eps: float | None = None) -> Tensor:
    """``a / b``.  With ``eps`` the denominator becomes ``b + eps`` (for b >= 0)."""
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("div", a.shape, b.shape)
    den = b.data if eps is None else b.data + eps
    if np.any(den == 0):
        raise ZeroDivisionError("div: zero in denominator (use the eps-guarded variant)")
    out = a.data / den

    def _bw(g):
        return (
            _unbroadcast(g / den, a.shape),
            _unbroadcast(-g * out / den, b.shape),
        )

    return _result("div", out, (a, b), _bw)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul: inner dimensions differ ({a.shape} @ {b.shape}: {a.shape[-1]} != {b.shape[-2]})"
        )
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])

    def _bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result("matmul", a.data @ b.data, (a, b), _bw)


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------


def exp(x) -> Tensor:
    x = _wrap(x)
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x, eps: float | None = None) -> Tensor:
    """Natural log.  Non-positive input is a domain error unless ``eps`` shifts it."""
    x = _wrap(x)
    arg = x.data if eps is None else x.data + eps
    if np.any(arg <= 0):
        raise ValueError("log: non-positive operand (use the eps-guarded variant)")
    return _result("log", np.log(arg), (x,), lambda g: (g / arg,))


def log1p(x) -> Tensor:
    x = _wrap(x)
    if np.any(x.data <= -1):
        raise ValueError("log1p: operand must exceed -1")
    return _result("log1p", np.log1p(x.data), (x,), lambda g: (g / (1.0 + x.data),))


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.data.dtype, copy=False)
    return _result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def abs_(x) -> Tensor:
    x = _wrap(x)
    return _result("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def power(x, exponent: float) -> Tensor:
    x = _wrap(x)
    p = float(exponent)
    if not p.is_integer() and np.any(x.data < 0):
        raise ValueError(f"power: negative base with non-integer exponent {p}")
    if p < 0 and np.any(x.data == 0):
        raise ZeroDivisionError("power: zero base with negative exponent")
    out = np.power(x.data, p)
    return _result("power", out, (x,), lambda g: (g * p * np.power(x.data, p - 1.0),))


def sqrt(x) -> Tensor:
    return power(x, 0.5)


def gelu(x) -> Tensor:
    """Tanh-approximated GELU (smooth, so finite differences stay meaningful)."""
    x = _wrap(x)
    c = math.sqrt(2.0 / math.pi)
    u = c * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def _bw(g):
        du = c * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _result("gelu", out, (x,), _bw)


def clip(x, lo: float, hi: float) -> Tensor:
    x = _wrap(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _result("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def softmax_lastdim(x) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result("softmax_lastdim", s, (x,), _bw)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_axis(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum_axis", np.asarray(out), (x,), _bw)


def mean_axis(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result("mean_axis", np.asarray(out), (x,), _bw)


def transpose(x, axes=None) -> Tensor:
    x = _wrap(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _result("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input list")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ValueError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result("concat", out, tensors, lambda g: tuple(np.split(g, sizes, axis=ax)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)


def _is_basic_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(None))) or k is Ellipsis for k in items)


def slice_(x, key) -> Tensor:
    x = _wrap(x)
    out = x.data[key]
    basic = _is_basic_index(key)

    def _bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _result("slice", np.array(out, copy=True), (x,), _bw)


def scatter_rows(src, index: np.ndarray, n_rows: int) -> Tensor:
    """Place the rows of ``src`` at ``index`` (unique) in a zero tensor of ``n_rows`` rows."""
    src = _wrap(src)
    index = np.asarray(index, dtype=np.intp)
    if len(np.unique(index)) != len(index):
        raise ValueError("scatter_rows: index entries must be unique")
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.data.dtype)
    out[index] = src.data
    return _result("scatter_rows", out, (src,), lambda g: (g[index],))


def rmsnorm(x, gain=None, eps: float = GUARD_EPS) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    x = _wrap(x)
    r = np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data / r
    if gain is None:
        def _bw_plain(g):
            return ((g - xhat * (g * xhat).mean(axis=-1, keepdims=True)) / r,)

        return _result("rmsnorm", xhat, (x,), _bw_plain)
    gain = _wrap(gain)
    if gain.shape != (x.shape[-1],):
        raise ValueError(f"rmsnorm: gain shape {gain.shape} != ({x.shape[-1]},)")

    def _bw(g):
        gx = g * gain.data
        dx = (gx - xhat * (gx * xhat).mean(axis=-1, keepdims=True)) / r
        dgain = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        return dx, dgain

    return _result("rmsnorm", xhat * gain.data, (x, gain), _bw)


_FORWARD_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "log1p": log1p,
    "sigmoid": sigmoid,
    "softmax_lastdim": softmax_lastdim,
    "abs": abs_,
    "sum_axis": sum_axis,
    "mean_axis": mean_axis,
    "transpose": transpose,
    "reshape": reshape,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_,
    "rmsnorm": rmsnorm,
    "power": power,
    "gelu": gelu,
    "clip": clip,
}


def forward_op(op_name: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply a named operation, e.g. ``forward_op("matmul", [a, b])``."""
    try:
        fn = _FORWARD_OPS[op_name]
    except KeyError:
        raise ValueError(f"unknown op {op_name!r}; known: {sorted(_FORWARD_OPS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Sequence[Tensor] | None = None, retain_graph: bool = False):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    If ``params`` is given, returns their gradients in order; parameters the
    loss does not depend on get a zero gradient and a ``RuntimeWarning``.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    order = _topo_order(loss) if loss.requires_grad else []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._parents = ()
            node._backward = None
    if params is None:
        return None
    out = []
    for p in params:
        if p.grad is None:
            warnings.warn(
                f"parameter {p.name or p.shape} is not reachable from the loss; gradient is zero",
                RuntimeWarning,
                stacklevel=2,
            )
            out.append(np.zeros_like(p.data))
        else:
            out.append(p.grad)
    return out


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    per_param: bool = False,
):
    """Compare autodiff gradients of ``f()`` against central differences.

    For each parameter tensor the error is
    ``||analytic - numeric|| / (||analytic|| + ||numeric|| + 1e-12)``; the max
    over parameters is returned (or the list, with ``per_param=True``).
    ``f`` must be deterministic: it is evaluated twice up front and any
    difference raises ``RuntimeError``.
    """
    params = list(params)
    with no_grad():
        first = f().item()
        second = f().item()
    if first != second:
        raise RuntimeError("finite_diff_check: f is not deterministic (fix its RngStream seed)")

    for p in params:
        p.zero_grad()
    loss = f()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        analytic = backward(loss, params)

    errors = []
    with no_grad():
        for p, a in zip(params, analytic):
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            nflat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                nflat[i] = (up - down) / (2.0 * h)
            err = np.linalg.norm(a - numeric) / (
                np.linalg.norm(a) + np.linalg.norm(numeric) + 1e-12
            )
            errors.append(float(err))
    for p in params:
        p.zero_grad()
    if per_param:
        return errors
    return max(errors) if errors else 0.0


# ---------------------------------------------------------------------------
# spectra and randomness
# ---------------------------------------------------------------------------


def rfft_magnitudes(x) -> np.ndarray:
    """Amplitudes of the real DFT at bins 1..L/2 along the last axis (DC dropped).

    The result is a plain array: the input series carries no gradient here.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    L = x.shape[-1]
    if L < 4:
        raise ValueError(f"rfft_magnitudes: need L >= 4, got {L}")
    if L % 2:
        raise ValueError(
            f"rfft_magnitudes: L={L} is odd; truncate the series by one sample"
        )
    return np.abs(np.fft.rfft(x, axis=-1))[..., 1:]


class RngStream:
    """Seeded Philox (counter-based) random stream.

    ``split`` derives independent child streams, e.g. one per worker.
    """

    algorithm = "philox4x64"

    def __init__(self, seed: int, _seed_seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = _seed_seq if _seed_seq is not None else np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.Philox(self._seq))

    def split(self, n: int) -> list[RngStream]:
        return [RngStream(self.seed, child) for child in self._seq.spawn(n)]

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size)

    def permutation(self, n) -> np.ndarray:
        return self.generator.permutation(n)


def sample_gumbel(shape, rng: RngStream) -> Tensor:
    """i.i.d. Gumbel(0, 1) draws as a constant tensor."""
    u = np.clip(rng.uniform(size=shape), 1e-12, 1.0 - 1e-12)
    return Tensor(-np.log(-np.log(u)))
