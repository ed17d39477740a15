"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the primitives needed by the 3D U-Net and its losses are provided.
Every primitive is a forward function returning ``(output, backward)``
where ``backward`` maps the output gradient to one gradient per input.

Layout for rank-5 tensors is ``(batch, channel, x, y, z)``.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeMismatchError(AutodiffError, ValueError):
    pass


class UnknownPrimitiveError(AutodiffError, KeyError):
    pass


class RootNotScalarError(AutodiffError, ValueError):
    pass


class RootNotOnTapeError(AutodiffError, ValueError):
    pass


_state = threading.local()
_counter = itertools.count()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference)."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(frozen=True)
class TapeNode:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "seq", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None
        self.seq = next(_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic: tensor/tensor ops need equal shapes, or one side of shape ()
    def __add__(self, other):
        if isinstance(other, Tensor):
            return apply_primitive("add", (self, other))
        return apply_primitive("add_scalar", (self,), value=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return apply_primitive("sub", (self, other))
        return apply_primitive("add_scalar", (self,), value=-float(other))

    def __rsub__(self, other):
        return apply_primitive("affine_scalar", (self,), scale=-1.0, shift=float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return apply_primitive("mul", (self, other))
        return apply_primitive("mul_scalar", (self,), value=float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return apply_primitive("div", (self, other))
        return apply_primitive("mul_scalar", (self,), value=1.0 / float(other))

    def __rtruediv__(self, other):
        return apply_primitive("mul_scalar", (self ** -1.0,), value=float(other))

    def __neg__(self):
        return apply_primitive("mul_scalar", (self,), value=-1.0)

    def __pow__(self, exponent):
        return apply_primitive("pow", (self,), exponent=float(exponent))

    def sum(self, axis=None):
        return apply_primitive("sum", (self,), axis=axis)

    def mean(self, axis=None):
        return apply_primitive("mean", (self,), axis=axis)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# primitive kernels

def _check_same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def _add(xs, attrs):
    a, b = xs
    _check_same(a, b, "add")
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _sub(xs, attrs):
    a, b = xs
    _check_same(a, b, "sub")
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _mul(xs, attrs):
    a, b = xs
    _check_same(a, b, "mul")
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _div(xs, attrs):
    a, b = xs
    _check_same(a, b, "div")
    out = a / b

    def back(g):
        ga = g / b
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return out, back


def _add_scalar(xs, attrs):
    (a,) = xs
    return a + attrs["value"], lambda g: (g,)


def _mul_scalar(xs, attrs):
    (a,) = xs
    c = attrs["value"]
    return a * c, lambda g: (g * c,)


def _affine_scalar(xs, attrs):
    (a,) = xs
    s = attrs["scale"]
    return a * s + attrs["shift"], lambda g: (g * s,)


def _pow(xs, attrs):
    (a,) = xs
    p = attrs["exponent"]
    out = a ** p

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * a ** (p - 1.0)
        # d/da a^p at a == 0 with p < 1 is unbounded; take 0 so steps stay finite
        if p < 1.0:
            d = np.where(a == 0, 0.0, d)
        return (g * d,)

    return out, back


def _relu(xs, attrs):
    (a,) = xs
    mask = a > 0
    return np.where(mask, a, 0).astype(a.dtype), lambda g: (g * mask,)


def _sigmoid(xs, attrs):
    (a,) = xs
    out = 0.5 * (1.0 + np.tanh(0.5 * a))
    return out, lambda g: (g * out * (1.0 - out),)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _sum(xs, attrs):
    (a,) = xs
    axes = _norm_axis(attrs.get("axis"), a.ndim)
    out = np.asarray(a.sum(axis=axes), dtype=a.dtype)
    keep = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def back(g):
        return (np.broadcast_to(g.reshape(keep), a.shape).copy(),)

    return out, back


def _mean(xs, attrs):
    (a,) = xs
    axes = _norm_axis(attrs.get("axis"), a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = np.asarray(a.sum(axis=axes) / count, dtype=a.dtype)
    keep = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def back(g):
        return (np.broadcast_to(g.reshape(keep) / count, a.shape).copy(),)

    return out, back


def _concat(xs, attrs):
    axis = attrs.get("axis", 1)
    ref = xs[0]
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(
            x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ShapeMismatchError(f"concat: {ref.shape} vs {x.shape} along axis {axis}")
    out = np.concatenate(xs, axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=axis))


_STACK_LIMIT = 64


def _conv3d(xs, attrs):
    if len(xs) == 3:
        x, w, b = xs
    else:
        (x, w), b = xs, None
    needs = attrs.get("_needs", (True,) * len(xs))
    pad = attrs.get("padding", 1)
    stride = attrs.get("stride", 1)
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeMismatchError(f"conv3d expects rank-5 input and kernel, got {x.shape}, {w.shape}")
    nb, cin, *spatial = x.shape
    cout, wcin, kx, ky, kz = w.shape
    if wcin != cin:
        raise ShapeMismatchError(f"conv3d: input has {cin} channels, kernel expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeMismatchError(f"conv3d: bias shape {b.shape}, expected ({cout},)")
    k = (kx, ky, kz)
    padded = [n + 2 * pad for n in spatial]
    full = [p - kk + 1 for p, kk in zip(padded, k)]
    if min(full) <= 0:
        raise ShapeMismatchError(f"conv3d: kernel {k} larger than padded input {padded}")

    # Channel-major padded buffer flattened over (batch, x, y, z). For kernel
    # offset (i, j, l) the needed input is one contiguous slice of the flat
    # buffer shifted by i*PyPz + j*Pz + l; positions that wrap past a row are
    # garbage and are discarded when the valid region is cropped.
    px, py, pz = padded
    xp = np.zeros((cin, nb, px, py, pz), dtype=x.dtype)
    xp[:, :, pad:pad + spatial[0], pad:pad + spatial[1], pad:pad + spatial[2]] = x.transpose(1, 0, 2, 3, 4)
    xf = xp.reshape(cin, -1)
    total = xf.shape[1]
    max_shift = (kx - 1) * py * pz + (ky - 1) * pz + (kz - 1)
    length = total - max_shift
    shifts = [i * py * pz + j * pz + l for i in range(kx) for j in range(ky) for l in range(kz)]
    wk = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1).reshape(-1, cout, cin))

    acc = np.zeros((cout, total), dtype=x.dtype)
    head = acc[:, :length]
    # few input channels: one stacked matmul beats many skinny ones
    stacked = cin * len(shifts) <= _STACK_LIMIT
    if stacked:
        cols = np.empty((len(shifts), cin, length), dtype=x.dtype)
        for n, s in enumerate(shifts):
            cols[n] = xf[:, s:s + length]
        cols = cols.reshape(-1, length)
        head += wk.transpose(1, 0, 2).reshape(cout, -1) @ cols
    else:
        for n, s in enumerate(shifts):
            head += wk[n] @ xf[:, s:s + length]
    out = acc.reshape(cout, nb, px, py, pz)[:, :, ::stride, ::stride, ::stride]
    out = out[:, :, : (full[0] + stride - 1) // stride, : (full[1] + stride - 1) // stride,
              : (full[2] + stride - 1) // stride]
    out_shape = out.shape
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))
    if b is not None:
        out += b.reshape(1, cout, 1, 1, 1)

    def back(g):
        gfull = np.zeros((cout, nb, px, py, pz), dtype=g.dtype)
        gfull[:, :, : out_shape[2] * stride : stride, : out_shape[3] * stride : stride,
              : out_shape[4] * stride : stride] = g.transpose(1, 0, 2, 3, 4)
        gf = gfull.reshape(cout, -1)[:, :length]
        need_x = needs[0]
        dxf = np.zeros_like(xf) if need_x else None
        if stacked:
            dwk = (gf @ cols.T).reshape(cout, len(shifts), cin).transpose(1, 0, 2)
        else:
            dwk = np.empty_like(wk)
            for n, s in enumerate(shifts):
                dwk[n] = gf @ xf[:, s:s + length].T
        if need_x:
            for n, s in enumerate(shifts):
                dxf[:, s:s + length] += wk[n].T @ gf
            dx = dxf.reshape(cin, nb, px, py, pz)[:, :, pad:pad + spatial[0], pad:pad + spatial[1],
                                                  pad:pad + spatial[2]]
            dx = np.ascontiguousarray(dx.transpose(1, 0, 2, 3, 4))
        else:
            dx = None
        dw = dwk.reshape(kx, ky, kz, cout, cin).transpose(3, 4, 0, 1, 2).copy()
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3, 4))

    return out, back


def _maxpool3d(xs, attrs):
    (x,) = xs
    if x.ndim != 5 or any(n % 2 for n in x.shape[2:]):
        raise ShapeMismatchError(f"max_pool3d needs rank-5 input with even spatial dims, got {x.shape}")
    nb, c, nx, ny, nz = x.shape
    # window members ordered (dz, dy, dx) so argmax's first hit is the lowest
    # x-fastest flat index
    win = x.reshape(nb, c, nx // 2, 2, ny // 2, 2, nz // 2, 2).transpose(0, 1, 2, 4, 6, 7, 5, 3)
    win = win.reshape(nb, c, nx // 2, ny // 2, nz // 2, 8)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(nb, c, nx // 2, ny // 2, nz // 2, 2, 2, 2).transpose(0, 1, 2, 7, 3, 6, 4, 5)
        return (gw.reshape(x.shape),)

    return out, back


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    """Source index for each output position: floor(i * n_in / n_out)."""
    if n_out <= 0 or n_in <= 0:
        raise ShapeMismatchError(f"non-positive size in nearest resize: {n_in} -> {n_out}")
    return (np.arange(n_out) * n_in) // n_out


def _upsample(xs, attrs):
    (x,) = xs
    if x.ndim != 5:
        raise ShapeMismatchError(f"upsample expects rank-5 input, got {x.shape}")
    size = attrs.get("size")
    if size is None:
        factor = attrs.get("factor", 2)
        size = tuple(n * factor for n in x.shape[2:])
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) <= 0:
        raise ShapeMismatchError(f"upsample target size must be 3 positive ints, got {size}")
    idx = [nearest_indices(n, s) for n, s in zip(x.shape[2:], size)]
    out = x[:, :, idx[0]][:, :, :, idx[1]][:, :, :, :, idx[2]]

    def back(g):
        for axis in (4, 3, 2):
            ix = idx[axis - 2]
            uniq, starts = np.unique(ix, return_index=True)
            red = np.add.reduceat(g, starts, axis=axis)
            shape = list(g.shape)
            shape[axis] = x.shape[axis]
            full = np.zeros(shape, dtype=g.dtype)
            sl = [slice(None)] * 5
            sl[axis] = uniq
            full[tuple(sl)] = red
            g = full
        return (g,)

    return out, back


def _gather(xs, attrs):
    """Gather over the three trailing spatial axes with one flat index map."""
    (x,) = xs
    index = attrs["index"]
    spatial = x.shape[-3:]
    n = int(np.prod(spatial))
    if index.shape != (n,):
        raise ShapeMismatchError(f"gather index has shape {index.shape}, expected ({n},)")
    lead = x.shape[:-3]
    flat = x.reshape(-1, n)
    out = flat[:, index].reshape(x.shape)

    def back(g):
        gf = g.reshape(-1, n)
        rows = gf.shape[0]
        combined = (np.arange(rows)[:, None] * n + index[None, :]).ravel()
        acc = np.bincount(combined, weights=gf.ravel(), minlength=rows * n)
        return (acc.astype(g.dtype).reshape(lead + spatial),)

    return out, back


def _channel_norm(xs, attrs):
    """Per-channel standardisation over (batch, x, y, z) followed by scale/shift."""
    x, gamma, beta = xs
    eps = attrs.get("eps", 1e-5)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError(f"channel_norm: affine params must be ({c},)")
    axes = (0, 2, 3, 4)
    stats = attrs.get("stats")
    if stats is None:
        mu = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        frozen = False
    else:
        mu = np.asarray(stats[0], dtype=x.dtype).reshape(1, c, 1, 1, 1)
        var = np.asarray(stats[1], dtype=x.dtype).reshape(1, c, 1, 1, 1)
        frozen = True
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    shape = (1, c, 1, 1, 1)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    count = x.size // c

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gh = g * gamma.reshape(shape)
        if frozen:
            dx = gh * inv
        else:
            dx = inv / count * (
                count * gh
                - gh.sum(axis=axes, keepdims=True)
                - xhat * (gh * xhat).sum(axis=axes, keepdims=True)
            )
        return dx, dgamma, dbeta

    return out, back


PRIMITIVES: dict[str, Callable] = {
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "div": _div,
    "add_scalar": _add_scalar,
    "mul_scalar": _mul_scalar,
    "affine_scalar": _affine_scalar,
    "pow": _pow,
    "relu": _relu,
    "sigmoid": _sigmoid,
    "sum": _sum,
    "mean": _mean,
    "concat": _concat,
    "conv3d": _conv3d,
    "max_pool3d": _maxpool3d,
    "upsample": _upsample,
    "gather": _gather,
    "channel_norm": _channel_norm,
}


def apply_primitive(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    try:
        kernel = PRIMITIVES[op]
    except KeyError:
        raise UnknownPrimitiveError(op) from None
    inputs = tuple(as_tensor(t) for t in inputs)
    attrs["_needs"] = tuple(t.requires_grad for t in inputs)
    out_data, backward_fn = kernel([t.data for t in inputs], attrs)
    out = Tensor(out_data)
    if _recording() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, backward_fn)
    return out


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar root.

    Returns a map from every requires-grad leaf to its gradient; the same
    arrays are stored on ``leaf.grad``. Nodes are visited in reverse
    creation order, which is a valid reverse topological order because a
    node can only consume tensors created before it.
    """
    if root.data.shape != ():
        raise RootNotScalarError(f"root must be scalar-shaped, got {root.shape}")
    if root.node is None:
        raise RootNotOnTapeError("root was not produced by a recorded primitive")

    nodes: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.seq in nodes:
            continue
        nodes[t.seq] = t
        if t.node is not None:
            stack.extend(i for i in t.node.inputs if i.requires_grad)

    grads: dict[int, np.ndarray] = {root.seq: np.ones((), dtype=root.dtype)}
    leaves: dict[Tensor, np.ndarray] = {}
    for seq in sorted(nodes, reverse=True):
        t = nodes[seq]
        g = grads.pop(seq, None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g
            leaves[t] = g
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.seq in grads:
                grads[inp.seq] = grads[inp.seq] + gi
            else:
                grads[inp.seq] = gi
    return leaves


# ---------------------------------------------------------------------------
# functional front-end

def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 1, stride: int = 1) -> Tensor:
    inputs = (x, w) if b is None else (x, w, b)
    return apply_primitive("conv3d", inputs, padding=padding, stride=stride)


def max_pool3d(x: Tensor) -> Tensor:
    return apply_primitive("max_pool3d", (x,))


def upsample(x: Tensor, factor: int = 2, size: Sequence[int] | None = None) -> Tensor:
    return apply_primitive("upsample", (x,), factor=factor, size=size)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    return apply_primitive("concat", tuple(xs), axis=axis)


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", (x,))


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", (x,))


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    return apply_primitive("gather", (x,), index=np.asarray(index, dtype=np.intp))


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats=None, eps: float = 1e-5) -> Tensor:
    return apply_primitive("channel_norm", (x, gamma, beta), stats=stats, eps=eps)


# ---------------------------------------------------------------------------
# gradient checking

@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, tol: float = 1e-4,
               max_elements: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare ``backward`` against central differences elementwise.

    ``max_elements`` limits the check to a random subset of coordinates for
    large inputs.
    """
    base = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.shape != ():
        raise RootNotScalarError(f"program must return a scalar, got shape {out.shape}")
    analytic = backward(out).get(leaf)
    if analytic is None:
        analytic = np.zeros_like(base)

    coords = np.arange(base.size)
    if max_elements is not None and base.size > max_elements:
        coords = np.sort(np.random.default_rng(seed).choice(base.size, max_elements, replace=False))

    worst = 0.0
    flat = base.reshape(-1)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        num = (fp - fm) / (2.0 * h)
        ana = float(analytic.reshape(-1)[i])
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, rel)
    return GradCheckReport(max_rel_err=worst, passed=worst < tol, n_checked=len(coords))
