"""Dense float tensors with tape-based reverse-mode differentiation.

Only what the heatmap network needs: 2-D (transposed) convolutions,
elementwise arithmetic, matmul, reshapes, max reductions and a summed
squared-error loss. Every op records a closure that maps the upstream
gradient to gradients of its inputs; :meth:`Tensor.backward` replays the
tape in reverse topological order.
"""

from __future__ import annotations

import contextlib
import io
import os
import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "no_grad",
    "tensor",
    "conv2d",
    "deconv2d",
    "relu",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "reduce_max",
    "sum_all",
    "mse",
    "save_tensor",
    "load_tensor",
    "write_tensor",
    "read_tensor",
]

TNSR_MAGIC = b"TNSR"

_grad_enabled = True
_debug = bool(os.environ.get("SCCH_DEBUG"))


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, optimizer steps)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float(data, dtype=None) -> np.ndarray:
    if dtype is None:
        dtype = np.float64 if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.float32
    return np.asarray(data, dtype=dtype, order="C")


class Tensor:
    """A float array plus an optional gradient buffer.

    ``float32`` is the working precision; ``float64`` input arrays are kept as
    ``float64`` so finite-difference checks can run without rounding noise.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        self.data = _as_float(data, dtype)
        if not 0 <= self.data.ndim <= 4:
            raise ShapeError(f"tensor rank must be 0..4, got shape {self.data.shape}")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into the ``grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
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


class Parameter(Tensor):
    """Trainable leaf tensor with Adam moment buffers."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x), dtype=like.data.dtype)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _debug and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError("non-finite output from finite inputs")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.maximum(a.data, 0), (a,), lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product, or a batched product over a shared leading axis."""
    if a.ndim not in (2, 3) or b.ndim != a.ndim or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch mismatch {a.shape} @ {b.shape}")

    def backward(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        return g @ bt, at @ g

    return _result(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    if out.ndim > 4:
        raise ShapeError(f"reshape: rank {out.ndim} exceeds 4")
    src = a.shape
    return _result(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal slot only.

    NaN wins (as in ``np.max``) so a poisoned input cannot vanish silently.
    """
    axis = axis % a.ndim
    moved = np.moveaxis(a.data, axis, 0)
    out = moved[0].copy()
    idx = np.zeros(out.shape, dtype=np.intp)
    for s in range(1, moved.shape[0]):
        better = (moved[s] > out) | np.isnan(moved[s])
        np.copyto(out, moved[s], where=better)
        np.copyto(idx, s, where=better)

    def backward(g):
        ga = np.zeros_like(a.data)
        gm = np.moveaxis(ga, axis, 0)
        for s in range(moved.shape[0]):
            np.copyto(gm[s], g, where=idx == s)
        return (ga,)

    return _result(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    total = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    return _result(total, (a,), lambda g: (np.full_like(a.data, g),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Sum (not mean) of squared differences, accumulated in float64."""
    _check_same(a, b, "mse")
    diff = a.data - b.data
    total = np.asarray(np.sum(np.square(diff, dtype=np.float64)), dtype=a.data.dtype)

    def backward(g):
        ga = (2 * g) * diff
        return ga, -ga

    return _result(total, (a, b), backward)


# ---------------------------------------------------------------------------
# convolutions


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d: padded extent {size + 2 * pad} incompatible with kernel {k}, stride {stride}"
        )
    return span // stride + 1


def _gather_windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """im2col as (n, c, kh, kw, ho, wo) built from contiguous strided slices."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def _scatter_windows(cols: np.ndarray, out: np.ndarray, stride: int) -> None:
    """Adjoint of :func:`_gather_windows`: add (n, c, kh, kw, h, w) windows into ``out``."""
    _, _, kh, kw, h, w = cols.shape
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * h : stride, j : j + stride * w : stride] += cols[:, :, i, j]


def _weight_grad(g: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # sum over batch and positions of g (n, a, p) x cols (n, b, p) -> (a, b)
    return np.einsum("nap,nbp->ab", g, cols, optimize=True)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation. ``x`` is NCHW, ``w`` is (C_out, C_in, kh, kw), ``b`` is (C_out,)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input and 4-d weight, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape}, expected ({cout},)")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    ho = _conv_out(h, kh, stride, pad)
    wo = _conv_out(wd, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if kh == kw == 1 and stride == 1:
        cols = xp.reshape(n, cin, h * wd)
    else:
        cols = _gather_windows(xp, kh, kw, stride, ho, wo).reshape(n, cin * kh * kw, ho * wo)
    wmat = w.data.reshape(cout, -1)
    out = wmat @ cols  # (n, cout, ho*wo)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    def backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        gw = _weight_grad(g2, cols).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = wmat.T @ g2
            if kh == kw == 1 and stride == 1:
                gxp = dcols.reshape(xp.shape)
            else:
                gxp = np.zeros_like(xp)
                _scatter_windows(dcols.reshape(n, cin, kh, kw, ho, wo), gxp, stride)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


def deconv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` with the same weight.

    ``w`` is (C_in, C_out, kh, kw); output extent is (H - 1) * stride - 2 * pad + kh.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"deconv2d: expected NCHW input and 4-d weight, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    wcin, cout, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"deconv2d: input has {cin} channels, weight expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"deconv2d: bias shape {b.shape}, expected ({cout},)")
    if stride < 1:
        raise ShapeError(f"deconv2d: stride must be >= 1, got {stride}")
    hf = (h - 1) * stride + kh
    wf = (wd - 1) * stride + kw
    ho, wo = hf - 2 * pad, wf - 2 * pad
    if ho < 1 or wo < 1:
        raise ShapeError(f"deconv2d: padding {pad} leaves no output for input {h}x{wd}")

    xr = x.data.reshape(n, cin, h * wd)
    wmat = w.data.reshape(cin, cout * kh * kw)
    cols = wmat.T @ xr  # (n, cout*kh*kw, h*wd)
    full = np.zeros((n, cout, hf, wf), dtype=x.data.dtype)
    _scatter_windows(cols.reshape(n, cout, kh, kw, h, wd), full, stride)
    out = np.ascontiguousarray(full[:, :, pad : pad + ho, pad : pad + wo]) if pad else full
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        gcols = _gather_windows(gfull, kh, kw, stride, h, wd).reshape(n, cout * kh * kw, h * wd)
        gx = (wmat @ gcols).reshape(x.shape) if x.requires_grad else None
        gw = _weight_grad(xr, gcols).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


# ---------------------------------------------------------------------------
# TNSR binary format: b"TNSR", u32 rank, rank x u32 extents, f32 LE payload


def write_tensor(fh: BinaryIO, t: Tensor | np.ndarray) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    fh.write(TNSR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(fh: BinaryIO) -> Tensor:
    magic = fh.read(4)
    if magic != TNSR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
    return Tensor(payload.reshape(shape).astype(np.float32))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated tensor block: wanted {n} bytes, got {len(buf)}")
    return buf


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def tensor_bytes(t: Tensor | np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()
