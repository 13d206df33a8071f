"""Dense float32 tensors with reverse-mode automatic differentiation.

The graph is recorded on an explicit :class:`Tape` (define-by-run, rebuilt per
training step).  Operations are free functions returning new tensors; each one
registers a backward closure on the active tape when any input requires a
gradient.  Gradients are plain numpy arrays keyed by tape node id.
"""

from __future__ import annotations

import struct
import threading
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Enable per-op finite-value and divide-by-zero checks (slow, test aid)."""
    global _debug_checks
    _debug_checks = bool(enabled)


_tls = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_tls, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of differentiable operations.

    Node ids are list positions, so inputs always precede their consumers and
    a single reverse sweep is a valid reverse-topological order.  A tape is
    confined to the thread that opened it.
    """

    def __init__(self) -> None:
        # each node: (tuple of input node ids or None, backward closure or None)
        self._nodes: list[tuple[tuple[int | None, ...], Callable | None]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_tls, "tapes", None)
        if stack is None:
            stack = []
            _tls.tapes = stack
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tls.tapes.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, input_ids: tuple[int | None, ...], backward_fn: Callable | None) -> int:
        self._nodes.append((input_ids, backward_fn))
        return len(self._nodes) - 1

    def backward(self, root: "Tensor") -> dict[int, np.ndarray]:
        """Accumulate gradients of a scalar ``root`` w.r.t. every reachable node.

        Returns a map node id -> gradient array (same shape as the node's
        value).  Nodes not reachable from the root are absent.
        """
        if root.size != 1:
            raise ValueError(f"backward root must be a scalar, got shape {root.shape}")
        if root._tape is not self or root.node_id is None:
            return {}
        grads: dict[int, np.ndarray] = {
            root.node_id: np.ones(root.shape, dtype=root.data.dtype)
        }
        for nid in range(root.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            input_ids, backward_fn = self._nodes[nid]
            if backward_fn is None:
                continue
            input_grads = backward_fn(g)
            for iid, ig in zip(input_ids, input_grads):
                if iid is None or ig is None:
                    continue
                acc = grads.get(iid)
                if acc is None:
                    grads[iid] = ig
                else:
                    # += would alias when a node's grad seeded another entry
                    grads[iid] = acc + ig
        return grads


class Tensor:
    """Immutable dense array plus autodiff bookkeeping.

    ``data`` is row-major float32 by default (float64 is accepted for
    numerical test harnesses; every op is dtype-generic).  Treat ``data`` as
    read-only: updates produce new tensors.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=DEFAULT_DTYPE):
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, cut from the gradient graph."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def _ensure_node(self, tape: Tape) -> int:
        if self._tape is not tape:
            self._tape = tape
            self.node_id = tape._record((), None)
        assert self.node_id is not None
        return self.node_id

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __abs__(self):
        return absolute(self)


def as_tensor(x, dtype=DEFAULT_DTYPE) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable | None, op: str) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    _check_finite(data, op)
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track, dtype=data.dtype)
    if track:
        ids = tuple(t._ensure_node(tape) if t.requires_grad else None for t in inputs)
        out.node_id = tape._record(ids, backward_fn)
        out._tape = tape
    return out


def _binary_prep(a: Tensor, b, op: str) -> tuple[Tensor, "Tensor | None", float | None]:
    """Split a binary op's second operand into tensor or scalar form."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        if a.data.dtype != b.data.dtype:
            raise ValueError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
        return a, b, None
    return a, None, float(b)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b) -> Tensor:
    a, bt, bs = _binary_prep(a, b, "add")
    if bt is None:
        return _result(a.data + bs, (a,), lambda g: (g,), "add")
    return _result(a.data + bt.data, (a, bt), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    a, bt, bs = _binary_prep(a, b, "sub")
    if bt is None:
        return _result(a.data - bs, (a,), lambda g: (g,), "sub")
    return _result(a.data - bt.data, (a, bt), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    a, bt, bs = _binary_prep(a, b, "mul")
    if bt is None:
        return _result(a.data * bs, (a,), lambda g: (g * bs,), "mul")
    ad, bd = a.data, bt.data
    return _result(ad * bd, (a, bt), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b) -> Tensor:
    a, bt, bs = _binary_prep(a, b, "div")
    if bt is None:
        if _debug_checks and bs == 0.0:
            raise ZeroDivisionError("div: scalar divisor is zero")
        inv = 1.0 / bs
        return _result(a.data * inv, (a,), lambda g: (g * inv,), "div")
    if _debug_checks and np.any(bt.data == 0):
        raise ZeroDivisionError("div: divisor contains zeros")
    ad, bd = a.data, bt.data
    out = ad / bd

    def backward(g):
        return g / bd, -g * ad / (bd * bd)

    return _result(out, (a, bt), backward, "div")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * (0.5 / out),), "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def absolute(a: Tensor) -> Tensor:
    # subgradient 0 at 0 (np.sign(0) == 0)
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def minimum(a: Tensor, b) -> Tensor:
    """Elementwise min; on ties the gradient routes to the first operand."""
    a, bt, bs = _binary_prep(a, b, "min")
    bd = np.asarray(bs, dtype=a.data.dtype) if bt is None else bt.data
    take_a = a.data <= bd
    out = np.where(take_a, a.data, bd)
    mask_a = take_a.astype(a.data.dtype)
    if bt is None:
        return _result(out, (a,), lambda g: (g * mask_a,), "min")
    mask_b = 1.0 - mask_a
    return _result(out, (a, bt), lambda g: (g * mask_a, g * mask_b), "min")


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first operand."""
    a, bt, bs = _binary_prep(a, b, "max")
    bd = np.asarray(bs, dtype=a.data.dtype) if bt is None else bt.data
    take_a = a.data >= bd
    out = np.where(take_a, a.data, bd)
    mask_a = take_a.astype(a.data.dtype)
    if bt is None:
        return _result(out, (a,), lambda g: (g * mask_a,), "max")
    mask_b = 1.0 - mask_a
    return _result(out, (a, bt), lambda g: (g * mask_a, g * mask_b), "max")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "sqrt": sqrt,
    "exp": exp,
    "abs": absolute,
    "min": minimum,
    "max": maximum,
}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise op by name; unary ops ignore ``b``."""
    fn = _ELEMENTWISE.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    if op in ("sqrt", "exp", "abs"):
        if b is not None:
            raise ValueError(f"{op} takes a single operand")
        return fn(a)
    return fn(a, b)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    scale = np.where(a.data >= 0, 1.0, slope).astype(a.data.dtype)
    return _result(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    normed = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        normed.append(ax % ndim)
    if len(set(normed)) != len(normed):
        raise ValueError("duplicate reduction axes")
    return tuple(normed)


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes_t = _norm_axes(axes, a.ndim)
    out = a.data.sum(axis=axes_t if axes_t else None)
    in_shape = a.shape

    def backward(g):
        keep = list(in_shape)
        for ax in axes_t:
            keep[ax] = 1
        return (np.broadcast_to(g.reshape(keep), in_shape).astype(g.dtype, copy=True),)

    return _result(np.asarray(out, dtype=a.data.dtype), (a,), backward, "reduce_sum")


def mean(a: Tensor, axes=None) -> Tensor:
    axes_t = _norm_axes(axes, a.ndim)
    count = 1
    for ax in axes_t:
        count *= a.shape[ax]
    return div(reduce_sum(a, axes), float(count))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of no tensors")
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tuple(tensors), backward, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward zero-pads."""
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ValueError(f"narrow: [{start}, {start + length}) out of bounds for axis size {a.shape[axis]}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    in_shape = a.shape

    def backward(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _result(a.data[index].copy(), (a,), backward, "narrow")


def unsqueeze(a: Tensor, axis: int) -> Tensor:
    """Insert a size-1 axis; backward removes it again."""
    out = np.expand_dims(a.data, axis)
    ax = axis % out.ndim

    def backward(g):
        return (np.squeeze(g, axis=ax),)

    return _result(out, (a,), backward, "unsqueeze")


def repeat_axis(a: Tensor, axis: int, n: int) -> Tensor:
    """Tile a size-1 axis to size ``n``; backward sums back over it."""
    axis = axis % a.ndim
    if a.shape[axis] != 1:
        raise ValueError(f"repeat_axis expects size 1 on axis {axis}, got {a.shape[axis]}")
    reps = [1] * a.ndim
    reps[axis] = n

    def backward(g):
        return (g.sum(axis=axis, keepdims=True),)

    return _result(np.tile(a.data, reps), (a,), backward, "repeat_axis")


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to an NCHW (or CHW) tensor."""
    ch_axis = x.ndim - 3
    if b.ndim != 1 or b.shape[0] != x.shape[ch_axis]:
        raise ValueError(f"bias shape {b.shape} does not match channel count {x.shape[ch_axis]}")
    view = b.data.reshape((-1,) + (1, 1))
    sum_axes = tuple(i for i in range(x.ndim) if i != ch_axis)

    def backward(g):
        return g, g.sum(axis=sum_axes)

    return _result(x.data + view, (x, b), backward, "add_channel_bias")


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (N, Ho*Wo, C*kh*kw) patch matrix."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # N, C, Ho, Wo, kh, kw
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)


def _conv2d_raw(x: np.ndarray, k: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    o, ck, kh, kw = k.shape
    if c != ck:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {ck}")
    ho, wo = _conv_out_size(h, kh, stride, pad), _conv_out_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: output size {ho}x{wo} is empty")
    cols = _im2col(x, kh, kw, stride, pad)
    y = cols @ k.reshape(o, -1).T  # N, Ho*Wo, O
    return y.transpose(0, 2, 1).reshape(n, o, ho, wo)


def _conv2d_kernel_grad(x: np.ndarray, gy: np.ndarray, stride: int, pad: int,
                        k_shape: tuple[int, ...]) -> np.ndarray:
    o, c, kh, kw = k_shape
    n = x.shape[0]
    cols = _im2col(x, kh, kw, stride, pad)  # N, P, C*kh*kw
    gy2 = gy.reshape(n, o, -1)  # N, O, P
    gk = np.einsum("nop,npk->ok", gy2, cols)
    return gk.reshape(k_shape)


def _conv_transpose2d_raw(y: np.ndarray, k: np.ndarray, stride: int, pad: int,
                          out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Adjoint of `_conv2d_raw` w.r.t. its input: scatter-add of kernel taps."""
    n, o, hi, wi = y.shape
    ok, c, kh, kw = k.shape
    if o != ok:
        raise ValueError(f"conv_transpose2d: input has {o} channels, kernel expects {ok}")
    if out_hw is None:
        out_hw = ((hi - 1) * stride - 2 * pad + kh, (wi - 1) * stride - 2 * pad + kw)
    ho, wo = out_hw
    if ho < 1 or wo < 1:
        raise ValueError(f"conv_transpose2d: output size {ho}x{wo} is empty")
    cols = y.reshape(n, o, -1).transpose(0, 2, 1) @ k.reshape(o, -1)  # N, P, C*kh*kw
    cols = cols.reshape(n, hi, wi, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros((n, c, ho + 2 * pad, wo + 2 * pad), dtype=y.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * hi:stride, j:j + stride * wi:stride] += cols[..., i, j]
    if pad:
        out = out[:, :, pad:pad + ho, pad:pad + wo]
    return out


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIHW kernel, zero padding."""
    xd, kd = x.data, kernel.data
    out = _conv2d_raw(xd, kd, stride, pad)

    def backward(g):
        gx = _conv_transpose2d_raw(g, kd, stride, pad, out_hw=xd.shape[2:])
        gk = _conv2d_kernel_grad(xd, g, stride, pad, kd.shape)
        return gx, gk

    return _result(out, (x, kernel), backward, "conv2d")


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of `conv2d` with the same kernel/stride/pad."""
    xd, kd = x.data, kernel.data
    out = _conv_transpose2d_raw(xd, kd, stride, pad)

    def backward(g):
        gx = _conv2d_raw(g, kd, stride, pad)
        gk = _conv2d_kernel_grad(g, xd, stride, pad, kd.shape)
        return gx, gk

    return _result(out, (x, kernel), backward, "conv_transpose2d")


# ---------------------------------------------------------------------------
# 2x resampling


@lru_cache(maxsize=None)
def _down_matrix(n: int) -> np.ndarray:
    m = np.zeros((n // 2, n), dtype=np.float64)
    for i in range(n // 2):
        m[i, 2 * i] = 0.5
        m[i, 2 * i + 1] = 0.5
    return m


@lru_cache(maxsize=None)
def _up_matrix(n: int) -> np.ndarray:
    # bilinear x2, align-corners-false: output o samples input at o/2 - 0.25,
    # border values replicated
    m = np.zeros((2 * n, n), dtype=np.float64)
    for o in range(2 * n):
        c = o / 2.0 - 0.25
        i0 = int(np.floor(c))
        w1 = c - i0
        m[o, min(max(i0, 0), n - 1)] += 1.0 - w1
        m[o, min(max(i0 + 1, 0), n - 1)] += w1
    return m


def resample2x(a: Tensor, direction: str) -> Tensor:
    """Halve (2x2 average) or double (bilinear) the last two axes.

    Flow fields passed through ``up_bilinear`` keep per-pixel units of the
    source resolution: the caller must multiply the values by 2.
    """
    if a.ndim < 2:
        raise ValueError("resample2x needs at least 2 dims")
    h, w = a.shape[-2:]
    if direction == "down_avg":
        if h % 2 or w % 2:
            raise ValueError(f"down_avg needs even spatial dims, got {h}x{w}")
        mh, mw = _down_matrix(h), _down_matrix(w)
    elif direction == "up_bilinear":
        mh, mw = _up_matrix(h), _up_matrix(w)
    else:
        raise ValueError(f"unknown resample direction {direction!r}")
    mh = mh.astype(a.data.dtype)
    mw = mw.astype(a.data.dtype)
    out = mh @ a.data @ mw.T

    def backward(g):
        return (mh.T @ g @ mw,)

    return _result(out, (a,), backward, "resample2x")


# ---------------------------------------------------------------------------
# checkpoint format: magic "FFWT", version u32, then per-tensor records
# (name_len u32, name utf-8, rank u32, dims u32 x rank, data f32), little-endian

CHECKPOINT_MAGIC = b"FFWT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, "Tensor | np.ndarray"]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, value in tensors.items():
            arr = np.asarray(
                value.data if isinstance(value, Tensor) else value, dtype="<f4", order="C"
            )
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a FFWT checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(raw):
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            if arr.size != count:
                raise ValueError("short read")
            out[name] = arr.reshape(dims).astype(np.float32)
    except (struct.error, ValueError) as e:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({e})") from e
    return out
