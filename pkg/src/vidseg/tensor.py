"""Dense tensors with reverse-mode differentiation on a recording tape.

Storage is row-major contiguous numpy (f32 or f64). Ops are pure in their
inputs; when a Tape is active and an input requires gradients, the op appends
a backward rule to the tape. Backward replays the tape in reverse creation
order, which is a valid topological order by construction.

Broadcasting is deliberately restricted: elementwise ops accept equal shapes
or a python scalar, matmul broadcasts leading batch dims, everything else
goes through an explicit expand().
"""

from __future__ import annotations

import functools
import json
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

F32 = np.float32
F64 = np.float64
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_NAME_DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class GradientError(RuntimeError):
    """Raised when differentiation is asked for something off-contract."""


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Append-only record of executed ops for reverse-mode differentiation.

    A tape is confined to one thread of execution at a time. Nodes are
    traversed exactly once each, in reverse creation order.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def record(self, out, parents, backward):
        """Append a node. `backward(grad)` must accumulate into `parents`."""
        self.nodes.append((out, parents, backward))

    def backward(self, loss):
        """Populate .grad for everything reachable from `loss`.

        Returns a map of leaf tensors (no creating op) to their gradient
        arrays. Tensors not on a path to the loss keep grad None.
        """
        if loss.data.size != 1:
            raise GradientError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        loss.grad = np.ones_like(loss.data)
        leaves = {}
        for out, parents, backward in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            backward(g)
            for p in parents:
                if p.requires_grad and p.grad is not None and p._op_output is False:
                    leaves[id(p)] = p
        return {t: t.grad for t in leaves.values()}


_TAPE_STACK: list[Tape] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def no_tape():
    """Suspend recording (e.g. for evaluation inside a training step)."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def backward(loss):
    """Run reverse-mode differentiation from a scalar loss on the active tape."""
    tape = active_tape()
    if tape is None:
        raise GradientError("backward called with no active tape")
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    """A dense N-d array of f32 or f64 values, optionally on the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_op_output")

    def __init__(self, data, requires_grad=False, dtype=None):
        keep = isinstance(data, (np.ndarray, np.generic)) and data.dtype in (
            np.float32, np.float64,
        )
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif not keep:
            arr = arr.astype(np.float32)
        # ascontiguousarray promotes 0-d to 1-d; keep scalars 0-d
        self.data = np.ascontiguousarray(arr).reshape(arr.shape)
        self.requires_grad = requires_grad
        self.grad = None
        self._op_output = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """A view of the same values, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={_DTYPE_NAMES[self.dtype]})"

    # operator sugar; scalars allowed, tensor-tensor requires equal shapes
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data, parents, backward_fn):
    """Wrap op output, recording on the active tape when needed."""
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        out._op_output = True
        tape.record(out, parents, backward_fn(out))
    return out


def _acc(t, g):
    """Accumulate gradient g into tensor t (no-op when grads not needed)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may be a broadcast view of another node's gradient
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtypes {a.dtype} and {b.dtype} differ")


def _as_scalar(x, dtype):
    return np.asarray(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a, b):
    if not isinstance(b, Tensor):
        data = a.data + _as_scalar(b, a.dtype)

        def bwd(out):
            return lambda g: _acc(a, g)

        return _result(data, (a,), bwd)
    _check_same_shape(a, b, "add")

    def bwd(out):
        def run(g):
            _acc(a, g)
            _acc(b, g)

        return run

    return _result(a.data + b.data, (a, b), bwd)


def mul(a, b):
    if not isinstance(b, Tensor):
        s = _as_scalar(b, a.dtype)

        def bwd(out):
            return lambda g: _acc(a, g * s)

        return _result(a.data * s, (a,), bwd)
    _check_same_shape(a, b, "mul")

    def bwd(out):
        def run(g):
            _acc(a, g * b.data)
            _acc(b, g * a.data)

        return run

    return _result(a.data * b.data, (a, b), bwd)


def div(a, b):
    _check_same_shape(a, b, "div")
    inv = 1.0 / b.data

    def bwd(out):
        def run(g):
            _acc(a, g * inv)
            _acc(b, -g * a.data * inv * inv)

        return run

    return _result(a.data * inv, (a, b), bwd)


def exp(x):
    data = np.exp(x.data)

    def bwd(out):
        return lambda g: _acc(x, g * out.data)

    return _result(data, (x,), bwd)


def log(x):
    def bwd(out):
        return lambda g: _acc(x, g / x.data)

    return _result(np.log(x.data), (x,), bwd)


def absolute(x):
    sign = np.sign(x.data)

    def bwd(out):
        return lambda g: _acc(x, g * sign)

    return _result(np.abs(x.data), (x,), bwd)


def maximum(a, b):
    """Elementwise max; ties route their gradient to the first argument."""
    _check_same_shape(a, b, "maximum")
    take_a = a.data >= b.data

    def bwd(out):
        def run(g):
            _acc(a, g * take_a)
            _acc(b, g * ~take_a)

        return run

    return _result(np.where(take_a, a.data, b.data), (a, b), bwd)


def clip(x, lo, hi):
    inside = (x.data >= lo) & (x.data <= hi)

    def bwd(out):
        return lambda g: _acc(x, g * inside)

    return _result(np.clip(x.data, lo, hi), (x,), bwd)


def sigmoid(x):
    data = 1.0 / (1.0 + np.exp(-np.abs(x.data)))
    data = np.where(x.data >= 0, data, 1.0 - data)

    def bwd(out):
        return lambda g: _acc(x, g * out.data * (1.0 - out.data))

    return _result(data, (x,), bwd)


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x):
    """Exact (erf-based) GELU."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def bwd(out):
        def run(g):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
            _acc(x, g * (phi + x.data * pdf))

        return run

    return _result(x.data * phi, (x,), bwd)


def leaky_relu(x, slope=0.2):
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)

    def bwd(out):
        return lambda g: _acc(x, g * scale)

    return _result(x.data * scale, (x,), bwd)


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy, numerically stable in the logits.

    `targets` may be soft; no gradient flows into it.
    """
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    z = logits.data
    data = np.mean(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z))))

    def bwd(out):
        def run(g):
            p = 1.0 / (1.0 + np.exp(-np.abs(z)))
            p = np.where(z >= 0, p, 1.0 - p)
            _acc(logits, g * (p - t) / z.size)

        return run

    return _result(data.astype(z.dtype), (logits,), bwd)


# ---------------------------------------------------------------------------
# Shape ops


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape

    def bwd(out):
        return lambda g: _acc(x, g.reshape(old))

    return _result(x.data.reshape(shape), (x,), bwd)


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)

    def bwd(out):
        return lambda g: _acc(x, np.ascontiguousarray(g.transpose(inv)))

    return _result(x.data.transpose(axes), (x,), bwd)


def concat(tensors, axis):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(out):
        def run(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _acc(t, np.ascontiguousarray(g[tuple(sl)]))

        return run

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def stack(tensors, axis=0):
    """Join along a new axis (reshape + concat, not a primitive)."""
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis)


def expand(x, shape):
    """Explicit broadcast to `shape` (leading dims and size-1 dims only)."""
    shape = tuple(int(s) for s in shape)
    try:
        np.broadcast_shapes(x.shape, shape)
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from None
    extra = len(shape) - x.ndim
    if extra < 0:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}")

    def bwd(out):
        def run(g):
            red = g
            if extra:
                red = red.sum(axis=tuple(range(extra)))
            keep = tuple(
                i for i, (sx, so) in enumerate(zip(x.shape, red.shape)) if sx != so
            )
            if keep:
                red = red.sum(axis=keep, keepdims=True)
            _acc(x, np.ascontiguousarray(red))

        return run

    return _result(np.broadcast_to(x.data, shape), (x,), bwd)


def take(x, indices, axis):
    """Gather slices along an axis; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)

    def bwd(out):
        def run(g):
            dx = np.zeros_like(x.data)
            sl = [slice(None)] * x.ndim
            for pos, i in enumerate(idx):
                sl[axis] = i
                gi_sl = [slice(None)] * g.ndim
                gi_sl[axis] = pos
                dx[tuple(sl)] += g[tuple(gi_sl)]
            _acc(x, dx)

        return run

    return _result(np.take(x.data, idx, axis=axis), (x,), bwd)


# ---------------------------------------------------------------------------
# Reductions


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    axes = _axis_tuple(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def bwd(out):
        def run(g):
            gg = g
            if not keepdims:
                for a in sorted(axes):
                    gg = np.expand_dims(gg, a)
            _acc(x, np.broadcast_to(gg, x.shape).astype(x.dtype, copy=False))

        return run

    return _result(data, (x,), bwd)


def tmean(x, axis=None, keepdims=False):
    axes = _axis_tuple(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    data = x.data.mean(axis=axes, keepdims=keepdims)

    def bwd(out):
        def run(g):
            gg = g
            if not keepdims:
                for a in sorted(axes):
                    gg = np.expand_dims(gg, a)
            _acc(x, (np.broadcast_to(gg, x.shape) / n).astype(x.dtype, copy=False))

        return run

    return _result(data, (x,), bwd)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a, b):
    """Batched matrix product; leading batch dims broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtypes {a.dtype} and {b.dtype} differ")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(
            f"matmul: batch extents incompatible for {a.shape} x {b.shape}"
        ) from None

    def _reduce_to(g, shape):
        if g.shape == shape:
            return g
        extra = g.ndim - len(shape)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        keep = tuple(i for i in range(len(shape)) if shape[i] == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return g

    def bwd(out):
        def run(g):
            _acc(a, _reduce_to(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
            _acc(b, _reduce_to(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

        return run

    return _result(np.matmul(a.data, b.data), (a, b), bwd)


def linear(x, w, b=None):
    """x[..., k] @ w[k, m] (+ b[m])."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: {x.shape} incompatible with weight {w.shape}")
    data = x.data @ w.data
    if b is not None:
        data = data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(out):
        def run(g):
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.shape[-1])
            _acc(x, (g2 @ w.data.T).reshape(x.shape))
            _acc(w, x2.T @ g2)
            if b is not None:
                _acc(b, g2.sum(axis=0))

        return run

    return _result(data, parents, bwd)


def softmax(x, axis=-1):
    """Max-subtracted softmax; rows sum to one for any finite input."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(out):
        def run(g):
            y = out.data
            _acc(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

        return run

    return _result(data, (x,), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] != beta.shape[-1]:
        raise ShapeError(
            f"layer_norm: feature extent {x.shape[-1]} vs "
            f"gamma {gamma.shape} / beta {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def bwd(out):
        def run(g):
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _acc(x, inv * (dxhat - m1 - xhat * m2))
            red = tuple(range(g.ndim - 1))
            _acc(gamma, (g * xhat).sum(axis=red))
            _acc(beta, g.sum(axis=red))

        return run

    return _result(data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# Spatial ops


@functools.lru_cache(maxsize=256)
def _resize_matrix(n_in, n_out):
    """Dense bilinear interpolation map [n_out, n_in], align_corners=False."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def _upsample_matrix(n, dtype):
    return _resize_matrix(n, 2 * n).astype(dtype)


def bilinear_upsample_x2(x):
    """x2 bilinear upsampling of [N, C, H, W], align_corners=False."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample_x2: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    mh = _upsample_matrix(h, x.dtype)
    mw = _upsample_matrix(w, x.dtype)
    data = np.matmul(np.matmul(mh, x.data), mw.T)

    def bwd(out):
        def run(g):
            _acc(x, np.matmul(np.matmul(mh.T, g), mw))

        return run

    return _result(data, (x,), bwd)


def _im2col(xp, k, stride, ho, wo):
    """[N, Cin, Hp, Wp] -> [N, Cin*k*k, Ho*Wo] patch matrix."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N, Cin, Ho, Wo, k, k]
    n, cin = xp.shape[:2]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, cin * k * k, ho * wo)
    return np.ascontiguousarray(cols)


def conv2d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of [N, Cin, H, W] with [Cout, Cin, k, k]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d operands, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {w.shape}")
    if cin != cin_w:
        raise ShapeError(
            f"conv2d: input channels {x.shape} do not match weight {w.shape}"
        )
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(cout, cin * k * k)
    data = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    if b is not None:
        data = data + b.data.reshape(1, cout, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(out):
        def run(g):
            gm = g.reshape(n, cout, ho * wo)
            _acc(w, np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
                 .reshape(w.shape))
            if b is not None:
                _acc(b, g.sum(axis=(0, 2, 3)))
            gcols = np.matmul(wmat.T, gm)  # [N, Cin*k*k, Ho*Wo]
            gcols = gcols.reshape(n, cin, k, k, ho, wo)
            dxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    dxp[:, :, di : di + stride * ho : stride,
                        dj : dj + stride * wo : stride] += gcols[:, :, di, dj]
            if pad:
                dxp = dxp[:, :, pad:-pad, pad:-pad]
            _acc(x, np.ascontiguousarray(dxp))

        return run

    return _result(data, parents, bwd)


def bilinear_resize(arr, out_hw):
    """Plain numpy bilinear resize of [..., H, W]; align_corners=False.

    Not differentiable and not taped; used for constant image inputs.
    """
    oh, ow = out_hw
    h, w = arr.shape[-2:]
    mh = _resize_matrix(h, oh)
    mw = _resize_matrix(w, ow)
    out = np.matmul(np.matmul(mh, arr.astype(np.float64)), mw.T)
    return out.astype(arr.dtype)


# ---------------------------------------------------------------------------
# Serialization: raw little-endian buffer + JSON manifest


def save_tensors(named, buffer_path, manifest_path, extra=None):
    """Write tensors as one raw little-endian buffer plus a JSON sidecar.

    `named` is an iterable of (name, Tensor). The manifest lists name, dtype,
    shape and byte offset per entry; `extra` merges into the manifest root.
    """
    entries = []
    offset = 0
    with open(buffer_path, "wb") as fh:
        for name, t in named:
            arr = t.data if isinstance(t, Tensor) else np.asarray(t)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            entries.append(
                {
                    "name": name,
                    "dtype": _DTYPE_NAMES[arr.dtype],
                    "shape": list(arr.shape),
                    "byte_offset": offset,
                }
            )
            fh.write(raw)
            offset += len(raw)
    manifest = {"format": "vidseg-tensors-v1", "tensors": entries}
    if extra:
        manifest.update(extra)
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_tensors(buffer_path, manifest_path):
    """Read back a save_tensors() pair as {name: np.ndarray}."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    with open(buffer_path, "rb") as fh:
        raw = fh.read()
    out = {}
    for e in manifest["tensors"]:
        dt = np.dtype(_NAME_DTYPES[e["dtype"]]).newbyteorder("<")
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(
            raw, dtype=dt, count=count, offset=e["byte_offset"]
        ).astype(_NAME_DTYPES[e["dtype"]])
        out[e["name"]] = arr.reshape(e["shape"])
    return out, manifest
