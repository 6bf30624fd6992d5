"""Dense float32 tensors with reverse-mode autodiff on an explicit tape.

Design rules, fixed for the whole package:

* storage is float32; every dot accumulation (matmul, conv, bias/loss sums)
  runs in float64 and rounds once on the way out, which keeps central
  finite-difference checks at h=1e-3 stable;
* the tape is an append-only list of nodes, replayed strictly in reverse
  construction order by :func:`backward`;
* gradients accumulate additively across fan-out into per-tensor float32
  buffers allocated at tensor construction;
* no broadcasting beyond bias-add over the batch dimension.

Ops record onto the innermost active ``with Tape():`` block.  Without an
active tape they run in inference mode: no recording, no saved context, and
outputs never require gradients.  A tape must stay on a single thread.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InputError, ShapeError, UsageError


class Tensor:
    """Dense n-dimensional float32 array, optionally carrying a gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op: str, inputs: tuple, out: Tensor, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Append-only op record; construction order is the topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise UsageError("tape stack corrupted: exited a non-innermost tape")

    def _record(self, op: str, inputs: tuple, out: Tensor, backward_fn: Callable):
        out.requires_grad = True
        out._ensure_grad()
        self.nodes.append(_Node(op, inputs, out, backward_fn))


_TAPE_STACK: list[Tape] = []


def _active_tape(*tensors: Tensor) -> Optional[Tape]:
    """The innermost tape, if any input wants gradients."""
    if not _TAPE_STACK:
        return None
    if any(t.requires_grad for t in tensors):
        return _TAPE_STACK[-1]
    return None


def backward(tape: Tape, loss: Tensor) -> None:
    """Fill gradient buffers for everything reachable from ``loss``.

    The loss must be a scalar produced on this tape.  Nodes replay in exact
    reverse construction order; fan-out gradients accumulate additively.
    """
    if loss.data.shape != ():
        raise UsageError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not any(node.out is loss for node in tape.nodes):
        raise UsageError("loss tensor was not produced on this tape")
    loss._ensure_grad()
    loss.grad[...] = 1.0
    for node in reversed(tape.nodes):
        node.backward_fn(node.out.grad)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(
        (a.data.astype(np.float64) @ b.data.astype(np.float64)).astype(np.float32)
    )
    tape = _active_tape(a, b)
    if tape is not None:

        def bw(g: np.ndarray) -> None:
            g64 = g.astype(np.float64)
            if a.requires_grad:
                a.grad += (g64 @ b.data.astype(np.float64).T).astype(np.float32)
            if b.requires_grad:
                b.grad += (a.data.astype(np.float64).T @ g64).astype(np.float32)

        tape._record("matmul", (a, b), out, bw)
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    # (n, oh, ow, c, kh, kw) -> rows are receptive fields; pure data movement,
    # so the float32 copy is exact.
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * oh * ow, c * kh * kw
    )
    return cols, oh, ow, xp.shape


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with FCkk kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects NCHW input and FCkk kernel, got {x.data.shape} "
            f"and {kernel.data.shape}"
        )
    if stride < 1:
        raise UsageError("conv2d stride must be >= 1")
    n, c, h, w = x.data.shape
    f, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c}, kernel expects {ck}"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if kh > h + 2 * padding or kw > w + 2 * padding or oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d output dims non-positive for input {x.data.shape}, "
            f"kernel {kernel.data.shape}, stride {stride}, padding {padding}"
        )
    cols, oh, ow, padded_shape = _im2col(x.data, kh, kw, stride, padding)
    w_flat = kernel.data.reshape(f, c * kh * kw)
    out_mat = cols.astype(np.float64) @ w_flat.astype(np.float64).T
    out = Tensor(
        np.ascontiguousarray(
            out_mat.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
        ).astype(np.float32)
    )
    tape = _active_tape(x, kernel)
    if tape is not None:

        def bw(g: np.ndarray) -> None:
            g_mat = (
                np.ascontiguousarray(g.transpose(0, 2, 3, 1))
                .reshape(n * oh * ow, f)
                .astype(np.float64)
            )
            if kernel.requires_grad:
                kernel.grad += (
                    (g_mat.T @ cols.astype(np.float64))
                    .reshape(f, c, kh, kw)
                    .astype(np.float32)
                )
            if x.requires_grad:
                dcols = (g_mat @ w_flat.astype(np.float64)).astype(np.float32)
                dwin = dcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
                dxp = np.zeros(padded_shape, dtype=np.float32)
                for di in range(kh):
                    for dj in range(kw):
                        dxp[
                            :,
                            :,
                            di : di + stride * oh : stride,
                            dj : dj + stride * ow : stride,
                        ] += dwin[:, :, :, :, di, dj]
                if padding:
                    dxp = dxp[:, :, padding : padding + h, padding : padding + w]
                x.grad += dxp

        tape._record("conv2d", (x, kernel), out, bw)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    tape = _active_tape(x)
    if tape is not None:
        # subgradient at exactly 0 is 0
        mask = x.data > 0.0

        def bw(g: np.ndarray) -> None:
            x.grad += g * mask

        tape._record("relu", (x,), out, bw)
    return out


def max_pool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    """Windowed max over NCHW; ties route gradient to the first maximum in
    row-major window scan order."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d expects NCHW input, got {x.data.shape}")
    if stride is None:
        stride = k
    if k < 1 or stride < 1:
        raise UsageError("max_pool2d window and stride must be >= 1")
    n, c, h, w = x.data.shape
    if k > h or k > w:
        raise ShapeError(
            f"max_pool2d window {k} larger than input spatial dims {(h, w)}"
        )
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s0, s1, s2, s3 = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(n, c, oh, ow, k, k),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    flat_win = windows.reshape(n, c, oh, ow, k * k)
    tape = _active_tape(x)
    if tape is None:
        return Tensor(flat_win.max(axis=4))
    argmax = flat_win.argmax(axis=4)
    out = Tensor(np.take_along_axis(flat_win, argmax[..., None], axis=4)[..., 0])

    def bw(g: np.ndarray) -> None:
        ohs, ows = np.meshgrid(
            np.arange(oh) * stride, np.arange(ow) * stride, indexing="ij"
        )
        rows = ohs[None, None] + argmax // k
        colsi = ows[None, None] + argmax % k
        ns = np.arange(n)[:, None, None, None]
        cs = np.arange(c)[None, :, None, None]
        flat_idx = ((ns * c + cs) * h + rows) * w + colsi
        acc = x._ensure_grad().reshape(-1)
        np.add.at(acc, flat_idx.reshape(-1), g.reshape(-1))

    tape._record("max_pool2d", (x,), out, bw)
    return out


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the batch dimension (row-major)."""
    n = x.data.shape[0]
    out = Tensor(x.data.reshape(n, -1))
    tape = _active_tape(x)
    if tape is not None:
        shape = x.data.shape

        def bw(g: np.ndarray) -> None:
            x.grad += g.reshape(shape)

        tape._record("flatten", (x,), out, bw)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)
    tape = _active_tape(a, b)
    if tape is not None:

        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g
            if b.requires_grad:
                b.grad += g

        tape._record("add", (a, b), out, bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)
    tape = _active_tape(a, b)
    if tape is not None:

        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g * b.data
            if b.requires_grad:
                b.grad += g * a.data

        tape._record("mul", (a, b), out, bw)
    return out


def scale(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data * np.float32(s))
    tape = _active_tape(x)
    if tape is not None:

        def bw(g: np.ndarray) -> None:
            x.grad += g * np.float32(s)

        tape._record("scale", (x,), out, bw)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Bias add over the batch dimension: (N,K)+(K,) or (N,C,H,W)+(C,)."""
    if x.data.ndim == 2 and b.data.shape == (x.data.shape[1],):
        out = Tensor(x.data + b.data)
        reduce_axes: tuple = (0,)
    elif x.data.ndim == 4 and b.data.shape == (x.data.shape[1],):
        out = Tensor(x.data + b.data[None, :, None, None])
        reduce_axes = (0, 2, 3)
    else:
        raise ShapeError(
            f"add_bias shape mismatch: {x.data.shape} with bias {b.data.shape}"
        )
    tape = _active_tape(x, b)
    if tape is not None:

        def bw(g: np.ndarray) -> None:
            if x.requires_grad:
                x.grad += g
            if b.requires_grad:
                b.grad += g.sum(axis=reduce_axes, dtype=np.float64).astype(np.float32)

        tape._record("add_bias", (x, b), out, bw)
    return out


def add_constant(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant array (e.g. injected noise); gradient passes through
    unchanged, the constant never appears in backward."""
    if c.shape != x.data.shape:
        raise ShapeError(
            f"add_constant shape mismatch: {x.data.shape} vs constant {c.shape}"
        )
    out = Tensor(x.data + c.astype(np.float32, copy=False))
    tape = _active_tape(x)
    if tape is not None:

        def bw(g: np.ndarray) -> None:
            x.grad += g

        tape._record("add_constant", (x,), out, bw)
    return out


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements to a scalar (float64 accumulation)."""
    out = Tensor(np.float32(x.data.sum(dtype=np.float64)))
    tape = _active_tape(x)
    if tape is not None:

        def bw(g: np.ndarray) -> None:
            x.grad += g  # scalar broadcast

        tape._record("sum", (x,), out, bw)
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Computed with max-subtraction in float64; gradient is
    (softmax - one_hot) / N.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"expected (N, K) logits, got {logits.data.shape}")
    n, k = logits.data.shape
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        bad = lab[(lab < 0) | (lab >= k)][0]
        raise InputError(f"label {bad} outside [0, {k})")
    z = logits.data.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    denom = expz.sum(axis=1, keepdims=True)
    log_probs = z - np.log(denom)
    loss64 = -log_probs[np.arange(n), lab].mean()
    if not np.isfinite(loss64):
        raise InputError("non-finite loss from non-finite logits")
    out = Tensor(np.float32(loss64))
    tape = _active_tape(logits)
    if tape is not None:
        probs = expz / denom

        def bw(g: np.ndarray) -> None:
            d = probs.copy()
            d[np.arange(n), lab] -= 1.0
            logits.grad += (float(g) / n * d).astype(np.float32)

        tape._record("softmax_cross_entropy", (logits,), out, bw)
    return out
