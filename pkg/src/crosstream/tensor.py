"""Minimal reverse-mode autodiff engine over dense float arrays.

Activations use the (batch, channel, time, height, width) layout, row-major.
Storage is float32 by default; gradient checking replays graphs in float64,
so every op preserves the dtype of its inputs. All reductions run in a fixed
order, making outputs and gradients bit-reproducible for identical inputs.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """An operand shape (or dtype) violates an operation's contract."""


_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that suppresses graph construction (thread-local)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """N-d float array with shape metadata and an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        arr = np.ascontiguousarray(arr)
        if arr.size == 0:
            raise ShapeError("tensor extents must be positive")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """Same values, no graph; gradient never flows past this point."""
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Reverse-mode pass from a scalar root; accumulates into .grad."""
        if self.data.size != 1:
            raise ShapeError("backward requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed dtypes: {dt.name} vs {t.dtype.name}")
    return dt


def _triple(value) -> tuple[int, int, int]:
    t = tuple(int(v) for v in value)
    if len(t) != 3:
        raise ShapeError(f"expected a triple, got {value!r}")
    return t


_DIM_NAMES = ("time", "height", "width")


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """3-d cross-correlation over (T, H, W) with zero padding.

    x: (N, Cin, T, H, W); weight: (Cout, Cin, kt, kh, kw); bias: (Cout,).
    """
    _check_same_dtype(x, weight, bias)
    if x.data.ndim != 5:
        raise ShapeError(f"conv3d input must be 5-d, got {x.data.ndim}-d")
    if weight.data.ndim != 5:
        raise ShapeError(f"conv3d weight must be 5-d, got {weight.data.ndim}-d")
    n, cin, t, h, w = x.shape
    cout, wcin, kt, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv3d: input has {cin} channels but weight expects {wcin} (dim 1)")
    if bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({cout},)")
    st = _triple(stride)
    pad = _triple(padding)
    if min(st) < 1:
        raise ShapeError(f"conv3d: stride components must be >= 1, got {st}")
    if min(pad) < 0:
        raise ShapeError(f"conv3d: padding components must be >= 0, got {pad}")
    kernel = (kt, kh, kw)
    in_ext = (t, h, w)
    out_ext = []
    for axis in range(3):
        padded = in_ext[axis] + 2 * pad[axis]
        if kernel[axis] > padded:
            raise ShapeError(
                f"conv3d: kernel extent {kernel[axis]} exceeds padded input "
                f"{padded} in {_DIM_NAMES[axis]} dimension"
            )
        out = (padded - kernel[axis]) // st[axis] + 1
        if out < 1:
            raise ShapeError(f"conv3d: zero-sized output in {_DIM_NAMES[axis]} dimension")
        out_ext.append(out)
    tq, hq, wq = out_ext

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1]), (pad[2], pad[2])))
    windows = sliding_window_view(xp, kernel, axis=(2, 3, 4))[:, :, :: st[0], :: st[1], :: st[2]]
    # windows: (N, Cin, T', H', W', kt, kh, kw)
    y = np.tensordot(windows, weight.data, axes=((1, 5, 6, 7), (1, 2, 3, 4)))
    y = np.moveaxis(y, 4, 1) + bias.data[None, :, None, None, None]

    def backward(g: np.ndarray):
        gb = g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.tensordot(g, windows, axes=((0, 2, 3, 4), (0, 2, 3, 4)))
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(g, weight.data, axes=((1,), (0,)))
            gcols = np.moveaxis(gcols, 4, 1)  # (N, Cin, T', H', W', kt, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kt):
                for j in range(kh):
                    for k in range(kw):
                        gxp[
                            :,
                            :,
                            i : i + st[0] * tq : st[0],
                            j : j + st[1] * hq : st[1],
                            k : k + st[2] * wq : st[2],
                        ] += gcols[..., i, j, k]
            gx = np.ascontiguousarray(
                gxp[:, :, pad[0] : pad[0] + t, pad[1] : pad[1] + h, pad[2] : pad[2] + w]
            )
        return gx, gw, gb

    return _node(y, (x, weight, bias), backward)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    mask = x.data > 0  # gradient is 0 at exactly 0

    def backward(g: np.ndarray):
        return (g * mask,)

    return _node(y, (x,), backward)


def maxpool3d(x: Tensor, window, stride=None) -> Tensor:
    """Per-window maximum; gradient goes to the first max in row-major scan order."""
    if x.data.ndim != 5:
        raise ShapeError(f"maxpool3d input must be 5-d, got {x.data.ndim}-d")
    win = _triple(window)
    st = _triple(stride) if stride is not None else win
    n, c, t, h, w = x.shape
    in_ext = (t, h, w)
    for axis in range(3):
        if win[axis] > in_ext[axis]:
            raise ShapeError(
                f"maxpool3d: window {win[axis]} exceeds input extent "
                f"{in_ext[axis]} in {_DIM_NAMES[axis]} dimension"
            )
    windows = sliding_window_view(x.data, win, axis=(2, 3, 4))[:, :, :: st[0], :: st[1], :: st[2]]
    tq, hq, wq = windows.shape[2:5]
    flat = windows.reshape(n, c, tq, hq, wq, -1)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        ii, jj, kk = np.unravel_index(idx, win)
        at = (np.arange(tq) * st[0])[None, None, :, None, None] + ii
        ah = (np.arange(hq) * st[1])[None, None, None, :, None] + jj
        aw = (np.arange(wq) * st[2])[None, None, None, None, :] + kk
        if st == win:  # non-overlapping: every input cell feeds at most one window
            gx = np.zeros_like(x.data)
            ni = np.arange(n)[:, None, None, None, None]
            ci = np.arange(c)[None, :, None, None, None]
            gx[ni, ci, at, ah, aw] = g
            return (gx,)
        gx = np.zeros(x.data.size, dtype=x.dtype)
        ni, ci = np.broadcast_arrays(
            np.arange(n)[:, None, None, None, None], np.arange(c)[None, :, None, None, None]
        )
        lin = (((np.broadcast_to(ni, g.shape) * c + np.broadcast_to(ci, g.shape)) * t + at) * h + ah) * w + aw
        np.add.at(gx, lin.ravel(), g.ravel())
        return (gx.reshape(x.shape),)

    return _node(np.ascontiguousarray(y), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over (T, H, W): (N, C, T, H, W) -> (N, C)."""
    if x.data.ndim != 5:
        raise ShapeError(f"global_avg_pool input must be 5-d, got {x.data.ndim}-d")
    n, c, t, h, w = x.shape
    y = x.data.mean(axis=(2, 3, 4))

    def backward(g: np.ndarray):
        gx = np.empty_like(x.data)
        gx[...] = (g / (t * h * w))[:, :, None, None, None]
        return (gx,)

    return _node(y, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (N, Din) @ (Dout, Din).T + (Dout,)."""
    _check_same_dtype(x, weight, bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("linear expects 2-d input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[1]} != weight dim {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    y = x.data @ weight.data.T + bias.data

    def backward(g: np.ndarray):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _node(y, (x, weight, bias), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of (a - b)**2; detach a frozen side before calling."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    y = np.mean(d * d)

    def backward(g: np.ndarray):
        ga = d * (2.0 * g / d.size)
        return ga, -ga if b.requires_grad else None

    return _node(y, (a, b), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean of -log softmax(logits)[label]; also returns the probability rows.

    Uses max-subtraction for stability. labels: int array of shape (N,).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects 2-d logits, got {logits.data.ndim}-d")
    lab = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if lab.shape != (n,):
        raise ShapeError(f"labels shape {lab.shape} != ({n},)")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise ValueError(f"label out of range [0, {c}): {int(lab.min())}..{int(lab.max())}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    nll = np.log(s[:, 0]) - z[np.arange(n), lab]
    y = np.asarray(nll.mean(), dtype=logits.dtype)

    def backward(g: np.ndarray):
        gl = probs.copy()
        gl[np.arange(n), lab] -= 1.0
        gl *= g / n
        return (gl,)

    return _node(y, (logits,), backward), probs.copy()


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g: np.ndarray):
        return g.copy(), g.copy()

    return _node(a.data + b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g: np.ndarray):
        return (g * s,)

    return _node(a.data * s, (a,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(v) for v in shape)

    def backward(g: np.ndarray):
        return (g.reshape(x.shape),)

    return _node(x.data.reshape(shape), (x,), backward)


def moveaxis(x: Tensor, src: int, dst: int) -> Tensor:
    def backward(g: np.ndarray):
        return (np.ascontiguousarray(np.moveaxis(g, dst, src)),)

    return _node(np.ascontiguousarray(np.moveaxis(x.data, src, dst)), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    _check_same_dtype(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i in range(len(sizes)):
            slicer[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(np.ascontiguousarray(g[tuple(slicer)]))
        return tuple(outs)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)
