"""Forward primitives and their backward rules.

Broadcasting is limited to tensor-with-scalar; everything else needs
explicit reshapes so each backward rule stays easy to audit.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, active_tape, as_tensor


def _emit(op, inputs, out_data, backward) -> Tensor:
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    tape = active_tape()
    if needs_grad and tape is not None:
        tape.record(op, inputs, out, backward)
    return out


def _check_same(op, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _scalar_pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    a_s, b_s = a.size == 1 and a.data.ndim == 0, b.size == 1 and b.data.ndim == 0
    return a, b, a_s, b_s


def _reduce_to(g: np.ndarray, scalar: bool) -> np.ndarray:
    return np.asarray(g.sum()) if scalar else g


def add(a, b) -> Tensor:
    a, b, a_s, b_s = _scalar_pair(a, b)
    if not (a_s or b_s):
        _check_same("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_reduce_to(g, a_s), _reduce_to(g, b_s)))


def sub(a, b) -> Tensor:
    a, b, a_s, b_s = _scalar_pair(a, b)
    if not (a_s or b_s):
        _check_same("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_reduce_to(g, a_s), _reduce_to(-g, b_s)))


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b, a_s, b_s = _scalar_pair(a, b)
    if not (a_s or b_s):
        _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_reduce_to(g * bd, a_s), _reduce_to(g * ad, b_s)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``b`` (shape ``(C,)``) along axis 1 of ``x``."""
    if b.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: shapes {x.shape} and {b.shape} do not match")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    axes = (0,) + tuple(range(2, x.data.ndim))
    return _emit("bias_add", (x, b), x.data + b.data.reshape(view),
                 lambda g: (g, g.sum(axis=axes)))


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()),
                 lambda g: (np.full(shape, float(g)),))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _emit("relu", (x,), np.where(on, x.data, 0.0), lambda g: (g * on,))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    src = x.shape
    return _emit("reshape", (x,), y, lambda g: (g.reshape(src),))


def concat(xs, axis: int = 1) -> Tensor:
    """Concatenate along the channel axis (axis 1 by default)."""
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: no inputs")
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or other[:axis] + other[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ShapeError(f"concat: shapes {tuple(ref)} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _emit("concat", tuple(xs), np.concatenate([t.data for t in xs], axis=axis),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1, zero-padded ("same") convolution with an odd square kernel.

    ``x`` is ``(N, Cin, H, W)``, ``w`` is ``(Cout, Cin, k, k)`` with k in {1, 3}.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w or kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    k = kh
    cols = _im2col(x.data, k)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, h, wd, cout).transpose(0, 3, 1, 2)
    inputs = (x, w) if b is None else (x, w, b)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {cout} output channels")
        out = out + b.data.reshape(1, -1, 1, 1)

    def backward(g):
        gf = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gf.T @ cols).reshape(w.shape)
        gcols = (gf @ wmat).reshape(n, h, wd, cin, k, k)
        p = k // 2
        gxp = np.zeros((n, cin, h + 2 * p, wd + 2 * p))
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + h, j:j + wd] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + wd]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _emit("conv2d", inputs, np.ascontiguousarray(out), backward)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first maximum."""
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"max_pool2d: need (N, C, even H, even W), got {x.shape}")
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _emit("max_pool2d", (x,), out, backward)


def upsample2d(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by 2 in both spatial axes."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2d: need (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _emit("upsample2d", (x,), out, backward)
