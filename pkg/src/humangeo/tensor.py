"""Dense tensor operations with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects. Forward and backward ops keep
the dtype of their inputs, so the same code runs in float32 for training and
in float64 for gradient checks. Shapes are never broadcast implicitly; any
mismatch raises :class:`~humangeo.errors.ShapeError`.

Images follow the NCHW layout and convolution kernels the OIHW layout.
Convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError, ShapeError, UsageError

DTYPE = np.float32

TENSOR_MAGIC = b"GSTN"
TENSOR_VERSION = 1


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=DTYPE)


def _check_rank(x: np.ndarray, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{what}: expected rank {rank}, got shape {x.shape}")


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """2-D cross-correlation of an NCHW batch with OIHW kernels plus bias."""
    _check_rank(x, 4, "conv2d input")
    _check_rank(kernels, 4, "conv2d kernels")
    _check_rank(bias, 1, "conv2d bias")
    if stride < 1 or pad < 0:
        raise UsageError(f"conv2d: stride must be >= 1 and pad >= 0, got stride={stride} pad={pad}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernels.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernels expect {ci}")
    if bias.shape[0] != o:
        raise ShapeError(f"conv2d: bias length {bias.shape[0]} != {o} output channels")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: padded input {h + 2 * pad}x{w + 2 * pad} smaller than kernel {kh}x{kw}")
    oh, ow = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, kw, stride, oh, ow).reshape(n, c * kh * kw, oh * ow)
    out = np.matmul(kernels.reshape(o, -1), cols)
    out += bias.reshape(1, o, 1)
    return out.reshape(n, o, oh, ow)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, kernels: np.ndarray, stride: int = 1, pad: int = 0):
    """Gradients of :func:`conv2d` with respect to input, kernels and bias."""
    n, c, h, w = x.shape
    o, _, kh, kw = kernels.shape
    oh, ow = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    if grad_out.shape != (n, o, oh, ow):
        raise ShapeError(f"conv2d backward: grad shape {grad_out.shape} != output shape {(n, o, oh, ow)}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, kw, stride, oh, ow).reshape(n, c * kh * kw, oh * ow)
    g = grad_out.reshape(n, o, oh * ow)
    d_kernels = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(kernels.shape)
    d_bias = g.sum(axis=(0, 2))
    dcols = np.matmul(kernels.reshape(o, -1).T, g).reshape(n, c, kh, kw, oh, ow)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
    dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
    return np.ascontiguousarray(dx), d_kernels.astype(x.dtype, copy=False), d_bias.astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# elementwise / pooling / dense


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    if grad_out.shape != x.shape:
        raise ShapeError(f"relu backward: grad shape {grad_out.shape} != input shape {x.shape}")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def _pool_windows(x: np.ndarray, window: int, stride: int):
    _check_rank(x, 4, "maxpool2d input")
    if window < 1 or stride < 1:
        raise UsageError(f"maxpool2d: window and stride must be >= 1, got {window}, {stride}")
    n, c, h, w = x.shape
    if h < window or w < window:
        raise ShapeError(f"maxpool2d: window {window} larger than input {h}x{w}")
    oh, ow = _out_size(h, window, stride, 0), _out_size(w, window, stride, 0)
    stack = np.empty((n, c, window * window, oh, ow), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            stack[:, :, i * window + j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return stack, oh, ow


def maxpool2d(x: np.ndarray, window: int, stride: int, return_indices: bool = False):
    """Max pooling over square windows.

    With ``return_indices`` the flat within-window argmax (row-major, first
    maximum wins) is returned as well; :func:`maxpool2d_backward` needs it.
    """
    stack, _, _ = _pool_windows(x, window, stride)
    idx = np.argmax(stack, axis=2)
    out = np.take_along_axis(stack, idx[:, :, None], axis=2)[:, :, 0]
    if return_indices:
        return out, idx
    return out


def maxpool2d_backward(grad_out: np.ndarray, indices: np.ndarray, input_shape, window: int, stride: int) -> np.ndarray:
    if grad_out.shape != indices.shape:
        raise ShapeError(f"maxpool2d backward: grad shape {grad_out.shape} != pooled shape {indices.shape}")
    oh, ow = grad_out.shape[2:]
    dx = np.zeros(input_shape, dtype=grad_out.dtype)
    for i in range(window):
        for j in range(window):
            hit = indices == i * window + j
            dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += np.where(hit, grad_out, 0)
    return dx


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Fully connected layer: ``x @ weight.T + bias``."""
    _check_rank(x, 2, "linear input")
    _check_rank(weight, 2, "linear weight")
    _check_rank(bias, 1, "linear bias")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[1]} != weight inner dim {weight.shape[1]}")
    if bias.shape[0] != weight.shape[0]:
        raise ShapeError(f"linear: bias length {bias.shape[0]} != {weight.shape[0]} outputs")
    return x @ weight.T + bias


def linear_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray):
    if grad_out.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"linear backward: grad shape {grad_out.shape} != {(x.shape[0], weight.shape[0])}")
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    _check_rank(logits, 2, "softmax input")
    if logits.shape[1] < 1:
        raise ShapeError("softmax: need at least one class")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_backward(grad_out: np.ndarray, probs: np.ndarray) -> np.ndarray:
    if grad_out.shape != probs.shape:
        raise ShapeError(f"softmax backward: grad shape {grad_out.shape} != {probs.shape}")
    return probs * (grad_out - (grad_out * probs).sum(axis=1, keepdims=True))


def dropout(x: np.ndarray, p: float, rng: np.random.Generator | None, train: bool):
    """Inverted dropout. Returns ``(output, mask)``; mask is ``None`` in eval mode.

    Kept units are scaled by ``1 / (1 - p)`` so evaluation is the identity.
    """
    if not 0 <= p < 1:
        raise UsageError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x, None
    if rng is None:
        raise UsageError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


# ---------------------------------------------------------------------------
# bilinear resampling (half-pixel centers, edge clamped)


def _axis_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize over the last two axes (any leading shape)."""
    if x.ndim < 2:
        raise ShapeError(f"resize_bilinear: need at least 2 dims, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise UsageError(f"resize_bilinear: target must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    r0, r1, fr = _axis_weights(h, out_h)
    c0, c1, fc = _axis_weights(w, out_w)
    fr = fr.astype(x.dtype)[:, None]
    fc = fc.astype(x.dtype)[None, :]
    top = x[..., r0, :]
    bot = x[..., r1, :]
    rows = top + (bot - top) * fr
    left = rows[..., c0]
    right = rows[..., c1]
    out = left + (right - left) * fc
    # the lerp form can overshoot by an ulp; keep the range guarantee exact
    return np.clip(out, x.min(), x.max()).astype(x.dtype, copy=False)


def bilinear_upsample(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Upsample an ``h x w`` map to ``out_h x out_w``."""
    _check_rank(m, 2, "bilinear_upsample map")
    h, w = m.shape
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample: target {out_h}x{out_w} smaller than map {h}x{w}")
    return resize_bilinear(m, out_h, out_w)


def resize_bilinear_backward(grad_out: np.ndarray, input_shape) -> np.ndarray:
    h, w = input_shape[-2:]
    out_h, out_w = grad_out.shape[-2:]
    if (h, w) == (out_h, out_w):
        return grad_out.copy()
    r0, r1, fr = _axis_weights(h, out_h)
    c0, c1, fc = _axis_weights(w, out_w)
    lead = grad_out.shape[:-2]
    g_rows = np.zeros(lead + (out_h, w), dtype=grad_out.dtype)
    for j in range(out_w):
        g_rows[..., c0[j]] += grad_out[..., j] * (1 - fc[j])
        g_rows[..., c1[j]] += grad_out[..., j] * fc[j]
    dx = np.zeros(lead + (h, w), dtype=grad_out.dtype)
    for i in range(out_h):
        dx[..., r0[i], :] += g_rows[..., i, :] * (1 - fr[i])
        dx[..., r1[i], :] += g_rows[..., i, :] * fr[i]
    return dx


# ---------------------------------------------------------------------------
# generic backward dispatch

_BACKWARD = {
    "conv2d": (("input", "kernels", "stride", "pad"),
               lambda g, s: conv2d_backward(g, s["input"], s["kernels"], s["stride"], s["pad"])),
    "relu": (("input",), lambda g, s: (relu_backward(g, s["input"]),)),
    "maxpool2d": (("indices", "input_shape", "window", "stride"),
                  lambda g, s: (maxpool2d_backward(g, s["indices"], s["input_shape"], s["window"], s["stride"]),)),
    "linear": (("input", "weight"), lambda g, s: linear_backward(g, s["input"], s["weight"])),
    "softmax": (("output",), lambda g, s: (softmax_backward(g, s["output"]),)),
    "dropout": (("mask",), lambda g, s: (dropout_backward(g, s["mask"]),)),
    "resize_bilinear": (("input_shape",), lambda g, s: (resize_bilinear_backward(g, s["input_shape"]),)),
}


def backward(op: str, saved: dict, grad_out: np.ndarray) -> tuple:
    """Gradients of ``op`` for each of its differentiable inputs.

    ``saved`` carries whatever the forward pass stored (see ``_BACKWARD`` for
    the keys each op needs). Returns a tuple in the op's argument order, e.g.
    ``(d_input, d_kernels, d_bias)`` for conv2d.
    """
    try:
        keys, fn = _BACKWARD[op]
    except KeyError:
        raise UsageError(f"no backward rule for op {op!r}") from None
    missing = [k for k in keys if k not in saved]
    if missing:
        raise UsageError(f"backward({op!r}): missing saved context {missing}")
    return fn(grad_out, saved)


# ---------------------------------------------------------------------------
# GSTN binary format: magic, u8 version, u8 rank, u32 dims, f32 payload (all LE)


def write_tensor(fp: BinaryIO, x: np.ndarray) -> None:
    x = np.asarray(x)
    if x.ndim < 1 or x.ndim > 255:
        raise ShapeError(f"cannot serialize tensor of rank {x.ndim}")
    if any(d < 1 for d in x.shape):
        raise ShapeError(f"tensor dimensions must be >= 1, got {x.shape}")
    fp.write(TENSOR_MAGIC)
    fp.write(struct.pack("<BB", TENSOR_VERSION, x.ndim))
    fp.write(struct.pack(f"<{x.ndim}I", *x.shape))
    fp.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def _read_exact(fp: BinaryIO, n: int, what: str) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor data while reading {what}")
    return buf


def read_tensor(fp: BinaryIO) -> np.ndarray:
    magic = _read_exact(fp, 4, "magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<BB", _read_exact(fp, 2, "header"))
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if rank < 1:
        raise FormatError("tensor rank must be >= 1")
    shape = struct.unpack(f"<{rank}I", _read_exact(fp, 4 * rank, "dims"))
    if any(d < 1 for d in shape):
        raise FormatError(f"tensor dimensions must be >= 1, got {shape}")
    count = int(np.prod(shape))
    payload = _read_exact(fp, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(shape)


def save_tensor(path, x: np.ndarray) -> None:
    with open(path, "wb") as fp:
        write_tensor(fp, x)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fp:
        x = read_tensor(fp)
        if fp.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor")
    return x
