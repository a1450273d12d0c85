"""Dense (n, c, h, w) array primitives.

Everything here operates on plain ``numpy.ndarray`` objects laid out as
(batch, channel, height, width).  These are the trusted building blocks:
the baseline CNN is assembled from them directly and the rotation
equivariant layers are checked against them.

Geometric conventions used across the package:

* Image coordinates have the row axis pointing down.  Geometric vectors are
  expressed as ``(x, y)`` with ``x`` along increasing column and ``y``
  pointing *up* (decreasing row).
* A positive rotation angle is counter-clockwise as displayed.
* Bilinear upsampling samples at half-pixel centres (no corner alignment).
* Every max operation breaks ties towards the smallest linear index.
"""

from __future__ import annotations

import contextlib
import functools
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32


class ShapeError(ValueError):
    """Raised when array shapes do not satisfy an operation's contract."""


def get_dtype() -> type:
    """Return the floating point type used for newly created arrays."""
    return _dtype


def set_precision(name: str) -> None:
    """Switch the package-wide default precision (``"float32"`` or ``"float64"``)."""
    global _dtype
    try:
        _dtype = _PRECISIONS[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}") from None


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the default precision."""
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_dtype"] = previous


def check_tensor4(x: np.ndarray, name: str = "x") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must have dims (n, c, h, w), got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(_dtype)
    return x


def cos_sin_deg(angle: float) -> tuple[float, float]:
    """Cosine and sine of an angle in degrees, exact at multiples of 90."""
    a = float(angle) % 360.0
    if a % 90.0 == 0.0:
        return {0: (1.0, 0.0), 1: (0.0, 1.0), 2: (-1.0, 0.0), 3: (0.0, -1.0)}[int(a // 90)]
    rad = np.deg2rad(a)
    return float(np.cos(rad)), float(np.sin(rad))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, m: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - m + 1, w + 2 * pad - m + 1
    windows = sliding_window_view(x, (m, m), axis=(2, 3))  # n, c, ho, wo, m, m
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * m * m)
    return cols, ho, wo


def _check_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> None:
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"filter bank must have dims (filters, depth, m, m), got {w.shape}")
    if w.shape[2] % 2 == 0:
        raise ShapeError(f"filter size must be odd, got {w.shape[2]}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(
            f"filter depth {w.shape[1]} does not match input channels: "
            f"input shape {x.shape}, filter shape {w.shape}"
        )
    if b is not None and np.shape(b) != (w.shape[0],):
        raise ShapeError(f"bias shape {np.shape(b)} does not match filter shape {w.shape}")


def conv2d_ref(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, pad: int | None = None) -> np.ndarray:
    """Sliding-window dot product of ``x`` with every filter in ``w`` plus bias.

    ``w`` has dims (filters, depth, m, m).  ``pad`` defaults to ``(m - 1) // 2``
    which keeps the spatial size unchanged.  This is cross-correlation, the
    usual CNN meaning of "convolution".
    """
    x = check_tensor4(x)
    w = np.asarray(w)
    _check_conv(x, w, b)
    f, _, m, _ = w.shape
    if pad is None:
        pad = (m - 1) // 2
    cols, ho, wo = _im2col(x, m, pad)
    out = cols @ w.reshape(f, -1).T.astype(cols.dtype, copy=False)
    if b is not None:
        out += np.asarray(b, dtype=out.dtype)
    return out.reshape(x.shape[0], ho, wo, f).transpose(0, 3, 1, 2)


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, grad: np.ndarray, pad: int | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_ref` with respect to input, filters and bias."""
    f, c, m, _ = w.shape
    if pad is None:
        pad = (m - 1) // 2
    cols, ho, wo = _im2col(x, m, pad)
    if grad.shape != (x.shape[0], f, ho, wo):
        raise ShapeError(f"gradient shape {grad.shape} does not match output shape {(x.shape[0], f, ho, wo)}")
    g2 = grad.transpose(0, 2, 3, 1).reshape(-1, f)
    grad_w = (g2.T @ cols).reshape(w.shape)
    grad_b = g2.sum(axis=0)
    # full correlation of the output gradient with the flipped, transposed bank
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_x = conv2d_ref(grad, w_t, None, pad=m - 1 - pad)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# pooling, resampling, activations
# ---------------------------------------------------------------------------


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max-pooling with stride 2.

    Returns the pooled array and the winning position inside each window as
    a row-major index in ``0..3`` (ties resolve to the smallest index).
    """
    x = check_tensor4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max-pooling needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def maxpool2x2_backward(grad: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Route each pooled gradient to the window position recorded in ``idx``."""
    if grad.shape != idx.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match pool indices {idx.shape}")
    n, c, h, w = grad.shape
    win = np.zeros((n, c, h, w, 4), dtype=grad.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), grad[..., None], axis=-1)
    return win.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h, 2 * w)


@functools.lru_cache(maxsize=64)
def _upsample_matrix(n: int, factor: int) -> np.ndarray:
    pos = (np.arange(n * factor) + 0.5) / factor - 0.5
    pos = np.clip(pos, 0.0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    mat = np.zeros((n * factor, n))
    rows = np.arange(n * factor)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    mat.setflags(write=False)
    return mat


def upsample_bilinear(x: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsampling by an integer factor with half-pixel centres and edge clamping."""
    x = check_tensor4(x)
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsampling factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        return x.copy()
    a = _upsample_matrix(x.shape[2], factor).astype(x.dtype)
    b = _upsample_matrix(x.shape[3], factor).astype(x.dtype)
    return a @ x @ b.T


def upsample_bilinear_backward(grad: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return grad.copy()
    h, w = grad.shape[2] // factor, grad.shape[3] // factor
    a = _upsample_matrix(h, factor).astype(grad.dtype)
    b = _upsample_matrix(w, factor).astype(grad.dtype)
    return a.T @ grad @ b


def bilinear_taps(rows: np.ndarray, cols: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat source indices and weights of the four bilinear neighbours of each sample.

    Neighbours outside the ``h`` x ``w`` grid get weight zero (their index is
    clipped so it can still be used for gathering).
    """
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    fr = rows - r0
    fc = cols - c0
    idx, wts = [], []
    for dr, dc, wt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        idx.append(np.clip(rr, 0, h - 1) * w + np.clip(cc, 0, w - 1))
        wts.append(np.where(inside, wt, 0.0))
    return np.stack(idx, axis=-1), np.stack(wts, axis=-1)


def rotation_sample_points(h: int, w: int, angle: float) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) positions read by each output pixel of a rotation about the centre."""
    cos_a, sin_a = cos_sin_deg(angle)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    gx, gy = cc - cx, cy - rr
    # inverse mapping: rotate output coordinates back by -angle
    sx = cos_a * gx + sin_a * gy
    sy = -sin_a * gx + cos_a * gy
    return cy - sy, sx + cx


def rotate_image(x: np.ndarray, angle: float, order: str = "bilinear", fill: float = 0.0) -> np.ndarray:
    """Rotate every (h, w) plane of ``x`` counter-clockwise by ``angle`` degrees.

    Multiples of 90 degrees on square planes (and 180 on any plane) are exact
    index permutations.  Other angles resample with ``order`` (``"bilinear"``
    or ``"nearest"``); samples outside the source read as ``fill``.
    """
    x = np.asarray(x)
    h, w = x.shape[-2:]
    a = float(angle) % 360.0
    if a % 90.0 == 0.0 and (h == w or a % 180.0 == 0.0):
        return np.rot90(x, int(a // 90), axes=(-2, -1)).copy()
    rows, cols = rotation_sample_points(h, w, a)
    flat = x.reshape(x.shape[:-2] + (h * w,))
    if order == "nearest":
        rn = np.floor(rows + 0.5).astype(np.intp)
        cn = np.floor(cols + 0.5).astype(np.intp)
        inside = (rn >= 0) & (rn < h) & (cn >= 0) & (cn < w)
        src = np.clip(rn, 0, h - 1) * w + np.clip(cn, 0, w - 1)
        out = np.where(inside, flat[..., src], fill)
        return out.astype(x.dtype, copy=False)
    if order != "bilinear":
        raise ValueError(f"unknown interpolation order {order!r}")
    idx, wts = bilinear_taps(rows, cols, h, w)
    out = np.zeros(x.shape, dtype=np.result_type(x.dtype, np.float32))
    for k in range(4):
        out += flat[..., idx[..., k]] * wts[..., k].astype(out.dtype)
    if fill:
        coverage = wts.sum(axis=-1)
        out += fill * (1.0 - coverage)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad, 0)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the channel axis."""
    x = check_tensor4(x)
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)
