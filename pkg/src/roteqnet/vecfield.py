"""Operations on vector-field feature maps.

A vector filter is a pair of scalar banks ``(w_u, w_v)`` of dims
(filters, input fields, m, m).  Convolving a field with it sums the two
component-wise convolutions, which is the same as a scalar convolution on
the channel-stacked field ``[u..., v...]`` with the stacked bank
``[w_u, w_v]``.

Rotating a vector filter resamples both components spatially *and* rotates
each weight vector by the same angle.  Without the second step, layers
after the first would not be rotation equivariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .orientpool import VectorField
from .rotkernel import align_gradients, orientation_angles, rotate_filter, rotated_bank
from .tensor import (
    ShapeError,
    conv2d_backward,
    conv2d_ref,
    cos_sin_deg,
    maxpool2x2_backward,
    upsample_bilinear,
    upsample_bilinear_backward,
)


def _check_vector_filter(z: VectorField, w_u: np.ndarray, w_v: np.ndarray, b: np.ndarray) -> None:
    if w_u.shape != w_v.shape:
        raise ShapeError(f"w_u {w_u.shape} and w_v {w_v.shape} must match")
    if w_u.ndim != 4 or w_u.shape[1] != z.shape[1]:
        raise ShapeError(f"vector filter {w_u.shape} does not match field {z.shape}")
    if np.shape(b) != (w_u.shape[0],):
        raise ShapeError(f"bias shape {np.shape(b)} does not match filter bank {w_u.shape}")


def vecconv(z: VectorField, w_u: np.ndarray, w_v: np.ndarray, b: np.ndarray, pad: int | None = None) -> np.ndarray:
    """Scalar response ``z_u * w_u + z_v * w_v + b`` for every vector filter."""
    _check_vector_filter(z, w_u, w_v, b)
    return conv2d_ref(z.u, w_u, b, pad) + conv2d_ref(z.v, w_v, None, pad)


def vecconv_backward(
    z: VectorField, w_u: np.ndarray, w_v: np.ndarray, grad: np.ndarray, pad: int | None = None
) -> tuple[VectorField, np.ndarray, np.ndarray, np.ndarray]:
    gu, gwu, gb = conv2d_backward(z.u, w_u, grad, pad)
    gv, gwv, _ = conv2d_backward(z.v, w_v, grad, pad)
    return VectorField(gu, gv), gwu, gwv, gb


def rotate_vector_filter(w_u: np.ndarray, w_v: np.ndarray, angle: float) -> tuple[np.ndarray, np.ndarray]:
    """Spatially rotate both components, then rotate each weight vector by ``angle``."""
    c, s = cos_sin_deg(angle)
    ru, rv = rotate_filter(w_u, angle), rotate_filter(w_v, angle)
    return c * ru - s * rv, s * ru + c * rv


def vec_rotated_bank(w_u: np.ndarray, w_v: np.ndarray, n_orientations: int) -> np.ndarray:
    """Stacked rotated vector filters, dims (filters, R, 2 * fields, m, m)."""
    ru = rotated_bank(w_u, n_orientations)
    rv = rotated_bank(w_v, n_orientations)
    cs = np.array([cos_sin_deg(a) for a in orientation_angles(n_orientations)], dtype=w_u.dtype)
    c = cs[:, 0][None, :, None, None, None]
    s = cs[:, 1][None, :, None, None, None]
    return np.concatenate([c * ru - s * rv, s * ru + c * rv], axis=2)


def vec_rotconv(
    z: VectorField, w_u: np.ndarray, w_v: np.ndarray, b: np.ndarray, n_orientations: int, pad: int | None = None
) -> np.ndarray:
    """Rotating convolution of a vector field; returns the orientation stack (n, filters, R, h, w)."""
    _check_vector_filter(z, w_u, w_v, b)
    f, c, m, _ = w_u.shape
    bank = vec_rotated_bank(w_u.astype(z.dtype), w_v.astype(z.dtype), n_orientations)
    bias = np.repeat(np.asarray(b, dtype=z.dtype), n_orientations)
    y = conv2d_ref(z.stacked(), bank.reshape(f * n_orientations, 2 * c, m, m), bias, pad)
    return y.reshape(y.shape[0], f, n_orientations, y.shape[2], y.shape[3])


def vec_rotconv_backward(
    z: VectorField,
    w_u: np.ndarray,
    w_v: np.ndarray,
    n_orientations: int,
    grad_y: np.ndarray,
    pad: int | None = None,
    literal_alignment: bool = False,
) -> tuple[VectorField, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`vec_rotconv` for the field, both filter components and the bias."""
    f, c, m, _ = w_u.shape
    n = z.shape[0]
    if grad_y.ndim != 5 or grad_y.shape[:3] != (n, f, n_orientations):
        raise ShapeError(f"gradient dims {grad_y.shape} do not match stack ({n}, {f}, {n_orientations}, h, w)")
    bank = vec_rotated_bank(w_u, w_v, n_orientations).reshape(f * n_orientations, 2 * c, m, m)
    g = grad_y.reshape(n, f * n_orientations, grad_y.shape[3], grad_y.shape[4])
    grad_z, grad_bank, _ = conv2d_backward(z.stacked(), bank, g, pad)
    grad_bank = grad_bank.reshape(f, n_orientations, 2 * c, m, m)
    gu, gv = grad_bank[:, :, :c], grad_bank[:, :, c:]
    cs = np.array([cos_sin_deg(a) for a in orientation_angles(n_orientations)], dtype=grad_y.dtype)
    cr = cs[:, 0][None, :, None, None, None]
    sr = cs[:, 1][None, :, None, None, None]
    # undo the in-place vector rotation, then the spatial one
    grad_wu = align_gradients(cr * gu + sr * gv, n_orientations, literal_alignment)
    grad_wv = align_gradients(-sr * gu + cr * gv, n_orientations, literal_alignment)
    grad_b = grad_y.sum(axis=(0, 2, 3, 4))
    return VectorField.from_stacked(grad_z), grad_wu, grad_wv, grad_b


def vec_maxpool2x2(z: VectorField) -> tuple[VectorField, np.ndarray]:
    """Keep, per 2x2 window, the whole vector with the largest magnitude."""
    n, f, h, w = z.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max-pooling needs even spatial dims, got {h}x{w}")

    def windows(a):
        return a.reshape(n, f, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, f, h // 2, w // 2, 4)

    wu, wv = windows(z.u), windows(z.v)
    idx = (wu * wu + wv * wv).argmax(axis=-1)
    pick = idx[..., None]
    out = VectorField(np.take_along_axis(wu, pick, -1)[..., 0], np.take_along_axis(wv, pick, -1)[..., 0])
    return out, idx.astype(np.int8)


def vec_maxpool2x2_backward(grad: VectorField, idx: np.ndarray) -> VectorField:
    return VectorField(maxpool2x2_backward(grad.u, idx), maxpool2x2_backward(grad.v, idx))


@dataclass
class NormStats:
    """Running magnitude standard deviation per filter, used in inference mode."""

    running_std: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


def vec_batchnorm(
    z: VectorField, gamma: np.ndarray, stats: NormStats, train: bool
) -> tuple[VectorField, tuple]:
    """Scale each field by ``gamma / (std of magnitudes + eps)``.

    No centring is applied, so directions and the non-negative magnitudes
    survive.  In training mode the batch std is used and the running
    estimate in ``stats`` is updated; otherwise the running estimate is used.
    """
    n = z.shape[0]
    if n == 0:
        raise ShapeError("batch normalization needs a non-empty batch")
    if train and n < 2:
        raise ShapeError("batch normalization in training mode needs more than one sample")
    mag = z.magnitude()
    if train:
        mean = mag.mean(axis=(0, 2, 3), keepdims=True)
        std = np.sqrt(((mag - mean) ** 2).mean(axis=(0, 2, 3), keepdims=True))
        stats.running_std[...] = (1 - stats.momentum) * stats.running_std + stats.momentum * std.reshape(-1)
    else:
        mean = None
        std = stats.running_std.reshape(1, -1, 1, 1).astype(z.dtype)
    inv = 1.0 / (std + stats.eps)
    scale = gamma.reshape(1, -1, 1, 1) * inv
    out = VectorField(z.u * scale, z.v * scale)
    return out, (z, mag, mean, std, inv, gamma, train)


def vec_batchnorm_backward(grad: VectorField, cache: tuple) -> tuple[VectorField, np.ndarray]:
    z, mag, mean, std, inv, gamma, train = cache
    g = gamma.reshape(1, -1, 1, 1)
    dot = grad.u * z.u + grad.v * z.v
    grad_gamma = (dot * inv).sum(axis=(0, 2, 3))
    gu = grad.u * g * inv
    gv = grad.v * g * inv
    if train:
        count = mag.shape[0] * mag.shape[2] * mag.shape[3]
        d_std = -(dot * g * inv * inv).sum(axis=(0, 2, 3), keepdims=True)
        safe_std = np.where(std > 0, std, 1.0)
        d_mag = np.where(std > 0, d_std * (mag - mean) / (count * safe_std), 0.0)
        safe_mag = np.where(mag > 0, mag, 1.0)
        coef = np.where(mag > 0, d_mag / safe_mag, 0.0)
        gu = gu + coef * z.u
        gv = gv + coef * z.v
    return VectorField(gu, gv), grad_gamma


def vec_upsample_bilinear(z: VectorField, factor: int) -> VectorField:
    return VectorField(upsample_bilinear(z.u, factor), upsample_bilinear(z.v, factor))


def vec_upsample_bilinear_backward(grad: VectorField, factor: int) -> VectorField:
    return VectorField(upsample_bilinear_backward(grad.u, factor), upsample_bilinear_backward(grad.v, factor))


def vec_dropout(z: VectorField, rate: float, rng: np.random.Generator) -> tuple[VectorField, np.ndarray]:
    """Zero whole vectors with probability ``rate`` (inverted scaling)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = (rng.random(z.shape) >= rate).astype(z.dtype) / (1.0 - rate)
    return VectorField(z.u * keep, z.v * keep), keep
