"""Rotating convolution on scalar inputs.

Only the canonical filter bank is stored.  For each forward pass it is
resampled at ``R`` orientations ``360 * r / R`` (r = 0..R-1) and every
orientation is convolved with the input, giving an orientation stack of
dims (n, filters, R, h, w).

Filter rotation is a fixed linear map on the ``m x m`` grid (bilinear
inverse mapping, restricted to the inscribed disk), so it is kept as a
dense ``m*m x m*m`` operator.  The backward pass applies its transpose.  At
multiples of 90 degrees the operator is a permutation and the transpose is
rotation by the negated angle.
"""

from __future__ import annotations

import functools

import numpy as np

from .tensor import ShapeError, bilinear_taps, check_tensor4, conv2d_backward, conv2d_ref, rotation_sample_points


def circular_mask(m: int) -> np.ndarray:
    """Cells of an ``m x m`` grid whose centre lies within ``m / 2`` of the grid centre."""
    if m < 1 or m % 2 == 0:
        raise ValueError(f"filter size must be a positive odd integer, got {m}")
    off = np.arange(m) - (m - 1) / 2.0
    return off[:, None] ** 2 + off[None, :] ** 2 <= (m / 2.0) ** 2


def orientation_angles(n_orientations: int) -> np.ndarray:
    """Angles in degrees, ``360 * r / R`` for r = 0..R-1."""
    if n_orientations < 1:
        raise ValueError(f"need at least one orientation, got {n_orientations}")
    return 360.0 * np.arange(n_orientations) / n_orientations


@functools.lru_cache(maxsize=512)
def rotation_operator(m: int, angle: float) -> np.ndarray:
    """Matrix mapping a flattened canonical ``m x m`` filter to its rotated version.

    Each output cell samples the canonical grid at its back-rotated position.
    Source cells outside the disk read as zero and the output is re-masked.
    """
    mask = circular_mask(m).ravel()
    rows, cols = rotation_sample_points(m, m, angle)
    idx, wts = bilinear_taps(rows.ravel(), cols.ravel(), m, m)
    wts = np.where(mask[idx], wts, 0.0)
    op = np.zeros((m * m, m * m))
    np.add.at(op, (np.repeat(np.arange(m * m), 4), idx.ravel()), wts.ravel())
    op[~mask] = 0.0
    op.setflags(write=False)
    return op


def _operators(m: int, angles, dtype) -> np.ndarray:
    return np.stack([rotation_operator(m, float(a)) for a in angles]).astype(dtype)


def rotate_filter(w: np.ndarray, angle: float) -> np.ndarray:
    """Rotate filters (any leading dims, trailing ``m x m``) counter-clockwise by ``angle`` degrees."""
    w = np.asarray(w)
    m = w.shape[-1]
    op = rotation_operator(m, float(angle) % 360.0).astype(w.dtype)
    flat = w.reshape(w.shape[:-2] + (m * m,))
    return (flat @ op.T).reshape(w.shape)


def rotate_filter_adjoint(g: np.ndarray, angle: float) -> np.ndarray:
    """Transpose of :func:`rotate_filter`, used to pull gradients back to the canonical filter."""
    g = np.asarray(g)
    m = g.shape[-1]
    op = rotation_operator(m, float(angle) % 360.0).astype(g.dtype)
    return (g.reshape(g.shape[:-2] + (m * m,)) @ op).reshape(g.shape)


def rotated_bank(w: np.ndarray, n_orientations: int) -> np.ndarray:
    """All rotated copies of a (filters, depth, m, m) bank, dims (filters, R, depth, m, m)."""
    f, c, m, _ = w.shape
    ops = _operators(m, orientation_angles(n_orientations), w.dtype)
    out = np.einsum("rpq,fcq->frcp", ops, w.reshape(f, c, m * m), optimize=True)
    return out.reshape(f, n_orientations, c, m, m)


def align_gradients(grad_bank: np.ndarray, n_orientations: int, literal: bool = False) -> np.ndarray:
    """Sum per-orientation filter gradients back onto the canonical filter.

    ``literal`` rotates each gradient by the negated angle instead of applying
    the exact transpose; the two agree at multiples of 90 degrees.
    """
    f, r, c, m, _ = grad_bank.shape
    angles = orientation_angles(n_orientations)
    flat = grad_bank.reshape(f, r, c, m * m)
    if literal:
        ops = _operators(m, -angles, grad_bank.dtype)
        out = np.einsum("rqp,frcp->fcq", ops, flat, optimize=True)
    else:
        ops = _operators(m, angles, grad_bank.dtype)
        out = np.einsum("rpq,frcp->fcq", ops, flat, optimize=True)
    return out.reshape(f, c, m, m)


def _check_filters(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> None:
    if w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"filter bank {w.shape} does not match input {x.shape}")
    if np.shape(b) != (w.shape[0],):
        raise ShapeError(f"bias shape {np.shape(b)} does not match filter bank {w.shape}")


def rotconv_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, n_orientations: int, pad: int | None = None
) -> np.ndarray:
    """Convolve ``x`` with ``R`` rotated copies of each canonical filter.

    Returns the orientation stack (n, filters, R, h', w'); slice ``r`` is the
    convolution with the filter rotated by ``360 * r / R`` plus the shared bias.
    """
    x = check_tensor4(x)
    w = np.asarray(w, dtype=x.dtype)
    _check_filters(x, w, b)
    f, c, m, _ = w.shape
    bank = rotated_bank(w, n_orientations).reshape(f * n_orientations, c, m, m)
    bias = np.repeat(np.asarray(b, dtype=x.dtype), n_orientations)
    y = conv2d_ref(x, bank, bias, pad)
    return y.reshape(x.shape[0], f, n_orientations, y.shape[2], y.shape[3])


def rotconv_backward(
    x: np.ndarray,
    w: np.ndarray,
    n_orientations: int,
    grad_y: np.ndarray,
    pad: int | None = None,
    literal_alignment: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`rotconv_forward` for input, canonical filters and shared bias."""
    f, c, m, _ = w.shape
    n = x.shape[0]
    if grad_y.ndim != 5 or grad_y.shape[:3] != (n, f, n_orientations):
        raise ShapeError(f"gradient dims {grad_y.shape} do not match stack ({n}, {f}, {n_orientations}, h, w)")
    bank = rotated_bank(w, n_orientations).reshape(f * n_orientations, c, m, m)
    g = grad_y.reshape(n, f * n_orientations, grad_y.shape[3], grad_y.shape[4])
    grad_x, grad_bank, _ = conv2d_backward(x, bank, g, pad)
    grad_w = align_gradients(grad_bank.reshape(f, n_orientations, c, m, m), n_orientations, literal_alignment)
    grad_b = grad_y.sum(axis=(0, 2, 3, 4))
    return grad_x, grad_w, grad_b
