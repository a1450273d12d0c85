"""Orientation pooling: orientation stack -> vector field.

At every location the maximal response over orientations becomes the
magnitude ``rho`` and its orientation index becomes the angle
``theta = 360 * argmax / R``.  After rectification the pair is stored in
Cartesian form ``(u, v) = relu(rho) * (cos theta, sin theta)``; ``u`` points
along increasing column, ``v`` points up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, cos_sin_deg


@dataclass
class VectorField:
    """Cartesian components of a vector-valued feature map, each (n, filters, h, w)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise ShapeError(f"u and v must have identical dims, got {self.u.shape} and {self.v.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.u.shape

    @property
    def dtype(self):
        return self.u.dtype

    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.u * self.u + self.v * self.v)

    def stacked(self) -> np.ndarray:
        """Channel-stacked (n, 2 * filters, h, w) array, all ``u`` then all ``v``."""
        return np.concatenate([self.u, self.v], axis=1)

    @classmethod
    def from_stacked(cls, z: np.ndarray) -> "VectorField":
        half = z.shape[1] // 2
        return cls(z[:, :half], z[:, half:])

    def rotated(self, angle: float) -> "VectorField":
        """Rotate every vector in place (no spatial resampling)."""
        c, s = cos_sin_deg(angle)
        return VectorField(c * self.u - s * self.v, s * self.u + c * self.v)


@dataclass
class PolarField:
    """Saved state of an orientation pooling: raw maxima, angles and winning indices."""

    rho: np.ndarray
    theta: np.ndarray
    argmax: np.ndarray
    n_orientations: int


def _angle_tables(n_orientations: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    cs = np.array([cos_sin_deg(360.0 * r / n_orientations) for r in range(n_orientations)], dtype=dtype)
    return cs[:, 0], cs[:, 1]


def orientation_pool(y: np.ndarray) -> tuple[PolarField, VectorField]:
    """Pool an orientation stack (n, filters, R, h, w) into a vector field."""
    if y.ndim != 5 or y.shape[2] < 1:
        raise ShapeError(f"orientation stack must have dims (n, filters, R, h, w), got {y.shape}")
    n_orient = y.shape[2]
    arg = y.argmax(axis=2)
    rho = np.take_along_axis(y, arg[:, :, None], axis=2)[:, :, 0]
    theta = (360.0 / n_orient) * arg
    cos_t, sin_t = _angle_tables(n_orient, y.dtype)
    mag = np.maximum(rho, 0)
    field = VectorField(mag * cos_t[arg], mag * sin_t[arg])
    return PolarField(rho, theta, arg, n_orient), field


def orientation_pool_backward(
    grad_u: np.ndarray, grad_v: np.ndarray, saved: PolarField, literal: bool = False
) -> np.ndarray:
    """Route the incoming vector gradient to the winning orientation slice.

    The routed value is the projection of ``(grad_u, grad_v)`` on the unit
    vector at ``theta`` (the exact chain rule).  With ``literal=True`` the
    vector's norm is routed instead, which is always non-negative.
    Locations with ``rho <= 0`` receive nothing.
    """
    if grad_u.shape != saved.rho.shape or grad_v.shape != saved.rho.shape:
        raise ShapeError(f"gradient dims {grad_u.shape}/{grad_v.shape} do not match pooled dims {saved.rho.shape}")
    if literal:
        routed = np.sqrt(grad_u * grad_u + grad_v * grad_v)
    else:
        cos_t, sin_t = _angle_tables(saved.n_orientations, grad_u.dtype)
        routed = grad_u * cos_t[saved.argmax] + grad_v * sin_t[saved.argmax]
    routed = np.where(saved.rho > 0, routed, 0)
    n, f, h, w = saved.rho.shape
    out = np.zeros((n, f, saved.n_orientations, h, w), dtype=grad_u.dtype)
    np.put_along_axis(out, saved.argmax[:, :, None], routed[:, :, None], axis=2)
    return out
