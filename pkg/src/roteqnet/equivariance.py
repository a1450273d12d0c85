"""Measure how well predictions commute with input rotations.

For an angle ``a`` and input ``x`` the label map of ``rotate(x, a)`` is
compared with ``rotate(labels(x), a)``.  Only pixels inside the central
crop whose rotated source lies fully inside the image are counted.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .network import Model
from .orientpool import VectorField, orientation_pool
from .rotkernel import rotconv_forward
from .tensor import rotate_image, upsample_bilinear


@dataclass
class EquiResult:
    angle: float
    agreement: float
    magnitude_error: float
    field_error: float
    pixels: int


def comparison_mask(h: int, w: int, angle: float, crop: float = 0.8) -> np.ndarray:
    """Boolean (h, w) mask: central ``crop`` fraction that has a complete rotated source."""
    if not 0.0 < crop <= 1.0:
        raise ValueError(f"crop must lie in (0, 1], got {crop}")
    mask = np.zeros((h, w), dtype=bool)
    mh, mw = int(round(h * (1 - crop) / 2)), int(round(w * (1 - crop) / 2))
    mask[mh : h - mh, mw : w - mw] = True
    coverage = rotate_image(np.ones((h, w), dtype=np.float64), angle)
    return mask & (coverage > 1.0 - 1e-9)


def _rotate_field(z: VectorField, angle: float) -> VectorField:
    """Resample a vector field on a rotated grid and rotate every vector."""
    return VectorField(rotate_image(z.u, angle), rotate_image(z.v, angle)).rotated(angle)


def _deep_magnitude(taps, size: int) -> np.ndarray:
    last = taps[-1]
    mag = last.magnitude() if isinstance(last, VectorField) else last
    return upsample_bilinear(mag, size // mag.shape[-1])


def equicheck(
    model: Model,
    images: np.ndarray,
    angles,
    n_orientations: int | None = None,
    crop: float = 0.8,
    batch_size: int = 8,
) -> list[EquiResult]:
    """Equivariance scores of ``model`` over ``images`` (n, c, h, w) for each angle.

    ``agreement`` is the fraction of compared pixels whose argmax labels
    match.  ``magnitude_error`` is the mean absolute difference of the
    deepest block's upsampled feature magnitudes, relative to their mean.
    ``field_error`` does the same for the first block's vector field (scalar
    features for the baseline), comparing vectors rather than magnitudes.
    """
    images = np.asarray(images, dtype=model.dtype)
    if images.ndim != 4 or images.shape[2] != images.shape[3]:
        raise ValueError(f"equicheck needs square (n, c, s, s) inputs, got {images.shape}")
    size = images.shape[-1]

    def run(x):
        probs, taps = model.forward(x, n_orientations=n_orientations, return_taps=True)
        return probs.argmax(axis=1), taps

    base = []
    for i in range(0, len(images), batch_size):
        base.append(run(images[i : i + batch_size]))

    results = []
    for angle in angles:
        mask = comparison_mask(size, size, angle, crop)
        agree = total = 0
        mag_num = mag_den = fld_num = fld_den = 0.0
        for j, i in enumerate(range(0, len(images), batch_size)):
            labels, taps = base[j]
            rot_labels, rot_taps = run(rotate_image(images[i : i + batch_size], angle))
            expected = rotate_image(labels, angle, order="nearest")
            agree += int((rot_labels == expected)[:, mask].sum())
            total += int(mask.sum()) * len(labels)

            exp_mag = rotate_image(_deep_magnitude(taps, size), angle)
            got_mag = _deep_magnitude(rot_taps, size)
            mag_num += float(np.abs(got_mag - exp_mag)[..., mask].sum())
            mag_den += float(np.abs(exp_mag)[..., mask].sum())

            first, rot_first = taps[0], rot_taps[0]
            if isinstance(first, VectorField):
                exp_f = _rotate_field(first, angle)
                diff = np.hypot(rot_first.u - exp_f.u, rot_first.v - exp_f.v)
                ref = exp_f.magnitude()
            else:
                exp_s = rotate_image(first, angle)
                diff, ref = np.abs(rot_first - exp_s), np.abs(exp_s)
            fld_num += float(diff[..., mask].sum())
            fld_den += float(ref[..., mask].sum())
        results.append(
            EquiResult(
                angle=float(angle),
                agreement=agree / total if total else float("nan"),
                magnitude_error=mag_num / mag_den if mag_den else 0.0,
                field_error=fld_num / fld_den if fld_den else 0.0,
                pixels=total,
            )
        )
    return results


def layer_equicheck(x: np.ndarray, w: np.ndarray, b: np.ndarray, n_orientations: int, angle: float, tol: float = 1e-4):
    """Check one rotating convolution followed by orientation pooling.

    Returns ``(agreement, max_error)``: the fraction of magnitude entries
    whose absolute error is below ``tol``, and the largest such error.
    Rotated-in border regions are excluded for non-right angles.
    """
    mag = orientation_pool(rotconv_forward(x, w, b, n_orientations))[1].magnitude()
    rot_mag = orientation_pool(rotconv_forward(rotate_image(x, angle).astype(x.dtype), w, b, n_orientations))[1].magnitude()
    expected = rotate_image(mag, angle)
    mask = comparison_mask(x.shape[-2], x.shape[-1], angle, crop=1.0)
    err = np.abs(rot_mag - expected)[..., mask]
    return float((err < tol).mean()), float(err.max())


def report_csv(results: list[EquiResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["angle", "agreement", "magnitude_error", "field_error", "pixels"])
    for r in results:
        writer.writerow([f"{r.angle:g}", f"{r.agreement:.6f}", f"{r.magnitude_error:.6e}", f"{r.field_error:.6e}", r.pixels])
    return buf.getvalue()
