"""Finite-difference verification of every backward rule.

Each suite builds a small random instance in float64, projects the layer
output onto fixed random coefficients to get a scalar, and compares the
analytic gradient of that scalar with central differences.  Coordinates
whose perturbation by ``10 * eps`` flips a discrete decision (a max/argmax
winner or a ReLU sign) are excluded, since the function is not
differentiable there.

Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-3)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .network import ModelConfig, build_model
from .orientpool import VectorField, orientation_pool, orientation_pool_backward
from .rotkernel import circular_mask, rotconv_backward, rotconv_forward
from .tensor import conv2d_backward, conv2d_ref, maxpool2x2, precision, softmax_channels
from .train import cross_entropy_loss
from .vecfield import (
    NormStats,
    vec_batchnorm,
    vec_batchnorm_backward,
    vec_maxpool2x2,
    vec_maxpool2x2_backward,
    vec_rotconv,
    vec_rotconv_backward,
    vecconv,
    vecconv_backward,
)

DENOM_FLOOR = 1e-3
DEFAULT_TOLERANCE = 1e-5


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    excluded: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance


def _same_structure(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    evaluate: Callable[[dict], tuple[float, tuple]],
    analytic: dict,
    inputs: dict,
    eps: float = 1e-4,
    rng: np.random.Generator | None = None,
    max_coords: int | None = None,
    masks: dict | None = None,
) -> tuple[float, int, int]:
    """Compare ``analytic`` gradients with central differences of ``evaluate``.

    ``evaluate(inputs)`` returns ``(scalar, structure)`` where ``structure`` is
    a tuple of arrays describing every discrete decision taken.  Inputs are
    perturbed in place and restored.  ``max_coords`` samples that many
    coordinates per input instead of checking all of them.

    Returns ``(max relative error, coordinates checked, coordinates excluded)``.
    """
    masks = masks or {}
    _, base = evaluate(inputs)
    worst, checked, excluded = 0.0, 0, 0
    for name, arr in inputs.items():
        coords = list(np.ndindex(arr.shape))
        if name in masks:
            keep = np.broadcast_to(masks[name], arr.shape)
            coords = [c for c in coords if keep[c]]
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for idx in coords:
            old = arr[idx]
            arr[idx] = old + 10 * eps
            _, s_hi = evaluate(inputs)
            arr[idx] = old - 10 * eps
            _, s_lo = evaluate(inputs)
            if not (_same_structure(base, s_hi) and _same_structure(base, s_lo)):
                arr[idx] = old
                excluded += 1
                continue
            arr[idx] = old + eps
            f_hi, _ = evaluate(inputs)
            arr[idx] = old - eps
            f_lo, _ = evaluate(inputs)
            arr[idx] = old
            numeric = (f_hi - f_lo) / (2 * eps)
            a = float(analytic[name][idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), DENOM_FLOOR)
            worst = max(worst, rel)
            checked += 1
    return worst, checked, excluded


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


def _disk(m):
    return circular_mask(m).astype(float)


def check_conv2d(rng):
    x, w, b = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    G = rng.normal(size=(2, 3, 6, 6))
    inputs = {"x": x, "w": w, "b": b}

    def ev(p):
        return float((G * conv2d_ref(p["x"], p["w"], p["b"])).sum()), ()

    gx, gw, gb = conv2d_backward(x, w, G)
    return grad_check(ev, {"x": gx, "w": gw, "b": gb}, inputs)


def check_rotconv(rng, m=3, R=4, d=1):
    disk = _disk(m)
    x = rng.normal(size=(1, d, 8, 8))
    w = rng.normal(size=(1, d, m, m)) * disk
    b = rng.normal(size=1)
    G = rng.normal(size=(1, 1, R, 8, 8))
    inputs = {"x": x, "w": w, "b": b}

    def ev(p):
        return float((G * rotconv_forward(p["x"], p["w"], p["b"], R)).sum()), ()

    gx, gw, gb = rotconv_backward(x, w, R, G)
    return grad_check(ev, {"x": gx, "w": gw, "b": gb}, inputs, masks={"w": disk.astype(bool)})


def check_orientation_pool(rng, R=4):
    disk = _disk(3)
    x = rng.normal(size=(2, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3)) * disk
    b = rng.normal(size=3) * 0.1
    Gu, Gv = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(2, 3, 6, 6))
    inputs = {"x": x, "w": w, "b": b}

    def ev(p):
        polar, z = orientation_pool(rotconv_forward(p["x"], p["w"], p["b"], R))
        return float((Gu * z.u + Gv * z.v).sum()), (polar.argmax, polar.rho > 0)

    polar, _ = orientation_pool(rotconv_forward(x, w, b, R))
    gy = orientation_pool_backward(Gu, Gv, polar)
    gx, gw, gb = rotconv_backward(x, w, R, gy)
    return grad_check(ev, {"x": gx, "w": gw, "b": gb}, inputs, masks={"w": disk.astype(bool)})


def check_vecconv(rng):
    u, v = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(2, 2, 6, 6))
    wu, wv, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    G = rng.normal(size=(2, 3, 6, 6))
    inputs = {"u": u, "v": v, "w_u": wu, "w_v": wv, "b": b}

    def ev(p):
        return float((G * vecconv(VectorField(p["u"], p["v"]), p["w_u"], p["w_v"], p["b"])).sum()), ()

    gz, gwu, gwv, gb = vecconv_backward(VectorField(u, v), wu, wv, G)
    return grad_check(ev, {"u": gz.u, "v": gz.v, "w_u": gwu, "w_v": gwv, "b": gb}, inputs)


def check_vec_rotconv(rng, m=3, R=8):
    disk = _disk(m)
    u, v = rng.normal(size=(1, 2, 7, 7)), rng.normal(size=(1, 2, 7, 7))
    wu, wv = rng.normal(size=(2, 2, m, m)) * disk, rng.normal(size=(2, 2, m, m)) * disk
    b = rng.normal(size=2)
    G = rng.normal(size=(1, 2, R, 7, 7))
    inputs = {"u": u, "v": v, "w_u": wu, "w_v": wv, "b": b}

    def ev(p):
        return float((G * vec_rotconv(VectorField(p["u"], p["v"]), p["w_u"], p["w_v"], p["b"], R)).sum()), ()

    gz, gwu, gwv, gb = vec_rotconv_backward(VectorField(u, v), wu, wv, R, G)
    dmask = disk.astype(bool)
    return grad_check(
        ev, {"u": gz.u, "v": gz.v, "w_u": gwu, "w_v": gwv, "b": gb}, inputs, masks={"w_u": dmask, "w_v": dmask}
    )


def check_vec_maxpool(rng):
    u, v = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(2, 3, 6, 6))
    Gu, Gv = rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(2, 3, 3, 3))
    inputs = {"u": u, "v": v}

    def ev(p):
        z, idx = vec_maxpool2x2(VectorField(p["u"], p["v"]))
        return float((Gu * z.u + Gv * z.v).sum()), (idx,)

    _, idx = vec_maxpool2x2(VectorField(u, v))
    g = vec_maxpool2x2_backward(VectorField(Gu, Gv), idx)
    return grad_check(ev, {"u": g.u, "v": g.v}, inputs)


def check_vec_batchnorm(rng):
    u, v = rng.normal(size=(3, 2, 4, 4)), rng.normal(size=(3, 2, 4, 4))
    gamma = rng.uniform(0.5, 1.5, size=2)
    Gu, Gv = rng.normal(size=u.shape), rng.normal(size=u.shape)
    inputs = {"u": u, "v": v, "gamma": gamma}

    def ev(p):
        out, _ = vec_batchnorm(VectorField(p["u"], p["v"]), p["gamma"], NormStats(np.ones(2)), train=True)
        return float((Gu * out.u + Gv * out.v).sum()), ()

    _, cache = vec_batchnorm(VectorField(u, v), gamma, NormStats(np.ones(2)), train=True)
    g, ggamma = vec_batchnorm_backward(VectorField(Gu, Gv), cache)
    return grad_check(ev, {"u": g.u, "v": g.v, "gamma": ggamma}, inputs)


def check_loss(rng):
    logits = rng.normal(size=(2, 3, 2, 2))
    labels = rng.integers(0, 3, size=(2, 2, 2))
    labels[0, 0, 0] = 255
    inputs = {"logits": logits}

    def ev(p):
        loss, _ = cross_entropy_loss(softmax_channels(p["logits"]), labels)
        return loss, ()

    _, grad = cross_entropy_loss(softmax_channels(logits), labels)
    return grad_check(ev, {"logits": grad}, inputs)


def check_micronet(rng, R=4):
    """rotating conv -> orientation pool -> vector BN -> vector max-pool -> vector rotating conv -> pool."""
    disk = _disk(3)
    x = rng.normal(size=(2, 2, 8, 8))
    w1 = rng.normal(size=(3, 2, 3, 3)) * disk
    b1 = rng.normal(size=3) * 0.1
    gamma = rng.uniform(0.5, 1.5, size=3)
    wu, wv = rng.normal(size=(2, 3, 3, 3)) * disk, rng.normal(size=(2, 3, 3, 3)) * disk
    b2 = rng.normal(size=2) * 0.1
    Gu, Gv = rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(2, 2, 4, 4))
    inputs = {"x": x, "w1": w1, "b1": b1, "gamma": gamma, "w_u": wu, "w_v": wv, "b2": b2}

    def forward(p):
        y1 = rotconv_forward(p["x"], p["w1"], p["b1"], R)
        pol1, z1 = orientation_pool(y1)
        zn, bn = vec_batchnorm(z1, p["gamma"], NormStats(np.ones(3)), train=True)
        zp, idx = vec_maxpool2x2(zn)
        y2 = vec_rotconv(zp, p["w_u"], p["w_v"], p["b2"], R)
        pol2, z2 = orientation_pool(y2)
        return (pol1, bn, zp, idx, pol2, z2)

    def ev(p):
        pol1, _, _, idx, pol2, z2 = forward(p)
        value = float((Gu * z2.u + Gv * z2.v).sum())
        return value, (pol1.argmax, pol1.rho > 0, idx, pol2.argmax, pol2.rho > 0)

    pol1, bn, zp, idx, pol2, _ = forward(inputs)
    gy2 = orientation_pool_backward(Gu, Gv, pol2)
    gzp, gwu, gwv, gb2 = vec_rotconv_backward(zp, wu, wv, R, gy2)
    gzn = vec_maxpool2x2_backward(gzp, idx)
    gz1, ggamma = vec_batchnorm_backward(gzn, bn)
    gy1 = orientation_pool_backward(gz1.u, gz1.v, pol1)
    gx, gw1, gb1 = rotconv_backward(x, w1, R, gy1)
    analytic = {"x": gx, "w1": gw1, "b1": gb1, "gamma": ggamma, "w_u": gwu, "w_v": gwv, "b2": gb2}
    dmask = disk.astype(bool)
    return grad_check(ev, analytic, inputs, masks={"w1": dmask, "w_u": dmask, "w_v": dmask})


def check_network(rng, variant="roteqnet", coords=6):
    """Sampled coordinates of a whole hypercolumn network (64x64 input, float64)."""
    cfg = ModelConfig(nf=1, n_orientations=4, n_classes=3, in_channels=2, variant=variant, mlp_widths=[6, 5, 3])
    model = build_model(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    for name, p in model.params.items():
        if name.endswith(".b"):
            p += 0.1 * rng.normal(size=p.shape)
    x = rng.normal(size=(2, 2, 64, 64))
    labels = rng.integers(0, 3, size=(2, 64, 64))
    buffers = {k: v.copy() for k, v in model.buffers.items()}

    def run(train_inputs):
        for k, v in buffers.items():
            model.buffers[k][...] = v
        probs = model.forward(train_inputs, train=True)
        structure = _model_structure(model)
        return probs, structure

    def ev(p):
        probs, structure = run(p["x"])
        model._cache = None
        return cross_entropy_loss(probs, labels)[0], structure

    probs, _ = run(x)
    _, grad = cross_entropy_loss(probs, labels)
    gx = model.backward(grad)
    analytic = dict(model.grads, x=gx)
    inputs = dict(model.params, x=x)
    # parameters are perturbed in place inside model.params, which the forward reads directly
    return grad_check(ev, analytic, inputs, rng=rng, max_coords=coords, masks=model.masks)


def _model_structure(model) -> tuple:
    cache = model._cache
    parts = []
    for blk in cache["blocks"]:
        if "polar" in blk:
            parts += [blk["polar"].argmax, blk["polar"].rho > 0]
        if "pre_relu" in blk:
            parts.append(blk["pre_relu"] > 0)
        if "pool" in blk:
            parts.append(blk["pool"])
    parts += [h > 0 for h in cache["head_in"][1:]]
    return tuple(parts)


def _grid_rotconv(rng):
    worst, checked, excluded = 0.0, 0, 0
    for m in (3, 7):
        for R in (1, 4, 8):
            for d in (1, 3):
                w, c, e = check_rotconv(rng, m, R, d)
                worst, checked, excluded = max(worst, w), checked + c, excluded + e
    return worst, checked, excluded


SUITES: dict[str, tuple[Callable, float]] = {
    "conv2d_ref": (check_conv2d, 1e-7),
    "rotconv": (_grid_rotconv, DEFAULT_TOLERANCE),
    "orientation_pool": (check_orientation_pool, DEFAULT_TOLERANCE),
    "vecconv": (check_vecconv, DEFAULT_TOLERANCE),
    "vec_rotconv": (check_vec_rotconv, DEFAULT_TOLERANCE),
    "vec_maxpool": (check_vec_maxpool, DEFAULT_TOLERANCE),
    "vec_batchnorm": (check_vec_batchnorm, DEFAULT_TOLERANCE),
    "loss": (check_loss, DEFAULT_TOLERANCE),
    "micronet": (check_micronet, DEFAULT_TOLERANCE),
    "network": (check_network, DEFAULT_TOLERANCE),
    "network_baseline": (lambda rng: check_network(rng, "baseline"), DEFAULT_TOLERANCE),
}


def run_suite(name: str, seeds=range(5)) -> GradCheckResult:
    """Run one named suite over several seeds in float64."""
    fn, tol = SUITES[name]
    worst, checked, excluded = 0.0, 0, 0
    with precision("float64"):
        for seed in seeds:
            w, c, e = fn(np.random.default_rng(seed))
            worst, checked, excluded = max(worst, w), checked + c, excluded + e
    return GradCheckResult(name, worst, checked, excluded, tol)
