"""Hypercolumn segmentation networks: rotation equivariant and standard CNN.

Both variants share one layout.  There are six convolutional blocks.  The
tap of block ``k`` is upsampled by ``2**k`` to input resolution.  All taps
are concatenated with the raw input and classified per pixel by a three
layer 1x1-convolution MLP, ending in a softmax.

roteqnet block::

    rotating conv (7x7, R orientations) -> orientation pool (ReLU inside)
    -> vector batch norm -> [tap] -> vector 2x2 max-pool -> next block

baseline block::

    conv (7x7) -> ReLU -> batch norm -> [tap] -> 2x2 max-pool -> next block

The roteqnet head sees the magnitude of each vector field.  Magnitudes are
rotation invariant per pixel, so the label map is rotation equivariant.
Feeding raw ``(u, v)`` (``head_features="uv"``) is supported but breaks
that property.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import serialization
from .orientpool import VectorField, orientation_pool, orientation_pool_backward
from .rotkernel import circular_mask, rotconv_backward, rotconv_forward
from .tensor import (
    ShapeError,
    conv2d_backward,
    conv2d_ref,
    get_dtype,
    maxpool2x2,
    maxpool2x2_backward,
    softmax_channels,
    upsample_bilinear,
    upsample_bilinear_backward,
)
from .vecfield import (
    NormStats,
    vec_batchnorm,
    vec_batchnorm_backward,
    vec_maxpool2x2,
    vec_maxpool2x2_backward,
    vec_rotconv,
    vec_rotconv_backward,
)

VARIANTS = ("roteqnet", "baseline")
HEAD_FEATURES = ("magnitude", "uv")
BN_EPS = 1e-5


@dataclass
class ModelConfig:
    nf: int = 2
    n_orientations: int = 8
    n_classes: int = 5
    in_channels: int = 3
    filter_size: int = 7
    layer_multipliers: list[int] = field(default_factory=lambda: [2, 2, 3, 4, 4, 4])
    mlp_widths: list[int] | None = None
    variant: str = "roteqnet"
    head_features: str = "magnitude"
    literal_backward: bool = False
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.mlp_widths is None:
            self.mlp_widths = [50 * self.nf, 50 * self.nf, self.n_classes]
        self.layer_multipliers = [int(k) for k in self.layer_multipliers]
        self.mlp_widths = [int(k) for k in self.mlp_widths]
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.head_features not in HEAD_FEATURES:
            raise ValueError(f"head_features must be one of {HEAD_FEATURES}, got {self.head_features!r}")
        if len(self.layer_multipliers) != 6:
            raise ValueError(f"layer_multipliers needs 6 entries, got {len(self.layer_multipliers)}")
        if not self.mlp_widths or self.mlp_widths[-1] != self.n_classes:
            raise ValueError(f"last mlp width must equal n_classes={self.n_classes}, got {self.mlp_widths}")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ValueError(f"filter_size must be odd, got {self.filter_size}")
        for name in ("nf", "n_orientations", "n_classes", "in_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def filter_counts(self) -> list[int]:
        return [k * self.nf for k in self.layer_multipliers]

    @property
    def hypercolumn_channels(self) -> int:
        per_tap = 2 if (self.variant == "roteqnet" and self.head_features == "uv") else 1
        return per_tap * sum(self.filter_counts) + self.in_channels

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def hypercolumn_concat(features: list, raw: np.ndarray, mode: str = "uv") -> np.ndarray:
    """Concatenate upsampled features and the raw input along channels, raw last.

    Scalar features contribute their channels unchanged.  Vector fields
    contribute ``u`` then ``v`` channels (``mode="uv"``) or their magnitude
    (``mode="magnitude"``).
    """
    parts = []
    size = raw.shape[2:]
    for feat in features:
        if isinstance(feat, VectorField):
            chunk = [feat.u, feat.v] if mode == "uv" else [feat.magnitude()]
        else:
            chunk = [feat]
        for c in chunk:
            if c.shape[0] != raw.shape[0] or c.shape[2:] != size:
                raise ShapeError(f"feature dims {c.shape} do not match raw input {raw.shape}")
        parts.extend(chunk)
    parts.append(raw)
    return np.concatenate(parts, axis=1)


def _xavier(rng: np.random.Generator, shape, fan_in: int, mask=None) -> np.ndarray:
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    if mask is not None:
        w = w * mask
    return w


class Model:
    """Parameters, buffers and the forward/backward passes of one network."""

    def __init__(self, config: ModelConfig, params: dict, buffers: dict, masks: dict):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.masks = masks
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def parameter_count(self) -> int:
        """Number of learnable scalars (cells outside the filter disk excluded)."""
        total = 0
        for name, p in self.params.items():
            mask = self.masks.get(name)
            total += int(np.broadcast_to(mask, p.shape).sum()) if mask is not None else p.size
        return total

    def astype(self, dtype) -> "Model":
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return self

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers, in build order."""
        return list(self.params.items()) + list(self.buffers.items())

    def copy(self) -> "Model":
        return Model(
            dataclasses.replace(self.config),
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.masks,
        )

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4:
            raise ShapeError(f"input must have dims (n, c, h, w), got {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"model expects {self.config.in_channels} input channels, got {x.shape[1]}")
        h, w = x.shape[2:]
        if h % 64 or w % 64:
            need = (-h % 64, -w % 64)
            raise ShapeError(
                f"input spatial dims {h}x{w} must be divisible by 64; pad by {need[0]} rows and "
                f"{need[1]} columns (see pad_to_multiple)"
            )

    # -- forward -----------------------------------------------------------

    def forward(self, x: np.ndarray, train: bool = False, n_orientations: int | None = None, return_taps: bool = False):
        """Per-pixel class probabilities (n, C, h, w).

        ``n_orientations`` overrides the configured R (canonical filters do not
        depend on R).  With ``return_taps`` the block taps are returned too.
        """
        x = np.asarray(x, dtype=self.dtype)
        self.check_input(x)
        cfg = self.config
        R = n_orientations or cfg.n_orientations
        h_in = x.shape[2]
        blocks, taps = [], []
        inp = x
        for k in range(6):
            pre = f"block{k}."
            cache = {"inp": inp}
            if cfg.variant == "roteqnet":
                if k == 0:
                    y = rotconv_forward(inp, self.params[pre + "w"], self.params[pre + "b"], R)
                else:
                    y = vec_rotconv(inp, self.params[pre + "w_u"], self.params[pre + "w_v"], self.params[pre + "b"], R)
                polar, z = orientation_pool(y)
                stats = NormStats(self.buffers[pre + "running_std"], cfg.bn_momentum, BN_EPS)
                z, bn = vec_batchnorm(z, self.params[pre + "gamma"], stats, train)
                cache.update(polar=polar, bn=bn)
                tap = z
                if k < 5:
                    inp, idx = vec_maxpool2x2(z)
                    cache["pool"] = idx
            else:
                a = conv2d_ref(inp, self.params[pre + "w"], self.params[pre + "b"])
                r = np.maximum(a, 0)
                z, bn = self._batchnorm(r, pre, train)
                cache.update(pre_relu=a, bn=bn)
                tap = z
                if k < 5:
                    inp, idx = maxpool2x2(z)
                    cache["pool"] = idx
            blocks.append(cache)
            taps.append(tap)

        ups = []
        for k, tap in enumerate(taps):
            factor = h_in // tap.shape[2]
            if isinstance(tap, VectorField):
                if cfg.head_features == "magnitude":
                    ups.append(upsample_bilinear(tap.magnitude(), factor))
                else:
                    ups.append(VectorField(upsample_bilinear(tap.u, factor), upsample_bilinear(tap.v, factor)))
            else:
                ups.append(upsample_bilinear(tap, factor))
        feat = hypercolumn_concat(ups, x, mode=cfg.head_features)

        head_in = []
        h = feat
        n_layers = len(cfg.mlp_widths)
        for j in range(n_layers):
            head_in.append(h)
            w = self.params[f"head{j}.w"]
            a = np.matmul(w, h.reshape(h.shape[0], h.shape[1], -1)) + self.params[f"head{j}.b"][:, None]
            a = a.reshape(h.shape[0], w.shape[0], h.shape[2], h.shape[3])
            h = np.maximum(a, 0) if j < n_layers - 1 else a
        probs = softmax_channels(h)
        if train:
            self._cache = {"blocks": blocks, "taps": taps, "head_in": head_in, "R": R, "x": x}
        if return_taps:
            return probs, taps
        return probs

    def _batchnorm(self, r: np.ndarray, pre: str, train: bool):
        gamma, beta = self.params[pre + "gamma"], self.params[pre + "beta"]
        if train:
            if r.shape[0] < 2:
                raise ShapeError("batch normalization in training mode needs more than one sample")
            mean = r.mean(axis=(0, 2, 3))
            var = r.var(axis=(0, 2, 3))
            mom = self.config.bn_momentum
            self.buffers[pre + "running_mean"][...] = (1 - mom) * self.buffers[pre + "running_mean"] + mom * mean
            self.buffers[pre + "running_var"][...] = (1 - mom) * self.buffers[pre + "running_var"] + mom * var
        else:
            mean = self.buffers[pre + "running_mean"].astype(r.dtype)
            var = self.buffers[pre + "running_var"].astype(r.dtype)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (r - mean[None, :, None, None]) * inv[None, :, None, None]
        out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        return out, (xhat, inv, train)

    # -- backward ----------------------------------------------------------

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        """Backpropagate a gradient on the pre-softmax logits; fills ``self.grads``.

        Returns the gradient with respect to the network input.
        """
        if self._cache is None:
            raise RuntimeError("backward called without a preceding forward(train=True)")
        cache = self._cache
        cfg = self.config
        grads: dict[str, np.ndarray] = {}
        g = grad_logits
        n_layers = len(cfg.mlp_widths)
        for j in reversed(range(n_layers)):
            h = cache["head_in"][j]
            w = self.params[f"head{j}.w"]
            g3 = g.reshape(g.shape[0], g.shape[1], -1)
            h3 = h.reshape(h.shape[0], h.shape[1], -1)
            grads[f"head{j}.w"] = np.einsum("nop,ncp->oc", g3, h3, optimize=True)
            grads[f"head{j}.b"] = g3.sum(axis=(0, 2))
            gh = np.matmul(w.T, g3).reshape(h.shape)
            if j > 0:
                gh = np.where(h > 0, gh, 0)
            g = gh

        x = cache["x"]
        grad_x = g[:, -cfg.in_channels :].copy()
        offset = 0
        tap_grads = []
        for tap in cache["taps"]:
            factor = x.shape[2] // tap.shape[2]
            if isinstance(tap, VectorField):
                f = tap.shape[1]
                if cfg.head_features == "magnitude":
                    gm = upsample_bilinear_backward(g[:, offset : offset + f], factor)
                    mag = tap.magnitude()
                    safe = np.where(mag > 0, mag, 1.0)
                    coef = np.where(mag > 0, gm / safe, 0.0)
                    tap_grads.append(VectorField(coef * tap.u, coef * tap.v))
                    offset += f
                else:
                    gu = upsample_bilinear_backward(g[:, offset : offset + f], factor)
                    gv = upsample_bilinear_backward(g[:, offset + f : offset + 2 * f], factor)
                    tap_grads.append(VectorField(gu, gv))
                    offset += 2 * f
            else:
                f = tap.shape[1]
                tap_grads.append(upsample_bilinear_backward(g[:, offset : offset + f], factor))
                offset += f

        R = cache["R"]
        carry = None
        for k in reversed(range(6)):
            pre = f"block{k}."
            blk = cache["blocks"][k]
            gz = tap_grads[k]
            if cfg.variant == "roteqnet":
                if carry is not None:
                    back = vec_maxpool2x2_backward(carry, blk["pool"])
                    gz = VectorField(gz.u + back.u, gz.v + back.v)
                gz, grads[pre + "gamma"] = vec_batchnorm_backward(gz, blk["bn"])
                gy = orientation_pool_backward(gz.u, gz.v, blk["polar"], literal=cfg.literal_backward)
                if k == 0:
                    carry, grads[pre + "w"], grads[pre + "b"] = rotconv_backward(
                        blk["inp"], self.params[pre + "w"], R, gy, literal_alignment=cfg.literal_backward
                    )
                else:
                    carry, grads[pre + "w_u"], grads[pre + "w_v"], grads[pre + "b"] = vec_rotconv_backward(
                        blk["inp"],
                        self.params[pre + "w_u"],
                        self.params[pre + "w_v"],
                        R,
                        gy,
                        literal_alignment=cfg.literal_backward,
                    )
            else:
                if carry is not None:
                    gz = gz + maxpool2x2_backward(carry, blk["pool"])
                xhat, inv, train = blk["bn"]
                grads[pre + "gamma"] = (gz * xhat).sum(axis=(0, 2, 3))
                grads[pre + "beta"] = gz.sum(axis=(0, 2, 3))
                gxhat = gz * self.params[pre + "gamma"][None, :, None, None]
                if train:
                    gr = inv[None, :, None, None] * (
                        gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True) - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                    )
                else:
                    gr = gxhat * inv[None, :, None, None]
                ga = np.where(blk["pre_relu"] > 0, gr, 0)
                carry, grads[pre + "w"], grads[pre + "b"] = conv2d_backward(blk["inp"], self.params[pre + "w"], ga)
        grad_x = grad_x + carry
        for name, mask in self.masks.items():
            grads[name] = grads[name] * mask
        self.grads = grads
        self._cache = None
        return grad_x


def build_model(config: ModelConfig, seed: int = 0, dtype=None) -> Model:
    """Allocate and initialise a network (zero-mean normal, std sqrt(2 / fan_in))."""
    config.validate()
    dtype = dtype or get_dtype()
    rng = np.random.default_rng(seed)
    m = config.filter_size
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    masks: dict[str, np.ndarray] = {}
    disk = circular_mask(m)
    n_disk = int(disk.sum())
    prev = config.in_channels
    for k, f in enumerate(config.filter_counts):
        pre = f"block{k}."
        if config.variant == "roteqnet":
            if k == 0:
                params[pre + "w"] = _xavier(rng, (f, prev, m, m), n_disk * prev, disk)
                masks[pre + "w"] = disk
            else:
                fan_in = 2 * n_disk * prev
                params[pre + "w_u"] = _xavier(rng, (f, prev, m, m), fan_in, disk)
                params[pre + "w_v"] = _xavier(rng, (f, prev, m, m), fan_in, disk)
                masks[pre + "w_u"] = disk
                masks[pre + "w_v"] = disk
            params[pre + "b"] = np.zeros(f)
            params[pre + "gamma"] = np.ones(f)
            buffers[pre + "running_std"] = np.ones(f)
        else:
            params[pre + "w"] = _xavier(rng, (f, prev, m, m), m * m * prev)
            params[pre + "b"] = np.zeros(f)
            params[pre + "gamma"] = np.ones(f)
            params[pre + "beta"] = np.zeros(f)
            buffers[pre + "running_mean"] = np.zeros(f)
            buffers[pre + "running_var"] = np.ones(f)
        prev = f
    width = config.hypercolumn_channels
    for j, out in enumerate(config.mlp_widths):
        params[f"head{j}.w"] = _xavier(rng, (out, width), width)
        params[f"head{j}.b"] = np.zeros(out)
        width = out
    params = {k: v.astype(dtype) for k, v in params.items()}
    buffers = {k: v.astype(dtype) for k, v in buffers.items()}
    return Model(config, params, buffers, masks)


def forward_dense(model: Model, x: np.ndarray, n_orientations: int | None = None) -> np.ndarray:
    """Inference-mode class probabilities with the same spatial size as ``x``."""
    return model.forward(x, train=False, n_orientations=n_orientations)


def pad_to_multiple(x: np.ndarray, multiple: int = 64) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad the spatial dims up to the next multiple; returns the array and original size."""
    h, w = x.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if ph or pw:
        pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
        x = np.pad(x, pad, mode="reflect" if (ph < h and pw < w) else "edge")
    return x, (h, w)


def predict_any_size(model: Model, x: np.ndarray, n_orientations: int | None = None) -> np.ndarray:
    """Pad to a multiple of 64, run the model and crop back to the input size."""
    padded, (h, w) = pad_to_multiple(np.asarray(x), 64)
    return forward_dense(model, padded, n_orientations)[:, :, :h, :w]


def save_checkpoint(model: Model, path) -> None:
    data = serialization.encode_checkpoint(model.config.to_dict(), model.state())
    serialization.atomic_write(path, data)


def checkpoint_bytes(model: Model) -> bytes:
    return serialization.encode_checkpoint(model.config.to_dict(), model.state())


def load_checkpoint(path_or_bytes, dtype=None) -> Model:
    """Load a checkpoint; ``dtype`` casts every stored tensor (default: keep stored precision)."""
    data = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else Path(path_or_bytes).read_bytes()
    cfg_dict, tensors = serialization.decode_checkpoint(bytes(data), dtype=dtype)
    config = ModelConfig.from_dict(cfg_dict)
    model = build_model(config, seed=0, dtype=tensors[0][1].dtype if tensors else dtype)
    stored = dict(tensors)
    expected = [name for name, _ in model.state()]
    if sorted(stored) != sorted(expected):
        raise serialization.FormatError(f"checkpoint tensors {sorted(stored)} do not match model {sorted(expected)}")
    for name in model.params:
        if stored[name].shape != model.params[name].shape:
            raise serialization.FormatError(f"shape mismatch for {name}: {stored[name].shape} vs {model.params[name].shape}")
        model.params[name] = stored[name]
    for name in model.buffers:
        model.buffers[name] = stored[name]
    return model
