"""Loss, optimiser, initialisation, augmentation and the training loop."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .data import IGNORE_ID
from .network import Model, checkpoint_bytes, save_checkpoint
from .serialization import atomic_write
from .tensor import rotate_image

log = logging.getLogger(__name__)

# Vaihingen schedule for the rotation equivariant model: (epochs, lr, weight decay)
FULL_SCHEDULE = [(11, 2e-2, 4e-2), (6, 4e-3, 4e-3), (5, 8e-4, 8e-4)]
DESK_SCHEDULE = [(9, 2e-2, 1e-4), (4, 4e-3, 1e-4), (2, 8e-4, 1e-4)]


class DivergenceError(RuntimeError):
    pass


@dataclass
class SGDConfig:
    momentum: float = 0.9
    schedule: list = field(default_factory=lambda: [list(s) for s in DESK_SCHEDULE])
    batch_size: int = 4

    def __post_init__(self):
        self.schedule = [[int(e), float(lr), float(wd)] for e, lr, wd in self.schedule]
        self.validate()

    def validate(self) -> None:
        if not self.schedule:
            raise ValueError("schedule needs at least one segment")
        for epochs, lr, wd in self.schedule:
            if epochs < 1 or lr <= 0 or wd < 0:
                raise ValueError(f"invalid schedule segment {(epochs, lr, wd)}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    @property
    def epochs(self) -> int:
        return sum(e for e, _, _ in self.schedule)

    def rates(self, epoch: int) -> tuple[float, float]:
        """Learning rate and weight decay of a zero-based epoch."""
        for epochs, lr, wd in self.schedule:
            if epoch < epochs:
                return lr, wd
            epoch -= epochs
        return self.schedule[-1][1], self.schedule[-1][2]

    def scaled(self, factor: float) -> "SGDConfig":
        """Copy with every rate and decay multiplied by ``factor``."""
        return SGDConfig(self.momentum, [[e, lr * factor, wd * factor] for e, lr, wd in self.schedule], self.batch_size)


@dataclass
class AugmentConfig:
    rotation: bool = True
    flip_horizontal: float = 0.5
    flip_vertical: float = 0.5

    def __post_init__(self):
        for name in ("flip_horizontal", "flip_vertical"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray, ignore_id: int | None = IGNORE_ID) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over labelled pixels.

    ``probs`` are softmax outputs (n, C, h, w).  The returned gradient is
    taken with respect to the pre-softmax logits.
    """
    n, c, h, w = probs.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels {labels.shape} do not match predictions {probs.shape}")
    valid = labels != ignore_id if ignore_id is not None else np.ones(labels.shape, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise ValueError("every pixel is ignored; loss undefined")
    safe = np.where(valid, labels, 0).astype(np.intp)
    if safe.min() < 0 or safe.max() >= c:
        raise ValueError(f"label ids must lie in [0, {c}) or equal the ignore id")
    p_true = np.take_along_axis(probs, safe[:, None], axis=1)[:, 0]
    tiny = np.finfo(probs.dtype).tiny
    loss = -np.log(np.maximum(p_true[valid], tiny)).sum() / count
    grad = probs.copy()
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    grad -= onehot
    grad *= (valid / count)[:, None].astype(probs.dtype)
    return float(loss), grad


def sgd_step(
    params: dict,
    grads: dict,
    velocity: dict,
    lr: float,
    wd: float,
    momentum: float = 0.9,
    masks: dict | None = None,
    decay: set | None = None,
) -> dict:
    """In-place momentum SGD: ``v = momentum * v - lr * (g + wd * p); p += v``.

    Weight decay applies to the names in ``decay`` (all parameters when
    ``None``).  Masked filter cells are forced back to zero.
    """
    masks = masks or {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        v = velocity.setdefault(name, np.zeros_like(p))
        step = g + wd * p if (decay is None or name in decay) else g
        v *= momentum
        v -= lr * step
        p += v
        if name in masks:
            p *= masks[name]
            v *= masks[name]
    return params


def init_xavier_improved(shape, fan_in: int, rng: np.random.Generator, mask: np.ndarray | None = None) -> np.ndarray:
    """Zero-mean normal weights with std ``sqrt(2 / fan_in)``, zero outside ``mask``."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    return w * mask if mask is not None else w


def augment(
    image: np.ndarray, labels: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator, ignore_id: int = IGNORE_ID
) -> tuple[np.ndarray, np.ndarray]:
    """Random rotation in [0, 360) and random flips, applied identically to image and labels.

    The image is resampled bilinearly, the labels by nearest neighbour; label
    pixels rotated in from outside the patch become ``ignore_id``.
    """
    if cfg.rotation:
        if image.shape[-1] != image.shape[-2]:
            raise ValueError(f"rotation augmentation needs square patches, got {image.shape[-2:]}")
        angle = float(rng.uniform(0.0, 360.0))
        image = rotate_image(image, angle).astype(image.dtype, copy=False)
        labels = rotate_image(labels, angle, order="nearest", fill=ignore_id)
    if rng.random() < cfg.flip_horizontal:
        image, labels = image[..., ::-1], labels[..., ::-1]
    if rng.random() < cfg.flip_vertical:
        image, labels = image[..., ::-1, :], labels[..., ::-1, :]
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 8, n_orientations=None) -> dict:
    """Inference-mode loss and confusion-matrix scores over a labelled set."""
    c = model.config.n_classes
    cm = metrics.confusion_matrix(c)
    total_loss, total_px = 0.0, 0
    for i in range(0, len(images), batch_size):
        x, y = images[i : i + batch_size], labels[i : i + batch_size]
        probs = model.forward(x, train=False, n_orientations=n_orientations)
        valid = int((y != IGNORE_ID).sum())
        if valid:
            loss, _ = cross_entropy_loss(probs, y)
            total_loss += loss * valid
            total_px += valid
        cm = metrics.accumulate(cm, y, probs.argmax(axis=1), IGNORE_ID)
    result = metrics.scores(cm)
    result["loss"] = total_loss / max(total_px, 1)
    result["confusion"] = cm
    return result


@dataclass
class TrainResult:
    model: Model
    best_model: Model
    history: list = field(default_factory=list)
    diverged: bool = False


def _weight_names(model: Model) -> set:
    return {k for k in model.params if k.endswith((".w", ".w_u", ".w_v"))}


def train_loop(
    model: Model,
    train_data: tuple[np.ndarray, np.ndarray],
    val_data: tuple[np.ndarray, np.ndarray] | None,
    sgd: SGDConfig,
    aug: AugmentConfig | None,
    seed: int = 0,
    out_dir=None,
) -> TrainResult:
    """Train ``model`` in place with momentum SGD.

    Each epoch shuffles with a seed derived from ``(seed, epoch)`` and
    augments every sample with a seed derived from ``(seed, epoch, index)``,
    so runs are reproducible.  With ``out_dir`` the metric log
    (``metrics.csv``), ``last.rtqc`` and the best-validation ``best.rtqc``
    are written there.
    """
    images, labels = train_data
    if len(images) == 0:
        raise ValueError("training set is empty")
    dtype = model.dtype
    images = np.asarray(images, dtype=dtype)
    if val_data is not None:
        val_data = (np.asarray(val_data[0], dtype=dtype), val_data[1])
    out = Path(out_dir) if out_dir is not None else None
    csv_lines = ["epoch,split,loss,oa,aa,kappa"]
    velocity: dict = {}
    decay = _weight_names(model)
    best_oa, best = -1.0, model.copy()
    result = TrainResult(model, best)
    bs = sgd.batch_size
    for epoch in range(sgd.epochs):
        lr, wd = sgd.rates(epoch)
        good = model.copy()
        order = np.random.default_rng([seed, epoch]).permutation(len(images))
        batches = [order[i : i + bs] for i in range(0, len(order), bs)]
        if len(batches) > 1 and len(batches[-1]) < 2:
            batches[-2] = np.concatenate(batches[-2:])
            batches.pop()
        cm = metrics.confusion_matrix(model.config.n_classes)
        epoch_loss, seen = 0.0, 0
        for batch in batches:
            xb, yb = [], []
            for i in batch:
                x, y = images[i], labels[i]
                if aug is not None:
                    x, y = augment(x, y, aug, np.random.default_rng([seed, epoch, int(i)]))
                xb.append(x)
                yb.append(y)
            xb, yb = np.stack(xb), np.stack(yb)
            if (yb == IGNORE_ID).all():
                continue
            probs = model.forward(xb, train=len(batch) > 1)
            loss, grad = cross_entropy_loss(probs, yb)
            if not np.isfinite(loss):
                log.error("loss diverged at epoch %d; restoring last good parameters", epoch + 1)
                model.params, model.buffers = good.params, good.buffers
                result.diverged = True
                break
            if len(batch) > 1:
                model.backward(grad)
                sgd_step(model.params, model.grads, velocity, lr, wd, sgd.momentum, model.masks, decay)
            epoch_loss += loss * len(batch)
            seen += len(batch)
            cm = metrics.accumulate(cm, yb, probs.argmax(axis=1), IGNORE_ID)
        if result.diverged:
            break
        tr = metrics.scores(cm)
        row = {"epoch": epoch + 1, "train_loss": epoch_loss / max(seen, 1), "train": tr}
        csv_lines.append(f"{epoch + 1},train,{row['train_loss']:.6f},{tr['oa']:.6f},{tr['aa']:.6f},{tr['kappa']:.6f}")
        if val_data is not None:
            va = evaluate(model, *val_data, batch_size=max(bs, 4))
            row["val"] = va
            csv_lines.append(f"{epoch + 1},val,{va['loss']:.6f},{va['oa']:.6f},{va['aa']:.6f},{va['kappa']:.6f}")
            if va["oa"] > best_oa:
                best_oa, best = va["oa"], model.copy()
            log.info("epoch %d lr %.2g loss %.4f val oa %.4f aa %.4f", epoch + 1, lr, row["train_loss"], va["oa"], va["aa"])
        else:
            best = model.copy()
            log.info("epoch %d lr %.2g loss %.4f", epoch + 1, lr, row["train_loss"])
        result.history.append(row)
        if out is not None:
            atomic_write(out / "metrics.csv", ("\n".join(csv_lines) + "\n").encode())
            save_checkpoint(model, out / "last.rtqc")
            save_checkpoint(best, out / "best.rtqc")
    result.best_model = best
    if out is not None:
        atomic_write(out / "metrics.csv", ("\n".join(csv_lines) + "\n").encode())
        save_checkpoint(best, out / "best.rtqc")
    return result
