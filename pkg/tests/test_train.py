import math

import numpy as np
import pytest

from roteqnet.data import IGNORE_ID, SyntheticShapesConfig, band_statistics, render_patch, zscore
from roteqnet.network import ModelConfig, build_model
from roteqnet.tensor import softmax_channels
from roteqnet.train import (
    DESK_SCHEDULE,
    FULL_SCHEDULE,
    AugmentConfig,
    SGDConfig,
    augment,
    cross_entropy_loss,
    evaluate,
    init_xavier_improved,
    sgd_step,
    train_loop,
)


def test_loss_perfect_and_uniform():
    labels = np.array([[[0, 1], [2, 1]]])
    onehot = np.zeros((1, 3, 2, 2))
    np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
    assert cross_entropy_loss(onehot, labels)[0] == 0.0
    uniform = np.full((1, 6, 2, 2), 1 / 6)
    assert cross_entropy_loss(uniform, np.zeros((1, 2, 2), int))[0] == pytest.approx(math.log(6))


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(1, 3, 2, 2))
    labels = np.array([[[0, 2], [IGNORE_ID, 1]]])
    _, grad = cross_entropy_loss(softmax_channels(logits), labels)
    eps = 1e-6
    for idx in np.ndindex(logits.shape):
        d = np.zeros_like(logits)
        d[idx] = eps
        up = cross_entropy_loss(softmax_channels(logits + d), labels)[0]
        down = cross_entropy_loss(softmax_channels(logits - d), labels)[0]
        num = (up - down) / (2 * eps)
        assert abs(num - grad[idx]) <= 1e-6 * max(abs(num), abs(grad[idx]), 1e-3)


def test_loss_errors():
    with pytest.raises(ValueError):
        cross_entropy_loss(np.full((1, 2, 2, 2), 0.5), np.full((1, 2, 2), IGNORE_ID))
    with pytest.raises(ValueError):
        cross_entropy_loss(np.full((1, 2, 2, 2), 0.5), np.zeros((1, 3, 2), int))


def test_sgd_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    v = {}
    for _ in range(3):
        sgd_step(p, {"w": np.zeros(2)}, v, lr=0.1, wd=0.0)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_sgd_first_step_closed_form():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.25])}
    sgd_step(p, g, {}, lr=0.1, wd=0.01)
    np.testing.assert_allclose(p["w"], np.array([1.0, -2.0]) - 0.1 * (g["w"] + 0.01 * np.array([1.0, -2.0])))


def test_sgd_two_steps_scalar_recurrence():
    lr, wd, mu = 0.05, 0.1, 0.9
    p, v = 2.0, 0.0
    params, vel = {"w": np.array([p])}, {}
    for g in (1.0, -3.0):
        v = mu * v - lr * (g + wd * p)
        p = p + v
        sgd_step(params, {"w": np.array([g])}, vel, lr, wd, mu)
    assert params["w"][0] == pytest.approx(p, abs=1e-15)


def test_sgd_masks_and_decay_selection():
    mask = np.array([1.0, 0.0])
    p = {"w": np.array([1.0, 0.0]), "b": np.array([1.0])}
    sgd_step(p, {"w": np.ones(2), "b": np.zeros(1)}, {}, lr=0.1, wd=0.5, masks={"w": mask}, decay={"w"})
    assert p["w"][1] == 0.0
    assert p["b"][0] == 1.0
    with pytest.raises(ValueError):
        sgd_step(p, {"w": np.ones(3), "b": np.zeros(1)}, {}, lr=0.1, wd=0.0)


def test_xavier_std_and_mask():
    rng = np.random.default_rng(0)
    w = init_xavier_improved((100_000,), 148, rng)
    assert abs(w.std() / math.sqrt(2 / 148) - 1) < 0.05
    mask = np.zeros((4, 4))
    mask[1:3, 1:3] = 1
    w = init_xavier_improved((3, 4, 4), 10, rng, mask)
    assert not w[:, mask == 0].any()
    with pytest.raises(ValueError):
        init_xavier_improved((2,), 0, rng)


def test_model_init_uses_disk_fan_in():
    model = build_model(ModelConfig(nf=8, in_channels=4), seed=0)
    mask = model.masks["block0.w"].astype(bool)
    w = model.params["block0.w"][..., mask]
    # 37 disk cells x 4 input channels
    assert abs(w.std() / math.sqrt(2 / 148) - 1) < 0.05


class _FixedRng:
    def __init__(self, angle, flip):
        self.angle, self.flip = angle, flip

    def uniform(self, lo, hi):
        return self.angle

    def random(self):
        return 0.0 if self.flip else 1.0


def test_augment_identity():
    rng = np.random.default_rng(0)
    image, labels = rng.normal(size=(3, 8, 8)), rng.integers(0, 5, (8, 8))
    cfg = AugmentConfig(rotation=False, flip_horizontal=0.0, flip_vertical=0.0)
    x, y = augment(image, labels, cfg, rng)
    np.testing.assert_array_equal(x, image)
    np.testing.assert_array_equal(y, labels)


def test_augment_quarter_turn_permutes_identically():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 5, (8, 8))
    image = np.stack([labels.astype(float), rng.normal(size=(8, 8))])
    x, y = augment(image, labels, AugmentConfig(), _FixedRng(90.0, False))
    np.testing.assert_array_equal(y, np.rot90(labels))
    np.testing.assert_array_equal(x[0], y)


def test_augment_flips_preserve_histogram():
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 5, (8, 8))
    image = labels[None].astype(float)
    cfg = AugmentConfig(rotation=False, flip_horizontal=1.0, flip_vertical=1.0)
    x, y = augment(image, labels, cfg, rng)
    assert np.array_equal(np.bincount(y.ravel()), np.bincount(labels.ravel()))
    np.testing.assert_array_equal(y, labels[::-1, ::-1])
    np.testing.assert_array_equal(x[0], y)


def test_augment_rotation_marks_outside_as_ignored():
    labels = np.zeros((16, 16), int)
    _, y = augment(np.zeros((1, 16, 16)), labels, AugmentConfig(), _FixedRng(45.0, False))
    assert (y == IGNORE_ID).any() and (y == 0).any()


def test_augment_rejects_non_square():
    with pytest.raises(ValueError):
        augment(np.zeros((1, 8, 6)), np.zeros((8, 6), int), AugmentConfig(), np.random.default_rng(0))


def test_schedules():
    assert SGDConfig(schedule=FULL_SCHEDULE).epochs == 22
    cfg = SGDConfig(schedule=DESK_SCHEDULE)
    assert cfg.epochs == 15
    assert cfg.rates(0) == (2e-2, 1e-4) and cfg.rates(9) == (4e-3, 1e-4) and cfg.rates(14) == (8e-4, 1e-4)
    half = cfg.scaled(0.5)
    assert half.rates(0) == (1e-2, 5e-5)
    with pytest.raises(ValueError):
        SGDConfig(schedule=[])
    with pytest.raises(ValueError):
        SGDConfig(schedule=[[1, -0.1, 0]])
    with pytest.raises(ValueError):
        AugmentConfig(flip_vertical=1.5)


def _tiny_data(n, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3, 64, 64)).astype(np.float32)
    y = np.where(x[:, 1] > 1.0, 2, (x[:, 0] > 0.5).astype(np.int64))
    return x, y


def test_memorises_single_sample():
    patch, _ = render_patch(SyntheticShapesConfig(seed=0), np.random.default_rng(0), 64)
    x = zscore(patch.image[None], band_statistics(patch.image[None]))
    # batch norm needs two samples in training mode, so the patch is duplicated
    x, y = np.concatenate([x, x]), np.stack([patch.labels, patch.labels])
    model = build_model(ModelConfig(nf=1, n_orientations=4, mlp_widths=[16, 16, 5]), seed=0)
    result = train_loop(model, (x, y), None, SGDConfig(schedule=[[100, 0.01, 0.0]], batch_size=2), None, seed=0)
    assert result.history[-1]["train_loss"] < 0.05


def test_same_seed_same_checkpoint(tmp_path):
    data = _tiny_data(6)
    cfg = ModelConfig(nf=1, n_orientations=4, n_classes=3, mlp_widths=[8, 8, 3])
    sgd = SGDConfig(schedule=[[2, 0.02, 1e-4]], batch_size=3)
    for run in ("a", "b"):
        train_loop(build_model(cfg, seed=5), data, data, sgd, AugmentConfig(), seed=9, out_dir=tmp_path / run)
    for name in ("best.rtqc", "last.rtqc", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,loss,oa,aa,kappa" and len(lines) == 5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_restores_finite_parameters():
    data = _tiny_data(4)
    model = build_model(ModelConfig(nf=1, n_orientations=4, n_classes=3, mlp_widths=[8, 8, 3]), seed=0)
    result = train_loop(model, data, None, SGDConfig(schedule=[[3, 1e6, 0.0]], batch_size=2), None, seed=0)
    assert result.diverged
    assert all(np.isfinite(p).all() for p in result.model.params.values())


def test_evaluate_reports_scores():
    x, y = _tiny_data(3)
    model = build_model(ModelConfig(nf=1, n_orientations=4, n_classes=3, mlp_widths=[8, 8, 3]), seed=0)
    r = evaluate(model, x, y, batch_size=2)
    assert r["confusion"].sum() == y.size
    assert 0 <= r["oa"] <= 1 and r["loss"] > 0
