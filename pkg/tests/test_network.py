import numpy as np
import pytest

from roteqnet.equivariance import equicheck
from roteqnet.network import (
    ModelConfig,
    build_model,
    hypercolumn_concat,
    pad_to_multiple,
    predict_any_size,
)
from roteqnet.orientpool import VectorField
from roteqnet.tensor import ShapeError


def count_oracle(nf, in_ch, n_classes, variant, m=7, mults=(2, 2, 3, 4, 4, 4)):
    """Parameter count from the layer algebra (masked filter cells excluded)."""
    taps = 37 if m == 7 else m * m
    filters = [k * nf for k in mults]
    total, prev = 0, in_ch
    for k, f in enumerate(filters):
        if variant == "roteqnet":
            comps = 1 if k == 0 else 2
            total += comps * f * prev * taps + 2 * f
        else:
            total += f * prev * m * m + 3 * f
        prev = f
    width = sum(filters) + in_ch
    for out in (50 * nf, 50 * nf, n_classes):
        total += width * out + out
        width = out
    return total


def test_filter_counts_examples():
    cfg = ModelConfig(nf=3, in_channels=4, n_classes=6)
    assert cfg.filter_counts == [6, 6, 9, 12, 12, 12]
    assert ModelConfig(nf=12, variant="baseline").filter_counts == [24, 24, 36, 48, 48, 48]
    assert cfg.mlp_widths == [150, 150, 6]


@pytest.mark.parametrize(
    "nf, in_ch, c, variant", [(3, 4, 6, "roteqnet"), (12, 4, 6, "baseline"), (2, 3, 5, "roteqnet"), (2, 3, 5, "baseline")]
)
def test_parameter_count_matches_layer_algebra(nf, in_ch, c, variant):
    model = build_model(ModelConfig(nf=nf, in_channels=in_ch, n_classes=c, variant=variant))
    assert model.parameter_count == count_oracle(nf, in_ch, c, variant)


def test_size_ratio_between_variants():
    small = build_model(ModelConfig(nf=3)).parameter_count
    large = build_model(ModelConfig(nf=12, variant="baseline")).parameter_count
    assert 5 <= large / small <= 20
    assert 5e4 < small < 2e5 and 5e5 < large < 2e6


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(layer_multipliers=[1, 2, 3])
    with pytest.raises(ValueError):
        ModelConfig(mlp_widths=[10, 4], n_classes=5)
    with pytest.raises(ValueError):
        ModelConfig(variant="resnet")
    with pytest.raises(ValueError):
        ModelConfig(filter_size=6)
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"nf": 2, "bogus": 1})
    cfg = ModelConfig(nf=1)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("variant", ["roteqnet", "baseline"])
def test_output_shape_and_probabilities(variant):
    model = build_model(ModelConfig(nf=1, n_orientations=4, variant=variant), seed=1)
    x = np.random.default_rng(0).normal(size=(2, 3, 64, 128)).astype(np.float32)
    p = model.forward(x)
    assert p.shape == (2, 5, 64, 128) and p.dtype == np.float32
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-5)


def test_zero_final_layer_gives_uniform():
    model = build_model(ModelConfig(nf=1, n_orientations=4), seed=2)
    model.params["head2.w"][...] = 0
    p = model.forward(np.random.default_rng(0).normal(size=(1, 3, 64, 64)))
    np.testing.assert_allclose(p, 1 / 5, atol=1e-7)


def test_indivisible_input_names_padding():
    model = build_model(ModelConfig(nf=1, n_orientations=4))
    with pytest.raises(ShapeError, match="pad by 14 rows and 0 columns"):
        model.forward(np.zeros((1, 3, 50, 64)))
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 2, 64, 64)))


def test_pad_and_predict_any_size():
    x = np.random.default_rng(0).normal(size=(1, 3, 50, 70))
    padded, size = pad_to_multiple(x)
    assert padded.shape == (1, 3, 64, 128) and size == (50, 70)
    np.testing.assert_array_equal(padded[..., :50, :70], x)
    model = build_model(ModelConfig(nf=1, n_orientations=4))
    assert predict_any_size(model, x).shape == (1, 5, 50, 70)


def test_hypercolumn_concat():
    rng = np.random.default_rng(0)
    fields = [VectorField(rng.normal(size=(1, 1, 4, 4)), rng.normal(size=(1, 1, 4, 4))) for _ in range(2)]
    raw = rng.normal(size=(1, 4, 4, 4))
    out = hypercolumn_concat(fields, raw)
    assert out.shape[1] == 2 * 2 + 4
    np.testing.assert_array_equal(out[:, 4:], raw)
    np.testing.assert_array_equal(out[:, 0:1], fields[0].u)
    np.testing.assert_array_equal(hypercolumn_concat(fields, raw), out)
    np.testing.assert_array_equal(hypercolumn_concat([], raw), raw)
    assert hypercolumn_concat(fields, raw, mode="magnitude").shape[1] == 2 + 4
    with pytest.raises(ShapeError):
        hypercolumn_concat([rng.normal(size=(1, 1, 2, 2))], raw)


@pytest.mark.parametrize("R", [4, 8, 16])
def test_random_network_is_equivariant_at_right_angles(R):
    model = build_model(ModelConfig(nf=1, n_orientations=R), seed=R)
    x = np.random.default_rng(R).normal(size=(3, 3, 64, 64)).astype(np.float32)
    for r in equicheck(model, x, [90, 180, 270]):
        assert r.agreement >= 0.995


def test_uv_head_breaks_equivariance():
    model = build_model(ModelConfig(nf=1, n_orientations=8, head_features="uv"), seed=0)
    x = np.random.default_rng(0).normal(size=(3, 3, 64, 64)).astype(np.float32)
    (r,) = equicheck(model, x, [90])
    assert r.agreement < 0.995


def test_train_mode_updates_running_statistics():
    model = build_model(ModelConfig(nf=1, n_orientations=4), seed=0)
    before = {k: v.copy() for k, v in model.buffers.items()}
    model.forward(np.random.default_rng(0).normal(size=(2, 3, 64, 64)), train=True)
    assert any(not np.array_equal(before[k], model.buffers[k]) for k in before)
    model.forward(np.random.default_rng(1).normal(size=(2, 3, 64, 64)))
    after = {k: v.copy() for k, v in model.buffers.items()}
    model.forward(np.random.default_rng(2).normal(size=(2, 3, 64, 64)))
    assert all(np.array_equal(after[k], model.buffers[k]) for k in after)


def test_masked_cells_start_at_zero():
    model = build_model(ModelConfig(nf=1))
    for name, mask in model.masks.items():
        assert not model.params[name][..., ~mask.astype(bool)].any()


def test_copy_and_astype_are_independent():
    model = build_model(ModelConfig(nf=1, n_orientations=4))
    clone = model.copy()
    clone.params["block0.w"][...] += 1
    assert not np.array_equal(clone.params["block0.w"], model.params["block0.w"])
    assert model.astype(np.float64).dtype == np.float64
