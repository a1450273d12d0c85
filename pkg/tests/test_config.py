import json

import pytest

from roteqnet.config import ConfigError, RunConfig


def test_defaults_are_materialised():
    cfg = RunConfig.from_dict({})
    doc = json.loads(cfg.to_json())
    assert set(doc) == {"model", "sgd", "augment", "data", "run"}
    assert doc["model"]["mlp_widths"] == [100, 100, 5]
    assert doc["sgd"]["schedule"] == [[9, 0.02, 0.0001], [4, 0.004, 0.0001], [2, 0.0008, 0.0001]]
    assert doc["run"] == {"eval_batch_size": 8, "precision": "float32", "seed": 0, "threads": None}
    assert doc["data"]["synthetic"]["seed"] == 0


def test_round_trip_through_json():
    cfg = RunConfig.from_dict({"model": {"nf": 3, "variant": "baseline"}, "sgd": {"batch_size": 2}, "run": {"seed": 4}})
    again = RunConfig.from_json(cfg.to_json())
    assert again == cfg and again.to_json() == cfg.to_json()


@pytest.mark.parametrize(
    "doc, path",
    [
        ({"modle": {}}, "$.modle"),
        ({"model": {"nff": 1}}, "$.model.nff"),
        ({"model": {"nf": "2"}}, "$.model.nf"),
        ({"model": {"nf": True}}, "$.model.nf"),
        ({"model": {"variant": "vgg"}}, "$.model"),
        ({"model": {"layer_multipliers": [1, 2, "x"]}}, "$.model.layer_multipliers[2]"),
        ({"sgd": {"schedule": [[1, 0.1]]}}, "$.sgd.schedule[0]"),
        ({"sgd": {"schedule": [[1, "fast", 0.0]]}}, "$.sgd.schedule[0][1]"),
        ({"augment": {"rotation": 1}}, "$.augment.rotation"),
        ({"data": {"synthetic": {"colour": 1}}}, "$.data.synthetic.colour"),
        ({"data": {"patch_size": 50}}, "$.data"),
        ({"run": {"precision": "float16"}}, "$.run"),
        ({"run": []}, "$.run"),
        ([], "$"),
    ],
)
def test_errors_name_the_json_path(doc, path):
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict(doc)
    assert info.value.path == path


def test_invalid_json_and_missing_file(tmp_path):
    with pytest.raises(ConfigError) as info:
        RunConfig.from_json("{nope")
    assert info.value.path == "$"
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "absent.json")
