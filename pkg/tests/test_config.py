import json

import pytest

from fastinst.config import DEFAULTS, FULL_SCALE_PROFILE, ConfigError, RunConfig, parse_value


def test_defaults_round_trip():
    rc = RunConfig()
    assert RunConfig(rc.to_dict()).to_json() == rc.to_json()
    assert rc.digest() == RunConfig().digest()


def test_set_and_typed_views():
    rc = RunConfig().update([("decoder.d", 3), ("query.na", 9), ("loss.lambda_loc", 2)])
    mc = rc.model_config()
    assert mc.layers == 3 and mc.na == 9
    assert rc.loss_weights().loc == 2.0 and isinstance(rc.get("loss.lambda_loc"), float)


@pytest.mark.parametrize("key,value", [("decoder.depth", 3), ("nosuch.key", 1), ("decoder", 1),
                                       ("decoder.d", "three"), ("decoder.d", True), ("data.augment", 1),
                                       ("data.image_size", [96]), ("decoder.ffn_dim", 1.5)])
def test_rejects_bad_keys_and_types(key, value):
    with pytest.raises(ConfigError) as info:
        RunConfig().set(key, value)
    assert info.value.key.startswith(key)


def test_nullable_and_lists():
    rc = RunConfig().update([("decoder.ffn_dim", 64), ("data.image_size", [64, 128])])
    assert rc.get("decoder.ffn_dim") == 64 and rc.dataset_spec().image_size == (64, 128)
    rc.set("decoder.ffn_dim", None)
    assert rc.get("decoder.ffn_dim") is None


def test_from_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"total_iters": 7}}))
    assert RunConfig.from_file(p).get("train.total_iters") == 7
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.from_file(p)
    p.write_text(json.dumps({"train": {"iters": 7}}))
    with pytest.raises(ConfigError, match="train.iters"):
        RunConfig.from_file(p)


def test_parse_value():
    assert parse_value("3") == 3 and parse_value("false") is False and parse_value("[1, 2]") == [1, 2]
    assert parse_value("E3") == "E3"


def test_full_scale_profile_keys_exist():
    rc = RunConfig().update(FULL_SCALE_PROFILE.items())
    assert rc.get("query.na") == 100 and rc.augment_config().short_edge == (416, 640)
    assert set(DEFAULTS) == {"data", "pixel", "query", "decoder", "loss", "train", "eval", "bench"}
