import json

import pytest

from n4mc.config import CodecConfig, desk_config
from n4mc.errors import ValidationError


def test_json_roundtrip(tmp_path):
    cfg = desk_config(resolution=32, group_size=5, width=24)
    cfg.to_json(tmp_path / "c.json")
    assert CodecConfig.from_json(tmp_path / "c.json") == cfg


def test_partial_json_uses_defaults(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"group_size": 6, "training": {"stage_a_steps": 10}}))
    cfg = CodecConfig.from_json(tmp_path / "c.json")
    assert cfg.group_size == 6 and cfg.training.stage_a_steps == 10
    assert cfg.training.stage_b_steps == CodecConfig().training.stage_b_steps
    assert cfg.plan.group_size == 6


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"training": {"nope": 2}}, {"resolution": 48}, {"width": 20},
                                 {"group_size": 1}])
def test_rejects_bad_config(tmp_path, doc):
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(ValidationError):
        CodecConfig.from_json(tmp_path / "c.json")


def test_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{oops")
    with pytest.raises(ValidationError):
        CodecConfig.from_json(tmp_path / "c.json")


def test_overrides_skip_none():
    cfg = CodecConfig().with_overrides(resolution=None, seed=7)
    assert cfg.resolution == 64 and cfg.seed == 7 and cfg.tracking_config.seed == 7


def test_preset_dimensions():
    cfg = CodecConfig(resolution=128, width=32)
    ae, ic = cfg.autoencoder(), cfg.interpolator()
    assert (ae.feature_res, ae.feature_dim) == (8, 16)
    assert (ic.feature_res, ic.feature_dim, ic.width) == (8, 16, 32)


def test_training_defaults():
    plan = CodecConfig().training
    assert (plan.stage_a_steps, plan.stage_b_steps, plan.finetune_steps, plan.batch_size) == (20000, 10000, 500, 2)
    assert (plan.base_lr, plan.min_lr, plan.warmup_fraction) == (1e-3, 1e-5, 0.2)


def test_shipped_example_matches_defaults():
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "configs" / "example.json"
    assert CodecConfig.from_json(path) == CodecConfig()
