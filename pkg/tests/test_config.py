from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssar.config import RunConfig, load_run_config, parse_config_text
from ssar.errors import ConfigError
from ssar.model import ModelConfig

ROOT = Path(__file__).resolve().parents[1]


def test_defaults_follow_full_scale_procedure():
    cfg = RunConfig()
    assert cfg.model_config() == ModelConfig.from_preset("paper")
    s1, s2, s3 = (cfg.stage_config(s) for s in (1, 2, 3))
    assert (s1.lr, s1.batch_size) == (1e-6, 100)
    assert (s2.lr, s2.lr_after_drop, s2.batch_size) == (1e-2, 1e-3, 100)
    assert (s3.lr, s3.batch_size) == (1e-3, 1)
    assert (cfg.near_mm, cfg.far_mm, cfg.min_area) == (100.0, 700.0, 64)


def test_parse_ignores_comments_and_blanks():
    text = "# header\n\npreset = tiny  # trailing\nseed=7\n"
    assert parse_config_text(text) == {"preset": "tiny", "seed": "7"}


def test_parse_rejects_line_without_equals():
    with pytest.raises(ConfigError, match="cfg:2"):
        parse_config_text("seed=1\njunk\n", "cfg")


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key 'lr'"):
        RunConfig().with_values({"lr": "1"})


@pytest.mark.parametrize("key,raw", [("seed", "x"), ("lr_stage1", "fast"), ("freeze_bn", "maybe"), ("encoder_widths", "1,a")])
def test_bad_values_rejected(key, raw):
    with pytest.raises(ConfigError, match=key):
        RunConfig().with_values({key: raw})


def test_invalid_preset_rejected_early():
    with pytest.raises(ConfigError):
        RunConfig().with_values({"preset": "huge"})


def test_flags_win_over_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("preset=tiny\nseed=3\nlr_stage2=0.5\n")
    cfg = load_run_config(path, {"seed": "9"})
    assert (cfg.preset, cfg.seed, cfg.lr_stage2) == ("tiny", 9, 0.5)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="missing.cfg"):
        load_run_config(tmp_path / "missing.cfg")


def test_model_overrides_and_tuples():
    cfg = RunConfig().with_values({"preset": "tiny", "num_classes": "3", "decoder_widths": "8,8,4,4,2", "norm_mean": "0.1,0.2,0.3"})
    mc = cfg.model_config()
    assert mc.num_classes == 3 and mc.decoder_widths == (8, 8, 4, 4, 2) and mc.norm_mean == (0.1, 0.2, 0.3)
    assert mc.input_h == ModelConfig.from_preset("tiny").input_h


def test_per_stage_patience_falls_back_to_shared():
    cfg = RunConfig().with_values({"patience": "6", "patience_stage2": "9"})
    assert [cfg.stage_config(s).patience for s in (1, 2, 3)] == [6, 9, 6]


def test_max_steps_zero_means_unlimited():
    assert RunConfig().stage_config(1).max_steps is None
    assert RunConfig().with_values({"max_steps": "5"}).stage_config(3).max_steps == 5


def test_stage_out_of_range():
    with pytest.raises(ConfigError):
        RunConfig().stage_config(4)


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    lr=st.floats(1e-8, 1.0),
    batch=st.integers(1, 512),
    freeze=st.booleans(),
    widths=st.lists(st.integers(1, 64), min_size=5, max_size=5),
)
def test_text_round_trip(seed, lr, batch, freeze, widths):
    cfg = RunConfig().with_values(
        {"preset": "tiny", "seed": str(seed), "lr_stage3": repr(lr), "batch_stage2": str(batch), "freeze_bn": str(freeze), "encoder_widths": ",".join(map(str, widths))}
    )
    assert load_run_config(None, parse_config_text(cfg.to_text())) == cfg


def test_shipped_tiny_config_loads():
    cfg = load_run_config(ROOT / "configs" / "tiny.cfg")
    assert cfg.preset == "tiny"
    assert cfg.stage_config(3).batch_size == 1 and cfg.stage_config(3).freeze_bn
    assert cfg.stage_config(1).patience == 4 and cfg.stage_config(2).patience == 8
