import os

import pytest

from sparsekit.config import DEFAULT_SPARSITIES, ExperimentConfig, load_config, parse_config, parse_shape
from sparsekit.errors import ConfigError
from sparsekit.formats import compression_ratio_to_sparsity, percent


class TestParseConfig:
    def test_values_and_comments(self):
        config = parse_config("# sweep\nseeds = 0, 1\nsparsities = 0.75, 0.9   # targets\n"
                              "variants = ce, squarehead\nrestart_lr = no\nlr = 0.05\n")
        assert config.seeds == [0, 1]
        assert config.sparsities == [0.75, 0.9]
        assert config.variants == ["ce", "squarehead"]
        assert config.restart_lr is False
        assert config.lr == 0.05

    def test_defaults(self):
        config = parse_config("")
        assert config == ExperimentConfig()
        assert config.seeds == [0, 1, 2]

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config("sparsity = 0.5\n")

    def test_unparsable_value(self):
        with pytest.raises(ConfigError):
            parse_config("epochs = many\n")
        with pytest.raises(ConfigError):
            parse_config("prune_head = perhaps\n")

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            parse_config("sparsities = 0.5, 1.0\n")
        with pytest.raises(ConfigError):
            parse_config("schedule = cubic\n")
        with pytest.raises(ConfigError):
            parse_config("bench_shape = 4096\n")

    def test_bench_keys(self):
        assert ExperimentConfig().bench_shape == ""
        config = parse_config("bench_shape = 16x64\nbench_widths = fp16, int8\nbench_warmup = 0\n")
        assert parse_shape(config.bench_shape) == (16, 64)
        assert config.bench_widths == ["fp16", "int8"]
        for text in ("bench_reps = 5\n", "bench_widths = bf16\n", "bench_warmup = -1\n"):
            with pytest.raises(ConfigError):
                parse_config("bench_shape = 16x64\n" + text)

    def test_feature_weight(self):
        assert ExperimentConfig().feat_lam == 8.0
        assert parse_config("feat_lam = 2.5\n").feat_lam == 2.5

    def test_schedule_levels(self):
        config = parse_config("schedule = gradual\nsparsity_levels = 0.5, 0.75, 0.9\n")
        assert config.sparsity_levels == [0.5, 0.75, 0.9]

    def test_overrides(self):
        config = parse_config("epochs = 3\n", epochs=5, output_dir=None)
        assert config.epochs == 5 and config.output_dir == "runs"
        with pytest.raises(ConfigError):
            parse_config("", learning_rate=0.1)


class TestConfigIdentity:
    def test_text_roundtrip(self):
        config = parse_config("seeds = 4\nnm_patterns = 2:4, 16:64\nprune_head = true\n")
        assert parse_config(config.to_text()) == config

    def test_hash_depends_on_values(self):
        a = parse_config("epochs = 3\n")
        assert a.config_hash() == parse_config("epochs=3").config_hash()
        assert a.config_hash() != a.replace(epochs=4).config_hash()
        assert len(a.config_hash()) == 64


def test_load_config_resolves_paths(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("output_dir = out\nteacher_checkpoint = ckpt/teacher\n")
    config = load_config(str(path))
    assert config.output_dir == os.path.join(str(tmp_path), "out")
    assert config.teacher_checkpoint == os.path.join(str(tmp_path), "ckpt", "teacher")


def test_load_config_without_file():
    assert load_config(None, epochs=2).epochs == 2


def test_parse_shape():
    assert parse_shape("4096x12288") == (4096, 12288)
    with pytest.raises(ConfigError):
        parse_shape("0x3")


def test_default_sparsities_follow_compression_ratios():
    assert [percent(s) for s in DEFAULT_SPARSITIES] == \
        [percent(compression_ratio_to_sparsity(r)) for r in (2, 3, 4, 5, 6, 7, 8, 10)]
