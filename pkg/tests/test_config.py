"""Flat config serialization, overrides, and hashing."""

import pytest

from guided_sed.config import (
    ExperimentConfig,
    apply_overrides,
    config_hash,
    dump_config,
    flatten_config,
    load_config_file,
    parse_config,
    save_config,
)
from guided_sed.errors import ConfigError


class TestValidation:
    def test_defaults_are_valid(self):
        ExperimentConfig().validate()

    @pytest.mark.parametrize(
        "overrides",
        [
            ["repeats=0"],
            ["pt_width=0"],
            ["ps_width=-1"],
            ["output_dir="],
            ["train.gamma=0.5"],
            ["smoothing.windows=3,5"],  # needs one window per class
        ],
    )
    def test_bad_values_are_rejected(self, overrides):
        config = apply_overrides(ExperimentConfig(), overrides)
        with pytest.raises(ConfigError):
            config.validate()


class TestSerialization:
    def test_dump_is_sorted_key_value_lines(self):
        text = dump_config(ExperimentConfig())
        lines = text.splitlines()
        assert text.endswith("\n")
        assert all("=" in line for line in lines)
        assert lines == sorted(lines)

    def test_round_trip_of_defaults(self):
        config = ExperimentConfig()
        assert parse_config(dump_config(config)) == config

    def test_round_trip_preserves_tuples_and_optionals(self):
        config = apply_overrides(
            ExperimentConfig(),
            [
                "corpus.event_duration_range=0.4,1.5",
                "features.fmax=7500",
                "smoothing.windows=3,9,5,7,11",
                "train.gamma=0.995",
                "repeats=3",
            ],
        )
        restored = parse_config(dump_config(config))
        assert restored == config
        assert restored.corpus.event_duration_range == (0.4, 1.5)
        assert restored.smoothing.windows == (3, 9, 5, 7, 11)

    def test_none_round_trips_for_optionals(self):
        config = apply_overrides(
            ExperimentConfig(), ["features.fmax=8000", "smoothing.windows=3,3,3,3,3"]
        )
        cleared = apply_overrides(config, ["features.fmax=none", "smoothing.windows=none"])
        assert cleared.features.fmax is None
        assert cleared.smoothing.windows is None
        assert parse_config(dump_config(cleared)) == cleared

    def test_comments_and_blank_lines_are_ignored(self):
        text = "# a comment\n\ntrain.gamma=0.99\n  \n# another\nrepeats=2\n"
        config = parse_config(text)
        assert config.train.gamma == 0.99
        assert config.repeats == 2

    def test_malformed_line_reports_its_number(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config("train.gamma=0.99\nnot an assignment\n")

    def test_flatten_covers_every_section(self):
        flat = flatten_config(ExperimentConfig())
        for prefix in ("corpus.", "features.", "train.", "smoothing.", "collars."):
            assert any(key.startswith(prefix) for key in flat)
        assert {"pt_width", "ps_width", "repeats", "output_dir"} <= set(flat)

    def test_file_round_trip(self, tmp_path):
        config = apply_overrides(ExperimentConfig(), ["train.seed=11", "output_dir=elsewhere"])
        path = tmp_path / "experiment.cfg"
        save_config(config, path)
        assert load_config_file(path) == config

    def test_missing_file_is_a_config_error(self, tmp_path):
        with pytest.raises(ConfigError, match="no config file"):
            load_config_file(tmp_path / "missing.cfg")


class TestOverrides:
    def test_dotted_override_touches_only_its_field(self):
        base = ExperimentConfig()
        changed = apply_overrides(base, ["train.gamma=0.99"])
        assert changed.train.gamma == 0.99
        assert changed.train.epochs == base.train.epochs
        assert changed.corpus == base.corpus

    def test_scalar_override(self):
        assert apply_overrides(ExperimentConfig(), ["repeats=4"]).repeats == 4

    def test_no_overrides_returns_equal_config(self):
        base = ExperimentConfig()
        assert apply_overrides(base, []) == base

    @pytest.mark.parametrize(
        "assignment, fragment",
        [
            ("nosuch.key=1", "unknown config section"),
            ("train.nosuch=1", "unknown config key"),
            ("nosuch=1", "unknown config key"),
            ("train.gamma", "key=value"),
            ("train.epochs=ten", "expected an integer"),
            ("train.gamma=fast", "expected a number"),
            ("corpus.event_duration_range=1.0", "expected 2 comma-separated values"),
        ],
    )
    def test_bad_assignments_are_rejected(self, assignment, fragment):
        with pytest.raises(ConfigError, match=fragment):
            apply_overrides(ExperimentConfig(), [assignment])

    def test_value_may_contain_equals_sign(self):
        config = apply_overrides(ExperimentConfig(), ["output_dir=runs=odd"])
        assert config.output_dir == "runs=odd"


class TestConfigHash:
    def test_equal_configs_share_a_hash(self):
        assert config_hash(ExperimentConfig()) == config_hash(ExperimentConfig())

    def test_output_dir_does_not_affect_the_hash(self):
        a = ExperimentConfig()
        b = apply_overrides(a, ["output_dir=/somewhere/else"])
        assert config_hash(a) == config_hash(b)

    @pytest.mark.parametrize(
        "assignment",
        ["train.seed=1", "corpus.n_weak=7", "features.n_mels=32", "pt_width=0.5"],
    )
    def test_every_other_field_changes_the_hash(self, assignment):
        base = ExperimentConfig()
        assert config_hash(apply_overrides(base, [assignment])) != config_hash(base)

    def test_hash_is_short_hex(self):
        digest = config_hash(ExperimentConfig())
        assert len(digest) == 16
        int(digest, 16)
