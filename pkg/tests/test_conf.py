"""
Tests for run configuration: config file parsing, layer precedence and the
typed config objects.
"""
import pytest

from clinical_lm.conf import (
    DEFAULTS,
    CorpusConfig,
    FinetuneConfig,
    ParallelConfig,
    PretrainConfig,
    QaWindowing,
    get_setting,
    load_config_file,
    parse_config_text,
    resolve_run_config,
    split_list,
)
from clinical_lm.errors import ConfigError


@pytest.mark.unit
class TestParseConfigText:
    def test_types_follow_defaults(self):
        values = parse_config_text(
            """
            # pretraining
            batch_size = 8
            lr = 0.001
            wall-clock = off
            transport = sockets   # loopback
            num_layers = 2
            """
        )
        assert values == {
            "batch_size": 8,
            "lr": 0.001,
            "wall_clock": False,
            "transport": "sockets",
            "num_layers": 2,
        }

    @pytest.mark.parametrize(
        "text",
        [
            "unknown_key = 1",
            "batch_size 8",
            "batch_size = eight",
            "wall_clock = maybe",
            "precision = f16",
            "mask_mode = random",
        ],
    )
    def test_invalid_lines(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_error_names_source_and_line(self):
        with pytest.raises(ConfigError, match="run.cfg:2"):
            parse_config_text("seed = 1\nnope = 2\n", source="run.cfg")

    def test_load_config_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 9\nhosts = hosts.txt\n", encoding="utf-8")
        assert load_config_file(str(path)) == {"seed": 9, "hosts": "hosts.txt"}
        assert load_config_file(None) == {}


@pytest.mark.unit
class TestResolveRunConfig:
    def test_cli_over_file_over_defaults(self):
        resolved = resolve_run_config(
            file_values={"seed": 5, "batch_size": 8},
            cli_values={"seed": "7", "lr": None},
        )
        assert resolved["seed"] == 7
        assert resolved["batch_size"] == 8
        assert resolved["lr"] == DEFAULTS["lr"]
        assert resolved["preset"] == DEFAULTS["preset"]

    def test_cli_values_are_validated(self):
        with pytest.raises(ConfigError):
            resolve_run_config(cli_values={"transport": "carrier-pigeon"})

    def test_get_setting_falls_back_to_default(self):
        assert get_setting({"seed": None}, "seed") == DEFAULTS["seed"]
        assert get_setting({"seed": 3}, "seed") == 3
        assert get_setting(None, "out") == DEFAULTS["out"]

    @pytest.mark.parametrize(
        "value,expected",
        [(None, []), ("a, b,,c", ["a", "b", "c"]), (["x ", ""], ["x"])],
    )
    def test_split_list(self, value, expected):
        assert split_list(value) == expected


@pytest.mark.unit
class TestTypedConfigs:
    def test_pretrain_from_mapping(self):
        cfg = PretrainConfig.from_mapping({"batch_size": "4", "wall_clock": "false", "lr": None})
        assert cfg.batch_size == 4
        assert cfg.wall_clock is False
        assert cfg.lr == DEFAULTS["lr"]

    @pytest.mark.parametrize(
        "mapping",
        [{"mask_rate": 1.5}, {"val_fraction": 1.0}, {"batch_size": 0}, {"mask_mode": "random"}],
    )
    def test_pretrain_rejects(self, mapping):
        with pytest.raises(ConfigError):
            PretrainConfig.from_mapping(mapping)

    def test_finetune_uses_prefixed_keys(self):
        cfg = FinetuneConfig.from_mapping({"finetune_steps": 12, "finetune_lr": 0.01, "ner_mode": "per-category"})
        assert (cfg.steps, cfg.lr, cfg.ner_mode) == (12, 0.01, "per-category")
        with pytest.raises(ConfigError):
            FinetuneConfig.from_mapping({"ner_mode": "nested"})

    def test_corpus_sample_fraction(self):
        assert CorpusConfig.from_mapping({"deid_source_tags": "a,b"}).deid_tags == ["a", "b"]
        with pytest.raises(ConfigError):
            CorpusConfig.from_mapping({"sample_fraction": 0.0})

    def test_parallel_world_size(self):
        cfg = ParallelConfig.from_mapping({"model_parallel": 2, "data_parallel": 3, "shard_embeddings": "yes"})
        assert cfg.world_size == 6
        assert cfg.shard_embeddings is True
        with pytest.raises(ConfigError):
            ParallelConfig.from_mapping({"model_parallel": 0})

    def test_qa_windowing_defaults_fit_512(self):
        fitted = QaWindowing().fit(512)
        assert (fitted.max_question, fitted.window, fitted.stride) == (64, 445, 395)
        assert fitted.overlap == QaWindowing().overlap
        assert QaWindowing.from_mapping({"qa_window": 32, "qa_stride": 16}).window == 32
