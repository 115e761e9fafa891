import pytest

from era_kd.config import SCHEMA, RunConfig, load_config, parse_overrides, parse_text
from era_kd.errors import ConfigError


def test_defaults_cover_schema():
    cfg = RunConfig()
    assert dict(cfg.items()).keys() == SCHEMA.keys()
    assert cfg["era.K"] == 4 and cfg["loss.beta"] == 2.0


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="foo.bar") as exc:
        RunConfig({"foo.bar": "1"})
    assert exc.value.key == "foo.bar"
    with pytest.raises(ConfigError, match="foo.bar"):
        parse_overrides(["--foo.bar", "1"])
    with pytest.raises(ConfigError, match="foo.bar"):
        parse_text("seed = 1\nfoo.bar = 2\n")


def test_parse_text_and_overrides(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\nseed = 3\nteacher.hidden = 32, 16  # two layers\nera.head_t_frozen = no\n")
    cfg = load_config(path, parse_overrides(["--seed=7", "--loss.schedule", "constant"]))
    assert cfg["seed"] == 7
    assert cfg["teacher.hidden"] == (32, 16)
    assert cfg["era.head_t_frozen"] is False
    assert cfg["loss.schedule"] == "constant"


def test_bad_values():
    for key, value in (("seed", "x"), ("loss.schedule", "cosine"), ("era.branch_feed", "tree"),
                       ("infer.mode", "q"), ("run_id", "a/b"), ("era.detach_targets", "maybe")):
        with pytest.raises(ConfigError) as exc:
            RunConfig({key: value})
        assert exc.value.key == key


def test_malformed_line():
    with pytest.raises(ConfigError, match=":2:"):
        parse_text("seed = 1\njust words\n")


def test_missing_override_value():
    with pytest.raises(ConfigError):
        parse_overrides(["--seed"])
    with pytest.raises(ConfigError):
        parse_overrides(["seed", "1"])


def test_dump_round_trip():
    cfg = RunConfig({"teacher.hidden": "8,4", "train.learning_rate": "0.1", "era.detach_targets": "false"})
    again = RunConfig(parse_text(cfg.dumps()))
    assert again.dumps() == cfg.dumps()


def test_run_dir(monkeypatch, tmp_path):
    monkeypatch.delenv("ERA_OUTPUT_DIR", raising=False)
    assert str(RunConfig().run_dir) == "runs/default"
    monkeypatch.setenv("ERA_OUTPUT_DIR", str(tmp_path))
    assert RunConfig({"run_id": "r1"}).run_dir == tmp_path / "r1"
    assert RunConfig({"output_dir": "/x"}).run_dir.as_posix() == "/x/default"


def test_copy_is_independent():
    a = RunConfig()
    b = a.copy(seed=4, era__K=2)
    assert (a["seed"], a["era.K"]) == (0, 4)
    assert (b["seed"], b["era.K"]) == (4, 2)
