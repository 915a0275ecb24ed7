from importlib import resources

import pytest
import yaml

from topotraj import config as cfgmod
from topotraj.config import ConfigLoadError, RunConfig, apply_overrides, load, loads


def test_defaults_round_trip():
    rc = RunConfig()
    assert loads(rc.dump()) == rc
    assert loads("") == rc
    assert rc.model.stem_channels == 16 and rc.train.warmup_steps == 200 and rc.train.lr == 0.003


def test_bundled_default_matches_code():
    text = (resources.files("topotraj") / "configs" / "default.yaml").read_text()
    assert loads(text) == RunConfig()


def test_partial_document_fills_defaults():
    rc = loads("grid: {height: 64, width: 64, resolution: 1.0, ego_row: 48, ego_col: 32}\ntrain: {lr: 0.001}\n")
    assert rc.model.height == 64 and rc.model.width == 64  # model input follows the grid
    assert rc.train.lr == 0.001 and rc.train.batch_size == 8


def test_unknown_key_reports_line(tmp_path):
    p = tmp_path / "x.yaml"
    p.write_text("seed: 1\ntrain:\n  lr: 0.01\n  bogus: 3\n")
    with pytest.raises(ConfigLoadError) as err:
        load(p)
    assert str(err.value) == f"{p}:4: unknown key 'train.bogus'"
    assert err.value.line == 4


@pytest.mark.parametrize("text, line, fragment", [
    ("model:\n  heads: many\n", 2, "must be an integer"),
    ("train:\n  lr: -1\n", 1, "lr"),
    ("grid:\n  height: 100\n", 1, "divisible by 8"),
    ("widgets: 1\n", 1, "unknown section"),
    ("model:\n  num_waypoints: 8\n", None, "must equal model.num_waypoints"),  # cross-field: no single line
    ("seed: [1\n", None, "invalid YAML"),
])
def test_invalid_documents(text, line, fragment):
    with pytest.raises(ConfigLoadError) as err:
        loads(text, "c.yaml")
    assert fragment in str(err.value)
    if line is not None:
        assert err.value.line is not None


def test_overrides():
    doc = apply_overrides({}, ["train.lr=0.01", "model.block_channels=[8, 8, 16, 16]", "metrics.aligned=false"])
    assert doc == {"train": {"lr": 0.01}, "model": {"block_channels": [8, 8, 16, 16]},
                   "metrics": {"aligned": False}}
    rc = load(None, ["train.lr=0.01", "seed=5", "train.max_steps=10"])
    assert rc.train.lr == 0.01 and rc.seed == 5 and rc.train.max_steps == 10
    with pytest.raises(ConfigLoadError):
        apply_overrides({}, ["no_equals_sign"])


def test_env_var(tmp_path, monkeypatch):
    p = tmp_path / "env.yaml"
    p.write_text("seed: 42\n")
    monkeypatch.setenv(cfgmod.CONFIG_ENV, str(p))
    assert load().seed == 42
    monkeypatch.setenv(cfgmod.CONFIG_ENV, str(tmp_path / "missing.yaml"))
    with pytest.raises(ConfigLoadError):
        load()


def test_dump_is_sorted_yaml():
    doc = yaml.safe_load(RunConfig().dump())
    assert list(doc) == sorted(doc)
    assert RunConfig().input_settings().grid == RunConfig().grid
