import json
import re

import pytest

from topotraj import cli
from topotraj.render import GT_COLOR, PRED_COLOR, ROUTE_COLOR

TINY = """\
seed: 3
grid: {height: 64, width: 64, resolution: 1.0, ego_row: 48, ego_col: 32}
model: {heads: 4, encoder_layers: 1, decoder_layers: 1, ffn_hidden: 32, stem_channels: 4,
        block_channels: [4, 8, 8, 16], fpn_channels: 8}
train: {epochs: 1, batch_size: 4, warmup_steps: 2}
datagen: {cloud_points: 2000, curvature_max: 0.0}
metrics: {trials: 2, magnitudes: [0.0, 1.0]}
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY)
    c = ["--config", str(cfg)]
    assert cli.main(["datagen", *c, "--out", str(root / "train"), "--count", "8"]) == 0
    assert cli.main(["datagen", *c, "--out", str(root / "test"), "--count", "4", "--split", "test"]) == 0
    assert cli.main(["train", *c, "--data", str(root / "train"), "--out", str(root / "run")]) == 0
    return root, c


def test_exit_codes(tmp_path, capsys):
    assert cli.main([]) == cli.EXIT_USAGE
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  bogus: 1\n")
    assert cli.main(["datagen", "--config", str(bad), "--out", str(tmp_path / "d")]) == cli.EXIT_USAGE
    assert f"{bad}:2: unknown key 'train.bogus'" in capsys.readouterr().err
    assert cli.main(["eval", "--data", str(tmp_path / "nowhere"), "--baseline",
                     "--report", str(tmp_path / "r.json")]) == cli.EXIT_DATA
    assert cli.main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA
    assert cli.main(["datagen", "--out", str(tmp_path / "d"), "--count", "0"]) == cli.EXIT_USAGE
    assert cli.main(["eval", "--bogus-flag"]) == cli.EXIT_USAGE


def test_train_artifacts(run):
    root, _ = run
    for name in ("checkpoint.json", "checkpoint.bin", "loss_log.jsonl", "run_config.yaml"):
        assert (root / "run" / name).is_file(), name
    lines = (root / "run" / "loss_log.jsonl").read_text().splitlines()
    assert len(lines) == 1 and "l_total" in json.loads(lines[0])


def test_eval_and_perturb_agree_at_zero(run):
    root, c = run
    ck = str(root / "run" / "checkpoint")
    assert cli.main(["eval", *c, "--data", str(root / "test"), "--checkpoint", ck,
                     "--report", str(root / "eval.json")]) == 0
    assert cli.main(["perturb", *c, "--data", str(root / "test"), "--checkpoint", ck,
                     "--report", str(root / "pert.json")]) == 0
    ev = json.loads((root / "eval.json").read_text())
    pert = json.loads((root / "pert.json").read_text())
    assert [p["magnitude_m"] for p in pert] == [0.0, 1.0]
    assert pert[0]["fde_m"] == pytest.approx(ev["fde_m"], abs=1e-12)
    # magnitude 0 is deterministic: a single trial, no spread
    assert pert[0]["trials"] == 1 and "fde_std" not in pert[0]
    assert pert[1]["trials"] == 2
    assert ev["sample_count"] == 4


def test_baseline_eval(run):
    root, c = run
    assert cli.main(["eval", *c, "--data", str(root / "test"), "--baseline", "--report", str(root / "b.json")]) == 0
    rep = json.loads((root / "b.json").read_text())
    assert rep["sample_count"] == 4 and rep["fde_m"] >= 0


def test_render_three_layers(run):
    root, c = run
    out = root / "scene.svg"
    assert cli.main(["render", *c, "--sample", str(root / "test" / "sample_00000"),
                     "--checkpoint", str(root / "run" / "checkpoint"), "--out", str(out)]) == 0
    svg = out.read_text()
    lines = re.findall(r'<polyline class="([^"]+)"[^>]*stroke="([^"]+)"', svg)
    assert lines == [("route", ROUTE_COLOR), ("ground-truth", GT_COLOR), ("prediction", PRED_COLOR)]
    # without a checkpoint only route and ground truth are drawn
    assert cli.main(["render", *c, "--sample", str(root / "test" / "sample_00000"), "--out", str(out)]) == 0
    assert out.read_text().count("<polyline") == 2
    assert cli.main(["render", *c, "--sample", str(root), "--out", str(out)]) == cli.EXIT_DATA


def test_missing_checkpoint(run, tmp_path):
    root, c = run
    assert cli.main(["eval", *c, "--data", str(root / "test"), "--checkpoint", str(tmp_path / "none"),
                     "--report", str(tmp_path / "r.json")]) == cli.EXIT_DATA
    assert cli.main(["eval", *c, "--data", str(root / "test"), "--report", str(tmp_path / "r.json")]) \
        == cli.EXIT_USAGE
