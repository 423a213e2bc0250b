import hashlib
import json

import pytest

from weakloc.cli import main


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    assert "all checks passed" in capsys.readouterr().out


def test_missing_config_names_path(capsys, tmp_path):
    missing = tmp_path / "missing.cfg"
    assert main(["train", "--config", str(missing), "--data", str(tmp_path), "--out", str(tmp_path)]) == 1
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["bogus"], ["synth"], ["eval", "--checkpoint", "x"]])
def test_usage_errors(argv):
    assert main(argv) == 1


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  learning_rate: 0.1\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_missing_checkpoint(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "no.pt"), "--data", str(tmp_path),
                 "--report", str(tmp_path / "r")]) == 1


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.yaml"
    cfg.write_text("train:\n  max_epochs: 1\n  batch_size: 16\neval:\n  latency_frames: 2\n")
    steps = [
        ["synth", "--config", str(cfg), "--seed", "5", "--subjects", "2", "--frames", "14", "--out", str(root / "raw")],
        ["preprocess", "--config", str(cfg), "--in", str(root / "raw"), "--out", str(root / "pre")],
        ["train", "--config", str(cfg), "--seed", "5", "--data", str(root / "pre"), "--out", str(root / "run")],
        ["eval", "--checkpoint", str(root / "run" / "checkpoint.pt"), "--data", str(root / "pre"),
         "--report", str(root / "report")],
    ]
    codes = [main(argv) for argv in steps]
    return root, cfg, codes


def test_pipeline_runs(pipeline):
    root, _, codes = pipeline
    assert codes == [0, 0, 0, 0]
    assert len(list((root / "raw" / "frames").glob("*.png"))) == 28
    assert (root / "run" / "checkpoint.pt").exists()
    for name in ("report.csv", "confusion.csv", "latency.csv"):
        assert (root / "report" / name).exists()
    assert list((root / "report").glob("pr_*.csv"))
    assert list((root / "report" / "overlays").glob("*.png"))


def test_config_echoed_everywhere(pipeline):
    root, _, _ = pipeline
    for d in ("raw", "pre", "run", "report"):
        doc = json.loads((root / d / "config.json").read_text())
        assert set(doc) == {"seed", "data", "geometry", "sp", "model", "train", "eval"}
    assert json.loads((root / "run" / "config.json").read_text())["seed"] == 5
    assert json.loads((root / "run" / "config.json").read_text())["train"]["max_epochs"] == 1


def test_synth_and_preprocess_idempotent(pipeline, tmp_path):
    root, cfg, _ = pipeline
    assert main(["synth", "--config", str(cfg), "--seed", "5", "--subjects", "2", "--frames", "14",
                 "--out", str(tmp_path / "raw")]) == 0
    assert digest(tmp_path / "raw") == digest(root / "raw")
    assert main(["preprocess", "--config", str(cfg), "--in", str(tmp_path / "raw"),
                 "--out", str(tmp_path / "pre")]) == 0
    assert digest(tmp_path / "pre") == digest(root / "pre")


def test_infer_writes_overlay(pipeline, capsys):
    root, _, _ = pipeline
    frame = sorted((root / "raw" / "frames").glob("*.png"))[0]
    out = root / "infer" / "overlay.png"
    assert main(["infer", "--checkpoint", str(root / "run" / "checkpoint.pt"), "--in", str(frame),
                 "--overlay", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.startswith("label ") and "\nbox " in text
    assert out.exists()
