import json
import subprocess
import sys

import numpy as np
import pytest

from vp2p import io
from vp2p.cli import resolve_config, run_cli
from vp2p.inversion import load_nulls
from vp2p.scenegen import reference_scene

SMALL = "backbone = random\nnum_steps = 5\nfinetune_steps = 4\nnull_inner_steps = 2\nguidance = 3.0\n"


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return str(path)


def test_no_subcommand_prints_usage(capsys):
    assert run_cli([]) == 1
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["bogus"], ["synth"], ["synth", "--out", "x", "--wat"],
                                  ["edit", "--out", "x"], ["ablate", "--out", "x", "--dst", "a", "--jobs", "0"]])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run_cli(argv) == 1


def test_config_errors_are_usage_errors(tmp_path, monkeypatch):
    bad = tmp_path / "bad.cfg"
    bad.write_text("warp_factor = 9\n")
    assert run_cli(["invert", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    bad.write_text("tau_ratio = 7\n")
    assert run_cli(["invert", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    monkeypatch.setenv("VP2P_SEED", "seven")
    assert run_cli(["invert", "--out", str(tmp_path / "o")]) == 1


def test_runtime_failure_exit_code(tmp_path, cfg):
    missing = str(tmp_path / "nope.vp2p")
    assert run_cli(["metrics", "--a", missing, "--b", missing]) == 2
    video = tmp_path / "v.vp2p"
    io.write_tensor(video, np.zeros((2, 3, 8, 8)))  # wrong channel count
    assert run_cli(["invert", "--config", cfg, "--video", str(video), "--src", "a red square",
                    "--out", str(tmp_path / "o")]) == 2


def test_seed_precedence(tmp_path, cfg, monkeypatch):
    class Args:
        config = cfg
        seed = None

    path = tmp_path / "seeded.cfg"
    path.write_text(SMALL + "seed = 5\n")
    Args.config = str(path)
    monkeypatch.delenv("VP2P_SEED", raising=False)
    assert resolve_config(Args).seed == 5
    monkeypatch.setenv("VP2P_SEED", "9")
    assert resolve_config(Args).seed == 9
    Args.seed = 11
    assert resolve_config(Args).seed == 11


def test_synth(tmp_path):
    assert run_cli(["synth", "--out", str(tmp_path), "--color", "blue", "--frames", "3"]) == 0
    video = io.read_tensor(tmp_path / "video.vp2p")
    assert video.shape == (3, 4, 16, 16)
    assert (tmp_path / "prompt.txt").read_text().strip() == "a blue square"
    assert len(list((tmp_path / "frames").glob("*.ppm"))) == 3
    assert io.read_tensor(tmp_path / "mask.vp2p").sum() == 75


def test_invert_then_metrics_reproduces_report(tmp_path, cfg, capsys):
    out = tmp_path / "inv"
    assert run_cli(["invert", "--config", cfg, "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    for rel in report["artifacts"].values():
        assert (out / rel).exists()
    assert load_nulls(out / "nulls.vp2n").T == 5
    capsys.readouterr()
    assert run_cli(["metrics", "--a", str(out / "reconstruction.vp2p"), "--b", str(out / "video.vp2p"),
                    "--out", str(tmp_path / "m.json")]) == 0
    metrics = json.loads((tmp_path / "m.json").read_text())
    assert metrics["psnr"] == report["metrics"]["reconstruction_psnr"]


def test_finetune_then_edit_with_model(tmp_path, cfg):
    ft = tmp_path / "ft"
    assert run_cli(["finetune", "--config", cfg, "--out", str(ft)]) == 0
    assert len(json.loads((ft / "finetune.json").read_text())["losses"]) == 4
    out = tmp_path / "edit"
    assert run_cli(["edit", "--config", cfg, "--model", str(ft / "model.vp2m"), "--dst", "a blue square",
                    "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["finetune_steps"] == 4
    for rel in report["artifacts"].values():
        assert (out / rel).exists()
    assert "masked_psnr_edit" in report["metrics"]


def test_edit_on_external_video(tmp_path, cfg):
    video, mask, _ = reference_scene()
    io.write_tensor(tmp_path / "v.vp2p", video[:2])
    io.write_tensor(tmp_path / "m.vp2p", mask.masks[:2].astype(float))
    base = ["--config", cfg, "--video", str(tmp_path / "v.vp2p"), "--dst", "a blue square"]
    assert run_cli(["edit", *base, "--out", str(tmp_path / "x")]) == 1  # --src missing
    assert run_cli(["edit", *base, "--src", "a red square", "--mask", str(tmp_path / "m.vp2p"),
                    "--out", str(tmp_path / "e")]) == 0
    assert run_cli(["baseline", *base, "--src", "a red square", "--mask", str(tmp_path / "m.vp2p"),
                    "--out", str(tmp_path / "b")]) == 0
    report = json.loads((tmp_path / "b" / "report.json").read_text())
    assert np.isfinite(report["masked_psnr_edit"])


def test_ablate_and_export(tmp_path, cfg, capsys):
    out = tmp_path / "abl"
    assert run_cli(["ablate", "--config", cfg, "--dst", "a blue square", "--arms", "shared_null,per_frame_null",
                    "--out", str(out)]) == 0
    rows = json.loads((out / "ablation.json").read_text())["rows"]
    assert [r["arm"] for r in rows] == ["shared_null", "per_frame_null"]
    assert "per_frame_null" in (out / "ablation.txt").read_text()
    assert run_cli(["ablate", "--config", cfg, "--dst", "a blue square", "--arms", "nope",
                    "--out", str(out)]) == 1
    att = tmp_path / "att"
    assert run_cli(["export-attn", "--config", cfg, "--dst", "a blue square", "--out", str(att)]) == 0
    rows = (att / "source" / "index.tsv").read_text().splitlines()[1:]
    assert len(rows) == 5 * 8 * 3  # steps x frames x words


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "vp2p.cli"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr
