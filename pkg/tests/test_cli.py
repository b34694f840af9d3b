import csv
import json
import struct
import subprocess
import sys

import numpy as np
import pytest

from umad.cli import main, run
from umad.data_synth import read_flow_file, read_frames, write_frames
from umad.harness import CKPT_MAGIC, save_checkpoint
from umad.model import UMAD

TINY = dict(base_channels=4, state_dim=4, patch_size=32, window=3, post_frames=1, diffusion_steps=3,
            batch=2, epochs=1, lr=1e-3, temporal_pairs=1, max_steps=2)


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    res = run(["gen-data", "--out", str(out), "--preset", "shift", "--seed", "1", "--size", "32x32",
               "--frames", "4", "--count", "2"])
    assert res.exit_code == 0
    return out


@pytest.fixture
def tiny_ckpt(tmp_path, dataset):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    res = run(["train", "--config", str(cfg), "--data", str(dataset / "manifest.json"), "--out",
               str(tmp_path / "run")])
    assert res.exit_code == 0, res.summary
    return tmp_path / "run" / "final.ckpt"


def test_gen_data_counts_and_determinism(tmp_path):
    args = ["gen-data", "--preset", "shift", "--seed", "1", "--size", "64x64", "--frames", "9"]
    a = run(args + ["--out", str(tmp_path / "a")])
    assert a.exit_code == 0
    seq = tmp_path / "a" / "seq_000"
    assert len(list((seq / "clean").iterdir())) == 9
    assert len(list((seq / "degraded").iterdir())) == 9
    assert len(list((seq / "flow").iterdir())) == 8
    assert len(list((tmp_path / "a").glob("*.json"))) == 1
    run(args + ["--out", str(tmp_path / "b")])
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


@pytest.mark.parametrize("preset", ["rotate", "mixed"])
def test_gen_data_presets(tmp_path, preset):
    res = run(["gen-data", "--out", str(tmp_path), "--preset", preset, "--size", "32x32", "--frames", "3"])
    assert res.exit_code == 0 and res.summary["preset"] == preset


def test_gen_data_input_errors(tmp_path):
    res = run(["gen-data", "--out", str(tmp_path), "--degrade", "noise=0.1,blurr=2"])
    assert res.exit_code == 2 and "blurr" in res.summary["error"]
    res = run(["gen-data", "--out", str(tmp_path), "--degrade", "q=abc"])
    assert res.exit_code == 2 and "'q'" in res.summary["error"]
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(["gen-data", "--out", str(blocker / "sub")]).exit_code == 2
    with pytest.raises(SystemExit) as info:
        run(["gen-data", "--out", str(tmp_path), "--size", "64by64"])
    assert info.value.code == 2


def test_seed_environment_override(tmp_path, monkeypatch):
    run(["gen-data", "--out", str(tmp_path / "a"), "--seed", "5", "--size", "16x16", "--frames", "2"])
    monkeypatch.setenv("UMAD_SEED", "5")
    run(["gen-data", "--out", str(tmp_path / "b"), "--seed", "9", "--size", "16x16", "--frames", "2"])
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    monkeypatch.setenv("UMAD_SEED", "five")
    assert run(["gen-data", "--out", str(tmp_path / "c")]).exit_code == 2


def test_train_outputs_and_errors(tmp_path, tiny_ckpt):
    run_dir = tiny_ckpt.parent
    assert (run_dir / "train_log.jsonl").exists() and (run_dir / "config.json").exists()
    assert run(["train", "--data", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]).exit_code == 2


def test_train_nan_stress_exits_3(tmp_path, dataset):
    cfg = tmp_path / "stress.json"
    cfg.write_text(json.dumps({**TINY, "lr": 1e3, "max_steps": 30, "epochs": 30, "batch": 1}))
    res = run(["train", "--config", str(cfg), "--data", str(dataset / "manifest.json"), "--out",
               str(tmp_path / "stress")])
    assert res.exit_code == 3
    assert (tmp_path / "stress" / "last_good.ckpt").exists()
    assert res.artifacts == [tmp_path / "stress" / "last_good.ckpt"]


def test_restore_count_and_reproducibility(tmp_path, dataset, tiny_ckpt):
    inp = dataset / "seq_000" / "degraded"
    outs = []
    for name in ("r1", "r2"):
        res = run(["restore", "--ckpt", str(tiny_ckpt), "--in", str(inp), "--out", str(tmp_path / name),
                   "--seed", "3"])
        assert res.exit_code == 0
        outs.append(tree_bytes(tmp_path / name))
    assert outs[0] == outs[1]
    assert len(outs[0]) == len(list(inp.iterdir()))
    restored = read_frames(tmp_path / "r1")
    assert restored.frames.shape == read_frames(inp).frames.shape


def _retag_config(src, dst, **changes):
    raw = src.read_bytes()
    (n,) = struct.unpack("<Q", raw[8:16])
    doc = json.loads(raw[16:16 + n])
    doc["model_config"]["denoiser"].update(changes)
    head = json.dumps(doc, sort_keys=True).encode()
    dst.write_bytes(CKPT_MAGIC + struct.pack("<Q", len(head)) + head + raw[16 + n:])


def test_restore_topology_mismatch_exits_4(tmp_path, dataset, tiny_ckpt):
    bad = tmp_path / "bad.ckpt"
    _retag_config(tiny_ckpt, bad, base_channels=8)
    res = run(["restore", "--ckpt", str(bad), "--in", str(dataset / "seq_000" / "degraded"), "--out",
               str(tmp_path / "r")])
    assert res.exit_code == 4 and "denoiser" in res.summary["error"]
    garbage = tmp_path / "garbage.ckpt"
    garbage.write_bytes(b"not a checkpoint")
    res = run(["restore", "--ckpt", str(garbage), "--in", str(dataset / "seq_000" / "degraded"), "--out",
               str(tmp_path / "r")])
    assert res.exit_code == 2


def test_restore_too_short_input(tmp_path, tiny_ckpt):
    frames = np.random.default_rng(0).random((2, 32, 32, 3))
    from umad.data_synth import FrameSequence
    write_frames(tmp_path / "short", FrameSequence(frames))
    res = run(["restore", "--ckpt", str(tiny_ckpt), "--in", str(tmp_path / "short"), "--out", str(tmp_path / "o")])
    assert res.exit_code == 2


def test_eval_report_schema_and_csv(tmp_path, dataset, tiny_ckpt):
    report = tmp_path / "rep" / "metrics.json"
    res = run(["eval", "--ckpt", str(tiny_ckpt), "--data", str(dataset / "manifest.json"), "--report",
               str(report), "--per-frame"])
    assert res.exit_code == 0
    doc = json.loads(report.read_text())
    assert {"psnr_db", "ssim", "tof", "mean_flow_mag"} <= set(doc)
    with open(report.with_suffix(".csv")) as f:
        rows = [r for r in csv.DictReader(f) if r["frame"] == "all"]
    assert len(rows) == 2
    for key in ("psnr_db", "ssim", "tof", "mean_flow_mag"):
        assert doc[key] == pytest.approx(np.mean([float(r[key]) for r in rows]), rel=1e-12)
    again = tmp_path / "rep2.json"
    run(["eval", "--ckpt", str(tiny_ckpt), "--data", str(dataset / "manifest.json"), "--report", str(again)])
    assert again.read_bytes() == report.read_bytes()


def test_eval_reference_against_itself(tmp_path):
    data = tmp_path / "clean"
    run(["gen-data", "--out", str(data), "--size", "32x32", "--frames", "3", "--degrade", ""])
    report = tmp_path / "m.json"
    res = run(["eval", "--passthrough", "--data", str(data / "manifest.json"), "--report", str(report)])
    assert res.exit_code == 0
    doc = json.loads(report.read_text())
    assert doc["tof"] == 0 and doc["ssim"] == pytest.approx(1.0) and doc["psnr_db"] == "inf"
    assert run(["eval", "--data", str(data / "manifest.json"), "--report", str(report)]).exit_code == 2


def test_flow_command(tmp_path, dataset, tiny_ckpt):
    from umad.data_synth import FrameSequence
    static = np.repeat(np.random.default_rng(0).random((1, 32, 32, 3)), 3, axis=0)
    write_frames(tmp_path / "static", FrameSequence(static))
    res = run(["flow", "--in", str(tmp_path / "static"), "--out", str(tmp_path / "sf")])
    files = sorted((tmp_path / "sf").iterdir())
    assert res.exit_code == 0 and len(files) == 2
    assert all(not read_flow_file(p).as_array().any() for p in files)

    seq = dataset / "seq_000"
    run(["flow", "--in", str(seq / "clean"), "--out", str(tmp_path / "of")])
    est = sorted((tmp_path / "of").iterdir())
    gt = sorted((seq / "flow").iterdir())
    assert len(est) == len(gt) == 3
    for e, g in zip(est, gt):
        a, b = read_flow_file(e).as_array(), read_flow_file(g).as_array()
        assert np.array_equal(a[8:-8, 8:-8], b[8:-8, 8:-8])

    assert run(["flow", "--in", str(seq / "clean"), "--out", str(tmp_path / "m"), "--method", "model"]).exit_code == 2
    res = run(["flow", "--in", str(seq / "clean"), "--out", str(tmp_path / "m"), "--method", "model",
               "--ckpt", str(tiny_ckpt)])
    assert res.exit_code == 0 and len(list((tmp_path / "m").iterdir())) == 3


def test_main_emits_json(tmp_path, capsys):
    code = main(["gen-data", "--out", str(tmp_path), "--size", "16x16", "--frames", "2"])
    out = json.loads(capsys.readouterr().out)
    assert code == 0 and out["exit_code"] == 0 and out["artifacts"]


@pytest.mark.parametrize("cmd,flags", [
    ("gen-data", ["--out", "--preset", "--seed", "--size", "--frames", "--count", "--degrade"]),
    ("train", ["--config", "--data", "--out", "--seed"]),
    ("restore", ["--ckpt", "--in", "--out", "--seed", "--quality", "--steps"]),
    ("eval", ["--ckpt", "--data", "--report", "--per-frame", "--passthrough", "--seed"]),
    ("flow", ["--in", "--out", "--method", "--ckpt", "--radius", "--block"]),
])
def test_help_lists_flags(cmd, flags):
    out = subprocess.run([sys.executable, "-m", "umad.cli", cmd, "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for f in flags:
        assert f in out.stdout
    assert "default" in out.stdout
