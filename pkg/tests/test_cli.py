import json
import subprocess
import sys

import numpy as np
import pytest

from pifenet.cli import main
from pifenet.config import PipelineConfig


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = PipelineConfig(x_min=0.0, x_max=5.12, y_min=-2.56, y_max=2.56, pillar_x=0.32, pillar_y=0.32,
                         max_pillars=64, max_points=4, pillar_channels=8, bifpn_width=4, ground_points=60,
                         min_pedestrians=1, max_pedestrians=2, poles=0, num_scenes=2, epochs=3)
    (root / "micro.cfg").write_text(cfg.dumps())
    assert main(["train-toy", "--config", str(root / "micro.cfg"), "--out", str(root / "train"),
                 "--log-every", "0"]) == 0
    return root


def test_train_outputs(workdir):
    t = workdir / "train"
    for name in ("checkpoint.npz", "loss_trace.csv", "loss.png", "train.json", "config.txt"):
        assert (t / name).is_file()
    summary = json.loads((t / "train.json").read_text())
    assert summary["schema"] == "pifenet.train/1" and summary["epochs"] == 3 and summary["scenes"] == 2
    assert len(list((t / "scenes").glob("*.bin"))) == 2


def test_pillarize(workdir):
    out = workdir / "pil"
    src = workdir / "train" / "scenes" / "000000.bin"
    assert main(["pillarize", str(src), "--config", str(workdir / "micro.cfg"), "--out", str(out)]) == 0
    summary = json.loads((out / "pillars.json").read_text())
    assert summary["schema"] == "pifenet.pillars/1" and summary["grid"] == [16, 16]
    assert (out / "occupancy.png").is_file()
    with np.load(out / "pillars.npz") as z:
        assert z["features"].shape == (64, 4, 9)


def test_infer_then_eval(workdir):
    t = workdir / "train"
    out = workdir / "dets"
    assert main(["infer", str(t / "scenes"), "--checkpoint", str(t / "checkpoint.npz"), "--out", str(out),
                 "--score-floor", "0.0", "--dump-bev-ppm"]) == 0
    meta = json.loads((out / "infer.json").read_text())
    assert meta["schema"] == "pifenet.infer/1" and len(meta["frames"]) == 2
    assert (out / "000000.ppm").read_bytes().startswith(b"P6 ")
    ev_dir = workdir / "eval"
    assert main(["eval", "--dets", str(out), "--labels", str(t / "labels"), "--out", str(ev_dir)]) == 0
    report = json.loads((ev_dir / "eval.json").read_text())
    assert report["schema"] == "pifenet.eval/1" and report["frames"] == 2
    for name in ("eval.csv", "pr.csv", "pr.png"):
        assert (ev_dir / name).is_file()


def test_bench(workdir):
    out = workdir / "bench"
    assert main(["bench", "--config", str(workdir / "micro.cfg"), "--out", str(out)]) == 0
    rep = json.loads((out / "bench.json").read_text())
    assert {r["stage"] for r in rep["stages"]} >= {"pre-processing", "PAA", "scatter", "Mini-BiFPN",
                                                   "post-processing", "end-to-end"}
    assert (out / "bench.png").is_file() and (out / "bench.csv").is_file()


def test_usage_errors_exit_2(workdir, tmp_path):
    (tmp_path / "bad.bin").write_bytes(bytes(17))
    assert main(["pillarize", str(tmp_path / "bad.bin"), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "bad.cfg").write_text("paa_dpeth = 1\n")
    assert main(["selftest", "--config", str(tmp_path / "bad.cfg")]) == 2
    other = tmp_path / "other.cfg"
    other.write_text((workdir / "micro.cfg").read_text() + "paa_depth = 1\n")
    assert main(["infer", str(workdir / "train" / "scenes"), "--checkpoint",
                 str(workdir / "train" / "checkpoint.npz"), "--config", str(other),
                 "--out", str(tmp_path / "o2")]) == 2
    assert main(["bench", "--config", str(workdir / "micro.cfg"), "--warmup", "3",
                 "--out", str(tmp_path / "o3")]) == 2


def test_selftest_exit_codes(tmp_path):
    assert main(["selftest", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "selftest.json").read_text())
    assert rep["schema"] == "pifenet.selftest/1" and all(c["passed"] for c in rep["checks"])
    (tmp_path / "eps.cfg").write_text("gate_eps = 1.0\n")
    assert main(["selftest", "--config", str(tmp_path / "eps.cfg")]) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "pifenet", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("pillarize", "train-toy", "infer", "eval", "bench", "selftest"):
        assert cmd in proc.stdout
