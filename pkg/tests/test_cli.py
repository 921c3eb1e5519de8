import json
import subprocess
import sys

import numpy as np
import pytest

from cellinspect import cli
from cellinspect.dataset import read_manifest, save_image
from cellinspect.modelfile import read as read_model

TINY = ["--side", "16", "--fc", "4,4", "--batch-size", "4"]


def _err(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


@pytest.fixture
def synth_ds(tmp_path):
    assert cli.run(["dataset", "synth", "--per-class", "2", "--size", "16", "--out", str(tmp_path / "ds")]) == 0
    return tmp_path / "ds"


def test_unknown_commands(capsys):
    assert cli.run(["frobnicate"]) == 64
    assert _err(capsys)["error"] == "unknown_command"
    assert cli.run(["dataset", "melt"]) == 64
    assert cli.run([]) == 64


def test_bad_flags_and_config(tmp_path, capsys):
    assert cli.run(["train", "--iterations", "many"]) == 65
    assert _err(capsys) == {"error": "bad_config", "exit": 65,
                            "message": "argument --iterations: invalid int value: 'many'"}
    assert cli.run(["train", "--method", "s3", "--out", str(tmp_path / "m")]) == 65   # no data source
    cfg = tmp_path / "c.cfg"
    cfg.write_text("colour = red\n")
    assert cli.run(["train", "--config", str(cfg)]) == 65
    cfg.write_text("iterations = lots\n")
    assert cli.run(["train", "--config", str(cfg)]) == 65
    cfg.write_text("just words\n")
    assert cli.run(["train", "--config", str(cfg)]) == 65
    assert cli.run(["train", "--config", str(tmp_path / "none.cfg")]) == 74
    assert cli.run(["train", "--method", "s3", "--synth", "1", "--dropout", "2", "--out", str(tmp_path / "m")]) == 65


def test_io_errors(tmp_path, synth_ds, capsys):
    assert cli.run(["eval", "--manifest", str(synth_ds), "--model", str(tmp_path / "nope.cimf"),
                    "--out", str(tmp_path / "e")]) == 74
    (tmp_path / "bad.cimf").write_bytes(b"CIMF garbage bytes")
    assert cli.run(["eval", "--manifest", str(synth_ds), "--model", str(tmp_path / "bad.cimf"),
                    "--out", str(tmp_path / "e")]) == 74
    assert _err(capsys)["error"] == "io"
    (tmp_path / "bad.png").write_bytes(b"nope")
    assert cli.run(["activations", "--method", "s3", "--image", str(tmp_path / "bad.png"),
                    "--out", str(tmp_path / "a")]) == 74


def test_nan_loss_exit_70(tmp_path, synth_ds, capsys):
    code = cli.run(["train", "--manifest", str(synth_ds), "--method", "s3", *TINY, "--iterations", "5",
                    "--step-size", "1e30", "--out", str(tmp_path / "m.cimf")])
    assert code == 70 and _err(capsys)["error"] == "numeric"
    assert not (tmp_path / "m.cimf").exists()


def test_train_is_reproducible_and_embeds_config(tmp_path, synth_ds):
    args = ["train", "--manifest", str(synth_ds), "--method", "ms", *TINY, "--iterations", "6",
            "--seed", "1", "--deterministic"]
    assert cli.run(args + ["--out", str(tmp_path / "a.cimf")]) == 0
    assert cli.run(args + ["--out", str(tmp_path / "b.cimf")]) == 0
    assert (tmp_path / "a.cimf").read_bytes() == (tmp_path / "b.cimf").read_bytes()
    arch, k, meta, _ = read_model(tmp_path / "a.cimf")
    rc = meta["run_config"]
    assert (arch, k) == ("ms", 2)
    assert rc["seed"] == 1 and rc["iterations"] == 6 and rc["command"] == "train" and rc["fc"] == [4, 4]
    assert "out" not in rc


def test_config_file_and_flag_precedence(tmp_path, synth_ds):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nmethod = s3\nside = 16\nfc = 4,4\nbatch-size = 4\niterations = 9\nseed = 2\n")
    assert cli.run(["train", "--manifest", str(synth_ds), "--config", str(cfg), "--iterations", "3",
                    "--out", str(tmp_path / "m.cimf")]) == 0
    rc = read_model(tmp_path / "m.cimf")[2]["run_config"]
    assert rc["iterations"] == 3 and rc["seed"] == 2 and rc["method"] == "s3"


def test_eval_roc_activations_bench(tmp_path, synth_ds, capsys):
    model = tmp_path / "m.cimf"
    assert cli.run(["train", "--manifest", str(synth_ds), "--method", "s3", *TINY, "--iterations", "2",
                    "--out", str(model)]) == 0
    assert cli.run(["eval", "--manifest", str(synth_ds), "--model", str(model), "--out", str(tmp_path / "ev")]) == 0
    summary = (tmp_path / "ev" / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("# run_config ") and summary[1] == "fold,accuracy,precision,recall,f_measure"
    assert cli.run(["roc", "--manifest", str(synth_ds), "--model", str(model), "--out", str(tmp_path / "roc.csv")]) == 0
    assert 0 <= json.loads(capsys.readouterr().out.strip().splitlines()[-1])["auc"] <= 1
    img = sorted((synth_ds / "good").iterdir())[0]
    assert cli.run(["activations", "--model", str(model), "--image", str(img), "--layer", "L3",
                    "--out", str(tmp_path / "act")]) == 0
    assert len(list((tmp_path / "act").glob("L3_rgb_*.pgm"))) == 64
    assert cli.run(["bench", "--methods", "s3,ms", "--side", "16", "--images", "5", "--runs", "2",
                    "--out", str(tmp_path / "t.csv")]) == 0
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[1] == "method,images,seconds,per_image" and len(lines) == 4


def test_baseline_and_crossval(tmp_path, synth_ds):
    svm = tmp_path / "svm.cimf"
    assert cli.run(["baseline", "--manifest", str(synth_ds), "--method", "svm-gabor", "--out", str(svm)]) == 0
    assert read_model(svm)[0] == "svm-gabor"
    assert cli.run(["eval", "--manifest", str(synth_ds), "--model", str(svm), "--out", str(tmp_path / "e")]) == 0
    out = tmp_path / "cv"
    assert cli.run(["crossval", "--synth", "5", "--synth-size", "16", "--method", "ms", "--k", "5", "--seed", "7",
                    *TINY, "--iterations", "2", "--out", str(out)]) == 0
    rows = [ln for ln in (out / "summary.csv").read_text().splitlines() if not ln.startswith("#")]
    assert len(rows) == 1 + 5 + 1 and rows[-1].startswith("avg,")
    assert '"seed": 7' in (out / "folds.csv").read_text().splitlines()[0]


def test_dataset_split_and_inputs_untouched(tmp_path, rng):
    img = rng.integers(0, 256, (1868, 1868, 3), dtype=np.uint8)
    src = tmp_path / "cell.png"
    save_image(img, src)
    before = src.read_bytes()
    assert cli.run(["dataset", "split", "--src", str(src), "--window", "469", "--stride", "235",
                    "--label", "scratch", "--out", str(tmp_path / "p")]) == 0
    assert len(list((tmp_path / "p" / "scratch").glob("*.png"))) == 49
    m = read_manifest(tmp_path / "p" / "manifest.csv")
    assert len(m) == 49 and m.counts == {"scratch": 49}
    assert src.read_bytes() == before


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "cellinspect", "nonsense"], capture_output=True, text=True)
    assert r.returncode == 64
    assert json.loads(r.stderr.strip())["exit"] == 64
