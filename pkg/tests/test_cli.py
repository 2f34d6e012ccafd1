import json
import subprocess
import sys

import numpy as np
import pytest

from minkgeom import cli
from minkgeom.grid_core import read_raster


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_hashes(d, skip=("resolved_config.json",)):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert run("gen-synthetic", "--out", d, "--n", 12, "--seed", 3, "--height", 16, "--width", 16) == 0
    return d


def test_gen_synthetic_replay(tmp_path):
    for name in ("a", "b"):
        assert run("gen-synthetic", "--out", tmp_path / name, "--n", 100, "--seed", 7) == 0
    a, b = tree_hashes(tmp_path / "a"), tree_hashes(tmp_path / "b")
    assert a == b and len([k for k in a if k.endswith(".mgf")]) == 100
    assert (tmp_path / "a" / "resolved_config.json").read_bytes() == (tmp_path / "b" / "resolved_config.json").read_bytes()


def test_run_manifest_checksums(corpus):
    import hashlib

    listing = json.loads((corpus / "manifest.json").read_text())
    for entry in listing["files"]:
        assert hashlib.sha256((corpus / entry["path"]).read_bytes()).hexdigest() == entry["sha256"]


def test_targets_train_eval_chain(corpus, tmp_path, capsys):
    store = tmp_path / "store"
    assert run("gen-targets", "--corpus", corpus, "--out", store, "--thresholds", "0.5,2,5") == 0
    assert (store / "run_manifest.json").is_file()
    ck = tmp_path / "ck"
    rc = run("train-emulator", "--data", store, "--out", ck, "--epochs", 1, "--batch", 4,
             "--pixel-hidden", 4, "--hidden", 4)
    assert rc == 0 and (ck / "manifest.json").is_file() and (ck / "history.csv").is_file()
    capsys.readouterr()
    assert run("eval-emulator", "--ckpt", ck, "--data", store, "--json") == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["nu_iso"] == 0.0
    assert set(metrics) >= {"M", "R2", "R2_A", "R2_P", "R2_CC"}


def test_gen_targets_worker_count_irrelevant(corpus, tmp_path):
    for w in (1, 3):
        assert run("gen-targets", "--corpus", corpus, "--out", tmp_path / f"w{w}", "--thresholds", "1,3",
                   "--workers", w) == 0
    skip = ("resolved_config.json", "run_manifest.json")
    assert tree_hashes(tmp_path / "w1", skip) == tree_hashes(tmp_path / "w3", skip)


def test_calibrate_then_targets(corpus, tmp_path):
    assert run("calibrate", "--corpus", corpus, "--out", tmp_path / "cal", "--levels", "0.5,0.9") == 0
    spec = json.loads((tmp_path / "cal" / "thresholds.json").read_text())
    assert len(spec["physical_thresholds"]) == 2
    rc = run("gen-targets", "--corpus", corpus, "--out", tmp_path / "s",
             "--thresholds-file", tmp_path / "cal" / "thresholds.json")
    assert rc == 0


def test_invert_defaults_echoed(tmp_path):
    assert run("invert", "--out", tmp_path, "--steps", 2, "--height", 8, "--width", 8) == 0
    cfg = json.loads((tmp_path / "resolved_config.json").read_text())
    assert (cfg["lr"], cfg["lambda_tv"], cfg["lambda_l2"]) == (0.1, 1e-5, 1e-6)
    assert cli.INVERT["steps"] == 200
    trace = (tmp_path / "trace.csv").read_text().splitlines()
    assert trace[0] == "step,loss" and len(trace) == 4
    assert read_raster(tmp_path / "x_star.mgf").shape == (8, 8)


def test_config_file_layering(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"steps": 3, "lr": 0.2}))
    assert run("invert", "--out", tmp_path / "o", "--config", conf, "--lr", 0.05, "--height", 8, "--width", 8) == 0
    cfg = json.loads((tmp_path / "o" / "resolved_config.json").read_text())
    assert cfg["steps"] == 3 and cfg["lr"] == 0.05


def test_exit_code_invalid(tmp_path):
    assert run("gen-targets", "--corpus", tmp_path / "missing", "--out", tmp_path / "s", "--thresholds", "1") == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    assert run("invert", "--out", tmp_path / "o", "--config", bad) == 2
    bad.write_text(json.dumps({"nonsense": 1}))
    assert run("invert", "--out", tmp_path / "o", "--config", bad) == 2
    assert run("eval-emulator", "--ckpt", tmp_path, "--data", tmp_path) == 2
    with pytest.raises(SystemExit) as exc:
        run("invert")
    assert exc.value.code == 2


def test_exit_code_numeric(tmp_path):
    with np.errstate(all="ignore"):
        assert run("invert", "--out", tmp_path, "--steps", 3, "--lr", 1e300, "--height", 8, "--width", 8) == 3


def test_gradcheck_command(tmp_path, capsys):
    assert run("gradcheck", "--out", tmp_path, "--n-fields", 2, "--size", 10, "--json") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["ok"] is True
    assert (tmp_path / "gradcheck.csv").is_file()


def test_raps_and_sweep(corpus, tmp_path):
    f = sorted(corpus.glob("*.mgf"))
    assert run("raps", "--field", f[0], "--ref", f[1], "--out", tmp_path / "r") == 0
    assert (tmp_path / "r" / "spectrum.csv").read_text().startswith("k,S")
    assert run("mech-sweep", "--field", f[0], "--out", tmp_path / "m", "--alphas", "0.5,1,2") == 0
    assert (tmp_path / "m" / "sweep.csv").read_text().startswith("alpha,")


def test_steiner_command(capsys):
    assert run("steiner-check", "--radii", "0,0.025,0.05", "--json") == 0
    assert json.loads(capsys.readouterr().out)["max_rel_err"] < 0.02


@pytest.mark.parametrize("sub", ["gen-synthetic", "gen-targets", "invert", "mech-sweep"])
def test_help_states_units(sub):
    out = subprocess.run([sys.executable, "-m", "minkgeom.cli", sub, "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert any(u in out.stdout for u in ("mm/h", "pixels", "normalized", "km"))
