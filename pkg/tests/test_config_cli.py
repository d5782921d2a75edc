import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from dgms import cli, data_io, packing
from dgms.config import Config, ConfigError, load_config, parse_pairs
from dgms.model_zoo import build_mlp

from conftest import CONFIGS, make_cifar_dir

FAST = ["--set", "epochs=2", "--set", "train_n=200", "--set", "test_n=100"]


# --- config -------------------------------------------------------------------

def test_defaults():
    c = Config()
    assert (c.bits, c.momentum, c.weight_decay, c.batch) == (4, 0.9, 5e-4, 64)
    assert c.gamma == ("empirical", 0.01)
    assert c.hidden_sizes == (32, 32) and c.conv_widths == (16, 32, 64, 64)


def test_parse_and_override(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("# comment\nbits = 2\nhidden=8,8\n\nseed=3\n")
    c = load_config(str(p), ["seed=5", "gamma_init=std"])
    assert c.bits == 2 and c.hidden_sizes == (8, 8) and c.seed == 5 and c.gamma == ("std", 0.0)


@pytest.mark.parametrize("line,match", [
    ("nonsense", "key=value"),
    ("colour=red", "unknown key"),
    ("bits=four", "bits expects"),
])
def test_parse_errors_name_the_line(line, match):
    with pytest.raises(ConfigError, match=match) as e:
        parse_pairs(["seed=1", line], "x.cfg")
    assert "x.cfg:2" in str(e.value)


@pytest.mark.parametrize("kw", [dict(model="vgg"), dict(tau_mode="wild"), dict(bits=0),
                                dict(tau_init=0.0), dict(lr_max=-1.0)])
def test_invalid_values(kw):
    with pytest.raises(ConfigError):
        Config(**kw)


@pytest.mark.parametrize("g", ["empirical:-1", "empirical:x", "median"])
def test_invalid_gamma(g):
    with pytest.raises(ConfigError):
        Config(gamma_init=g).gamma


def test_dumps_round_trip(tmp_path):
    c = Config(bits=2, hidden="4,4", gamma_init="std", seed=9)
    p = tmp_path / "c.cfg"
    p.write_text(c.dumps())
    assert load_config(str(p)) == c


@pytest.mark.parametrize("name", ["blobs.cfg", "blobs_b.cfg", "cifar_cnn.cfg"])
def test_shipped_configs_load(name):
    load_config(os.path.join(CONFIGS, name))


# --- CLI ----------------------------------------------------------------------

def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = os.path.join(CONFIGS, "blobs.cfg")
    fp = str(root / "fp32")
    q = str(root / "q")
    assert cli.main(["train", "--config", cfg, *FAST, "--out", fp]) == 0
    assert cli.main(["quantize", "--config", cfg, *FAST, "--init", f"{fp}/model.ckpt",
                     "--out", q]) == 0
    return root, cfg, fp, q


def test_train_and_quantize_artifacts(workdir):
    _, _, fp, q = workdir
    assert os.path.exists(f"{fp}/model.ckpt") and os.path.exists(f"{fp}/train_log.csv")
    for name in ("model.ckpt", "gm.txt", "train_log.csv", "metrics.txt"):
        assert os.path.exists(f"{q}/{name}")
    text = open(f"{q}/metrics.txt").read()
    for key in ("top1", "cr", "nonzero", "mse"):
        assert f"{key}=" in text
    assert len(list(csv.reader(open(f"{q}/train_log.csv")))) == 3


def test_eval(workdir, capsys, tmp_path):
    _, cfg, _, q = workdir
    code, out, _ = run(["eval", "--config", cfg, *FAST, "--ckpt", f"{q}/model.ckpt",
                        "--out", str(tmp_path)], capsys)
    assert code == 0 and "top1=" in out
    assert (tmp_path / "eval.txt").read_text() == out


def test_export_inspect_bench(workdir, capsys, tmp_path):
    _, cfg, _, q = workdir
    code, out, _ = run(["export", "--config", cfg, *FAST, "--ckpt", f"{q}/model.ckpt",
                        "--out", str(tmp_path)], capsys)
    assert code == 0
    path = str(tmp_path / "model.qsmd")
    layers = packing.read_packed_model(path)
    assert [l.name for l in layers] == ["fc2"]
    code, out, _ = run(["inspect", path], capsys)
    assert code == 0 and "fc2: bits=4 shape=32x32" in out
    code, out, err = run(["bench", "--config", cfg, *FAST, "--ckpt", f"{q}/model.ckpt",
                          "--packed", path, "--repeats", "1", "--out", str(tmp_path)], capsys)
    assert code == 0 and "low confidence" in err
    rows = list(csv.DictReader(open(tmp_path / "bench.csv")))
    assert {r["path"] for r in rows} == {"dense", "packed"}
    assert {int(r["weight_bytes"]) for r in rows} == {32 * 32 * 4, 32 * 32 // 2}


def test_transfer_zero_epochs_only_applies_mixture(workdir, capsys, tmp_path):
    _, cfg, fp, q = workdir
    code, _, _ = run(["transfer", "--config", cfg, *FAST, "--init", f"{fp}/model.ckpt",
                      "--source-gm", f"{q}/gm.txt", "--epochs", "0", "--out", str(tmp_path)],
                     capsys)
    assert code == 0
    spec = build_mlp(2, (32, 32), 2)
    before = data_io.load_checkpoint(f"{fp}/model.ckpt", spec)
    after = data_io.load_checkpoint(str(tmp_path / "model.ckpt"), spec)
    for k in before.params:
        assert np.array_equal(before.params[k], after.params[k])
    src = data_io.load_gm(f"{q}/gm.txt")["fc2"]
    got = after.gms["fc2"]
    assert np.array_equal(src.mu, got.mu) and np.array_equal(src.pi_logits, got.pi_logits)
    assert np.array_equal(src.log_gamma, got.log_gamma) and src.log_tau == got.log_tau
    assert open(f"{q}/gm.txt").read() == open(tmp_path / "gm.txt").read()


def test_sweep_k(workdir, capsys, tmp_path):
    _, cfg, fp, _ = workdir
    code, out, _ = run(["sweep-k", "--config", cfg, *FAST, "--list", "4,8,16", "--epochs", "1",
                        "--init", f"{fp}/model.ckpt", "--out", str(tmp_path)], capsys)
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep_k.csv")))
    assert [int(r["k_plus_one"]) for r in rows] == [4, 8, 16]
    assert [int(r["bits"]) for r in rows] == [2, 3, 4]
    crs = [float(r["cr"]) for r in rows]
    assert crs[0] >= crs[1] >= crs[2]


def test_gradcheck_command(capsys):
    code, out, _ = run(["gradcheck"], capsys)
    assert code == 0 and "gradcheck: ok" in out


@pytest.mark.parametrize("argv", [
    ["train"],
    ["frobnicate"],
    ["train", "--out", "x", "--set", "bits=many"],
    ["train", "--out", "x", "--set", "nokey=1"],
    ["train", "--out", "x", "--config", "/nonexistent/cfg"],
    ["sweep-k", "--out", "x", "--list", "a,b"],
])
def test_config_errors_exit_1(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = run(argv, capsys)
    assert code == 1 and "config error" in err and err.startswith("dgms [")


def test_missing_checkpoint_exit_2(capsys, tmp_path):
    code, _, err = run(["eval", "--ckpt", str(tmp_path / "none.ckpt")], capsys)
    assert code == 2 and "data error" in err


def test_corrupt_cifar_exit_2(capsys, tmp_path):
    root = make_cifar_dir(str(tmp_path / "c"), n_train=20, n_test=10)
    with open(os.path.join(root, "test_batch.bin"), "ab") as fh:
        fh.write(b"\x00" * 7)
    code, _, err = run(["train", "--set", "model=cnn", "--set", "dataset=cifar10",
                        "--set", f"data_path={root}", "--set", "train_n=10",
                        "--set", "test_n=5", "--out", str(tmp_path / "o")], capsys)
    assert code == 2 and "dgms [data_io] data error" in err and "byte offset" in err


def test_bad_packed_file_exit_2(capsys, tmp_path):
    p = tmp_path / "bad.qsmd"
    p.write_bytes(b"NOPE" + b"\x00" * 6)
    code, _, err = run(["inspect", str(p)], capsys)
    assert code == 2 and "bad magic" in err


def test_divergence_exit_3(capsys, tmp_path):
    code, _, err = run(["train", "--set", "lr_max=1e300", "--set", "epochs=3",
                        "--set", "train_n=200", "--set", "test_n=50",
                        "--out", str(tmp_path)], capsys)
    assert code == 3 and "numeric failure" in err


def test_failing_gradcheck_exit_3(capsys):
    code, _, _ = run(["gradcheck", "--tol", "1e-30"], capsys)
    assert code == 3


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "dgms.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("train", "quantize", "eval", "export", "bench", "transfer", "sweep-k",
                "gradcheck", "inspect"):
        assert cmd in r.stdout
