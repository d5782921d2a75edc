import os

import numpy as np
import pytest

from dgms import data_io, gm_core
from dgms import train as tr
from dgms.data_io import DataError
from dgms.model_zoo import QuantPolicy, build_mlp

from conftest import make_cifar_dir, write_cifar_batch


# --- CIFAR-10 binary ----------------------------------------------------------

def test_cifar_record_layout(tmp_path):
    path = str(tmp_path / "b.bin")
    rec = write_cifar_batch(path, [3, 7], seed=1)
    imgs, labels = data_io.read_cifar10_records(path)
    assert labels.tolist() == [3, 7]
    assert imgs.shape == (2, 3, 32, 32)
    # planes are R, G, B, each row-major 32x32
    assert imgs[1, 0, 0, 0] == rec[1, 1]
    assert imgs[1, 1, 0, 0] == rec[1, 1 + 1024]
    assert imgs[1, 2, 31, 31] == rec[1, 3072]


def test_full_batch_byte_count(tmp_path):
    path = str(tmp_path / "full.bin")
    write_cifar_batch(path, np.arange(10_000) % 10)
    assert os.path.getsize(path) == 10_000 * 3073
    imgs, labels = data_io.read_cifar10_records(path)
    assert len(labels) == data_io.CIFAR_BATCH_RECORDS


def test_truncated_file_reports_offset(tmp_path):
    path = str(tmp_path / "t.bin")
    write_cifar_batch(path, [1, 2, 3])
    with open(path, "r+b") as fh:
        fh.truncate(2 * 3073 + 100)
    with pytest.raises(DataError) as e:
        data_io.read_cifar10_records(path)
    assert e.value.offset == 2 * 3073


def test_bad_label_reports_offset(tmp_path):
    path = str(tmp_path / "l.bin")
    write_cifar_batch(path, [1, 12, 3])
    with pytest.raises(DataError, match="label 12") as e:
        data_io.read_cifar10_records(path)
    assert e.value.offset == 3073


def test_loader_shapes_and_standardization(cifar_dir):
    train, test = data_io.load_cifar10_binary(cifar_dir, 30, 10, seed=0)
    assert train.x.shape == (30, 3, 32, 32) and test.x.shape == (10, 3, 32, 32)
    assert train.num_classes == 10
    imgs, _ = data_io.read_cifar10_records(os.path.join(cifar_dir, "test_batch.bin"))
    expect = (imgs.astype(float) / 255 - 0.4914) / 0.2470
    assert np.any(np.isclose(test.x[0, 0, 0, 0], expect[:, 0, 0, 0], rtol=0, atol=1e-12))


def test_loader_is_seeded(cifar_dir):
    a, _ = data_io.load_cifar10_binary(cifar_dir, 20, 5, seed=3)
    b, _ = data_io.load_cifar10_binary(cifar_dir, 20, 5, seed=3)
    c, _ = data_io.load_cifar10_binary(cifar_dir, 20, 5, seed=4)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.y, c.y) or not np.array_equal(a.x, c.x)


def test_empty_train_split(cifar_dir):
    train, test = data_io.load_cifar10_binary(cifar_dir, 0, 5)
    assert len(train) == 0 and train.x.shape == (0, 3, 32, 32)


def test_class_subset_relabels(cifar_dir):
    train, _ = data_io.load_cifar10_binary(cifar_dir, 8, 4, classes=[7, 2])
    assert train.num_classes == 2 and set(train.y.tolist()) <= {0, 1}


@pytest.mark.parametrize("n_train,n_test", [(10_000, 1), (1, 10_000)])
def test_loader_rejects_oversized_requests(cifar_dir, n_train, n_test):
    with pytest.raises(DataError, match="requested"):
        data_io.load_cifar10_binary(cifar_dir, n_train, n_test)


def test_missing_directory(tmp_path):
    with pytest.raises(DataError, match="no CIFAR-10"):
        data_io.load_cifar10_binary(str(tmp_path), 1, 1)


def test_dataset_is_read_only(cifar_dir):
    train, _ = data_io.load_cifar10_binary(cifar_dir, 4, 2)
    with pytest.raises(ValueError):
        train.x[0, 0, 0, 0] = 1.0


# --- synthetic blobs ----------------------------------------------------------

def test_blobs_deterministic():
    a = data_io.synth_blobs(3, 100, 0.1, 7)
    b = data_io.synth_blobs(3, 100, 0.1, 7)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert a.x.shape == (100, 3)


def test_blobs_offset_shifts_inputs():
    a = data_io.synth_blobs(2, 50, 0.1, 0)
    b = data_io.synth_blobs(2, 50, 0.1, 0, offset=2.0)
    assert np.allclose(b.x - a.x, 2.0) and np.array_equal(a.y, b.y)


def test_blobs_linearly_separable_by_logistic_regression():
    train = data_io.synth_blobs(2, 1000, 0.1, 0)
    test = data_io.synth_blobs(2, 500, 0.1, 10_000)
    x = np.c_[train.x, np.ones(len(train))]
    w = np.zeros(3)
    for _ in range(500):
        p = 1 / (1 + np.exp(-x @ w))
        w -= 0.5 * x.T @ (p - train.y) / len(train)
    pred = (np.c_[test.x, np.ones(len(test))] @ w > 0).astype(int)
    assert (pred == test.y).mean() >= 0.99


@pytest.mark.parametrize("kw", [dict(classes=1), dict(classes=3, dim=2)])
def test_blobs_rejects_invalid(kw):
    args = dict(classes=2, n=10, spread=0.1, seed=0) | kw
    with pytest.raises(ValueError):
        data_io.synth_blobs(**args)


# --- checkpoints --------------------------------------------------------------

def trained_state():
    spec = build_mlp(2, (8, 6), 2)
    st = tr.TrainState.fresh(spec, 0)
    pol = QuantPolicy.for_model(spec)
    tr.init_gms(st, pol, gamma_mode="std", tau=0.01)
    tr.train(data_io.synth_blobs(2, 100, 0.1, 0), st, pol, tr.OneCycleSchedule(0.01, 4), 2,
             batch=50)
    return st


def test_checkpoint_round_trip_bit_identical(tmp_path):
    st = trained_state()
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    data_io.save_checkpoint(p1, st)
    back = data_io.load_checkpoint(p1, st.spec)
    for k in st.params:
        assert np.array_equal(st.params[k], back.params[k])
    for k in st.momentum:
        assert np.array_equal(st.momentum[k], back.momentum[k])
    g, h = st.gms["fc2"], back.gms["fc2"]
    assert np.array_equal(g.mu, h.mu) and g.log_tau == h.log_tau
    assert back.step == st.step
    data_io.save_checkpoint(p2, back)
    assert open(p1, "rb").read() == open(p2, "rb").read()


@pytest.mark.parametrize("patch,match", [((0, b"XXXX"), "magic"), ((4, b"\x09"), "version")])
def test_checkpoint_header_rejected(tmp_path, patch, match):
    path = str(tmp_path / "a.ckpt")
    data_io.save_checkpoint(path, trained_state())
    blob = bytearray(open(path, "rb").read())
    at, new = patch
    blob[at:at + len(new)] = new
    open(path, "wb").write(bytes(blob))
    with pytest.raises(DataError, match=match):
        data_io.read_tensors(path)


def test_checkpoint_truncated(tmp_path):
    path = str(tmp_path / "a.ckpt")
    data_io.save_checkpoint(path, trained_state())
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-7])
    with pytest.raises(DataError):
        data_io.read_tensors(path)


def test_checkpoint_wrong_architecture(tmp_path):
    path = str(tmp_path / "a.ckpt")
    data_io.save_checkpoint(path, trained_state())
    with pytest.raises(DataError, match="shape"):
        data_io.load_checkpoint(path, build_mlp(2, (8, 7), 2))


# --- mixture files ------------------------------------------------------------

def test_gm_round_trip_exact(tmp_path):
    st = trained_state()
    path = str(tmp_path / "gm.txt")
    data_io.save_gm(path, st.gms)
    back = data_io.load_gm(path)
    g, h = st.gms["fc2"], back["fc2"]
    for f in ("mu", "pi_logits", "log_gamma"):
        assert np.array_equal(getattr(g, f), getattr(h, f))
    assert g.log_tau == h.log_tau and g.k == h.k


def test_gm_hand_edited_file(tmp_path):
    path = tmp_path / "gm.txt"
    path.write_text("layer fc2\nk 2\ntau 0.01\npi 0.5 0.25 0.25\nmu 0 -0.5 0.5\n"
                    "gamma 0.1 0.1 0.1\nend\n")
    gm = data_io.load_gm(str(path))["fc2"]
    assert gm.pi == pytest.approx([0.5, 0.25, 0.25], abs=1e-15)
    assert gm.tau == pytest.approx(0.01, rel=1e-15)


@pytest.mark.parametrize("line,match", [
    ("gamma 0.1 -1 0.1", "gamma"),
    ("gamma 0.1 0.1", "expected 3"),
    ("mu 0.1 -0.5 0.5", "mu"),
    ("pi 0.5 0.5 0.5", "probability"),
    ("tau 0", "tau"),
])
def test_gm_invalid_rejected(tmp_path, line, match):
    good = {"k": "k 2", "tau": "tau 0.01", "pi": "pi 0.5 0.25 0.25", "mu": "mu 0 -0.5 0.5",
            "gamma": "gamma 0.1 0.1 0.1"}
    good[line.split()[0]] = line
    path = tmp_path / "gm.txt"
    path.write_text("layer fc2\n" + "\n".join(good.values()) + "\nend\n")
    with pytest.raises(DataError, match=match):
        data_io.load_gm(str(path))


def test_gm_edit_must_drop_raw_lines(tmp_path):
    st = trained_state()
    path = tmp_path / "gm.txt"
    data_io.save_gm(str(path), st.gms)
    text = path.read_text().splitlines()
    text = [("tau 0.5" if l.startswith("tau ") else l) for l in text]
    path.write_text("\n".join(text) + "\n")
    with pytest.raises(DataError, match="disagree"):
        data_io.load_gm(str(path))


def test_transfer_keeps_component_count(tmp_path):
    src = trained_state()
    path = str(tmp_path / "gm.txt")
    data_io.save_gm(path, src.gms)
    spec = build_mlp(2, (8, 6), 2)
    st = tr.TrainState.fresh(spec, 5)
    tr.init_gms(st, QuantPolicy.for_model(spec), source=data_io.load_gm(path))
    assert st.gms["fc2"].k == src.gms["fc2"].k
    assert np.array_equal(st.gms["fc2"].mu, src.gms["fc2"].mu)


def test_gm_k_zero_rejected(tmp_path):
    path = tmp_path / "gm.txt"
    path.write_text("layer fc2\nk 0\ntau 0.01\npi 1\nmu 0\ngamma 0.1\nend\n")
    with pytest.raises(DataError):
        data_io.load_gm(str(path))


def test_lone_component_mixture_is_legal():
    gm = gm_core.LayerGM.from_values([1.0], [0.0], [0.1], 0.01)
    assert np.all(gm_core.hard_quantize(np.array([0.3, -2.0]), gm) == 0.0)
