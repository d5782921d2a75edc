import os

import numpy as np
import pytest

from dgms import pipeline
from dgms.config import load_config

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")


def write_cifar_batch(path, labels, seed=0):
    """Synthetic file in the CIFAR-10 binary layout: label byte + 3072 pixel bytes."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels, dtype=np.uint8)
    pix = rng.integers(0, 256, (len(labels), 3072), dtype=np.uint8)
    rec = np.concatenate([labels[:, None], pix], axis=1)
    rec.tofile(path)
    return rec


def make_cifar_dir(root, n_train=40, n_test=20, seed=0):
    """Five training batches plus a test batch, every class present."""
    os.makedirs(root, exist_ok=True)
    for i in range(1, 6):
        write_cifar_batch(os.path.join(root, f"data_batch_{i}.bin"),
                          np.arange(n_train) % 10, seed + i)
    write_cifar_batch(os.path.join(root, "test_batch.bin"), np.arange(n_test) % 10, seed)
    return root


@pytest.fixture
def cifar_dir(tmp_path):
    return make_cifar_dir(str(tmp_path / "cifar"))


@pytest.fixture(scope="session")
def blobs_cfg():
    return load_config(os.path.join(CONFIGS, "blobs.cfg"))


@pytest.fixture(scope="session")
def blobs_data(blobs_cfg):
    return pipeline.make_data(blobs_cfg)


@pytest.fixture(scope="session")
def blobs_fp32(blobs_cfg, blobs_data):
    return pipeline.run_fp32(blobs_cfg, blobs_data)


@pytest.fixture(scope="session")
def blobs_dgms(blobs_cfg, blobs_data, blobs_fp32):
    return pipeline.run_quantize(blobs_cfg, blobs_data, init=blobs_fp32.state)


# --- acceptance summary ---------------------------------------------------------

ACCEPTANCE: dict = {}


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
