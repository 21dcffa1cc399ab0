import gzip
import importlib.resources
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from noveldec.dataset import DatasetManifest, ImageSample, OneClassSplit, write_idx  # noqa: E402
from noveldec.networks import ArchConfig  # noqa: E402
from noveldec.trainer import TrainConfig  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture
def toy_arch():
    return ArchConfig(latent_dim=8, image_size=8, channels=1, base_width=4, head_hidden=16, prior_hidden=(20, 10))


@pytest.fixture
def toy_config(toy_arch):
    return TrainConfig(arch=toy_arch, epochs=2, batch_size=16, seed=0)


def synthetic_images(n=64, size=8, channels=1, seed=0):
    """Smooth random blobs in [-1, 1], shape (n, C, size, size)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    out = np.empty((n, channels, size, size), dtype=np.float32)
    for i in range(n):
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        r = rng.uniform(0.15, 0.3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r**2))
        for c in range(channels):
            out[i, c] = 2.0 * blob * rng.uniform(0.7, 1.0) - 1.0
    return out


def toy_split(images):
    """Train on ``images``; test on 4 fresh blobs (in-class) and 4 inverted ones."""
    samples = [ImageSample(img, 0, f"t{i:03d}") for i, img in enumerate(images)]
    ins = [ImageSample(img, 0, f"i{i:03d}") for i, img in enumerate(synthetic_images(4, images.shape[-1], seed=9))]
    outs = [ImageSample(-img, 1, f"o{i:03d}") for i, img in enumerate(images[:4])]
    return OneClassSplit(0, samples, [(s, 1) for s in ins] + [(s, 0) for s in outs], "FULL_TEST")


@pytest.fixture
def toy_images():
    return synthetic_images()


def mnist_5k():
    """The 5,000-image MNIST subset bundled with mlxtend (500 per digit)."""
    path = importlib.resources.files("mlxtend") / "data" / "data" / "mnist_5k.csv.gz"
    with gzip.open(path) as fh:
        raw = np.loadtxt(fh, delimiter=",", dtype=np.uint8)
    return raw[:, :-1].reshape(-1, 28, 28), raw[:, -1]


@pytest.fixture(scope="session")
def mnist_manifest(tmp_path_factory):
    pytest.importorskip("mlxtend")
    root = tmp_path_factory.mktemp("mnist")
    images, labels = mnist_5k()
    write_idx(root / "images-idx3-ubyte.gz", images)
    write_idx(root / "labels-idx1-ubyte.gz", labels)
    return DatasetManifest(
        root=root,
        format="IDX_PAIR",
        train_files=("images-idx3-ubyte.gz", "labels-idx1-ubyte.gz"),
        image_size=32,
        channels=1,
        class_names=tuple(str(i) for i in range(10)),
    )


# one line per acceptance criterion, printed after the run
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} ({detail})")
