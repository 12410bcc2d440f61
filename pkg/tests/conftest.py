import json

import numpy as np
import pytest

from incremental_cnn.data import Dataset, split, write_cifar_batch
from incremental_cnn.specs import (ClassifierSpec, NetworkSpec, conv, dense, global_avgpool,
                                   maxpool, relu)


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def synthetic_images(n, seed=0, size=32):
    """Class-coded colour bands on noise: learnable, uint8, N×3×size×size."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = rng.integers(0, 80, size=(n, 3, size, size)).astype(np.uint8)
    band = size // 4
    for c in range(10):
        m = labels == c
        row = (c // 3) * band % (size - band)
        images[m, c % 3, row:row + band, :] += 150
    return images, labels


def colour_coded(n, seed=0):
    """Each class is a near-constant image of its own colour: learnable by one conv."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    palette = np.array([[c * 25, (c * 7 % 10) * 25, (9 - c) * 25] for c in range(10)])
    images = np.broadcast_to(palette[labels][:, :, None, None], (n, 3, 8, 8))
    return (images + rng.integers(0, 6, images.shape)).astype(np.uint8), labels


@pytest.fixture
def synthetic_split():
    images, labels = synthetic_images(200, seed=1)
    return split(Dataset(images, labels), 0.1, seed=0)


@pytest.fixture
def cifar_dir(tmp_path):
    """A miniature CIFAR-10 binary directory: 5×40 training records, 50 test records."""
    root = tmp_path / "cifar"
    root.mkdir()
    images, labels = synthetic_images(250, seed=7)
    for i in range(5):
        sl = slice(40 * i, 40 * (i + 1))
        write_cifar_batch(root / f"data_batch_{i + 1}.bin", images[sl], labels[sl])
    write_cifar_batch(root / "test_batch.bin", images[200:], labels[200:])
    return root


def small_spec():
    backbone = (conv(4), relu(), maxpool(2), conv(8), relu(), maxpool(2))
    return NetworkSpec(backbone, ClassifierSpec((global_avgpool(), dense(10))), name="small")


@pytest.fixture
def small_spec_file(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(small_spec().to_dict()))
    return path


@pytest.fixture
def one_conv_spec_file(tmp_path):
    spec = NetworkSpec((conv(4), relu()), ClassifierSpec((global_avgpool(), dense(10))),
                       name="oneconv")
    path = tmp_path / "oneconv.json"
    path.write_text(json.dumps(spec.to_dict()))
    return path


def write_config(path, **values):
    lines = [f"{k} = {v}" for k, v in values.items()]
    path.write_text("\n".join(lines) + "\n")
    return path
