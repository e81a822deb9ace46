import numpy as np
import pytest

from dn4.data import DatasetManifest, load_manifest, make_split, make_synthetic_dataset
from dn4.rng import substream


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small Gabor-texture dataset shared by trainer/eval tests."""
    root = tmp_path_factory.mktemp("tinyds")
    manifest_path = make_synthetic_dataset(root, num_classes=8,
                                           images_per_class=10, size=16, seed=100)
    manifest = load_manifest(manifest_path)
    split = make_split(manifest.classes, (4, 2, 2), substream(100, "split"))
    return manifest, split


@pytest.fixture(scope="session")
def separable_dataset():
    """Two classes split by which image half is bright; trivially learnable."""
    gen = np.random.default_rng(321)
    entries, images = [], []
    for i in range(40):
        img = gen.uniform(0.0, 0.2, size=(1, 16, 16)).astype(np.float32)
        cls = i % 2
        if cls == 0:
            img[:, :8, :] += 0.6
        else:
            img[:, 8:, :] += 0.6
        entries.append((f"img_{i}", f"half_{cls}"))
        images.append(np.clip(img, 0, 1))
    return DatasetManifest(root=None, entries=entries, images=images)
