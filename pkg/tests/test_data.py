"""Manifest loading, splits, episode sampling, augmentation, PPM, synthesis."""
import numpy as np
import pytest

from dn4 import data as D
from dn4.errors import ConfigurationError, FormatError, IngestionError, SamplingError
from dn4.rng import substream
from dn4.serialization import load_tensor_file, save_tensor_file

rng = np.random.default_rng(606)


def write_dataset(tmp_path, classes=2, per_class=20, shape=(1, 8, 8)):
    lines = []
    for c in range(classes):
        for i in range(per_class):
            rel = f"c{c}_{i}.dn4t"
            save_tensor_file(tmp_path / rel,
                             rng.random(shape, dtype=np.float32))
            lines.append(f"{rel}\tclass_{c}")
    path = tmp_path / "manifest.tsv"
    path.write_text("\n".join(lines) + "\n")
    return path


def fake_manifest(classes=10, per_class=20, shape=(1, 4, 4)):
    """In-memory manifest for sampler tests; no files involved."""
    entries, images = [], []
    for c in range(classes):
        for i in range(per_class):
            entries.append((f"c{c}_{i}", f"class_{c}"))
            images.append(rng.random(shape, dtype=np.float32))
    return D.DatasetManifest(root=None, entries=entries, images=images)


def test_load_manifest_counts(tmp_path):
    m = D.load_manifest(write_dataset(tmp_path))
    assert m.classes == ["class_0", "class_1"]
    assert m.class_count("class_0") == 20 and m.class_count("class_1") == 20
    assert len(m.images) == 40


def test_load_manifest_errors(tmp_path):
    empty = tmp_path / "empty.tsv"
    empty.write_text("\n\n")
    with pytest.raises(IngestionError, match="no entries"):
        D.load_manifest(empty)
    with pytest.raises(IngestionError):
        D.load_manifest(tmp_path / "missing.tsv")
    bad = tmp_path / "bad.tsv"
    bad.write_text("no_tab_here\n")
    with pytest.raises(IngestionError, match="TAB"):
        D.load_manifest(bad)


def test_load_manifest_rejects_bad_tensors(tmp_path):
    save_tensor_file(tmp_path / "flat.dn4t", rng.random((4, 4), dtype=np.float32))
    path = tmp_path / "m.tsv"
    path.write_text("flat.dn4t\tc\n")
    with pytest.raises(IngestionError, match="rank"):
        D.load_manifest(path)
    save_tensor_file(tmp_path / "big.dn4t",
                     np.full((1, 2, 2), 3.0, dtype=np.float32))
    path.write_text("big.dn4t\tc\n")
    with pytest.raises(IngestionError, match="outside"):
        D.load_manifest(path)


def test_split_round_trip(tmp_path):
    classes = [f"class_{i}" for i in range(10)]
    split = D.make_split(classes, (6, 2, 2), substream(1, "split"))
    assert len(split.train) == 6 and len(split.val) == 2 and len(split.test) == 2
    assert set(split.train) | set(split.val) | set(split.test) == set(classes)
    path = tmp_path / "split.txt"
    D.save_split(path, split)
    back = D.load_split(path)
    assert back == split
    with pytest.raises(ConfigurationError):
        D.make_split(classes, (6, 2, 1), substream(1, "split"))
    with pytest.raises(ConfigurationError):
        D.ClassSplit(("a", "b"), ("b",), ())


def test_split_must_cover_manifest(tmp_path):
    m = D.load_manifest(write_dataset(tmp_path))
    path = tmp_path / "split.txt"
    path.write_text("train:\nclass_0\nval:\ntest:\n")
    with pytest.raises(IngestionError, match="cover"):
        D.load_split(path, m)
    path.write_text("train:\nclass_0\nval:\nclass_1\ntest:\n")
    assert D.load_split(path, m).val == ("class_1",)


def test_sample_episode_paper_shapes():
    m = fake_manifest(classes=10, per_class=25)
    section = m.classes
    ep1 = D.sample_episode(m, section, 5, 1, 15, substream(3, "e", 0))
    assert ep1.support_images.shape[0] == 5 and ep1.query_images.shape[0] == 75
    ep5 = D.sample_episode(m, section, 5, 5, 10, substream(3, "e", 1))
    assert ep5.support_images.shape[0] == 25 and ep5.query_images.shape[0] == 50
    assert sorted(set(ep5.support_labels)) == [0, 1, 2, 3, 4]
    # support and query never share an image
    assert not set(ep5.support_indices) & set(ep5.query_indices)


def test_sample_episode_deterministic():
    m = fake_manifest()
    a = D.sample_episode(m, m.classes, 3, 2, 4, substream(9, "e", 7))
    b = D.sample_episode(m, m.classes, 3, 2, 4, substream(9, "e", 7))
    assert a.digest() == b.digest()
    assert np.array_equal(a.support_images, b.support_images)
    c = D.sample_episode(m, m.classes, 3, 2, 4, substream(9, "e", 8))
    assert a.digest() != c.digest()


def test_sample_episode_errors():
    m = fake_manifest(classes=3, per_class=5)
    with pytest.raises(SamplingError, match="3 classes"):
        D.sample_episode(m, m.classes, 4, 1, 1, substream(0, "e"))
    with pytest.raises(SamplingError, match="needs 6"):
        D.sample_episode(m, m.classes, 2, 2, 4, substream(0, "e"))


def test_episode_class_frequency_uniform():
    m = fake_manifest(classes=10, per_class=3)
    counts = {cls: 0 for cls in m.classes}
    trials = 10_000
    for i in range(trials):
        ep = D.sample_episode(m, m.classes, 2, 1, 1, substream(5, "uniform", i))
        for cls in ep.class_names:
            counts[cls] += 1
    for cls, n in counts.items():
        assert abs(n / trials - 0.2) < 0.02, (cls, n)


def test_augment_identity_and_involution():
    img = rng.random((3, 8, 8), dtype=np.float32)
    off = D.AugmentConfig(enabled=False)
    assert D.augment_image(img, off, substream(0, "a")) is img
    sym = img[:, :, ::-1].copy()
    sym = ((img + sym) / 2).astype(np.float32)  # horizontally symmetric
    flip_only = D.AugmentConfig(enabled=True, crop_padding=0, flip_probability=1.0)
    out = D.augment_image(sym, flip_only, substream(0, "a"))
    assert np.array_equal(out, sym)
    once = D.augment_image(img, flip_only, substream(0, "a"))
    twice = D.augment_image(once, flip_only, substream(0, "a"))
    assert np.array_equal(twice, img)


def test_augment_crop_preserves_shape_and_is_seeded():
    img = rng.random((1, 12, 12), dtype=np.float32)
    cfg = D.AugmentConfig(enabled=True, crop_padding=3, flip_probability=0.5)
    a = D.augment_image(img, cfg, substream(4, "aug", 0))
    b = D.augment_image(img, cfg, substream(4, "aug", 0))
    assert a.shape == img.shape
    assert np.array_equal(a, b)
    with pytest.raises(ConfigurationError):
        D.AugmentConfig(flip_probability=1.5)


def write_ppm(path, w, h, pixels: bytes, header_extra=""):
    with open(path, "wb") as fh:
        fh.write(f"P6\n{header_extra}{w} {h}\n255\n".encode())
        fh.write(pixels)


def test_convert_ppm_exact_values(tmp_path):
    src = tmp_path / "white.ppm"
    write_ppm(src, 1, 1, bytes([255, 255, 255]))
    out = tmp_path / "white.dn4t"
    D.convert_ppm(src, out)
    assert np.array_equal(load_tensor_file(out), np.ones((3, 1, 1), dtype=np.float32))

    src2 = tmp_path / "quad.ppm"
    px = bytes([0, 51, 102, 153, 204, 255, 10, 20, 30, 40, 50, 60])
    write_ppm(src2, 2, 2, px, header_extra="# a comment\n")
    got = D.convert_ppm(src2, tmp_path / "quad.dn4t")
    want = (np.frombuffer(px, dtype=np.uint8).reshape(2, 2, 3)
            .astype(np.float32) / 255).transpose(2, 0, 1)
    assert np.array_equal(got, want)


def test_convert_ppm_errors(tmp_path):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(FormatError, match="P6"):
        D.convert_ppm(bad, tmp_path / "x.dn4t")
    short = tmp_path / "short.ppm"
    write_ppm(short, 2, 2, bytes(5))
    with pytest.raises(FormatError, match="truncated"):
        D.convert_ppm(short, tmp_path / "y.dn4t")


def test_convert_ppm_resize_constant(tmp_path):
    src = tmp_path / "c.ppm"
    write_ppm(src, 4, 4, bytes([100, 150, 200] * 16))
    got = D.convert_ppm(src, tmp_path / "c.dn4t", resize_to=(2, 2))
    assert got.shape == (3, 2, 2)
    for ch, val in enumerate([100, 150, 200]):
        assert np.allclose(got[ch], val / 255, atol=1e-6)


def test_bilinear_identity_at_same_size():
    img = rng.random((2, 6, 5), dtype=np.float32)
    assert np.allclose(D.bilinear_resize(img, (6, 5)), img, atol=1e-7)


def test_synthetic_dataset_shape_and_counts(tmp_path):
    manifest_path = D.make_synthetic_dataset(tmp_path / "ds", num_classes=4,
                                             images_per_class=5, size=16, seed=2)
    m = D.load_manifest(manifest_path)
    assert len(m.entries) == 20 and len(m.classes) == 4
    assert m.images[0].shape == (3, 16, 16)
    # same family, different images
    assert not np.array_equal(m.images[0], m.images[1])
    # regeneration is bit-identical
    manifest2 = D.make_synthetic_dataset(tmp_path / "ds2", num_classes=4,
                                         images_per_class=5, size=16, seed=2)
    m2 = D.load_manifest(manifest2)
    assert all(np.array_equal(a, b) for a, b in zip(m.images, m2.images))


def test_synthetic_classes_cluster_in_descriptor_space(tmp_path):
    """Even a random frozen embedding should see more within-class than
    cross-class descriptor similarity, or episodic training has nothing
    to latch onto."""
    from dn4.embedding import EmbeddingConfig, embed, init_embedding
    from dn4.measure import cosine_matrix
    from dn4.tensor import Tensor

    manifest_path = D.make_synthetic_dataset(tmp_path / "ds", num_classes=4,
                                             images_per_class=6, size=32, seed=11)
    m = D.load_manifest(manifest_path)
    cfg = EmbeddingConfig(filters=8, in_channels=3, height=32, width=32)
    params = init_embedding(cfg, seed=1)
    sets = embed(params, Tensor(np.stack(m.images)), mode="running")
    labels = [cls for _, cls in m.entries]
    within, across = [], []
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            sim = float(cosine_matrix(sets[i].descriptors,
                                      sets[j].descriptors).data.mean())
            (within if labels[i] == labels[j] else across).append(sim)
    assert np.mean(within) > np.mean(across)
