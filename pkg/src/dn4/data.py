"""Datasets, class splits, episode sampling, and image utilities.

A dataset is a manifest of tensor files plus a three-way class split.
Episodes (C-way K-shot tasks) are sampled from one split section: C classes
without replacement, then K support and `queries_per_class` query images per
class, support and query always disjoint.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, IngestionError, SamplingError
from .serialization import load_tensor_file, save_tensor_file

__all__ = [
    "DatasetManifest", "ClassSplit", "Episode", "AugmentConfig",
    "load_manifest", "load_split", "save_split", "make_split",
    "sample_episode", "augment_image", "augment_batch",
    "convert_ppm", "bilinear_resize", "make_synthetic_dataset",
]


@dataclass
class DatasetManifest:
    """Validated image collection: entries are (relative path, class name)."""
    root: Path
    entries: list[tuple[str, str]]
    images: list[np.ndarray]
    by_class: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.by_class:
            for i, (_, cls) in enumerate(self.entries):
                self.by_class.setdefault(cls, []).append(i)

    @property
    def classes(self) -> list[str]:
        return sorted(self.by_class)

    def class_count(self, cls: str) -> int:
        return len(self.by_class.get(cls, []))


def load_manifest(path) -> DatasetManifest:
    """Read a manifest file and eagerly validate every listed tensor."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"manifest not found: {path}")
    root = path.parent
    entries: list[tuple[str, str]] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        if "\t" not in line:
            raise IngestionError(f"{path}:{lineno}: expected 'path<TAB>class'")
        rel, cls = line.split("\t", 1)
        if not rel or not cls:
            raise IngestionError(f"{path}:{lineno}: empty path or class")
        entries.append((rel, cls))
    if not entries:
        raise IngestionError(f"{path}: no entries")
    images = []
    for rel, _ in entries:
        full = root / rel
        try:
            arr = load_tensor_file(full)
        except (OSError, FormatError) as exc:
            raise IngestionError(f"unreadable tensor {full}: {exc}") from exc
        if arr.ndim != 3:
            raise IngestionError(f"{full}: expected a C x H x W tensor, got rank {arr.ndim}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise IngestionError(f"{full}: values outside [0,1]")
        images.append(arr)
    return DatasetManifest(root=root, entries=entries, images=images)


@dataclass(frozen=True)
class ClassSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        sections = [set(self.train), set(self.val), set(self.test)]
        total = sum(len(s) for s in sections)
        if len(sections[0] | sections[1] | sections[2]) != total:
            raise ConfigurationError("split sections must be disjoint")

    def section(self, name: str) -> tuple[str, ...]:
        try:
            return getattr(self, name)
        except AttributeError:
            raise ConfigurationError(f"unknown split section {name!r}") from None


def make_split(classes: list[str], counts: tuple[int, int, int],
               gen: np.random.Generator) -> ClassSplit:
    """Randomly partition class names into train/val/test of the given sizes."""
    if sum(counts) != len(classes):
        raise ConfigurationError(
            f"split sizes {counts} do not sum to {len(classes)} classes")
    order = list(np.array(sorted(classes))[gen.permutation(len(classes))])
    a, b = counts[0], counts[0] + counts[1]
    return ClassSplit(tuple(order[:a]), tuple(order[a:b]), tuple(order[b:]))


def save_split(path, split: ClassSplit) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name in ("train", "val", "test"):
            fh.write(f"{name}:\n")
            for cls in split.section(name):
                fh.write(f"{cls}\n")


def load_split(path, manifest: DatasetManifest | None = None) -> ClassSplit:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"split file not found: {path}")
    sections: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    current: list[str] | None = None
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.endswith(":"):
            name = line[:-1]
            if name not in sections:
                raise IngestionError(f"{path}:{lineno}: unknown section {name!r}")
            current = sections[name]
        elif current is None:
            raise IngestionError(f"{path}:{lineno}: class before any section header")
        else:
            current.append(line)
    split = ClassSplit(tuple(sections["train"]), tuple(sections["val"]),
                       tuple(sections["test"]))
    if manifest is not None:
        listed = set(split.train) | set(split.val) | set(split.test)
        have = set(manifest.classes)
        if listed != have:
            missing = sorted(have - listed)
            extra = sorted(listed - have)
            raise IngestionError(
                f"split does not cover manifest classes (missing {missing}, "
                f"unknown {extra})")
    return split


@dataclass
class Episode:
    """One C-way K-shot task with episode-local labels 0..C-1."""
    way: int
    shot: int
    queries_per_class: int
    class_names: list[str]
    support_indices: np.ndarray
    support_images: np.ndarray   # (C*K, ch, H, W)
    support_labels: np.ndarray   # (C*K,)
    query_indices: np.ndarray
    query_images: np.ndarray     # (C*Q, ch, H, W)
    query_labels: np.ndarray     # (C*Q,)
    seed_tag: str = ""

    def digest(self) -> str:
        """Hash of the sampled structure, for stream-equality assertions."""
        h = hashlib.sha256()
        h.update(",".join(self.class_names).encode())
        h.update(self.support_indices.astype("<i8").tobytes())
        h.update(self.query_indices.astype("<i8").tobytes())
        return h.hexdigest()[:16]


def sample_episode(manifest: DatasetManifest, section_classes, way: int,
                   shot: int, queries_per_class: int,
                   gen: np.random.Generator) -> Episode:
    """Draw one episode from the given class section, all without replacement."""
    section = sorted(section_classes)
    if way > len(section):
        raise SamplingError(
            f"cannot sample {way}-way episode from {len(section)} classes")
    if way < 1 or shot < 1 or queries_per_class < 1:
        raise SamplingError("way, shot, and queries_per_class must be positive")
    picked = [section[i] for i in gen.choice(len(section), size=way, replace=False)]
    sup_idx, qry_idx = [], []
    sup_lab, qry_lab = [], []
    need = shot + queries_per_class
    for local, cls in enumerate(picked):
        members = manifest.by_class.get(cls, [])
        if len(members) < need:
            raise SamplingError(
                f"class {cls!r} has {len(members)} images, episode needs {need}")
        chosen = gen.choice(len(members), size=need, replace=False)
        for j in chosen[:shot]:
            sup_idx.append(members[j])
            sup_lab.append(local)
        for j in chosen[shot:]:
            qry_idx.append(members[j])
            qry_lab.append(local)
    sup_images = np.stack([manifest.images[i] for i in sup_idx]).astype(np.float32)
    qry_images = np.stack([manifest.images[i] for i in qry_idx]).astype(np.float32)
    return Episode(
        way=way, shot=shot, queries_per_class=queries_per_class,
        class_names=picked,
        support_indices=np.array(sup_idx), support_images=sup_images,
        support_labels=np.array(sup_lab, dtype=np.int64),
        query_indices=np.array(qry_idx), query_images=qry_images,
        query_labels=np.array(qry_lab, dtype=np.int64),
    )


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = False
    crop_padding: int = 8
    flip_probability: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigurationError("flip_probability must be in [0,1]")
        if self.crop_padding < 0:
            raise ConfigurationError("crop_padding must be nonnegative")


def augment_image(img: np.ndarray, cfg: AugmentConfig,
                  gen: np.random.Generator) -> np.ndarray:
    """Random crop from a zero-padded canvas, then random horizontal flip."""
    if not cfg.enabled:
        return img
    c, h, w = img.shape
    p = cfg.crop_padding
    out = img
    if p > 0:
        padded = np.zeros((c, h + 2 * p, w + 2 * p), dtype=img.dtype)
        padded[:, p:p + h, p:p + w] = img
        oy = int(gen.integers(0, 2 * p + 1))
        ox = int(gen.integers(0, 2 * p + 1))
        out = padded[:, oy:oy + h, ox:ox + w]
    if gen.random() < cfg.flip_probability:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(batch: np.ndarray, cfg: AugmentConfig,
                  gen: np.random.Generator) -> np.ndarray:
    if not cfg.enabled:
        return batch
    return np.stack([augment_image(im, cfg, gen) for im in batch])


def _read_ppm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comment lines between header tokens
    while pos < len(data):
        ch = data[pos:pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(data) and data[pos:pos + 1] not in b" \t\r\n":
        pos += 1
    if start == pos:
        raise FormatError("truncated header")
    return data[start:pos], pos


def convert_ppm(path_in, path_out, resize_to: tuple[int, int] | None = None) -> np.ndarray:
    """Decode a binary P6 image into a [0,1] float tensor file."""
    data = Path(path_in).read_bytes()
    try:
        magic, pos = _read_ppm_token(data, 0)
        if magic != b"P6":
            raise FormatError(f"not a P6 file (magic {magic!r})")
        wtok, pos = _read_ppm_token(data, pos)
        htok, pos = _read_ppm_token(data, pos)
        mtok, pos = _read_ppm_token(data, pos)
        width, height, maxval = int(wtok), int(htok), int(mtok)
    except (ValueError, FormatError) as exc:
        raise FormatError(f"{path_in}: bad header: {exc}") from exc
    if maxval != 255:
        raise FormatError(f"{path_in}: maxval {maxval} unsupported (need 255)")
    pos += 1  # single whitespace byte after maxval
    payload = data[pos:pos + 3 * width * height]
    if len(payload) != 3 * width * height:
        raise FormatError(f"{path_in}: truncated payload")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    img = (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)
    if resize_to is not None:
        img = bilinear_resize(img, resize_to)
    save_tensor_file(path_out, img)
    return img


def bilinear_resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize (C,H,W) with bilinear interpolation, pixel centers aligned."""
    c, h, w = img.shape
    nh, nw = size
    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def _gabor_patch(size: int, cy: float, cx: float, radius: float, theta: float,
                 freq: float, phase: float, amp: float,
                 aspect: float = 1.0) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    envelope = np.exp(-(u * u + (aspect * v) ** 2) / (2 * radius * radius))
    carrier = np.cos(2 * np.pi * freq * u + phase)
    return amp * envelope * carrier


# ambient ranges of the texture attribute space; classes are points inside it
_ATTR_RANGES = {"freq": (0.14, 0.45), "radius_scale": (0.09, 0.20),
                "aspect": (0.45, 1.00)}


def _draw_attributes(gen: np.random.Generator) -> dict:
    attrs = {"theta": gen.uniform(0, np.pi)}
    for key, (lo, hi) in _ATTR_RANGES.items():
        attrs[key] = gen.uniform(lo, hi)
    return attrs


def _attr_distance(a: dict, b: dict) -> float:
    """Distance in attribute space, each axis normalized to unit span."""
    dt = abs(a["theta"] - b["theta"]) / np.pi
    acc = (2 * min(dt, 1 - dt)) ** 2
    for key, (lo, hi) in _ATTR_RANGES.items():
        acc += ((a[key] - b[key]) / (hi - lo)) ** 2
    return float(np.sqrt(acc))


def _patch_args(gen: np.random.Generator, size: int, attrs: dict) -> dict:
    return dict(
        cy=gen.uniform(0, size), cx=gen.uniform(0, size),
        radius=size * attrs["radius_scale"] * (1 + gen.normal(0, 0.08)),
        theta=attrs["theta"] + gen.normal(0, 0.06),
        freq=attrs["freq"] * (1 + gen.normal(0, 0.04)),
        phase=gen.uniform(0, 2 * np.pi),
        amp=gen.uniform(0.22, 0.40),
        aspect=attrs["aspect"] + gen.normal(0, 0.04),
    )


def make_synthetic_dataset(out_dir, num_classes: int, images_per_class: int,
                           size: int, seed: int, channels: int = 3) -> Path:
    """Procedural texture dataset whose class identity lives in local patterns.

    Each class is a random point in a four-attribute patch space: carrier
    orientation, carrier frequency, patch radius, and envelope elongation.
    Class points are rejection-sampled to keep a minimum pairwise separation,
    but stay fine-grained: most class pairs share several attributes and
    differ subtly in the rest. An image scatters a few patches of its class
    at random positions and buries them among decoy patches drawn uniformly
    from the whole attribute space, so patch layout never identifies the
    class and a correct decision needs local matching of the full attribute
    combination rather than any single cue. Returns the manifest path.
    """
    from .rng import substream

    if num_classes < 2:
        raise ConfigurationError("need at least 2 classes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    prototypes: list[dict] = []
    for cls in range(num_classes):
        cgen = substream(seed, "synth-class", cls)
        # keep classes distinguishable in principle; nearly always the first
        # draw clears the separation floor. Dense packings fall back to the
        # most separated attempt instead of looping forever.
        best, best_sep = None, -1.0
        for _ in range(200):
            attrs = _draw_attributes(cgen)
            sep = min((_attr_distance(attrs, p) for p in prototypes),
                      default=float("inf"))
            if sep > best_sep:
                best, best_sep = attrs, sep
            if best_sep >= 0.30:
                break
        prototypes.append(best)

    lines = []
    for cls, attrs in enumerate(prototypes):
        cls_name = f"class_{cls:03d}"
        cls_dir = out_dir / cls_name
        cls_dir.mkdir(exist_ok=True)
        for img_i in range(images_per_class):
            igen = substream(seed, "synth-image", cls, img_i)
            canvas = 0.5 + igen.normal(0, 0.04, size=(size, size))
            for _ in range(int(igen.integers(5, 8))):
                canvas += _gabor_patch(size, **_patch_args(igen, size, attrs))
            for _ in range(int(igen.integers(3, 6))):
                decoy = _draw_attributes(igen)
                canvas += _gabor_patch(size, **_patch_args(igen, size, decoy))
            img = np.repeat(canvas[None, :, :], channels, axis=0)
            img = img + igen.normal(0, 0.01, size=img.shape)
            img = np.clip(img, 0.0, 1.0).astype(np.float32)
            rel = f"{cls_name}/img_{img_i:03d}.dn4t"
            save_tensor_file(out_dir / rel, img)
            lines.append(f"{rel}\t{cls_name}")
    manifest_path = out_dir / "manifest.tsv"
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path
