"""Procedural street-like scenes rendered under two appearance styles.

Both domains draw layouts from the same generator, so their label
statistics match; only colours, gamma and brightness differ.  Textures are
tied to the class, not the domain.
"""
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, MagicError, TruncatedError, VersionError

ROAD, SKY, BUILDING, VEGETATION, CAR, SIDEWALK, POLE, SIGN = range(8)
CLASS_NAMES = ("road", "sky", "building", "vegetation", "car", "sidewalk", "pole", "sign")

SOURCE_DOMAIN = 1
TARGET_DOMAIN = 0

MAGIC = b"OASD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBHHBB")
SUFFIX = ".oasd"
MANIFEST = "manifest.txt"
SPLITS = ("source_train", "target_train", "target_test")


@dataclass
class SceneLayout:
    labels: np.ndarray
    seed: int
    n_classes: int


@dataclass
class DomainStyle:
    colors: tuple
    texture: float = 0.12
    noise: float = 0.03
    gamma: float = 1.0
    brightness: float = 0.0

    def color(self, cls):
        return np.asarray(self.colors[cls % len(self.colors)], np.float64)


@dataclass
class Sample:
    image: np.ndarray
    labels: np.ndarray
    domain: int
    n_classes: int

    @property
    def size(self):
        return self.image.shape[1:]


SOURCE_STYLE = DomainStyle(
    colors=(
        (0.45, 0.45, 0.45),
        (0.50, 0.70, 0.95),
        (0.65, 0.40, 0.30),
        (0.20, 0.60, 0.20),
        (0.80, 0.15, 0.15),
        (0.70, 0.70, 0.60),
        (0.30, 0.30, 0.20),
        (0.95, 0.85, 0.10),
    ),
)

TARGET_STYLE = DomainStyle(
    colors=(
        (0.40, 0.32, 0.50),
        (0.70, 0.60, 0.50),
        (0.35, 0.45, 0.45),
        (0.50, 0.45, 0.15),
        (0.30, 0.20, 0.60),
        (0.45, 0.55, 0.65),
        (0.55, 0.35, 0.35),
        (0.20, 0.75, 0.80),
    ),
    gamma=0.8,
    brightness=0.1,
)


def _check_geometry(h, w, n_classes):
    if not 3 <= n_classes <= 8:
        raise ConfigurationError(f"number of classes must be between 3 and 8, got {n_classes}")
    if h < 8 or w < 8 or h % 8 or w % 8:
        raise ConfigurationError(f"image size {h}x{w} must be positive multiples of 8")


def sample_layout(seed, h, w, n_classes):
    """Sky above a jittered horizon, road below, buildings on the horizon,
    elliptical vegetation blobs; extra classes add cars, sidewalk, poles, signs."""
    _check_geometry(h, w, n_classes)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    labels = np.full((h, w), ROAD, np.uint8)

    horizon = rng.uniform(0.35, 0.6) * h
    tilt = rng.uniform(-0.15, 0.15) * h
    line = horizon + tilt * (xx / w - 0.5)
    labels[yy < line] = SKY

    if n_classes > SIDEWALK:
        band = rng.uniform(0.08, 0.16) * h
        labels[(yy >= line) & (yy < line + band)] = SIDEWALK

    for _ in range(rng.integers(1, 4)):
        bw = rng.uniform(0.12, 0.35) * w
        bx = rng.uniform(-0.1, 0.9) * w
        top = horizon - rng.uniform(0.15, 0.5) * h
        labels[(xx >= bx) & (xx < bx + bw) & (yy >= top) & (yy < line + 1)] = BUILDING

    if n_classes > VEGETATION:
        for _ in range(rng.integers(1, 3)):
            cx = rng.uniform(0.0, 1.0) * w
            cy = horizon + rng.uniform(-0.15, 0.1) * h
            rx = rng.uniform(0.08, 0.2) * w
            ry = rng.uniform(0.08, 0.18) * h
            labels[((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0] = VEGETATION

    if n_classes > CAR:
        for _ in range(rng.integers(0, 3)):
            cw = rng.uniform(0.12, 0.22) * w
            ch = rng.uniform(0.07, 0.12) * h
            cx = rng.uniform(0.0, 0.85) * w
            cy = rng.uniform(horizon + 0.1 * h, h - ch)
            labels[(xx >= cx) & (xx < cx + cw) & (yy >= cy) & (yy < cy + ch)] = CAR

    if n_classes > POLE:
        for _ in range(rng.integers(1, 3)):
            px = rng.uniform(0.05, 0.95) * w
            top = horizon - rng.uniform(0.1, 0.3) * h
            bottom = horizon + rng.uniform(0.1, 0.25) * h
            labels[(np.abs(xx - px) < max(1.0, 0.02 * w)) & (yy >= top) & (yy < bottom)] = POLE
            if n_classes > SIGN:
                s = 0.06 * h
                labels[(np.abs(xx - px) < s) & (yy >= top) & (yy < top + s)] = SIGN

    if len(np.unique(labels)) < 2:
        labels[: h // 4] = SKY
    return SceneLayout(labels=labels, seed=int(seed), n_classes=n_classes)


def _texture(cls, h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if cls == ROAD:
        return np.sin(2 * np.pi * yy / 4.0)
    if cls == SKY:
        return 1.0 - 2.0 * yy / max(h - 1, 1)
    if cls == BUILDING:
        return np.where((xx % 6 < 3) & (yy % 6 < 3), 1.0, -1.0)
    if cls == VEGETATION:
        coarse = rng.uniform(-1, 1, (h // 4 + 1, w // 4 + 1))
        return coarse.repeat(4, 0).repeat(4, 1)[:h, :w]
    if cls == CAR:
        return np.sin(2 * np.pi * xx / 5.0)
    if cls == SIDEWALK:
        return np.where(((xx // 4) + (yy // 4)) % 2 == 0, 1.0, -1.0)
    return np.cos(2 * np.pi * (xx + yy) / 6.0)


def render(layout, style, seed, domain=SOURCE_DOMAIN):
    """Paint a layout: base colour + class texture + noise, then gamma, brightness, clamp."""
    rng = np.random.default_rng(seed)
    labels = layout.labels
    h, w = labels.shape
    img = np.zeros((3, h, w), np.float64)
    for cls in np.unique(labels):
        mask = labels == cls
        tex = _texture(int(cls), h, w, rng) if style.texture else 0.0
        img[:, mask] = style.color(int(cls))[:, None]
        if style.texture:
            img[:, mask] += style.texture * tex[mask][None]
    if style.noise:
        img += style.noise * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)
    if style.gamma != 1.0:
        img = img ** style.gamma
    img = np.clip(img + style.brightness, 0.0, 1.0)
    return Sample(image=img.astype(np.float32), labels=labels.copy(), domain=domain,
                  n_classes=layout.n_classes)


def make_splits(seed=0, n_source=200, n_target=200, n_test=50, size=48, n_classes=4,
                source_style=None, target_style=None):
    """Source-train, target-train and target-test splits with disjoint layout seeds."""
    _check_geometry(size, size, n_classes)
    source_style = source_style or SOURCE_STYLE
    target_style = target_style or TARGET_STYLE
    base = int(seed) * 1_000_003
    plan = (("source_train", n_source, source_style, SOURCE_DOMAIN),
            ("target_train", n_target, target_style, TARGET_DOMAIN),
            ("target_test", n_test, target_style, TARGET_DOMAIN))
    splits = {}
    offset = 0
    for name, count, style, domain in plan:
        samples = []
        for i in range(count):
            layout_seed = base + offset + i
            layout = sample_layout(layout_seed, size, size, n_classes)
            samples.append(render(layout, style, (layout_seed, domain), domain))
        splits[name] = samples
        offset += count
    return splits


# --- file format ----------------------------------------------------------


def encode_sample(sample):
    c, h, w = sample.image.shape
    if c != 3:
        raise ConfigurationError(f"images must have 3 channels, got {c}")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, h, w, sample.n_classes, sample.domain)
    image = np.ascontiguousarray(sample.image, dtype="<f4").tobytes()
    labels = np.ascontiguousarray(sample.labels, dtype=np.uint8).tobytes()
    return header + image + labels


def _decode_header(buf, path):
    if len(buf) < _HEADER.size:
        raise TruncatedError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, h, w, n_classes, domain = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise MagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported version {version}, expected {FORMAT_VERSION}")
    return h, w, n_classes, domain


def decode_sample(buf, path="<bytes>", with_labels=True):
    h, w, n_classes, domain = _decode_header(buf, path)
    n_img = 3 * h * w * 4
    need = _HEADER.size + n_img + (h * w if with_labels else 0)
    if len(buf) < need:
        raise TruncatedError(f"{path}: expected {need} bytes, found {len(buf)}")
    start = _HEADER.size
    image = np.frombuffer(buf, dtype="<f4", count=3 * h * w, offset=start).reshape(3, h, w)
    labels = None
    if with_labels:
        labels = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=start + n_img).reshape(h, w)
        labels = labels.copy()
    return Sample(image=image.astype(np.float32), labels=labels, domain=domain, n_classes=n_classes)


def write_sample(path, sample):
    Path(path).write_bytes(encode_sample(sample))


def read_sample(path, with_labels=True):
    return decode_sample(Path(path).read_bytes(), path, with_labels)


def write_dataset(directory, samples):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, sample in enumerate(samples):
        name = f"sample_{i:05d}{SUFFIX}"
        write_sample(directory / name, sample)
        names.append(name)
    return names


def dataset_files(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    return sorted(p for p in directory.iterdir() if p.suffix == SUFFIX)


def load_dataset(directory, with_labels=True):
    """All samples in ``directory`` in file-name order; an empty directory gives []."""
    return [read_sample(p, with_labels) for p in dataset_files(directory)]


def write_splits(root, splits):
    root = Path(root)
    lines = []
    for name in SPLITS:
        for fname in write_dataset(root / name, splits.get(name, [])):
            lines.append(f"{name}\t{name}/{fname}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    return root / MANIFEST


def load_split(root, split, with_labels=True):
    """Load one split, using the manifest when present."""
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.exists():
        return load_dataset(root / split, with_labels)
    out = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, rel = line.split("\t")
        if name == split:
            out.append(read_sample(root / rel, with_labels))
    return out
