"""Directory-per-class image datasets and the synthetic crack generator.

Layout on disk is ``<root>/<class_name>/*.{png,jpg,jpeg}``; class indices
follow the lexicographic order of the class directory names.

Images are resized with Pillow's bilinear filter (a triangle kernel, widened
by the scale factor when shrinking so every source pixel contributes) and
scaled to [0, 1] by dividing the 8-bit values by 255.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError

from crackcnn.tensor import DTYPE, make_rng

log = logging.getLogger(__name__)

IMAGE_SIZE = 228
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
TASKS = {
    "crack2": ("crack", "negative"),
    "crackjoint3": ("crack", "joint", "negative"),
}


@dataclass
class Sample:
    pixels: np.ndarray  # [3, H, W] in [0, 1]
    label: int
    source_path: str


@dataclass
class Dataset:
    images: np.ndarray  # [N, 3, H, W] float32
    labels: np.ndarray  # [N] int64
    class_labels: list[str]
    paths: list[str] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_labels)):
            raise ValueError("label out of range for class_labels")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        path = self.paths[i] if self.paths else ""
        return Sample(self.images[i], int(self.labels[i]), path)

    @property
    def num_classes(self) -> int:
        return len(self.class_labels)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        paths = [self.paths[i] for i in idx] if self.paths else []
        return Dataset(self.images[idx], self.labels[idx], list(self.class_labels), paths, split or self.split)


def preprocess_image(img: Image.Image | np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Convert any decoded image to a float32 ``[3, size, size]`` tensor in [0, 1].

    Grayscale and palette images are converted to RGB first.
    """
    if isinstance(img, np.ndarray):
        img = Image.fromarray(img)
    if img.width < 1 or img.height < 1:
        raise ValueError("image has no pixels")
    if img.mode != "RGB":
        img = img.convert("RGB")
    if img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.uint8)
    return (arr.transpose(2, 0, 1).astype(DTYPE) / DTYPE(255)).astype(DTYPE)


def load_image(path, size: int = IMAGE_SIZE) -> np.ndarray:
    with Image.open(path) as img:
        img.load()
        return preprocess_image(img, size)


def _try_load(path, size):
    try:
        return load_image(path, size)
    except (OSError, UnidentifiedImageError, ValueError) as e:
        log.warning("skipping undecodable image %s: %s", path, e)
        return None


def list_classes(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    return sorted(p.name for p in root.iterdir() if p.is_dir())


def load_folder(root, size: int = IMAGE_SIZE, threads: int = 1, split: str = "all") -> Dataset:
    """Decode every image under ``root`` in (class, filename) order."""
    root = Path(root)
    classes = list_classes(root)
    if not classes:
        raise ValueError(f"empty dataset: no class directories under {root}")
    files, labels = [], []
    for ci, name in enumerate(classes):
        found = sorted(p for p in (root / name).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        files += found
        labels += [ci] * len(found)
    if not files:
        raise ValueError(f"empty dataset: no images under {root}")
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            decoded = list(pool.map(lambda p: _try_load(p, size), files))
    else:
        decoded = [_try_load(p, size) for p in files]
    keep = [i for i, a in enumerate(decoded) if a is not None]
    kept_labels = np.array([labels[i] for i in keep], dtype=np.int64)
    for ci, name in enumerate(classes):
        if not np.any(kept_labels == ci):
            raise ValueError(f"class {name!r} has no decodable images")
    images = np.stack([decoded[i] for i in keep]) if keep else np.zeros((0, 3, size, size), DTYPE)
    return Dataset(images, kept_labels, classes, [str(files[i]) for i in keep], split)


def split_counts(n: int, test_fraction: float) -> tuple[int, int]:
    """(train, test) sizes for one class; the test share is rounded up."""
    if not 0 <= test_fraction <= 1:
        raise ValueError("test fraction must lie in [0, 1]")
    # tolerance keeps e.g. 75 * (10/150) at 5 rather than 6
    n_test = min(n, math.ceil(n * test_fraction - 1e-9))
    return n - n_test, n_test


def split_dataset(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split every class independently after a seeded shuffle."""
    rng = make_rng(seed)
    train_idx, test_idx = [], []
    for ci in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == ci)
        members = members[rng.permutation(len(members))]
        n_train, _ = split_counts(len(members), test_fraction)
        train_idx += members[:n_train].tolist()
        test_idx += members[n_train:].tolist()
    return ds.subset(train_idx, "train"), ds.subset(test_idx, "test")


def load_dataset(
    root, split_fraction: float = 0.2, seed: int = 0, size: int = IMAGE_SIZE, threads: int = 1
) -> tuple[Dataset, Dataset]:
    """Load ``root`` and split it into (train, test); ``split_fraction`` is the test share."""
    ds = load_folder(root, size=size, threads=threads)
    if ds.num_classes < 2:
        raise ValueError(f"need at least 2 class directories, found {ds.num_classes} under {root}")
    return split_dataset(ds, split_fraction, seed)


# --------------------------------------------------------------------------
# synthetic crack-like images


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.55, 0.8)
    tint = rng.uniform(-0.04, 0.04, size=3)
    coarse = Image.fromarray(rng.normal(0.0, 1.0, (size // 8, size // 8)).astype(np.float32), mode="F")
    blotch = np.asarray(coarse.resize((size, size), Image.BILINEAR), dtype=np.float64) * 0.05
    grain = rng.normal(0.0, 0.05, (size, size))
    gray = base + blotch + grain
    img = gray[..., None] + tint
    # sparse dark speckles, too short to read as lines
    n_dots = rng.integers(20, 60)
    ys, xs = rng.integers(0, size, n_dots), rng.integers(0, size, n_dots)
    for y, x in zip(ys, xs):
        r = int(rng.integers(1, 3))
        img[max(y - r, 0) : y + r, max(x - r, 0) : x + r] *= rng.uniform(0.5, 0.8)
    return np.clip(img * 255, 0, 255).astype(np.uint8)


def _line_color(rng, img: np.ndarray, darkness: tuple[float, float]) -> tuple[int, int, int]:
    level = img.reshape(-1, 3).mean(axis=0) * rng.uniform(*darkness)
    return tuple(int(c) for c in level)


def _crack(rng: np.random.Generator, draw: ImageDraw.ImageDraw, img: np.ndarray, size: int) -> None:
    # irregular random walk that crosses most of the image
    x, y = rng.uniform(0.1, 0.9, 2) * size
    heading = rng.uniform(0, 2 * np.pi)
    width = int(rng.integers(1, 5))
    color = _line_color(rng, img, (0.15, 0.35))
    for direction in (heading, heading + np.pi):
        px, py, theta = x, y, direction
        for _ in range(40):
            theta += rng.uniform(-0.7, 0.7)
            theta = 0.6 * theta + 0.4 * direction
            step = rng.uniform(5, 14)
            nx, ny = px + step * np.cos(theta), py + step * np.sin(theta)
            w = int(np.clip(width + rng.integers(-1, 2), 1, 4))
            draw.line([(px, py), (nx, ny)], fill=color, width=w)
            px, py = nx, ny
            if not (-5 <= px <= size + 5 and -5 <= py <= size + 5):
                break


def _joint(rng: np.random.Generator, draw: ImageDraw.ImageDraw, img: np.ndarray, size: int) -> None:
    # straight seam of constant width through the whole image
    cx, cy = rng.uniform(0.25, 0.75, 2) * size
    theta = rng.uniform(0, np.pi)
    dx, dy = np.cos(theta) * size * 1.5, np.sin(theta) * size * 1.5
    width = int(rng.integers(3, 6))
    color = _line_color(rng, img, (0.3, 0.45))
    draw.line([(cx - dx, cy - dy), (cx + dx, cy + dy)], fill=color, width=width)


def synth_image(rng: np.random.Generator, kind: str, size: int = IMAGE_SIZE) -> Image.Image:
    """One synthetic RGB image of class ``kind`` ("crack", "joint" or "negative")."""
    arr = _texture(rng, size)
    img = Image.fromarray(arr, mode="RGB")
    draw = ImageDraw.Draw(img)
    if kind == "crack":
        _crack(rng, draw, arr, size)
    elif kind == "joint":
        _joint(rng, draw, arr, size)
    elif kind != "negative":
        raise ValueError(f"unknown synthetic class {kind!r}")
    return img


def generate_synthetic(task: str, n_per_class: int, seed: int, out_dir, size: int = IMAGE_SIZE) -> Path:
    """Write ``n_per_class`` PNGs per class of ``task`` under ``out_dir/<class>/``."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {sorted(TASKS)}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    out = Path(out_dir)
    rng = make_rng(seed)
    for kind in TASKS[task]:
        d = out / kind
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            synth_image(rng, kind, size).save(d / f"{kind}_{i:04d}.png", format="PNG")
    return out


def synthetic_dataset(task: str, n_per_class: int, seed: int, size: int = IMAGE_SIZE) -> Dataset:
    """In-memory equivalent of ``generate_synthetic`` followed by ``load_folder``."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {sorted(TASKS)}")
    rng = make_rng(seed)
    classes = TASKS[task]
    images, labels = [], []
    for ci, kind in enumerate(classes):
        for _ in range(n_per_class):
            images.append(preprocess_image(synth_image(rng, kind, size), size))
            labels.append(ci)
    return Dataset(np.stack(images), np.array(labels, dtype=np.int64), list(classes), split="all")
