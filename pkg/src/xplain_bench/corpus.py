"""Image corpora: loading from disk, synthetic shapes and correctness filtering."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import ModelGraph, predict

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
COLOURS = {
    "red": (230, 30, 30),
    "green": (30, 210, 30),
    "blue": (30, 30, 230),
}
CLASS_NAMES = tuple(f"{c}_{s}" for s in SHAPES for c in COLOURS)
INDEX_FILE = "labels.csv"


@dataclass
class Entry:
    id: str
    image: np.ndarray
    label: int


@dataclass
class Corpus:
    entries: list
    total: int | None = None  # size before filtering
    class_names: tuple = field(default=())

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("corpus ids must be unique")
        if self.total is None:
            self.total = len(self.entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def images(self):
        return [e.image for e in self.entries]

    @property
    def labels(self):
        return np.array([e.label for e in self.entries], dtype=int)

    def pairs(self):
        return [(e.image, e.label) for e in self.entries]


def load_corpus(directory, shape: tuple[int, int] | None = None) -> Corpus:
    """Read ``labels.csv`` (columns id, file, label) and the PNGs it names.

    Entries whose size differs from ``shape`` (H, W) are skipped with a
    warning. Entries are ordered by id.
    """
    from PIL import Image

    directory = Path(directory)
    try:
        with open(directory / INDEX_FILE, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except (OSError, csv.Error) as exc:
        raise OSError(f"cannot read corpus index: {exc}") from exc
    entries = []
    for row in sorted(rows, key=lambda r: r["id"]):
        try:
            with Image.open(directory / row["file"]) as im:
                image = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except OSError as exc:
            log.warning("skipping %s: %s", row["id"], exc)
            continue
        if shape is not None and image.shape[:2] != tuple(shape):
            log.warning("skipping %s: size %s != %s", row["id"], image.shape[:2], tuple(shape))
            continue
        entries.append(Entry(row["id"], image, int(row["label"])))
    if not entries:
        raise ValueError(f"no usable entries in {directory}")
    return Corpus(entries)


def write_corpus(corpus: Corpus, directory) -> None:
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / INDEX_FILE, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "file", "label"])
        for e in corpus:
            name = f"{e.id}.png"
            Image.fromarray(e.image).save(directory / name)
            writer.writerow([e.id, name, e.label])


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

def _shape_mask(shape, cy, cx, r, h, w):
    y, x = np.mgrid[0:h, 0:w] + 0.5
    if shape == "circle":
        return (y - cy) ** 2 + (x - cx) ** 2 <= r * r
    if shape == "square":
        return (np.abs(y - cy) <= r) & (np.abs(x - cx) <= r)
    # upward isosceles triangle inscribed in the 2r box
    top, bottom = cy - r, cy + r
    frac = (y - top) / (2 * r)
    return (y >= top) & (y <= bottom) & (np.abs(x - cx) <= frac * r)


def generate_synthetic_corpus(seed: int, n: int, h: int = 32, w: int = 32) -> Corpus:
    """Coloured circles, squares and triangles on grey textured backgrounds.

    Nine classes (shape x colour). Objects keep a margin of at least 15% of
    the side to every border.
    """
    if n <= 0:
        raise ValueError("synthetic corpus needs n > 0")
    rng = np.random.default_rng(seed)
    side = min(h, w)
    margin = 0.15 * side
    colours = list(COLOURS.values())
    entries = []
    for i in range(n):
        label = int(rng.integers(len(CLASS_NAMES)))
        shape, colour = SHAPES[label // len(COLOURS)], colours[label % len(COLOURS)]
        r = rng.uniform(0.17, 0.24) * side
        cy = rng.uniform(margin + r, h - margin - r)
        cx = rng.uniform(margin + r, w - margin - r)
        grey = rng.uniform(70, 140)
        texture = grey + rng.normal(0, 12, (h, w)) + 10 * np.sin(
            np.arange(w)[None, :] * rng.uniform(0.3, 1.2) + rng.uniform(0, 6))
        image = np.repeat(texture[..., None], 3, axis=2)
        mask = _shape_mask(shape, cy, cx, r, h, w)
        fill = np.asarray(colour, float) + rng.normal(0, 10, (h, w, 3))
        image[mask] = fill[mask]
        entries.append(Entry(f"syn{i:05d}", np.clip(np.floor(image + 0.5), 0, 255).astype(np.uint8), label))
    return Corpus(entries, class_names=CLASS_NAMES)


def decode_synthetic(image) -> int:
    """Rule-based label decoder: dominant channel inside the saturated region
    gives the colour; bounding-box fill ratio gives the shape."""
    img = np.asarray(image, dtype=np.int32)
    spread = img.max(axis=2) - img.min(axis=2)
    mask = spread > 80
    if not mask.any():
        raise ValueError("no object found")
    colour = int(np.argmax(img[mask].mean(axis=0)))
    ys, xs = np.nonzero(mask)
    fill = mask.sum() / ((ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1))
    shape = 1 if fill > 0.9 else 0 if fill > 0.65 else 2
    return shape * len(COLOURS) + colour


def filter_correct(model: ModelGraph, corpus: Corpus) -> Corpus:
    if len(corpus) == 0:
        return Corpus([], total=0, class_names=corpus.class_names)
    pred = predict(model, corpus.images)
    kept = [e for e, p in zip(corpus, pred) if p == e.label]
    log.info("kept %d/%d correctly classified images", len(kept), len(corpus))
    return Corpus(kept, total=len(corpus), class_names=corpus.class_names)


# ---------------------------------------------------------------------------
# fixture models
# ---------------------------------------------------------------------------

FIXTURE_SPEC = (
    ("conv", 8, 3, 1, 1), ("relu",), ("maxpool", 2, 2),
    ("conv", 16, 3, 1, 1), ("relu",), ("maxpool", 2, 2),
    ("flatten",), ("dense", len(CLASS_NAMES)),
)
FIXTURE_MEAN = (0.45, 0.45, 0.45)
FIXTURE_STD = (0.25, 0.25, 0.25)
