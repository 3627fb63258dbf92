"""Synthetic caption -> image world with a learnable toy text encoder."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .dse import TextFeatures
from .nn import Params
from .ppm import write_ppm

COLORS = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "white": (255, 255, 255),
    "purple": (128, 0, 128),
}
SHAPES = ("circle", "square", "triangle", "cross")
SIZES = {"small": 0.15, "large": 0.30}
POSITIONS = {
    "left": (0.25, 0.5),
    "right": (0.75, 0.5),
    "top": (0.5, 0.25),
    "bottom": (0.5, 0.75),
    "center": (0.5, 0.5),
}
FILLERS = ("a", "the", "is")
PAD = "<pad>"
MAX_LEN = 8
BACKGROUND = (40, 40, 40)

VOCAB = (PAD, *FILLERS, *COLORS, *SHAPES, *SIZES, *POSITIONS)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}

# attribute_accuracy thresholds
FOREGROUND_DIST = 60.0
COLOR_TOL = 60.0
MIN_CLUSTER = 20
LEVELS = 4


class UnknownTokenError(ValueError):
    pass


@dataclass(frozen=True)
class ToyCaption:
    color: str
    shape: str
    size: str
    position: str
    tokens: tuple[str, ...] = ()

    def __post_init__(self):
        for value, table in ((self.color, COLORS), (self.shape, SHAPES), (self.size, SIZES), (self.position, POSITIONS)):
            if value not in table:
                raise UnknownTokenError(f"unknown attribute {value!r}")
        if not self.tokens:
            object.__setattr__(self, "tokens", ("a", self.size, self.color, self.shape, "is", self.position))
        if len(self.tokens) > MAX_LEN:
            raise ValueError(f"caption longer than {MAX_LEN} tokens")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def padded_ids(self) -> list[int]:
        ids = [TOKEN_ID[w] for w in self.tokens]
        return ids + [TOKEN_ID[PAD]] * (MAX_LEN - len(ids))


def parse_caption(text: str) -> ToyCaption:
    """Parse free-order text with exactly one color, shape, size and position word."""
    tokens = tuple(text.lower().split())
    unknown = [w for w in tokens if w not in TOKEN_ID or w == PAD]
    if unknown:
        raise UnknownTokenError(f"unknown tokens: {unknown}")
    found = {}
    for kind, table in (("color", COLORS), ("shape", SHAPES), ("size", SIZES), ("position", POSITIONS)):
        hits = [w for w in tokens if w in table]
        if len(hits) != 1:
            raise ValueError(f"caption needs exactly one {kind} word, got {hits}")
        found[kind] = hits[0]
    return ToyCaption(tokens=tokens, **found)


def all_captions() -> list[ToyCaption]:
    return [ToyCaption(c, s, z, p) for c, s, z, p in itertools.product(COLORS, SHAPES, SIZES, POSITIONS)]


def shape_mask(shape: str, size: str, position: str, resolution: int) -> np.ndarray:
    r = SIZES[size] * resolution
    fx, fy = POSITIONS[position]
    cx, cy = fx * resolution, fy * resolution
    ys, xs = np.mgrid[0:resolution, 0:resolution] + 0.5
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "cross":
        arm = r / 3.0
        return ((np.abs(dx) <= r) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= r) & (np.abs(dx) <= arm))
    if shape == "triangle":
        # upward equilateral triangle inscribed in the circle of radius r
        half = r * np.sqrt(3.0) / 2.0
        top, base = cy - r, cy + r / 2.0
        inside_y = (ys >= top) & (ys <= base)
        frac = np.clip((ys - top) / (base - top), 0.0, 1.0)
        return inside_y & (np.abs(dx) <= frac * half)
    raise ValueError(f"unknown shape {shape!r}")


def render(caption: ToyCaption, resolution: int = 64) -> np.ndarray:
    """``[R, R, 3]`` uint8 image of the captioned shape on the background."""
    img = np.empty((resolution, resolution, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    img[shape_mask(caption.shape, caption.size, caption.position, resolution)] = COLORS[caption.color]
    return img


def sample_captions(seed: int, n: int) -> list[ToyCaption]:
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    colors, shapes, sizes, positions = list(COLORS), list(SHAPES), list(SIZES), list(POSITIONS)
    picks = [rng.integers(0, len(t), n) for t in (colors, shapes, sizes, positions)]
    return [
        ToyCaption(colors[c], shapes[s], sizes[z], positions[p])
        for c, s, z, p in zip(*(pk.tolist() for pk in picks))
    ]


def sample_dataset(seed: int, n: int, resolution: int = 64) -> list[tuple[ToyCaption, np.ndarray]]:
    return [(c, render(c, resolution)) for c in sample_captions(seed, n)]


def save_dataset(pairs, directory) -> Path:
    """Write ``NNNNN.ppm`` images and ``index.json`` mapping file names to captions."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for i, (cap, img) in enumerate(pairs):
        name = f"{i:05d}.ppm"
        write_ppm(directory / name, img)
        index.append({"file": name, "caption": cap.text})
    (directory / "index.json").write_text(json.dumps(index, indent=1))
    return directory


def attribute_accuracy(image: np.ndarray, caption: ToyCaption) -> tuple[bool, bool]:
    """(color_ok, position_ok) from the dominant non-background colour cluster.

    Foreground pixels are those farther than ``FOREGROUND_DIST`` from the
    background colour. They are binned on a 4-level-per-channel RGB grid; the
    most populated bin is the dominant cluster. Colour is correct when the
    cluster mean is within ``COLOR_TOL`` of the commanded colour, position
    when the cluster centroid is nearest the commanded region anchor.
    """
    img = np.asarray(image, dtype=np.float64)
    R = img.shape[0]
    fg = np.linalg.norm(img - np.array(BACKGROUND), axis=-1) > FOREGROUND_DIST
    if fg.sum() < MIN_CLUSTER:
        return False, False
    pix = img[fg]
    q = np.clip((pix // (256 // LEVELS)).astype(int), 0, LEVELS - 1)
    codes = (q[:, 0] * LEVELS + q[:, 1]) * LEVELS + q[:, 2]
    counts = np.bincount(codes, minlength=LEVELS**3)
    best = int(counts.argmax())
    if counts[best] < MIN_CLUSTER:
        return False, False
    members = codes == best
    mean_color = pix[members].mean(axis=0)
    color_ok = bool(np.linalg.norm(mean_color - np.array(COLORS[caption.color])) <= COLOR_TOL)
    ys, xs = np.nonzero(fg)
    cy, cx = (ys[members].mean() + 0.5) / R, (xs[members].mean() + 0.5) / R
    nearest = min(POSITIONS, key=lambda k: (POSITIONS[k][0] - cx) ** 2 + (POSITIONS[k][1] - cy) ** 2)
    return color_ok, nearest == caption.position


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Map generator output in (-1, 1) to [0, 255]."""
    return np.clip(np.rint((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def to_unit(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float32) / 127.5 - 1.0


@dataclass
class ToyTextEncoder(Params):
    embedding: T.Tensor  # [vocab, D_t]

    @classmethod
    def init(cls, rng, D_t: int) -> "ToyTextEncoder":
        return cls(T.Tensor(rng.normal(0, 1.0, (len(VOCAB), D_t)), requires_grad=True))

    def encode(self, captions: list[ToyCaption]) -> TextFeatures:
        """Word features ``[B, 8, D_t]`` (PAD rows included) and sentence = mean of non-PAD rows."""
        ids = np.array([c.padded_ids() for c in captions])
        words = T.getitem(self.embedding, ids)
        mask = (ids != TOKEN_ID[PAD]).astype(self.embedding.data.dtype)[..., None]
        count = mask.sum(axis=1)
        sentence = T.sum_(words * T.Tensor._wrap(mask), axis=1) / T.Tensor._wrap(count)
        return TextFeatures(words, sentence)
