"""Procedural similar-subjects dataset.

Shapes come in families whose members look alike (round, four-sided,
three-sided). A caption names the rendered shapes in the template
``"a X and a Y [and a Z ...]"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .tokenizer import SubjectSpec, Tokenizer

FAMILIES: dict[str, tuple[str, ...]] = {
    "quad": ("square", "rectangle", "diamond"),
    "round": ("ellipse", "ring", "circle"),
    "tri": ("triangle", "wedge", "arrow"),
}

COLORS: dict[str, tuple[float, float, float]] = {
    "circle": (0.95, 0.25, 0.20),
    "ellipse": (0.95, 0.60, 0.15),
    "ring": (0.90, 0.20, 0.65),
    "square": (0.20, 0.40, 0.95),
    "rectangle": (0.15, 0.75, 0.90),
    "diamond": (0.55, 0.30, 0.95),
    "triangle": (0.25, 0.85, 0.25),
    "wedge": (0.70, 0.90, 0.20),
    "arrow": (0.15, 0.65, 0.45),
}


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    families: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(FAMILIES))
    image_side: int = 32
    cardinalities: tuple[int, ...] = (1, 2, 3)
    similar_fraction: float = 0.6
    size_range: tuple[int, int] = (9, 13)
    max_overlap: float = 0.0
    max_retries: int = 200

    def __post_init__(self):
        classes = self.classes
        if len(classes) < 6 or len(set(classes)) != len(classes):
            raise ValueError("need at least 6 distinct shape classes")
        for c in classes:
            if c not in COLORS:
                raise ValueError(f"no renderer for shape class {c!r}")
        if any(k < 1 for k in self.cardinalities):
            raise ValueError("cardinalities must be positive")

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(c for members in self.families.values() for c in members)

    def family_of(self, cls: str) -> str:
        for fam, members in self.families.items():
            if cls in members:
                return fam
        raise KeyError(cls)

    def tokenizer(self) -> Tokenizer:
        return Tokenizer(["a", "and", *self.classes])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["families"] = {k: list(v) for k, v in self.families.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        d["families"] = {k: tuple(v) for k, v in d["families"].items()}
        d["cardinalities"] = tuple(d["cardinalities"])
        d["size_range"] = tuple(d["size_range"])
        return cls(**d)


@dataclass
class ToyImage:
    pixels: np.ndarray  # (side, side, 3) float32 in [0, 1]
    subject_truth: list[tuple[str, tuple[float, float], int]] = field(default_factory=list)


def half_extent(cls: str, size: float) -> tuple[float, float]:
    """(half height, half width) of the shape's bounding box."""
    if cls in ("ellipse", "rectangle"):
        return size / 4, size / 2
    if cls == "square":
        return 0.425 * size, 0.425 * size
    return size / 2, size / 2


def shape_mask(cls: str, center: tuple[float, float], size: float, side: int) -> np.ndarray:
    """Boolean mask of one shape, evaluated at pixel centres."""
    cy, cx = center
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    h = size / 2
    if cls == "circle":
        return dy**2 + dx**2 <= h**2
    if cls == "ellipse":
        return (dx / h) ** 2 + (dy / (h / 2)) ** 2 <= 1.0
    if cls == "ring":
        r2 = dy**2 + dx**2
        return (r2 <= h**2) & (r2 >= (0.5 * h) ** 2)
    if cls == "square":
        return (np.abs(dx) <= 0.85 * h) & (np.abs(dy) <= 0.85 * h)
    if cls == "rectangle":
        return (np.abs(dx) <= h) & (np.abs(dy) <= h / 2)
    if cls == "diamond":
        return np.abs(dx) + np.abs(dy) <= h
    # triangles live in the box [-h, h]^2; depth runs 0 at the apex to 1 at the base
    if cls == "triangle":
        depth = (dy + h) / (2 * h)
        return (depth >= 0) & (depth <= 1) & (np.abs(dx) <= depth * h)
    if cls == "arrow":
        depth = (h - dy) / (2 * h)
        return (depth >= 0) & (depth <= 1) & (np.abs(dx) <= depth * h)
    if cls == "wedge":
        return (dx >= -h) & (dy <= h) & (dx + h <= dy + h)
    raise KeyError(f"unknown shape class {cls!r}")


def render(subjects: Sequence[tuple[str, tuple[float, float], int]], side: int) -> np.ndarray:
    pixels = np.zeros((side, side, 3), dtype=np.float32)
    for cls, center, size in subjects:
        pixels[shape_mask(cls, center, size, side)] = COLORS[cls]
    return pixels


def caption_for(subjects: Sequence[str]) -> str:
    return " and ".join(f"a {s}" for s in subjects)


def _boxes_overlap(a, b, max_overlap: float) -> bool:
    (ay0, ax0, ay1, ax1), (by0, bx0, by1, bx1) = a, b
    # one pixel of clearance keeps neighbouring shapes from touching
    iy = min(ay1, by1) - max(ay0, by0) + 1
    ix = min(ax1, bx1) - max(ax0, bx0) + 1
    if iy <= 0 or ix <= 0:
        return False
    inter = iy * ix
    smaller = min((ay1 - ay0) * (ax1 - ax0), (by1 - by0) * (bx1 - bx0))
    return inter / smaller > max_overlap


def choose_subjects(rng: np.random.Generator, config: DatasetConfig, k: int) -> list[str]:
    families = [m for m in config.families.values() if len(m) >= k]
    if families and rng.random() < config.similar_fraction:
        members = families[rng.integers(len(families))]
        picked = rng.choice(len(members), size=k, replace=False)
        return [members[j] for j in picked]
    classes = config.classes
    picked = rng.choice(len(classes), size=k, replace=False)
    return [classes[j] for j in picked]


def place_subjects(
    rng: np.random.Generator, subjects: Sequence[str], config: DatasetConfig
) -> list[tuple[str, tuple[float, float], int]] | None:
    side = config.image_side
    lo, hi = config.size_range
    for _ in range(config.max_retries):
        placed, boxes = [], []
        for cls in subjects:
            size = int(rng.integers(lo, hi + 1))
            hy, hx = half_extent(cls, size)
            cy = float(rng.uniform(hy, side - hy))
            cx = float(rng.uniform(hx, side - hx))
            box = (cy - hy, cx - hx, cy + hy, cx + hx)
            if any(_boxes_overlap(box, b, config.max_overlap) for b in boxes):
                break
            placed.append((cls, (cy, cx), size))
            boxes.append(box)
        else:
            return placed
    return None


def generate_toy_sample(
    rng_seed: int, config: DatasetConfig, n_subjects: int | None = None
) -> tuple[ToyImage, str, SubjectSpec]:
    """Render one captioned image; the output depends only on ``rng_seed`` and the config."""
    rng = np.random.default_rng(rng_seed)
    # the cardinality draw is always taken so an explicit n_subjects keeps the stream aligned
    drawn = int(rng.choice(config.cardinalities))
    k = drawn if n_subjects is None else n_subjects
    subjects = choose_subjects(rng, config, k)
    placed = place_subjects(rng, subjects, config)
    if placed is None:
        raise GenerationError(f"could not place {subjects} for seed {rng_seed}")
    caption = caption_for(subjects)
    spec = config.tokenizer().tokenize_prompt(caption, subjects).subject_spec
    image = ToyImage(render(placed, config.image_side), placed)
    return image, caption, spec
