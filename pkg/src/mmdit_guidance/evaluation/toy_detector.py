"""Deterministic shape detector for toy images.

Foreground pixels are split into connected components. Each component is
matched against every shape class by re-rendering the class at the
component's position and scale and measuring mask IoU, combined with the
distance between the component's mean colour and the class colour.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import ndimage

from ..toy_mmdit.dataset import COLORS, shape_mask

FOREGROUND_THRESHOLD = 0.3
MIN_AREA = 10
IOU_THRESHOLD = 0.6
COLOR_THRESHOLD = 0.25


class UnknownClassError(KeyError):
    pass


@dataclass
class DetectionResult:
    subjects: tuple[str, ...]
    present: tuple[bool, ...]
    confidences: tuple[float, ...]
    detector_id: str = "toy"
    prompt_id: str = ""
    seed: int | None = None
    components: list[dict] = field(default_factory=list)

    @property
    def all_present(self) -> bool:
        return all(self.present)

    def to_dict(self) -> dict:
        return {
            "subjects": list(self.subjects),
            "present": list(self.present),
            "confidences": list(self.confidences),
            "detector_id": self.detector_id,
            "prompt_id": self.prompt_id,
            "seed": self.seed,
        }


@lru_cache(maxsize=None)
def _reference(cls: str, size: int):
    """Centroid offset from the render centre and area of a class at a given size."""
    side = 64
    m = shape_mask(cls, (32.0, 32.0), size, side)
    ys, xs = np.nonzero(m)
    return ys.mean() + 0.5 - 32.0, xs.mean() + 0.5 - 32.0, int(m.sum())


def fit_class(component: np.ndarray, cls: str, sizes=range(5, 21)) -> float:
    """Best IoU between a component mask and a rendered instance of ``cls``."""
    side = component.shape[0]
    ys, xs = np.nonzero(component)
    cy, cx, area = ys.mean() + 0.5, xs.mean() + 0.5, len(ys)
    areas = np.array([_reference(cls, s)[2] for s in sizes])
    k = int(np.argmin(np.abs(areas - area)))
    best = 0.0
    for s in list(sizes)[max(0, k - 1) : k + 2]:
        oy, ox, _ = _reference(cls, s)
        for dy in (-0.5, 0.0, 0.5):
            for dx in (-0.5, 0.0, 0.5):
                m = shape_mask(cls, (cy - oy + dy, cx - ox + dx), s, side)
                inter = np.count_nonzero(m & component)
                union = np.count_nonzero(m | component)
                best = max(best, inter / union if union else 0.0)
    return best


def components_of(pixels: np.ndarray, threshold: float = FOREGROUND_THRESHOLD, min_area: int = MIN_AREA):
    fg = np.asarray(pixels).max(axis=-1) > threshold
    labels, count = ndimage.label(fg)
    out = []
    for lab in range(1, count + 1):
        comp = labels == lab
        if comp.sum() >= min_area:
            out.append(comp)
    return out


def classify_component(pixels: np.ndarray, component: np.ndarray, classes: Sequence[str]) -> dict:
    color = np.asarray(pixels)[component].mean(axis=0)
    scores = {}
    for cls in classes:
        dist = float(np.linalg.norm(color - np.array(COLORS[cls])))
        if dist > COLOR_THRESHOLD:
            continue
        scores[cls] = fit_class(component, cls)
    if not scores:
        return {"class": None, "iou": 0.0, "area": int(component.sum())}
    cls = max(scores, key=scores.get)
    return {"class": cls, "iou": scores[cls], "area": int(component.sum())}


def toy_detect(image, subjects: Sequence[str], classes: Sequence[str] | None = None) -> DetectionResult:
    """Present/absent per queried subject; confidence is the matched IoU (0 when absent)."""
    classes = tuple(COLORS) if classes is None else tuple(classes)
    for s in subjects:
        if s not in COLORS:
            raise UnknownClassError(f"unknown shape class {s!r}")
    pixels = getattr(image, "pixels", image)
    found = [classify_component(pixels, c, classes) for c in components_of(pixels)]
    present, conf = [], []
    for s in subjects:
        hits = [f["iou"] for f in found if f["class"] == s and f["iou"] >= IOU_THRESHOLD]
        present.append(bool(hits))
        conf.append(max(hits) if hits else 0.0)
    return DetectionResult(tuple(subjects), tuple(present), tuple(conf), components=found)
