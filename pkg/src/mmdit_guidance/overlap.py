"""Online overlap detection on word-level attention.

Each subject's late-block maps from both encoders are averaged and
min-max normalized into a saliency map, thresholded into a region mask,
and compared against the union of the other subjects' regions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .attention import WordAttention
from .losses import DegenerateInputWarning, GuidanceConfig, normalize_map


@dataclass
class OverlapReport:
    saliency: np.ndarray  # (N, h, w)
    masks: np.ndarray  # (N, h, w) bool
    ratios: np.ndarray  # (N,)
    i_star: Optional[int]
    conflict_mask: Optional[np.ndarray]
    verdict: str  # "pass" | "conflict"

    @property
    def conflict(self) -> bool:
        return self.verdict == "conflict"

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "ratios": [float(r) for r in self.ratios],
            "i_star": self.i_star,
            "masks": self.masks.astype(int).tolist(),
            "conflict_mask": None if self.conflict_mask is None else self.conflict_mask.astype(int).tolist(),
        }


def subject_saliency(word_attn: WordAttention, i: int, config: GuidanceConfig) -> np.ndarray:
    late = word_attn.range(config.late_range)[..., i, :, :, :].detach()
    mixed = 0.5 * late[..., 0, :, :] + 0.5 * late[..., 1, :, :]
    return normalize_map(mixed, "minmax").cpu().numpy()


def binarize(saliency: np.ndarray, threshold: float) -> np.ndarray:
    return np.asarray(saliency) > threshold


def _others_union(masks: np.ndarray, i: int) -> np.ndarray:
    others = np.delete(masks, i, axis=0)
    return others.any(axis=0)


def overlap_ratio(masks: Sequence[np.ndarray], i: int) -> float:
    """|M_i ∩ ∪_{j≠i} M_j| / |M_i|, or 0 for an empty M_i."""
    shapes = {np.shape(m) for m in masks}
    if len(shapes) > 1:
        raise ValueError(f"masks have different shapes: {sorted(shapes)}")
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim < 2 or len(masks) < 2:
        raise ValueError("overlap ratio needs at least two masks of common shape")
    own = masks[i]
    area = int(own.sum())
    if area == 0:
        warnings.warn(f"subject {i} has an empty mask; overlap ratio set to 0", DegenerateInputWarning, stacklevel=2)
        return 0.0
    return float((own & _others_union(masks, i)).sum()) / area


def report_from_saliency(saliency: np.ndarray, config: GuidanceConfig) -> OverlapReport:
    saliency = np.asarray(saliency)
    masks = binarize(saliency, config.binarize_threshold)
    n = len(saliency)
    if n < 2:
        return OverlapReport(saliency, masks, np.zeros(n), None, None, "pass")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateInputWarning)
        ratios = np.array([overlap_ratio(masks, i) for i in range(n)])
    if not (ratios > config.detect_threshold).any():
        return OverlapReport(saliency, masks, ratios, None, None, "pass")
    i_star = int(np.argmax(ratios))  # first maximum wins ties
    conflict_mask = masks[i_star] & _others_union(masks, i_star)
    return OverlapReport(saliency, masks, ratios, i_star, conflict_mask, "conflict")


def detect(word_attn: WordAttention, config: GuidanceConfig) -> OverlapReport:
    """Overlap report for one (unbatched) WordAttention."""
    if word_attn.maps.dim() != 5:
        raise ValueError("detect expects an unbatched WordAttention; use detect_batch")
    saliency = np.stack([subject_saliency(word_attn, i, config) for i in range(word_attn.n)])
    return report_from_saliency(saliency, config)


def detect_batch(word_attn: WordAttention, config: GuidanceConfig) -> list[OverlapReport]:
    return [detect(word_attn.select(b), config) for b in range(word_attn.maps.shape[0])]


def conflict_tensors(reports: Sequence[OverlapReport], grid: tuple[int, int], dtype=torch.float32):
    """Stack per-sample conflict masks and worst-subject indices (zeros where absent)."""
    masks = torch.zeros(len(reports), *grid, dtype=dtype)
    i_star = torch.zeros(len(reports), dtype=torch.long)
    for k, r in enumerate(reports):
        if r.conflict_mask is not None:
            masks[k] = torch.from_numpy(r.conflict_mask.astype(np.float64)).to(dtype)
            i_star[k] = r.i_star
    return masks, i_star
