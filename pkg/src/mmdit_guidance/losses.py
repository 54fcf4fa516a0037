"""Ambiguity losses on word-level cross-attention maps.

All losses are differentiable torch functions of a :class:`WordAttention`
and accept leading batch dimensions, returning one value per batch element.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch

from .attention import WordAttention

DEFAULT_SCHEDULE = ((1, 2, 1), (3, 5, 15), (6, 14, 1), (15, 28, 0))


class DegenerateInputWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class GuidanceConfig:
    lambda_ba: float = 1.0
    lambda_ta: float = 0.2
    lambda_ol: float = 0.001
    alpha: float = 30.0
    early_range: tuple[int, int] = (5, 8)
    late_range: tuple[int, int] = (9, 12)
    full_range: tuple[int, int] = (5, 12)
    binarize_threshold: float = 0.2
    detect_threshold: float = 0.2
    detect_step: int = 5
    total_steps: int = 28
    optimized_steps: tuple[int, int] = (1, 14)
    # (first step, last step, iterations); steps count from the noise end
    iteration_schedule: tuple[tuple[int, int, int], ...] = DEFAULT_SCHEDULE
    guidance_scale: float = 7.0
    overlap_norm: str = "max"
    reject_sampling: bool = True

    def __post_init__(self):
        for name in ("lambda_ba", "lambda_ta", "lambda_ol"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("binarize_threshold", "detect_threshold"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        for name in ("early_range", "late_range", "full_range"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 1 <= lo <= hi")
        lo, hi = self.optimized_steps
        if not 1 <= lo <= hi <= self.total_steps:
            raise ValueError("optimized_steps must lie within 1..total_steps")
        if not 1 <= self.detect_step <= hi:
            raise ValueError("detect_step must not exceed the last optimized step")
        if self.overlap_norm not in ("max", "minmax", "sum"):
            raise ValueError(f"unknown overlap_norm {self.overlap_norm!r}")
        covered = set()
        for first, last, iters in self.iteration_schedule:
            if first > last or iters < 0:
                raise ValueError(f"bad schedule entry {(first, last, iters)}")
            span = set(range(first, last + 1))
            if span & covered:
                raise ValueError(f"schedule entry {(first, last, iters)} overlaps another")
            covered |= span

    def check_depth(self, num_blocks: int) -> None:
        for name in ("early_range", "late_range", "full_range"):
            if getattr(self, name)[1] > num_blocks:
                raise ValueError(f"{name} {getattr(self, name)} exceeds model depth {num_blocks}")

    def replace(self, **changes) -> "GuidanceConfig":
        d = self.to_dict()
        d.update(changes)
        return GuidanceConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        d = dict(d)
        for name in ("early_range", "late_range", "full_range", "optimized_steps"):
            if name in d:
                d[name] = tuple(d[name])
        if "iteration_schedule" in d:
            d["iteration_schedule"] = tuple(tuple(e) for e in d["iteration_schedule"])
        return cls(**d)


@dataclass
class LossReport:
    l_ba: torch.Tensor
    l_ta: torch.Tensor
    l_ol: torch.Tensor
    l_res: torch.Tensor
    l_amb: torch.Tensor
    l_total: torch.Tensor
    breakdown: dict = field(default_factory=dict)

    def select(self, index: int) -> "LossReport":
        return LossReport(
            *(getattr(self, k)[index] for k in ("l_ba", "l_ta", "l_ol", "l_res", "l_amb", "l_total")),
            breakdown=dict(self.breakdown),
        )

    def to_dict(self) -> dict:
        out = {}
        for k in ("l_ba", "l_ta", "l_ol", "l_res", "l_amb", "l_total"):
            v = getattr(self, k).detach()
            out[k] = float(v) if v.dim() == 0 else v.tolist()
        out.update(self.breakdown)
        return out


def _safe_sqrt(x: torch.Tensor, zero: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(torch.where(zero, torch.ones_like(x), x))


def cosine(map_p: torch.Tensor, map_q: torch.Tensor, spatial_dims: int = 2) -> torch.Tensor:
    """Cosine similarity of the flattened trailing ``spatial_dims`` dimensions.

    A zero-norm input gives similarity 0 and a DegenerateInputWarning.
    """
    if map_p.shape[-spatial_dims:] != map_q.shape[-spatial_dims:]:
        raise ValueError(f"map shapes differ: {tuple(map_p.shape)} vs {tuple(map_q.shape)}")
    p = map_p.flatten(-spatial_dims)
    q = map_q.flatten(-spatial_dims)
    pp, qq = (p * p).sum(-1), (q * q).sum(-1)
    zero = (pp == 0) | (qq == 0)
    if bool(zero.any()):
        warnings.warn("cosine of a zero-norm map defined as 0", DegenerateInputWarning, stacklevel=2)
    denom = _safe_sqrt(pp, pp == 0) * _safe_sqrt(qq, qq == 0)
    return torch.where(zero, torch.zeros_like(denom), (p * q).sum(-1) / denom)


def normalize_map(m: torch.Tensor, mode: str = "max", spatial_dims: int = 2) -> torch.Tensor:
    """Rescale a nonnegative map per spatial slice.

    ``max``: m / max(m); ``minmax``: (m - min) / (max - min); ``sum``: m / sum(m).
    Degenerate slices (identically zero, or constant under minmax) become zeros.
    """
    flat = m.flatten(-spatial_dims)
    if mode == "max":
        scale = flat.amax(-1, keepdim=True)
        zero = scale == 0
        out = torch.where(zero, torch.zeros_like(flat), flat / torch.where(zero, torch.ones_like(scale), scale))
    elif mode == "sum":
        scale = flat.sum(-1, keepdim=True)
        zero = scale == 0
        out = torch.where(zero, torch.zeros_like(flat), flat / torch.where(zero, torch.ones_like(scale), scale))
    elif mode == "minmax":
        lo = flat.amin(-1, keepdim=True)
        span = flat.amax(-1, keepdim=True) - lo
        zero = span == 0
        out = torch.where(zero, torch.zeros_like(flat), (flat - lo) / torch.where(zero, torch.ones_like(span), span))
    else:
        raise ValueError(f"unknown normalization {mode!r}")
    return out.reshape(m.shape)


def block_alignment_loss(word_attn: WordAttention, config: GuidanceConfig) -> torch.Tensor:
    """Pull early-block maps towards the (detached) late-block maps, per subject and encoder."""
    early = word_attn.range(config.early_range)  # (..., N, 2, h, w)
    late = word_attn.range(config.late_range).detach()
    return (1 - cosine(early, late)).mean(dim=(-1, -2))


def text_encoder_alignment_loss(word_attn: WordAttention, config: GuidanceConfig) -> torch.Tensor:
    late = word_attn.range(config.late_range)
    return (1 - cosine(late[..., 0, :, :], late[..., 1, :, :])).mean(dim=-1)


def overlap_loss(word_attn: WordAttention, config: GuidanceConfig) -> torch.Tensor:
    """Sum over subject pairs of all four cross-encoder inner products of normalized late maps."""
    late = word_attn.range(config.late_range)
    n = late.shape[-4]
    if n < 2:
        return late.sum(dim=(-1, -2, -3, -4)) * 0
    both = normalize_map(late, config.overlap_norm).sum(dim=-3).flatten(-2)  # (..., N, hw)
    gram = both @ both.transpose(-1, -2)
    upper = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)
    return gram[..., upper].sum(-1)


def restriction_loss(
    word_attn: WordAttention,
    conflict_mask: torch.Tensor,
    i_star,
    config: GuidanceConfig,
) -> torch.Tensor:
    """Fraction of subject ``i_star``'s full-range attention inside the conflict mask,
    averaged over the two encoders.

    ``i_star`` is an int or a LongTensor matching the batch dimensions; the
    mask has shape (..., h, w).
    """
    full = word_attn.range(config.full_range)  # (..., N, 2, h, w)
    if isinstance(i_star, int):
        chosen = full[..., i_star, :, :, :]
    else:
        idx = i_star.reshape(*i_star.shape, 1, 1, 1, 1).expand(*i_star.shape, 1, *full.shape[-3:])
        chosen = torch.gather(full, -4, idx).squeeze(-4)
    mask = conflict_mask.to(full.dtype).unsqueeze(-3)
    inside = (chosen * mask).sum(dim=(-1, -2))
    total = chosen.sum(dim=(-1, -2))
    zero = total == 0
    if bool(zero.any()):
        warnings.warn("restricted subject has zero attention mass", DegenerateInputWarning, stacklevel=2)
    ratio = torch.where(zero, torch.zeros_like(total), inside / torch.where(zero, torch.ones_like(total), total))
    return 0.5 * ratio.sum(-1)


def compose(l_ba, l_ta, l_ol, l_res, config: GuidanceConfig) -> LossReport:
    l_amb = config.lambda_ba * l_ba + config.lambda_ta * l_ta + config.lambda_ol * l_ol
    return LossReport(l_ba, l_ta, l_ol, l_res, l_amb, l_amb + l_res)


@dataclass
class ConflictContext:
    mask: torch.Tensor  # (..., h, w) binary
    i_star: object  # int or LongTensor over the batch
    active: Optional[torch.Tensor] = None  # (...) bool; inactive entries get l_res = 0


def combined_loss(
    word_attn: WordAttention, config: GuidanceConfig, conflict: ConflictContext | None = None
) -> LossReport:
    l_ba = block_alignment_loss(word_attn, config)
    l_ta = text_encoder_alignment_loss(word_attn, config)
    l_ol = overlap_loss(word_attn, config)
    if conflict is None:
        l_res = torch.zeros_like(l_ba)
    else:
        l_res = restriction_loss(word_attn, conflict.mask, conflict.i_star, config)
        if conflict.active is not None:
            l_res = torch.where(conflict.active, l_res, torch.zeros_like(l_res))
    report = compose(l_ba, l_ta, l_ol, l_res, config)
    report.breakdown["restriction_evaluated"] = conflict is not None
    return report
