"""Cross-attention maps from the joint self-attention.

Token order inside the model is ``[image | encoder A | encoder B]``. The
image-to-text and text-to-image portions of each block's attention are
kept, averaged over heads and over the two directions, then aggregated per
subject word and per block range. Block indices are 1-based throughout.

Tensors may carry any number of leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

ENCODER_INDEX = {"A": 0, "B": 1}


class ExtractionError(ValueError):
    pass


class RangeError(IndexError):
    pass


@dataclass
class AttentionBundle:
    img2txt: torch.Tensor  # (..., blocks, heads, image_tokens, text_tokens)
    txt2img: torch.Tensor  # (..., blocks, heads, text_tokens, image_tokens)
    boundary: int  # text tokens [0, boundary) come from encoder A
    grid: tuple[int, int]

    @classmethod
    def from_joint(cls, probs: Sequence[torch.Tensor], num_image_tokens: int, boundary: int) -> "AttentionBundle":
        """Build from per-block joint attention tensors of shape (B, heads, L, L)."""
        n = num_image_tokens
        i2t = torch.stack([p[:, :, :n, n:] for p in probs], dim=1)
        t2i = torch.stack([p[:, :, n:, :n] for p in probs], dim=1)
        side = int(round(n**0.5))
        return cls(i2t, t2i, boundary, (side, side))

    @property
    def num_blocks(self) -> int:
        return self.img2txt.shape[-4]

    @property
    def num_heads(self) -> int:
        return self.img2txt.shape[-3]

    @property
    def num_image_tokens(self) -> int:
        return self.img2txt.shape[-2]

    @property
    def num_text_tokens(self) -> int:
        return self.img2txt.shape[-1]

    def select(self, index: int) -> "AttentionBundle":
        return AttentionBundle(self.img2txt[index], self.txt2img[index], self.boundary, self.grid)

    def detach(self) -> "AttentionBundle":
        return AttentionBundle(self.img2txt.detach(), self.txt2img.detach(), self.boundary, self.grid)

    def validate(self) -> None:
        i2t, t2i = self.img2txt, self.txt2img
        if i2t.shape[:-2] != t2i.shape[:-2] or i2t.shape[-2:] != t2i.shape[-2:][::-1]:
            raise ExtractionError(
                f"image->text portion {tuple(i2t.shape)} and text->image portion "
                f"{tuple(t2i.shape)} do not match"
            )
        if self.grid[0] * self.grid[1] != i2t.shape[-2]:
            raise ExtractionError(f"grid {self.grid} does not cover {i2t.shape[-2]} image tokens")
        if not 0 <= self.boundary <= i2t.shape[-1]:
            raise ExtractionError(f"encoder boundary {self.boundary} outside text tokens")


@dataclass
class CrossMaps:
    maps_a: torch.Tensor  # (..., blocks, tokens_a, gh, gw)
    maps_b: torch.Tensor  # (..., blocks, tokens_b, gh, gw)


def extract_cross(bundle: AttentionBundle) -> CrossMaps:
    """Per-token spatial maps: head mean of each portion, then the mean of both directions."""
    bundle.validate()
    i2t = bundle.img2txt.mean(dim=-3)  # (..., blocks, I, T)
    t2i = bundle.txt2img.mean(dim=-3).transpose(-1, -2)
    cross = 0.5 * (i2t + t2i)
    cross = cross.transpose(-1, -2)  # (..., blocks, T, I)
    cross = cross.reshape(*cross.shape[:-1], *bundle.grid)
    return CrossMaps(cross[..., : bundle.boundary, :, :], cross[..., bundle.boundary :, :, :])


@dataclass
class WordAttention:
    maps: torch.Tensor  # (..., subjects, 2 encoders, blocks, gh, gw)
    words: tuple[str, ...]

    @property
    def num_blocks(self) -> int:
        return self.maps.shape[-3]

    @property
    def n(self) -> int:
        return self.maps.shape[-5]

    def check_range(self, rng: tuple[int, int]) -> None:
        lo, hi = rng
        if not 1 <= lo <= hi <= self.num_blocks:
            raise RangeError(f"block range [{lo}, {hi}] outside 1..{self.num_blocks}")

    def range(self, rng: tuple[int, int]) -> torch.Tensor:
        """Mean over blocks lo..hi inclusive; shape (..., subjects, 2, gh, gw)."""
        self.check_range(rng)
        lo, hi = rng
        return self.maps[..., lo - 1 : hi, :, :].mean(dim=-3)

    def select(self, index: int) -> "WordAttention":
        return WordAttention(self.maps[index], self.words)


@dataclass
class BlockRangeMap:
    subject: int
    encoder: str
    block_range: tuple[int, int]
    map: torch.Tensor


def _span_weights(spans: Sequence[tuple[int, int]], words, n_tokens: int, encoder: str, dtype) -> torch.Tensor:
    weights = torch.zeros(len(spans), n_tokens, dtype=dtype)
    for k, (lo, hi) in enumerate(spans):
        if hi < lo or lo < 0 or hi >= n_tokens:
            raise ExtractionError(f"word {words[k]!r} has an empty or invalid span under encoder {encoder}")
        weights[k, lo : hi + 1] = 1.0 / (hi - lo + 1)
    return weights


def word_maps(cross: CrossMaps, subjects) -> WordAttention:
    """Average token maps over each subject word's span, per encoder and block.

    ``subjects`` is a SubjectSpec or a TokenizedPrompt.
    """
    spec = getattr(subjects, "subject_spec", subjects)
    dtype = cross.maps_a.dtype
    wa = _span_weights(spec.spans_a, spec.words, cross.maps_a.shape[-3], "A", dtype)
    wb = _span_weights(spec.spans_b, spec.words, cross.maps_b.shape[-3], "B", dtype)
    per_a = torch.einsum("nt,...bthw->...nbhw", wa, cross.maps_a)
    per_b = torch.einsum("nt,...bthw->...nbhw", wb, cross.maps_b)
    return WordAttention(torch.stack([per_a, per_b], dim=-4), tuple(spec.words))


def range_mean(word_attn: WordAttention, i: int, encoder: str, block_range: tuple[int, int]) -> BlockRangeMap:
    """Mean map of subject ``i`` (0-based) under ``encoder`` over an inclusive block range."""
    word_attn.check_range(block_range)
    lo, hi = block_range
    m = word_attn.maps[..., i, ENCODER_INDEX[encoder], lo - 1 : hi, :, :].mean(dim=-3)
    return BlockRangeMap(i, encoder, (lo, hi), m)


def word_attention_from_bundle(bundle: AttentionBundle, subjects) -> WordAttention:
    return word_maps(extract_cross(bundle), subjects)
