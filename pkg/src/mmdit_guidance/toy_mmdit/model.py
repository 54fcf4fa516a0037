"""A small MMDiT denoiser.

Image patches and the two text-token streams are concatenated along the
sequence axis and share one joint self-attention per block, with separate
projection and MLP weights per modality. Attention probabilities are
computed explicitly so callers can read (and differentiate through) them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 12
    heads: int = 4
    width: int = 64
    mlp_ratio: int = 4
    image_side: int = 32
    channels: int = 3
    patch_size: int = 4
    vocab_a: int = 13
    vocab_b: int = 41
    max_len_a: int = 16
    max_len_b: int = 64
    # training
    learning_rate: float = 1e-3
    train_steps: int = 6000
    batch_size: int = 48
    cond_drop: float = 0.1
    warmup_steps: int = 200

    def __post_init__(self):
        if self.image_side % self.patch_size:
            raise ValueError("image_side must be divisible by patch_size")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.width % 4:
            raise ValueError("width must be divisible by 4 for the 2-D positional embedding")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_size

    @property
    def num_image_tokens(self) -> int:
        return self.grid**2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def sincos_2d(grid: int, dim: int) -> torch.Tensor:
    """Fixed (grid*grid, dim) positional table: half the channels encode the row, half the column."""
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    coords = torch.arange(grid, dtype=torch.float64)
    rows, cols = torch.meshgrid(coords, coords, indexing="ij")

    def encode(pos):
        args = pos.reshape(-1, 1) * omega[None]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=1)

    return torch.cat([encode(rows), encode(cols)], dim=1).to(torch.float32)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class StreamParams(nn.Module):
    """Per-modality weights of one block."""

    def __init__(self, width: int, mlp_ratio: int):
        super().__init__()
        self.ada = nn.Linear(width, 6 * width)
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width),
            nn.GELU(approximate="tanh"),
            nn.Linear(mlp_ratio * width, width),
        )
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)


class MMDiTBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.img = StreamParams(width, mlp_ratio)
        self.txt = StreamParams(width, mlp_ratio)
        head_dim = width // heads
        self.q_norm = nn.RMSNorm(head_dim, eps=1e-6)
        self.k_norm = nn.RMSNorm(head_dim, eps=1e-6)

    def forward(self, x, c, temb, key_mask=None):
        """Returns updated (image, text) streams and the attention probabilities
        of shape (batch, heads, L, L) with L = image tokens + text tokens."""
        b, n_img, w = x.shape
        mods_x = self.img.ada(F.silu(temb)).chunk(6, dim=-1)
        mods_c = self.txt.ada(F.silu(temb)).chunk(6, dim=-1)

        hx = modulate(F.layer_norm(x, (w,)), mods_x[0], mods_x[1])
        hc = modulate(F.layer_norm(c, (w,)), mods_c[0], mods_c[1])
        qkv = torch.cat([self.img.qkv(hx), self.txt.qkv(hc)], dim=1)
        seq = qkv.shape[1]
        q, k, v = qkv.view(b, seq, 3, self.heads, w // self.heads).permute(2, 0, 3, 1, 4)
        q, k = self.q_norm(q), self.k_norm(k)
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        probs = logits.softmax(dim=-1)
        h = (probs @ v).transpose(1, 2).reshape(b, seq, w)

        x = x + mods_x[2][:, None] * self.img.out(h[:, :n_img])
        c = c + mods_c[2][:, None] * self.txt.out(h[:, n_img:])
        x = x + mods_x[5][:, None] * self.img.mlp(modulate(F.layer_norm(x, (w,)), mods_x[3], mods_x[4]))
        c = c + mods_c[5][:, None] * self.txt.mlp(modulate(F.layer_norm(c, (w,)), mods_c[3], mods_c[4]))
        return x, c, probs


class ToyMMDiT(nn.Module):
    """Velocity predictor ``v(z_t, t, prompt)`` for rectified flow."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w, p = config.width, config.patch_size
        # overlapping patch embedding: each token sees its 3x3 neighbourhood of patches
        self.patch_in = nn.Conv2d(config.channels, w, kernel_size=3 * p, stride=p, padding=p)
        # unit-scale fixed table; a small learned one is drowned out by noisy patch content
        self.register_buffer("pos_img", sincos_2d(config.grid, w), persistent=False)
        self.emb_a = nn.Embedding(config.vocab_a, w)
        self.emb_b = nn.Embedding(config.vocab_b, w)
        self.pos_a = nn.Parameter(0.02 * torch.randn(config.max_len_a, w))
        self.pos_b = nn.Parameter(0.02 * torch.randn(config.max_len_b, w))
        self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.blocks = nn.ModuleList(
            [MMDiTBlock(w, config.heads, config.mlp_ratio) for _ in range(config.num_blocks)]
        )
        self.final_ada = nn.Linear(w, 2 * w)
        self.patch_out = nn.Linear(w, p * p * config.channels)
        nn.init.zeros_(self.final_ada.weight)
        nn.init.zeros_(self.final_ada.bias)
        nn.init.zeros_(self.patch_out.weight)
        nn.init.zeros_(self.patch_out.bias)

    def embed_image(self, z: torch.Tensor) -> torch.Tensor:
        # (B, S, S, C) -> (B, grid*grid, width), row-major over the token grid
        return self.patch_in(z.permute(0, 3, 1, 2)).flatten(2).transpose(1, 2)

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        b = tokens.shape[0]
        p, g, ch = self.config.patch_size, self.config.grid, self.config.channels
        return tokens.reshape(b, g, g, p, p, ch).permute(0, 1, 3, 2, 4, 5).reshape(b, g * p, g * p, ch)

    def embed_text(self, tokens_a, tokens_b):
        la, lb = tokens_a.shape[1], tokens_b.shape[1]
        if la > self.config.max_len_a or lb > self.config.max_len_b:
            raise ValueError(f"prompt too long for the model ({la}, {lb} tokens)")
        ea = self.emb_a(tokens_a) + self.pos_a[:la]
        eb = self.emb_b(tokens_b) + self.pos_b[:lb]
        return torch.cat([ea, eb], dim=1)

    def forward(self, z, t, tokens_a, tokens_b, key_mask=None, capture=False, head=True):
        """Predict velocity for latents ``z`` of shape (B, S, S, C) at times ``t`` in [0, 1].

        ``key_mask`` (B, L) marks real (True) versus padding keys. With
        ``capture`` the per-block attention probabilities are returned as
        well; ``head=False`` skips the output projection when only the
        attention is needed.
        """
        x = self.embed_image(z) + self.pos_img.to(z.dtype)
        c = self.embed_text(tokens_a, tokens_b)
        temb = self.time_mlp(timestep_embedding(t, self.config.width).to(z.dtype))
        maps = []
        for block in self.blocks:
            x, c, probs = block(x, c, temb, key_mask)
            if capture:
                maps.append(probs)
        v = None
        if head:
            shift, scale = self.final_ada(F.silu(temb)).chunk(2, dim=-1)
            v = self.unpatchify(self.patch_out(modulate(F.layer_norm(x, (x.shape[-1],)), shift, scale)))
        return v, maps
