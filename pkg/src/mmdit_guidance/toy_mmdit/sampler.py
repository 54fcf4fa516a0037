"""Euler sampling of the rectified flow with classifier-free guidance.

Time runs from 1 (noise) to 0 (data). Step ``k`` of ``T`` (1-indexed from the
noise end) integrates from ``t = (T - k + 1) / T`` to ``(T - k) / T``; the
timestep index used by the guidance schedule is ``T - k + 1``.
"""

from __future__ import annotations

import numpy as np
import torch

from ..attention import AttentionBundle
from .dataset import ToyImage
from .model import ToyMMDiT
from .tokenizer import TokenizedPrompt


class NumericStateError(FloatingPointError):
    pass


def prompt_tensors(prompt: TokenizedPrompt, batch: int = 1):
    ta = torch.tensor(prompt.encoder_a_tokens, dtype=torch.long).expand(batch, -1)
    tb = torch.tensor(prompt.encoder_b_tokens, dtype=torch.long).expand(batch, -1)
    return ta, tb


def initial_noise(seed: int, config, dtype=torch.float32) -> torch.Tensor:
    """Standard normal latent of shape (side, side, channels) from ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    shape = (config.image_side, config.image_side, config.channels)
    return torch.randn(shape, generator=gen, dtype=torch.float32).to(dtype)


def time_of(t_index: int, total_steps: int) -> float:
    return t_index / total_steps


def conditional_attention(model: ToyMMDiT, latent, t_index, prompt, total_steps=28, head=False):
    """Conditional forward pass returning (velocity or None, AttentionBundle).

    Gradients flow to ``latent`` when it requires grad.
    """
    batch = latent.shape[0]
    t = torch.full((batch,), time_of(t_index, total_steps), dtype=latent.dtype)
    ta, tb = prompt_tensors(prompt, batch)
    v, maps = model(latent, t, ta, tb, capture=True, head=head)
    bundle = AttentionBundle.from_joint(maps, model.config.num_image_tokens, prompt.boundary)
    return v, bundle


def denoise_step(
    model: ToyMMDiT,
    latent: torch.Tensor,
    t_index: int,
    prompt: TokenizedPrompt,
    null_prompt: TokenizedPrompt,
    guidance_scale: float = 7.0,
    total_steps: int = 28,
):
    """One guided Euler update from timestep index ``t_index`` to ``t_index - 1``.

    ``latent`` is (B, S, S, C) or (S, S, C). Returns the next latent and the
    attention of the conditional pass. Differentiable in ``latent``.
    """
    if not 1 <= t_index <= total_steps:
        raise ValueError(f"timestep index {t_index} outside [1, {total_steps}]")
    single = latent.dim() == 3
    z = latent[None] if single else latent
    if not bool(torch.isfinite(z).all()):
        raise NumericStateError(f"non-finite latent entering timestep {t_index}")
    batch = z.shape[0]
    v_cond, bundle = conditional_attention(model, z, t_index, prompt, total_steps, head=True)
    t = torch.full((batch,), time_of(t_index, total_steps), dtype=z.dtype)
    na, nb = prompt_tensors(null_prompt, batch)
    v_uncond, _ = model(z, t, na, nb)
    v = v_uncond + guidance_scale * (v_cond - v_uncond)
    z_next = z - v / total_steps
    if single:
        return z_next[0], bundle.select(0)
    return z_next, bundle


def sample(
    model: ToyMMDiT,
    prompt: TokenizedPrompt,
    null_prompt: TokenizedPrompt,
    noise: torch.Tensor,
    guidance_scale: float = 7.0,
    total_steps: int = 28,
) -> torch.Tensor:
    """Plain sampler: integrate from ``noise`` at t=1 to a t=0 latent."""
    z = noise
    with torch.no_grad():
        for t_index in range(total_steps, 0, -1):
            z, _ = denoise_step(model, z, t_index, prompt, null_prompt, guidance_scale, total_steps)
    return z


def encode(image: ToyImage) -> torch.Tensor:
    return torch.from_numpy(np.asarray(image.pixels, dtype=np.float32).copy())


def decode(latent: torch.Tensor) -> ToyImage:
    """Identity autoencoder: clamp the latent to [0, 1]."""
    pixels = latent.detach().clamp(0.0, 1.0).to(torch.float32).cpu().numpy()
    return ToyImage(pixels, [])
