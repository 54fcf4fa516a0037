"""Rectified-flow training of the toy denoiser."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import DatasetConfig, GenerationError, generate_toy_sample
from .model import ModelConfig, ToyMMDiT
from .tokenizer import PAD_ID, Tokenizer, TokenizedPrompt

log = logging.getLogger(__name__)

HELDOUT_SEED_BASE = 1_000_000_000
# an unplaceable seed is replaced by seed + k * stride, far outside every seed range in use
REPLACEMENT_STRIDE = 10**12
MAX_REPLACEMENTS = 8


class TrainingError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model: ToyMMDiT
    tokenizer: Tokenizer
    dataset_config: DatasetConfig
    history: list[dict] = field(default_factory=list)

    @property
    def config(self) -> ModelConfig:
        return self.model.config


def collate_prompts(prompts: list[TokenizedPrompt], num_image_tokens: int):
    """Pad a list of prompts; returns (tokens_a, tokens_b, key_mask)."""
    la = max(len(p.encoder_a_tokens) for p in prompts)
    lb = max(len(p.encoder_b_tokens) for p in prompts)
    ta = torch.full((len(prompts), la), PAD_ID, dtype=torch.long)
    tb = torch.full((len(prompts), lb), PAD_ID, dtype=torch.long)
    mask = torch.ones(len(prompts), num_image_tokens + la + lb, dtype=torch.bool)
    for k, p in enumerate(prompts):
        na, nb = len(p.encoder_a_tokens), len(p.encoder_b_tokens)
        ta[k, :na] = torch.tensor(p.encoder_a_tokens)
        tb[k, :nb] = torch.tensor(p.encoder_b_tokens)
        mask[k, num_image_tokens + na : num_image_tokens + la] = False
        mask[k, num_image_tokens + la + nb :] = False
    if bool(mask.all()):
        mask = None
    return ta, tb, mask


def sample_or_replace(seed: int, dataset_config: DatasetConfig):
    """``generate_toy_sample``, stepping to a deterministic replacement seed if placement fails."""
    for k in range(MAX_REPLACEMENTS + 1):
        try:
            return generate_toy_sample(seed + k * REPLACEMENT_STRIDE, dataset_config)
        except GenerationError as err:
            log.debug("%s; trying a replacement seed", err)
    raise GenerationError(f"seed {seed} and its {MAX_REPLACEMENTS} replacements could not be placed")


def make_batch(seeds, dataset_config: DatasetConfig, tokenizer: Tokenizer, drop: np.ndarray | None = None):
    images, prompts = [], []
    for k, s in enumerate(seeds):
        image, caption, spec = sample_or_replace(int(s), dataset_config)
        images.append(image.pixels)
        if drop is not None and drop[k]:
            prompts.append(tokenizer.null_prompt())
        else:
            prompts.append(tokenizer.tokenize_prompt(caption, spec.words))
    return torch.from_numpy(np.stack(images)), prompts


def flow_loss(model: ToyMMDiT, x0, prompts, t, noise) -> torch.Tensor:
    """Mean squared error between predicted and straight-line velocity ``noise - x0``."""
    te = t.view(-1, 1, 1, 1)
    zt = (1 - te) * x0 + te * noise
    ta, tb, mask = collate_prompts(prompts, model.config.num_image_tokens)
    v, _ = model(zt, t, ta, tb, key_mask=mask)
    return ((v - (noise - x0)) ** 2).mean()


@torch.no_grad()
def heldout_loss(model: ToyMMDiT, dataset_config: DatasetConfig, tokenizer: Tokenizer, n: int = 256) -> float:
    """Rectified-flow loss on a fixed held-out set (fixed seeds, times and noise)."""
    gen = torch.Generator().manual_seed(12345)
    total, done = 0.0, 0
    while done < n:
        m = min(64, n - done)
        seeds = range(HELDOUT_SEED_BASE + done, HELDOUT_SEED_BASE + done + m)
        x0, prompts = make_batch(seeds, dataset_config, tokenizer)
        x0 = x0.to(next(model.parameters()).dtype)
        t = torch.rand(m, generator=gen, dtype=x0.dtype)
        noise = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        total += float(flow_loss(model, x0, prompts, t, noise)) * m
        done += m
    return total / n


def init_model(config: ModelConfig, rng_seed: int) -> ToyMMDiT:
    torch.manual_seed(rng_seed)
    return ToyMMDiT(config)


def train_toy_model(
    dataset_config: DatasetConfig,
    config: ModelConfig,
    rng_seed: int = 0,
    log_every: int = 200,
    eval_every: int = 0,
) -> Checkpoint:
    tokenizer = dataset_config.tokenizer()
    if tokenizer.vocab_a != config.vocab_a or tokenizer.vocab_b != config.vocab_b:
        raise TrainingError(
            f"model vocab ({config.vocab_a}, {config.vocab_b}) does not match tokenizer "
            f"({tokenizer.vocab_a}, {tokenizer.vocab_b})"
        )
    model = init_model(config, rng_seed)
    ckpt = Checkpoint(model, tokenizer, dataset_config)
    if config.train_steps == 0:
        return ckpt

    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=0.0)

    def lr_at(step):
        if step < config.warmup_steps:
            return (step + 1) / config.warmup_steps
        frac = (step - config.warmup_steps) / max(1, config.train_steps - config.warmup_steps)
        return 0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * frac))

    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_at)
    rng = np.random.default_rng(rng_seed)
    gen = torch.Generator().manual_seed(rng_seed)
    bs = config.batch_size
    seed_base = rng_seed * 100_000_000
    running = None
    for step in range(config.train_steps):
        seeds = range(seed_base + step * bs, seed_base + (step + 1) * bs)
        drop = rng.random(bs) < config.cond_drop
        x0, prompts = make_batch(seeds, dataset_config, tokenizer, drop)
        t = torch.rand(bs, generator=gen)
        noise = torch.randn(x0.shape, generator=gen)
        loss = flow_loss(model, x0, prompts, t, noise)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        value = loss.item()
        running = value if running is None else 0.98 * running + 0.02 * value
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.4f (ema %.4f)", step + 1, value, running)
            ckpt.history.append({"step": step + 1, "loss": value, "ema": running})
        if eval_every and (step + 1) % eval_every == 0:
            model.eval()
            held = heldout_loss(model, dataset_config, tokenizer)
            log.info("step %d held-out loss %.4f", step + 1, held)
            ckpt.history.append({"step": step + 1, "heldout": held})
    return ckpt
