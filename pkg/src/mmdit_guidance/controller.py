"""Guided denoising with overlap detection, back-to-start restart and rejection.

Steps are counted from the noise end: step 1 runs at timestep index ``T``.
A batch of seeds for one prompt is processed together; every sample keeps
its own state, and samples never interact through the losses (the batch
loss is a sum of per-sample terms).
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .attention import AttentionBundle, WordAttention, word_attention_from_bundle
from .losses import ConflictContext, GuidanceConfig, combined_loss
from .overlap import OverlapReport, conflict_tensors, detect
from .toy_mmdit.dataset import ToyImage
from .toy_mmdit.model import ToyMMDiT
from .toy_mmdit.sampler import NumericStateError, conditional_attention, decode, denoise_step, initial_noise
from .toy_mmdit.tokenizer import TokenizedPrompt

MODES = ("baseline", "amb_only", "full")
MODE_ALIASES = {"amb": "amb_only", "none": "baseline"}
REJECT_MESSAGE = "Bad seed, rejected sampling!"

Detector = Callable[[WordAttention, GuidanceConfig], OverlapReport]


class ContractViolation(RuntimeError):
    pass


def normalize_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode


def iterations_for_step(step: int, config: GuidanceConfig) -> int:
    """Optimization iterations at ``step`` (1-indexed from the noise end)."""
    if not 1 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside 1..{config.total_steps}")
    lo, hi = config.optimized_steps
    if not lo <= step <= hi:
        return 0
    for first, last, iters in config.iteration_schedule:
        if first <= step <= last:
            return iters
    return 0


def latent_update(z: torch.Tensor, gradient: torch.Tensor, config: GuidanceConfig, step: int | None = None):
    if z.shape != gradient.shape:
        raise ValueError(f"gradient shape {tuple(gradient.shape)} != latent shape {tuple(z.shape)}")
    if not bool(torch.isfinite(gradient).all()):
        raise NumericStateError(f"non-finite gradient at step {step}")
    return z - config.alpha * gradient


@dataclass(frozen=True)
class SamplerState:
    t: int
    z_t: torch.Tensor
    z_init: torch.Tensor
    rng_seed: int
    bts_active: bool = False
    conflict: Optional[tuple[int, np.ndarray]] = None
    phase: str = "first_pass"


def restart_from_init(state: SamplerState, report: OverlapReport | None = None, total_steps: int = 28) -> SamplerState:
    """Back to the stored initial noise, recording the conflict to restrict."""
    if state.phase != "first_pass" or state.bts_active:
        raise ContractViolation("restart allowed once, from the first pass")
    conflict = state.conflict
    if report is not None:
        if not report.conflict:
            raise ContractViolation("restart requires a conflict report")
        conflict = (report.i_star, report.conflict_mask)
    if conflict is None:
        raise ContractViolation("restart requires a conflict report")
    return dataclasses.replace(
        state, t=total_steps, z_t=state.z_init, bts_active=True, conflict=conflict, phase="second_pass"
    )


@dataclass
class SampleOutcome:
    status: str  # "accepted" | "rejected"
    image: Optional[ToyImage]
    restarted: bool
    seed: int
    mode: str
    reports: list[dict] = field(default_factory=list)
    detections: list[OverlapReport] = field(default_factory=list)
    iterations: list[tuple[str, int, int]] = field(default_factory=list)
    restriction_evaluations: int = 0
    rejection_suppressed: bool = False
    timing: dict = field(default_factory=dict)
    latent: Optional[torch.Tensor] = None
    # attention at the detection step of each pass; kept only when requested
    detection_attention: list[AttentionBundle] = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"

    @property
    def total_iterations(self) -> int:
        return sum(n for _, _, n in self.iterations)

    def summary(self) -> dict:
        return {
            "status": self.status,
            "restarted": self.restarted,
            "seed": self.seed,
            "mode": self.mode,
            "rejection_suppressed": self.rejection_suppressed,
            "total_iterations": self.total_iterations,
            "restriction_evaluations": self.restriction_evaluations,
            "timing": self.timing,
        }


class GuidedSampler:
    """Runs guided sampling for one prompt over a batch of seeds."""

    def __init__(
        self,
        model: ToyMMDiT,
        null_prompt: TokenizedPrompt,
        config: GuidanceConfig = GuidanceConfig(),
        detector: Detector = detect,
        dtype: torch.dtype = torch.float32,
        keep_attention: bool = False,
    ):
        config.check_depth(model.config.num_blocks)
        self.model = model
        self.null_prompt = null_prompt
        self.config = config
        self.detector = detector
        self.dtype = dtype
        self.keep_attention = keep_attention

    def noise(self, seeds: Sequence[int]) -> torch.Tensor:
        return torch.stack([initial_noise(s, self.model.config, self.dtype) for s in seeds])

    def _loss_gradient(self, z, t_index, prompt, conflict):
        z_req = z.detach().requires_grad_(True)
        _, bundle = conditional_attention(self.model, z_req, t_index, prompt, self.config.total_steps)
        word_attn = word_attention_from_bundle(bundle, prompt)
        report = combined_loss(word_attn, self.config, conflict)
        (grad,) = torch.autograd.grad(report.l_total.sum(), z_req)
        detached = WordAttention(word_attn.maps.detach(), word_attn.words)
        return grad, report, detached, bundle.detach()

    def _steps(self, z, prompt, first, last, pass_name, log, conflict=None, optimize=True):
        """Run steps first..last.

        Returns (z, word attention, bundle) where the attention is the one a
        detection after the last step would see: that of the final loss
        evaluation, or of the denoising pass when the step was not optimized.
        """
        cfg = self.config
        last_attn = last_bundle = None
        for step in range(first, last + 1):
            t_index = cfg.total_steps - step + 1
            n_iter = iterations_for_step(step, cfg) if optimize else 0
            log["iterations"].append((pass_name, step, n_iter))
            last_attn = None
            for it in range(n_iter):
                grad, report, last_attn, last_bundle = self._loss_gradient(z, t_index, prompt, conflict)
                with torch.no_grad():
                    z = latent_update(z, grad, cfg, step)
                log["losses"].append((pass_name, step, it, report))
                if conflict is not None:
                    log["res_evals"] += 1
            with torch.no_grad():
                z, bundle = denoise_step(
                    self.model, z, t_index, prompt, self.null_prompt, cfg.guidance_scale, cfg.total_steps
                )
            if last_attn is None:
                last_attn = word_attention_from_bundle(bundle, prompt)
                last_bundle = bundle
        return z, last_attn, last_bundle

    def _detect(self, word_attn: WordAttention) -> list[OverlapReport]:
        return [self.detector(word_attn.select(b), self.config) for b in range(word_attn.maps.shape[0])]

    def run(self, prompt: TokenizedPrompt, seeds: Sequence[int], mode: str = "full") -> list[SampleOutcome]:
        mode = normalize_mode(mode)
        cfg = self.config
        if len(prompt.subject_words) == 0 and mode != "baseline":
            raise ValueError("guided modes need at least one subject word")
        t_start = time.perf_counter()
        seeds = [int(s) for s in seeds]
        n = len(seeds)
        z_init = self.noise(seeds)
        states = [SamplerState(cfg.total_steps, z_init[k], z_init[k], seeds[k]) for k in range(n)]
        logs = [self._new_log() for _ in range(n)]
        detections: list[list[OverlapReport]] = [[] for _ in range(n)]
        suppressed = [False] * n
        rejected = [False] * n
        kept: list[list[AttentionBundle]] = [[] for _ in range(n)]
        optimize = mode != "baseline"
        o_step = cfg.detect_step

        batch_log = self._new_log()
        z, attn, bundle = self._steps(z_init, prompt, 1, o_step, "first_pass", batch_log, optimize=optimize)
        self._scatter(batch_log, logs, range(n))
        if self.keep_attention:
            for k in range(n):
                kept[k].append(bundle.select(k))
        t_first = time.perf_counter()

        if mode == "full":
            first = self._detect(attn)
            conflicted = [k for k in range(n) if first[k].conflict]
            for k in range(n):
                detections[k].append(first[k])
            if conflicted:
                for k in conflicted:
                    states[k] = restart_from_init(states[k], first[k], cfg.total_steps)
                idx = torch.tensor(conflicted)
                masks, i_star = conflict_tensors([first[k] for k in conflicted], attn.maps.shape[-2:], self.dtype)
                ctx = ConflictContext(masks, i_star)
                batch_log = self._new_log()
                z2, attn2, bundle2 = self._steps(z_init[idx], prompt, 1, o_step, "second_pass", batch_log, ctx)
                self._scatter(batch_log, logs, conflicted)
                second = self._detect(attn2)
                z = z.clone()
                z[idx] = z2
                for j, k in enumerate(conflicted):
                    detections[k].append(second[j])
                    if self.keep_attention:
                        kept[k].append(bundle2.select(j))
                    if second[j].conflict:
                        if cfg.reject_sampling:
                            rejected[k] = True
                        else:
                            suppressed[k] = True
        t_detect = time.perf_counter()

        keep = [k for k in range(n) if not rejected[k]]
        if keep and o_step < cfg.total_steps:
            conflict = None
            if mode == "full":
                masks, i_star = conflict_tensors(
                    [detections[k][0] if states[k].bts_active else _NO_CONFLICT for k in keep],
                    attn.maps.shape[-2:],
                    self.dtype,
                )
                active = torch.tensor([states[k].bts_active for k in keep])
                if bool(active.any()):
                    conflict = ConflictContext(masks, i_star, active)
            batch_log = self._new_log()
            z_keep, _, _ = self._steps(
                z[torch.tensor(keep)], prompt, o_step + 1, cfg.total_steps, "continue", batch_log, conflict, optimize
            )
            self._scatter(batch_log, logs, keep, res_mask=[states[k].bts_active for k in keep])
        t_end = time.perf_counter()

        outcomes = []
        pos = {k: j for j, k in enumerate(keep)}
        for k in range(n):
            timing = {
                "first_pass_s": t_first - t_start,
                "detection_and_restart_s": t_detect - t_first,
                "remaining_s": t_end - t_detect,
                "batch_size": n,
            }
            common = dict(
                restarted=states[k].bts_active,
                seed=seeds[k],
                mode=mode,
                reports=logs[k]["records"],
                detections=detections[k],
                iterations=logs[k]["iterations"],
                restriction_evaluations=logs[k]["res_evals"],
                rejection_suppressed=suppressed[k],
                timing=timing,
                detection_attention=kept[k],
            )
            if rejected[k]:
                outcomes.append(SampleOutcome(status="rejected", image=None, **common))
            else:
                final = z_keep[pos[k]] if o_step < cfg.total_steps else z[k]
                outcomes.append(SampleOutcome(status="accepted", image=decode(final), latent=final, **common))
        return outcomes

    @staticmethod
    def _new_log():
        return {"iterations": [], "losses": [], "res_evals": 0, "records": []}

    @staticmethod
    def _scatter(batch_log, logs, members, res_mask=None):
        members = list(members)
        for j, k in enumerate(members):
            logs[k]["iterations"].extend(batch_log["iterations"])
            for pass_name, step, it, report in batch_log["losses"]:
                rec = {"pass": pass_name, "step": step, "iteration": it}
                rec.update(report.select(j).to_dict())
                logs[k]["records"].append(rec)
            if res_mask is None or res_mask[j]:
                logs[k]["res_evals"] += batch_log["res_evals"]


_NO_CONFLICT = OverlapReport(np.zeros(0), np.zeros(0, dtype=bool), np.zeros(0), None, None, "pass")


def run_guided_sampling(
    model: ToyMMDiT,
    prompt: TokenizedPrompt,
    null_prompt: TokenizedPrompt,
    rng_seed: int,
    config: GuidanceConfig = GuidanceConfig(),
    mode: str = "full",
    detector: Detector = detect,
) -> SampleOutcome:
    return GuidedSampler(model, null_prompt, config, detector).run(prompt, [rng_seed], mode)[0]
