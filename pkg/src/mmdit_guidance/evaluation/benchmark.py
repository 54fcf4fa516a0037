"""Success-rate benchmark over prompts, seeds and sampling modes.

Every mode sees the same seed list. Full mode runs with rejection
suppressed so that one pass yields both accountings: "with RS" drops the
samples that reject sampling would have discarded, "without RS" keeps them.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

from ..cli_io.prompts import PromptRecord
from ..controller import GuidedSampler, SampleOutcome, normalize_mode
from .metrics import cardinality_threshold, exclude_prompts, image_success
from .toy_detector import toy_detect

log = logging.getLogger(__name__)


@dataclass
class SampleRecord:
    prompt_id: str
    seed: int
    mode: str
    cardinality: int
    status: str  # accepted | rejected | error
    would_reject: bool = False
    restarted: bool = False
    confidences: tuple[float, ...] | None = None
    success: float | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confidences"] = None if self.confidences is None else list(self.confidences)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        d = dict(d)
        if d.get("confidences") is not None:
            d["confidences"] = tuple(d["confidences"])
        return cls(**d)


@dataclass
class BenchmarkReport:
    rows: list[dict]
    per_prompt: list[dict]
    excluded: dict[str, str]
    records: list[SampleRecord] = field(default_factory=list)

    def row(self, mode: str, cardinality: int) -> dict:
        for r in self.rows:
            if r["mode"] == mode and r["cardinality"] == cardinality:
                return r
        raise KeyError((mode, cardinality))

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "per_prompt": self.per_prompt,
            "excluded": self.excluded,
            "records": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        head = f"{'mode':<10} {'N':>2} {'SR w/ RS':>9} {'SR w/o RS':>10} {'reject':>7} {'samples':>8}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r['mode']:<10} {r['cardinality']:>2} {_pct(r['success_rate']):>9} "
                f"{_pct(r['success_rate_without_rs']):>10} {_pct(r['rejection_rate']):>7} {r['sample_count']:>8}"
            )
        if self.excluded:
            lines.append("excluded: " + ", ".join(f"{p} ({why})" for p, why in sorted(self.excluded.items())))
        return "\n".join(lines)


def _pct(x) -> str:
    return "-" if x is None else f"{100 * x:.1f}%"


def _mean(xs):
    xs = list(xs)
    return sum(xs) / len(xs) if xs else None


def score_record(rec: SampleRecord, thresholds: Mapping[int, float] | None = None) -> float | None:
    if rec.confidences is None:
        return None
    return image_success(rec.confidences, cardinality_threshold(rec.cardinality, thresholds))


def aggregate(records: Sequence[SampleRecord], thresholds: Mapping[int, float] | None = None) -> BenchmarkReport:
    """Pure reduction of sample records into a report.

    Per prompt and mode, success is averaged over scored samples; a
    (mode, cardinality) rate is the mean over kept prompts.
    """
    records = list(records)
    for rec in records:
        rec.success = score_record(rec, thresholds)
    modes = sorted({r.mode for r in records})
    prompts = sorted({(r.prompt_id, r.cardinality) for r in records})

    def prompt_mean(mode, pid, with_rs):
        xs = [
            r.success
            for r in records
            if r.mode == mode and r.prompt_id == pid and r.success is not None and not (with_rs and r.would_reject)
        ]
        return _mean(xs)

    means_wo = {m: {pid: prompt_mean(m, pid, False) for pid, _ in prompts} for m in modes}
    excluded = exclude_prompts(means_wo) if modes else {}

    per_prompt = []
    for m in modes:
        for pid, card in prompts:
            per_prompt.append(
                {
                    "mode": m,
                    "prompt_id": pid,
                    "cardinality": card,
                    "success_rate": prompt_mean(m, pid, True),
                    "success_rate_without_rs": means_wo[m][pid],
                    "excluded": pid in excluded,
                }
            )

    rows = []
    for m in modes:
        for card in sorted({c for _, c in prompts}):
            kept = [pid for pid, c in prompts if c == card and pid not in excluded]
            recs = [r for r in records if r.mode == m and r.cardinality == card and r.prompt_id in kept]
            with_rs = [x for x in (prompt_mean(m, pid, True) for pid in kept) if x is not None]
            without = [x for x in (means_wo[m][pid] for pid in kept) if x is not None]
            scored = [r for r in recs if r.status != "error"]
            rows.append(
                {
                    "mode": m,
                    "cardinality": card,
                    "success_rate": _mean(with_rs),
                    "success_rate_without_rs": _mean(without),
                    "sample_count": len(recs),
                    "rejection_rate": _mean(r.would_reject for r in scored) if scored else None,
                    "restart_rate": _mean(r.restarted for r in scored) if scored else None,
                    "error_count": sum(r.status == "error" for r in recs),
                    "excluded_prompts": sorted(pid for pid, c in prompts if c == card and pid in excluded),
                }
            )
    return BenchmarkReport(rows, per_prompt, excluded, records)


def toy_confidences(outcome: SampleOutcome, subjects: Sequence[str]) -> tuple[float, ...]:
    det = toy_detect(outcome.image, subjects)
    return tuple(1.0 if p else 0.0 for p in det.present)


def run_benchmark(
    prompts: Sequence[PromptRecord],
    seeds: Sequence[int],
    modes: Sequence[str],
    sampler_for: Callable[[str], GuidedSampler],
    tokenize: Callable[[PromptRecord], object],
    confidences: Callable[[SampleOutcome, Sequence[str]], tuple[float, ...]] = toy_confidences,
    batch_size: int = 50,
    workers: int = 1,
    thresholds: Mapping[int, float] | None = None,
    on_outcome: Callable[[PromptRecord, SampleOutcome], None] | None = None,
) -> BenchmarkReport:
    """Sample every (prompt, seed, mode) and aggregate success rates.

    ``sampler_for(mode)`` returns the GuidedSampler for a mode;
    ``tokenize(prompt)`` returns its TokenizedPrompt. Failures are recorded
    per sample and do not abort the run.
    """
    modes = [normalize_mode(m) for m in modes]
    seeds = [int(s) for s in seeds]
    jobs = [(p, m) for p in prompts for m in modes]

    def run_job(job) -> list[SampleRecord]:
        prompt, mode = job
        base = dict(prompt_id=prompt.prompt_id, mode=mode, cardinality=prompt.cardinality)
        try:
            tokenized = tokenize(prompt)
            sampler = sampler_for(mode)
        except Exception as err:  # noqa: BLE001 - recorded per sample
            return [SampleRecord(seed=s, status="error", error=repr(err), **base) for s in seeds]
        out = []
        for start in range(0, len(seeds), batch_size):
            chunk = seeds[start : start + batch_size]
            t0 = time.perf_counter()
            try:
                outcomes = sampler.run(tokenized, chunk, mode)
            except Exception as err:  # noqa: BLE001
                out.extend(SampleRecord(seed=s, status="error", error=repr(err), **base) for s in chunk)
                continue
            for o in outcomes:
                conf = None
                if o.accepted:
                    conf = confidences(o, prompt.subjects)
                out.append(
                    SampleRecord(
                        seed=o.seed,
                        status=o.status,
                        would_reject=o.rejection_suppressed or o.status == "rejected",
                        restarted=o.restarted,
                        confidences=conf,
                        **base,
                    )
                )
                if on_outcome is not None:
                    on_outcome(prompt, o)
            log.info("%s %s seeds %d-%d: %.1fs", prompt.prompt_id, mode, chunk[0], chunk[-1], time.perf_counter() - t0)
        return out

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run_job, jobs))
    else:
        results = [run_job(j) for j in jobs]
    records = [r for rs in results for r in rs]
    return aggregate(records, thresholds)
