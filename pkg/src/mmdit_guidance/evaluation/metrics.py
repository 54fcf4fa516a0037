"""Success-rate aggregation rules for detector confidences and LLM-judge answers."""

from __future__ import annotations

from typing import Mapping, Sequence

CARDINALITY_THRESHOLDS = {2: 0.5, 3: 0.4, 4: 0.4}
EXCLUSION_THRESHOLD = 0.2

LLM_QUERY_TEMPLATE = (
    "Please analyze the image data and determine if it contains all of the following subjects: "
    "{subjects}. Respond with 'yes' if all subjects are present, and 'no' if any are missing"
)


class ConfigurationRequired(ValueError):
    pass


class ResponseParseError(ValueError):
    pass


def image_success(confidences: Sequence[float], threshold: float) -> float:
    """Per-image success from per-subject detector confidences.

    0 if any confidence is 0; 1 if every confidence exceeds ``threshold``;
    otherwise the mean confidence.
    """
    if len(confidences) == 0:
        raise ValueError("need at least one confidence")
    for c in confidences:
        if not 0.0 <= c <= 1.0:
            raise ValueError(f"confidence {c} outside [0, 1]")
    if any(c == 0 for c in confidences):
        return 0.0
    if all(c > threshold for c in confidences):
        return 1.0
    return sum(confidences) / len(confidences)


def cardinality_threshold(n_subjects: int, overrides: Mapping[int, float] | None = None) -> float:
    table = dict(CARDINALITY_THRESHOLDS)
    if overrides:
        table.update(overrides)
    if n_subjects not in table:
        raise ConfigurationRequired(
            f"no success threshold for {n_subjects} subjects; pass one explicitly"
        )
    return table[n_subjects]


def exclude_prompts(per_mode_means: Mapping[str, Mapping[str, float | None]]) -> dict[str, str]:
    """Prompts to drop from the statistics, with the reason.

    ``per_mode_means[mode][prompt_id]`` is that mode's mean success on the
    prompt, or None when it has no samples. A prompt is excluded when every
    mode's mean is below 0.2.
    """
    if not per_mode_means:
        raise ValueError("need at least one mode")
    prompts = sorted({p for table in per_mode_means.values() for p in table})
    excluded = {}
    for p in prompts:
        means = [table.get(p) for table in per_mode_means.values()]
        if all(m is None for m in means):
            excluded[p] = "no samples"
        elif all(m is None or m < EXCLUSION_THRESHOLD for m in means):
            excluded[p] = f"every mode below {EXCLUSION_THRESHOLD}"
    return excluded


def build_llm_query(subjects: Sequence[str]) -> str:
    if not subjects:
        raise ValueError("need at least one subject")
    return LLM_QUERY_TEMPLATE.format(subjects=", ".join(subjects))


def parse_llm_response(text: str) -> int:
    answer = text.strip().lower()
    if answer == "yes":
        return 1
    if answer == "no":
        return 0
    raise ResponseParseError(f"unparseable judge response: {text!r}")


def grounding_hint(subjects: Sequence[str]) -> str:
    """Detector text hint, e.g. ``"chicken . duck . goose ."``."""
    return " ".join(f"{s} ." for s in subjects)
