"""Prompt files: one prompt per line, subjects marked with angle brackets."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

_MARK = re.compile(r"<([^<>]*)>")


class PromptParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class PromptRecord:
    text: str
    subjects: tuple[str, ...]
    prompt_id: str = ""

    @property
    def cardinality(self) -> int:
        return len(self.subjects)


def parse_prompt_line(line: str, line_no: int = 1, prompt_id: str = "") -> PromptRecord:
    depth = 0
    for ch in line:
        depth += {"<": 1, ">": -1}.get(ch, 0)
        if depth not in (0, 1):
            raise PromptParseError(line_no, "unbalanced angle brackets")
    if depth:
        raise PromptParseError(line_no, "unbalanced angle brackets")
    subjects = tuple(m.strip() for m in _MARK.findall(line))
    if not subjects:
        raise PromptParseError(line_no, "no <subject> marked")
    if any(not s for s in subjects):
        raise PromptParseError(line_no, "empty subject marker")
    text = " ".join(_MARK.sub(lambda m: m.group(1).strip(), line).split())
    return PromptRecord(text, subjects, prompt_id)


def parse_prompts(text: str) -> list[PromptRecord]:
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        records.append(parse_prompt_line(stripped, line_no, prompt_id=f"p{len(records):03d}"))
    return records


def parse_prompt_file(path) -> list[PromptRecord]:
    return parse_prompts(Path(path).read_text(encoding="utf-8"))

