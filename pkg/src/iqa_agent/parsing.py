"""Tolerant parsing of model output: embedded JSON and multiple-choice letters."""

from __future__ import annotations

import json
import re
from typing import Any, Optional, Sequence


class UnparseableError(ValueError):
    """No usable structure could be extracted from the model text."""


class NoChoiceFoundError(ValueError):
    """No valid option letter could be extracted from the model text."""


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def extract_json_object(text: str) -> Any:
    """Pull the first JSON object out of free-form model text.

    Handles bare JSON, JSON inside markdown fences, and JSON preceded or
    followed by prose. Raises UnparseableError when nothing decodes.
    """
    if not isinstance(text, str) or not text.strip():
        raise UnparseableError("empty model output")
    candidates = [m.group(1) for m in _FENCE_RE.finditer(text)]
    candidates.append(text)
    decoder = json.JSONDecoder()
    for chunk in candidates:
        start = chunk.find("{")
        while start != -1:
            try:
                obj, _ = decoder.raw_decode(chunk[start:])
            except json.JSONDecodeError:
                start = chunk.find("{", start + 1)
                continue
            if isinstance(obj, dict):
                return obj
            start = chunk.find("{", start + 1)
    raise UnparseableError(f"no JSON object found in model output: {text[:200]!r}")


def _option_label(option: str) -> Optional[str]:
    m = re.match(r"\s*\(?([A-Za-z])[\.\):]\s*", option)
    return m.group(1).upper() if m else None


def _option_text(option: str) -> str:
    m = re.match(r"\s*\(?[A-Za-z][\.\):]\s*(.*)$", option, re.DOTALL)
    return (m.group(1) if m else option).strip()


def split_options(options: Sequence[str]) -> dict:
    """Map option letters to their text for a list like ["A. Good", "B. Bad"]."""
    table = {}
    for i, option in enumerate(options):
        letter = _option_label(option)
        if letter is None:
            letter = chr(ord("A") + i)
        table[letter] = _option_text(option)
    return table


def parse_choice(text: str, options: Sequence[str]) -> str:
    """Extract the chosen option letter from model output.

    Three tiers, first hit wins:
      1. a JSON object with a "final_answer" field whose value names a letter,
      2. a standalone letter token, as in "B", "B.", "(B)" or "answer: B)",
      3. a case-insensitive match of one option's text inside the output.
    Raises NoChoiceFoundError when none applies.
    """
    if not isinstance(text, str) or not text.strip():
        raise NoChoiceFoundError("empty model output")
    table = split_options(options)
    valid = set(table)

    try:
        obj = extract_json_object(text)
    except UnparseableError:
        obj = None
    if isinstance(obj, dict):
        value = obj.get("final_answer")
        if isinstance(value, str):
            m = re.match(r"\s*\(?([A-Za-z])\b", value)
            if m and m.group(1).upper() in valid:
                return m.group(1).upper()
            # The field may carry the option text instead of its letter.
            for letter, opt_text in table.items():
                if opt_text and value.strip().lower() == opt_text.lower():
                    return letter

    stripped = text.strip()
    if len(stripped) == 1 and stripped.upper() in valid:
        return stripped.upper()
    # Parenthesized letters, then punctuation-terminated ones. A bare capital
    # mid-sentence is not accepted: "A" the article would false-positive.
    for pattern in (r"\(([A-Za-z])\)", r"\b([A-Za-z])[\.\):](?:\s|$)"):
        for m in re.finditer(pattern, text):
            if m.group(1).upper() in valid:
                return m.group(1).upper()

    lowered = text.lower()
    best: Optional[str] = None
    best_len = 0
    for letter, opt_text in table.items():
        if opt_text and opt_text.lower() in lowered and len(opt_text) > best_len:
            best = letter
            best_len = len(opt_text)
    if best is not None:
        return best
    raise NoChoiceFoundError(f"no option letter found in {text[:120]!r}")
