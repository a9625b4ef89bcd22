"""Answer canonicalization shared by the verifier reward and the rule judge."""

from __future__ import annotations

import re

_NUMBER = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)$")


def canonical_answer(text: str) -> str:
    """Trim, case-fold and normalize plain decimal numbers.

    ``" 0.50 "`` becomes ``"0.5"``, ``"2.0"`` becomes ``"2"``, ``"+3"`` becomes
    ``"3"``. Non-numeric strings are only trimmed and case-folded.
    """
    s = text.strip().casefold()
    if not _NUMBER.match(s):
        return s
    sign = ""
    if s[0] in "+-":
        sign, s = ("-" if s[0] == "-" else ""), s[1:]
    if "." in s:
        s = s.rstrip("0").rstrip(".")
    s = s.lstrip("0") or "0"
    if s.startswith("."):
        s = "0" + s
    if s == "0":
        sign = ""
    return sign + s


def answers_match(prediction: str, gold: str) -> bool:
    return canonical_answer(prediction) == canonical_answer(gold)
