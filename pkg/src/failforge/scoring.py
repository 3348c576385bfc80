"""Answer normalization and scoring for failure mining and evaluation reports.

Two policies: strict normalized exact match against the first reference, and
VQA-style soft accuracy over multiple references. Pure functions throughout.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .schema import ANSWER_POLICIES, EXACT_SINGLE, VQA_MULTI_REF

ARTICLES = frozenset({"a", "an", "the"})

_PUNCT_RE = re.compile(r"[^\w\s]", re.UNICODE)


@dataclass(frozen=True)
class ScorePolicy:
    mode: str
    lowercase: bool = True
    strip_punctuation: bool = True
    strip_articles: bool = True
    collapse_whitespace: bool = True

    def __post_init__(self):
        if self.mode not in ANSWER_POLICIES:
            raise ValueError(f"mode {self.mode!r} not in {ANSWER_POLICIES}")


def policy_for(mode: str) -> ScorePolicy:
    return ScorePolicy(mode=mode)


def normalize_answer(text: str, policy: ScorePolicy | None = None) -> str:
    """Apply the enabled normalization flags in fixed order.

    Order: lowercase -> strip_punctuation -> strip_articles ->
    collapse_whitespace. Idempotent: normalize(normalize(x)) == normalize(x).
    """
    if policy is None:
        policy = ScorePolicy(mode=EXACT_SINGLE)
    if policy.lowercase:
        text = text.lower()
    if policy.strip_punctuation:
        text = _PUNCT_RE.sub(" ", text)
    if policy.strip_articles:
        text = " ".join(tok for tok in text.split() if tok not in ARTICLES)
    if policy.collapse_whitespace:
        text = " ".join(text.split())
    return text


def score_answer(prediction: str, references: list[str] | tuple[str, ...], policy: ScorePolicy) -> float:
    """Score a prediction against reference answers under the policy.

    exact_single: 1.0 iff the normalized prediction equals the normalized
    first reference, else 0.0.

    vqa_multi_ref: min(1, matches / min(3, |references|)) where matches is the
    count of references whose normalization equals the prediction's. The
    denominator clamp keeps self-match == 1.0 for short reference lists and
    equals the standard matches/3 rule whenever three or more references are
    given (the multi-annotator benchmark shape).
    """
    if not references:
        raise ValueError("references must be non-empty")
    pred = normalize_answer(prediction, policy)
    if policy.mode == EXACT_SINGLE:
        return 1.0 if pred == normalize_answer(references[0], policy) else 0.0
    matches = sum(1 for ref in references if normalize_answer(ref, policy) == pred)
    return min(1.0, matches / min(3, len(references)))
