"""LMM-as-judge quality filter.

Each candidate's image, question, and answer are graded 1-3 against a fixed
rubric; only candidates rated 3 are retained. Ambiguous judge output gets one
re-query at temperature 0; output that still cannot be parsed is recorded as
rating 1 with an unparseable flag, so ambiguity never leaks data in.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import schema
from .backends import BackendError, ChatClient, ChatRequest, image_part, text_part, user_message

logger = logging.getLogger(__name__)

JUDGE_RUBRIC = (
    "Given sample containing an image, a question, and an answer, your task is to grade "
    "the sample from 1 to 3 based on the following criteria:\n"
    "Score 1: The answer is incorrect.\n"
    "Score 2: The answer is correct, but it is one of several possible valid answers.\n"
    "Score 3: The answer is correct, specific, and the only valid answer. "
    "The image provides all the necessary context for the answer."
)

REQUERY_NOTE = "Respond with a single digit: 1, 2, or 3."

# Standalone 1/2/3 tokens: not embedded in words, larger numbers, or decimals.
_RATING_RE = re.compile(r"(?<![A-Za-z0-9_])(?<!\d\.)([123])(?![A-Za-z0-9_])(?!\.\d)")


class JudgeError(RuntimeError):
    pass


@dataclass(frozen=True)
class FilterVerdict:
    candidate_id: str
    rating: int
    raw_response: str
    judge_model: str
    unparseable: bool = False

    def __post_init__(self):
        if self.rating not in (1, 2, 3):
            raise ValueError(f"rating {self.rating} not in {{1, 2, 3}}")

    def to_dict(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "rating": self.rating,
            "raw_response": self.raw_response,
            "judge_model": self.judge_model,
            "unparseable": self.unparseable,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "FilterVerdict":
        return cls(
            candidate_id=str(row["candidate_id"]),
            rating=int(row["rating"]),
            raw_response=str(row.get("raw_response", "")),
            judge_model=str(row.get("judge_model", "")),
            unparseable=bool(row.get("unparseable", False)),
        )


def parse_rating(text: str) -> Optional[int]:
    """The response's rating, or None when ambiguous.

    Collects standalone 1/2/3 tokens; exactly one distinct value is a rating,
    zero or several distinct values ("2 or 3, hard to say") is ambiguous.
    """
    found = {int(m.group(1)) for m in _RATING_RE.finditer(text)}
    if len(found) == 1:
        return found.pop()
    return None


def judge_request(candidate: schema.SyntheticCandidate, client: ChatClient, requery: bool = False) -> ChatRequest:
    image_ref = candidate.resolved_image_ref
    if image_ref is None:
        raise JudgeError(f"candidate {candidate.candidate_id} has no resolved image")
    text = f"{JUDGE_RUBRIC}\n\nQuestion: {candidate.question}\nAnswer: {candidate.answer}"
    if requery:
        text = f"{text}\n{REQUERY_NOTE}"
    return client.request([user_message(text_part(text), image_part(image_ref))],
                          temperature=0.0 if requery else None)


def judge_candidate(client: ChatClient, candidate: schema.SyntheticCandidate) -> FilterVerdict:
    """Grade one candidate; transport failures propagate so callers defer it."""
    response = client.chat(judge_request(candidate, client))
    rating = parse_rating(response.content)
    raw = response.content
    if rating is None:
        retry = client.chat(judge_request(candidate, client, requery=True))
        rating = parse_rating(retry.content)
        raw = f"{raw}\n--- re-query ---\n{retry.content}"
        if rating is None:
            # conservative rejection: unparseable output must not leak data in
            return FilterVerdict(
                candidate_id=candidate.candidate_id,
                rating=1,
                raw_response=raw,
                judge_model=client.config.model_id,
                unparseable=True,
            )
    return FilterVerdict(
        candidate_id=candidate.candidate_id,
        rating=rating,
        raw_response=raw,
        judge_model=client.config.model_id,
    )


@dataclass
class JudgeRun:
    verdicts: list[FilterVerdict]
    deferred: list[tuple[str, str]]  # (candidate_id, error) — transport failures


def judge_candidates(
    client: ChatClient,
    candidates: Sequence[schema.SyntheticCandidate],
    max_workers: int = 4,
    on_verdict=None,
) -> JudgeRun:
    """Judge in parallel under the backend's in-flight bound.

    Verdicts come back in candidate order; candidates whose judge calls fail
    transport are deferred (surfaced, never silently kept). on_verdict, when
    given, is called as each verdict lands (append-to-ledger hook).
    """
    slots: list[Optional[FilterVerdict]] = [None] * len(candidates)
    deferred: list[tuple[str, str]] = []

    def run_one(index: int, candidate: schema.SyntheticCandidate):
        verdict = judge_candidate(client, candidate)
        slots[index] = verdict
        if on_verdict is not None:
            on_verdict(verdict)

    if candidates:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {pool.submit(run_one, i, c): c for i, c in enumerate(candidates)}
            for future, candidate in futures.items():
                try:
                    future.result()
                except BackendError as exc:
                    deferred.append((candidate.candidate_id, str(exc)))

    return JudgeRun(verdicts=[v for v in slots if v is not None], deferred=sorted(deferred))


@dataclass
class FilterStats:
    total: int
    retained: int
    rejected: int
    buckets: dict = field(default_factory=dict)  # "<benchmark>/<image_type>" -> counts

    @property
    def rejection_rate(self) -> float:
        return self.rejected / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "retained": self.retained,
            "rejected": self.rejected,
            "rejection_rate": round(self.rejection_rate, 4),
            "buckets": self.buckets,
        }


@dataclass
class FilterOutcome:
    retained: schema.DatasetManifest
    rejected: schema.DatasetManifest
    stats: FilterStats


def filter_candidates(
    candidates: Sequence[schema.SyntheticCandidate],
    verdicts: Sequence[FilterVerdict],
    keep_threshold: int = 3,
    records_path: Optional[str] = None,
    stage: str = "filter",
) -> FilterOutcome:
    """Partition candidates into retained (rating == keep_threshold) and rejected.

    Every candidate needs exactly one verdict; missing ones error listing the
    candidate ids. The partition and the all-retained-are-3 property are
    re-checked by brute force over the verdicts on every run.
    """
    by_id = {}
    for verdict in verdicts:
        by_id[verdict.candidate_id] = verdict
    missing = sorted(c.candidate_id for c in candidates if c.candidate_id not in by_id)
    if missing:
        raise JudgeError(f"missing verdicts for {len(missing)} candidates: {missing[:10]}")

    retained_refs, rejected_refs = [], []
    buckets: dict[str, dict[str, int]] = {}
    for candidate in candidates:
        verdict = by_id[candidate.candidate_id]
        ref = schema.RecordRef(
            record_id=candidate.candidate_id,
            tag=schema.SYNTHETIC_TAG,
            digest=schema.digest_of(candidate.to_dict()),
            benchmark=candidate.benchmark,
            path=records_path,
        )
        bucket = buckets.setdefault(
            f"{candidate.benchmark}/{candidate.image_type}",
            {"total": 0, "retained": 0, "rejected": 0},
        )
        bucket["total"] += 1
        if verdict.rating == keep_threshold:
            retained_refs.append(ref)
            bucket["retained"] += 1
        else:
            rejected_refs.append(ref)
            bucket["rejected"] += 1

    for bucket in buckets.values():
        bucket["rejection_rate"] = round(bucket["rejected"] / bucket["total"], 4) if bucket["total"] else 0.0

    stats = FilterStats(
        total=len(candidates),
        retained=len(retained_refs),
        rejected=len(rejected_refs),
        buckets=buckets,
    )
    _verify_partition(candidates, by_id, retained_refs, rejected_refs, keep_threshold, stats)

    lineage = schema.LineageEntry(
        stage=stage,
        inputs=(),
        config=schema.digest_of({"keep_threshold": keep_threshold}),
    )
    return FilterOutcome(
        retained=schema.DatasetManifest.build(retained_refs, lineage=(lineage,)),
        rejected=schema.DatasetManifest.build(rejected_refs, lineage=(lineage,)),
        stats=stats,
    )


def _verify_partition(candidates, verdicts_by_id, retained_refs, rejected_refs, keep_threshold, stats) -> None:
    """Brute-force recheck: clean partition, retained all rated 3, counts conserve."""
    input_ids = {c.candidate_id for c in candidates}
    retained_ids = {r.record_id for r in retained_refs}
    rejected_ids = {r.record_id for r in rejected_refs}
    if retained_ids & rejected_ids:
        raise JudgeError("partition violated: retained and rejected overlap")
    if retained_ids | rejected_ids != input_ids:
        raise JudgeError("partition violated: retained + rejected != input")
    for record_id in retained_ids:
        if verdicts_by_id[record_id].rating != keep_threshold:
            raise JudgeError(f"retained candidate {record_id} has rating {verdicts_by_id[record_id].rating}")
    if sum(b["total"] for b in stats.buckets.values()) != stats.total:
        raise JudgeError("stats conservation violated: bucket totals != total judged")


def write_verdicts(verdicts: Sequence[FilterVerdict], path) -> str:
    return schema.write_jsonl(path, (v.to_dict() for v in verdicts))


def read_verdicts(path) -> list[FilterVerdict]:
    return [FilterVerdict.from_dict(row) for row in schema.read_jsonl(path)]
