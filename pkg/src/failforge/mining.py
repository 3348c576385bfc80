"""Model Failure Set construction.

Runs the baseline and frontier models over a benchmark train split, scores
their predictions, and keeps the samples where the baseline scores exactly
0.0 while the frontier scores exactly 1.0. Samples where the frontier also
fails are logged to a side file, never silently dropped.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import schema
from .backends import BackendError, ChatClient, ChatRequest, image_part, text_part, user_message
from .scoring import ScorePolicy, score_answer

logger = logging.getLogger(__name__)

# Appended to every evaluation prompt so EM scoring sees short answers.
SHORT_ANSWER_INSTRUCTION = "Answer with a single word or phrase."


class MiningError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalResult:
    sample_id: str
    prediction: str
    score: float


@dataclass
class EvalRun:
    results: list[EvalResult]
    transport_failures: list[tuple[str, str]]  # (sample_id, error)

    @property
    def failure_rate(self) -> float:
        total = len(self.results) + len(self.transport_failures)
        return len(self.transport_failures) / total if total else 0.0


def evaluation_request(client: ChatClient, sample: schema.BenchmarkSample) -> ChatRequest:
    """question + answer-format instruction, with the sample image attached."""
    return client.request(
        [user_message(text_part(f"{sample.question}\n{SHORT_ANSWER_INSTRUCTION}"), image_part(sample.image_ref))]
    )


def evaluate_split(
    client: ChatClient,
    samples: Sequence[schema.BenchmarkSample],
    policy: Optional[ScorePolicy] = None,
    max_workers: int = 4,
    max_failure_rate: float = 0.0,
) -> EvalRun:
    """One scored prediction per sample, input order preserved.

    Responses are served through the backend cache, so re-runs are free.
    Per-sample transport failures are recorded and surfaced; the run fails
    only if the failure rate exceeds max_failure_rate.
    """
    slots: list[Optional[EvalResult]] = [None] * len(samples)
    failures: list[tuple[str, str]] = []

    def evaluate_one(index: int, sample: schema.BenchmarkSample):
        request = evaluation_request(client, sample)
        response = client.chat(request)
        sample_policy = policy or ScorePolicy(mode=sample.answer_policy)
        score = score_answer(response.content, list(sample.reference_answers), sample_policy)
        slots[index] = EvalResult(sample_id=sample.sample_id, prediction=response.content, score=score)

    if samples:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {pool.submit(evaluate_one, i, s): s for i, s in enumerate(samples)}
            for future, sample in futures.items():
                try:
                    future.result()
                except BackendError as exc:
                    failures.append((sample.sample_id, str(exc)))

    run = EvalRun(results=[r for r in slots if r is not None], transport_failures=sorted(failures))
    if run.failure_rate > max_failure_rate:
        raise MiningError(
            f"{len(failures)}/{len(samples)} samples failed transport "
            f"(rate {run.failure_rate:.3f} > {max_failure_rate}): {failures[:5]}"
        )
    return run


@dataclass(frozen=True)
class FailureSet:
    benchmark: str
    cases: tuple[schema.FailureCase, ...]
    source_split_size: int

    def __post_init__(self):
        if len(self.cases) > self.source_split_size:
            raise MiningError("|cases| exceeds source split size")
        for case in self.cases:
            if not case.is_mfs_member:
                raise MiningError(f"case {case.failure_id} violates the (0.0, 1.0) membership predicate")


def build_failure_set(
    baseline_results: Sequence[EvalResult],
    frontier_results: Sequence[EvalResult],
    samples: Sequence[schema.BenchmarkSample],
) -> FailureSet:
    """cases = {s : baseline_score(s) == 0.0 and frontier_score(s) == 1.0}.

    Both result lists must cover identical sample_id sets; cases come out in
    deterministic sample_id order. Membership is re-verified by brute force
    from the per-sample results on every build.
    """
    baseline = {r.sample_id: r for r in baseline_results}
    frontier = {r.sample_id: r for r in frontier_results}
    missing_baseline = sorted(set(frontier) - set(baseline))
    missing_frontier = sorted(set(baseline) - set(frontier))
    if missing_baseline or missing_frontier:
        raise MiningError(
            f"coverage mismatch: missing from baseline results {missing_baseline[:10]}, "
            f"missing from frontier results {missing_frontier[:10]}"
        )
    by_id = {s.sample_id: s for s in samples}
    unknown = sorted(set(baseline) - set(by_id))
    if unknown:
        raise MiningError(f"results reference sample_ids outside the split: {unknown[:10]}")

    cases = []
    for sample_id in sorted(baseline):
        b, f = baseline[sample_id], frontier[sample_id]
        if b.score == 0.0 and f.score == 1.0:
            cases.append(
                schema.FailureCase(
                    sample=by_id[sample_id],
                    baseline_prediction=b.prediction,
                    baseline_score=b.score,
                    frontier_prediction=f.prediction,
                    frontier_score=f.score,
                )
            )

    failure_set = FailureSet(benchmark=_benchmark_of(samples), cases=tuple(cases), source_split_size=len(samples))
    _verify_membership(failure_set, baseline, frontier)
    return failure_set


def _benchmark_of(samples: Sequence[schema.BenchmarkSample]) -> str:
    names = {s.benchmark for s in samples}
    if len(names) > 1:
        raise MiningError(f"split mixes benchmarks: {sorted(names)}")
    return names.pop() if names else ""


def _verify_membership(failure_set: FailureSet, baseline: dict, frontier: dict) -> None:
    """Independent brute-force recheck of the membership predicate."""
    expected = set()
    for sample_id in baseline:
        if baseline[sample_id].score == 0.0 and frontier[sample_id].score == 1.0:
            expected.add(sample_id)
    actual = {c.sample.sample_id for c in failure_set.cases}
    if expected != actual:
        raise MiningError(
            f"MFS verification failed: missing {sorted(expected - actual)[:5]}, "
            f"extra {sorted(actual - expected)[:5]}"
        )


def double_failures(
    baseline_results: Sequence[EvalResult],
    frontier_results: Sequence[EvalResult],
    samples: Sequence[schema.BenchmarkSample],
) -> list[schema.FailureCase]:
    """Samples both models got wrong (baseline 0.0, frontier below 1.0)."""
    frontier = {r.sample_id: r for r in frontier_results}
    by_id = {s.sample_id: s for s in samples}
    out = []
    for b in baseline_results:
        f = frontier.get(b.sample_id)
        if f is None or b.score != 0.0 or f.score == 1.0:
            continue
        out.append(
            schema.FailureCase(
                sample=by_id[b.sample_id],
                baseline_prediction=b.prediction,
                baseline_score=b.score,
                frontier_prediction=f.prediction,
                frontier_score=f.score,
            )
        )
    return sorted(out, key=lambda c: c.sample.sample_id)


def mining_summary(
    failure_set: FailureSet,
    baseline_results: Sequence[EvalResult],
    frontier_results: Sequence[EvalResult],
) -> dict:
    return {
        "benchmark": failure_set.benchmark,
        "split_size": failure_set.source_split_size,
        "n_baseline_fail": sum(1 for r in baseline_results if r.score == 0.0),
        "n_frontier_success": sum(1 for r in frontier_results if r.score == 1.0),
        "n_mfs": len(failure_set.cases),
    }


def write_failure_set(failure_set: FailureSet, path: str | Path) -> str:
    return schema.write_jsonl(path, (c.to_dict() for c in failure_set.cases))


def read_failure_set(path: str | Path, benchmark: str, source_split_size: int) -> FailureSet:
    cases = tuple(schema.FailureCase.from_dict(row) for row in schema.read_jsonl(path))
    return FailureSet(benchmark=benchmark, cases=cases, source_split_size=source_split_size)
