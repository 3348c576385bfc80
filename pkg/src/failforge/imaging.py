"""Expands fully-synthetic candidates into image-generation jobs.

Each pending candidate fans out across a classifier-guidance sweep (defaults:
10 evenly spaced scales over [3, 13] at 1024x1024), one deterministic seed
per (candidate, guidance index). With the default 10 proposed triplets per
failure this realizes 100 fully synthetic samples per mined failure.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from . import schema
from .backends import BackendError, ImageClient, ImageRequest

logger = logging.getLogger(__name__)


class ImagingError(ValueError):
    pass


@dataclass(frozen=True)
class GuidanceSweep:
    lo: float = 3.0
    hi: float = 13.0
    n: int = 10
    resolution: int = 1024

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ImagingError(f"guidance sweep requires lo < hi, got [{self.lo}, {self.hi}]")
        if self.n < 1:
            raise ImagingError("guidance sweep requires n >= 1")
        if self.resolution < 1:
            raise ImagingError("resolution must be positive")


def guidance_schedule(sweep: GuidanceSweep) -> list[float]:
    """n evenly spaced values from lo to hi inclusive, strictly increasing.

    n == 1 degenerates to [lo].
    """
    if sweep.n == 1:
        return [sweep.lo]
    step = (sweep.hi - sweep.lo) / (sweep.n - 1)
    values = [sweep.lo + i * step for i in range(sweep.n)]
    values[-1] = sweep.hi  # pin the endpoint against float drift
    return values


def derive_seed(candidate_id: str, guidance_index: int) -> int:
    """Deterministic per-(candidate, guidance index) seed, for resumability."""
    raw = hashlib.sha256(f"{candidate_id}:{guidance_index}".encode("utf-8")).digest()
    return int.from_bytes(raw[:8], "big") % (2**31)


@dataclass(frozen=True)
class ImageJob:
    job_id: str
    candidate: schema.SyntheticCandidate
    guidance_index: int
    request: ImageRequest


def plan_image_jobs(candidates: Sequence[schema.SyntheticCandidate], sweep: GuidanceSweep) -> list[ImageJob]:
    """Exactly |candidates| x n jobs over pending fully-synthetic candidates."""
    schedule = guidance_schedule(sweep)
    jobs: list[ImageJob] = []
    for candidate in candidates:
        if candidate.method != schema.METHOD_M2:
            raise ImagingError(f"candidate {candidate.candidate_id} is not {schema.METHOD_M2}")
        source = candidate.image_source
        if not isinstance(source, schema.GeneratedImage) or source.resolved:
            raise ImagingError(f"candidate {candidate.candidate_id} does not have a pending generated image")
        for gi, guidance in enumerate(schedule):
            seed = derive_seed(candidate.candidate_id, gi)
            jobs.append(
                ImageJob(
                    job_id=schema.digest_of({"candidate": candidate.candidate_id, "guidance_index": gi})[:16],
                    candidate=candidate,
                    guidance_index=gi,
                    request=ImageRequest(
                        prompt=source.image_prompt,
                        width=sweep.resolution,
                        height=sweep.resolution,
                        guidance_scale=guidance,
                        seed=seed,
                    ),
                )
            )
    return jobs


@dataclass
class RealizeOutcome:
    candidates: list[schema.SyntheticCandidate]
    failed_jobs: list[dict]  # {"job_id", "candidate_id", "error"}
    job_status: list[dict]  # jobs ledger rows: {"job_id", "status", "attempts"}


def realize_images(jobs: Sequence[ImageJob], client: ImageClient, max_workers: int = 4) -> RealizeOutcome:
    """Run jobs and bind artifacts back onto cloned candidates.

    Successful jobs yield one candidate each with the generated source
    resolved (prompt, guidance, seed, artifact ref) and a re-derived id so
    sweep siblings stay distinct. Per-job failures never abort the batch;
    they are recorded and the candidate variant is excluded. Binding is
    order-independent; output follows job order.
    """
    slots: list[dict] = [{} for _ in jobs]

    def run_one(index: int, job: ImageJob):
        try:
            artifact = client.generate(job.request)
        except (BackendError, ValueError) as exc:
            slots[index] = {"error": str(exc), "attempts": getattr(exc, "attempts", None)}
            return
        slots[index] = {
            "attempts": artifact.attempts,
            "candidate": schema.resolve_generated(
                job.candidate,
                guidance_scale=job.request.guidance_scale,
                seed=job.request.seed,
                image_ref=artifact.locator,
            ),
        }

    if jobs:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [pool.submit(run_one, i, job) for i, job in enumerate(jobs)]
            for future in futures:
                future.result()

    outcome = RealizeOutcome(candidates=[], failed_jobs=[], job_status=[])
    for job, slot in zip(jobs, slots):
        attempts = slot.get("attempts")
        attempts = len(attempts) if isinstance(attempts, list) else (attempts or 1)
        if "candidate" in slot:
            outcome.candidates.append(slot["candidate"])
            outcome.job_status.append({"job_id": job.job_id, "status": "done", "attempts": attempts})
        else:
            outcome.failed_jobs.append(
                {"job_id": job.job_id, "candidate_id": job.candidate.candidate_id, "error": slot.get("error", "unknown")}
            )
            outcome.job_status.append({"job_id": job.job_id, "status": "failed", "attempts": attempts})
    return outcome
