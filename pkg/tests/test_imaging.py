import pytest

from failforge import schema
from failforge.imaging import (
    GuidanceSweep,
    ImagingError,
    derive_seed,
    guidance_schedule,
    plan_image_jobs,
    realize_images,
)

from conftest import make_candidate, scripted_image


def test_schedule_default_linspace():
    values = guidance_schedule(GuidanceSweep())
    assert len(values) == 10
    assert values[0] == 3.0 and values[-1] == 13.0
    step = 10 / 9
    for i, v in enumerate(values):
        assert v == pytest.approx(3.0 + i * step, abs=1e-9)
    assert all(b > a for a, b in zip(values, values[1:]))


def test_schedule_two_points_endpoints():
    assert guidance_schedule(GuidanceSweep(n=2)) == [3.0, 13.0]


def test_schedule_degenerate_n1():
    assert guidance_schedule(GuidanceSweep(lo=5.0, hi=9.0, n=1)) == [5.0]


def test_sweep_lo_must_be_below_hi():
    with pytest.raises(ImagingError):
        GuidanceSweep(lo=5.0, hi=5.0)


def test_schedule_monotone_property():
    import random

    rng = random.Random(11)
    for _ in range(100):
        lo = rng.uniform(0, 10)
        hi = lo + rng.uniform(0.1, 20)
        n = rng.randrange(2, 40)
        values = guidance_schedule(GuidanceSweep(lo=lo, hi=hi, n=n))
        assert values[0] == lo and values[-1] == hi
        assert all(b > a for a, b in zip(values, values[1:]))


def test_plan_10x10_is_100_jobs():
    candidates = [make_candidate(i) for i in range(10)]
    jobs = plan_image_jobs(candidates, GuidanceSweep())
    assert len(jobs) == 100


def test_plan_zero_candidates():
    assert plan_image_jobs([], GuidanceSweep()) == []


def test_plan_3x4_is_12_jobs():
    jobs = plan_image_jobs([make_candidate(i) for i in range(3)], GuidanceSweep(n=4))
    assert len(jobs) == 12
    guidances = {j.request.guidance_scale for j in jobs}
    assert len(guidances) == 4


def test_plan_rejects_non_m2():
    with pytest.raises(ImagingError):
        plan_image_jobs([make_candidate(0, method=schema.METHOD_M1)], GuidanceSweep())


def test_plan_rejects_already_resolved():
    with pytest.raises(ImagingError):
        plan_image_jobs([make_candidate(0, resolved=True)], GuidanceSweep())


def test_plan_deterministic_seeds_and_ids():
    candidates = [make_candidate(i) for i in range(3)]
    a = plan_image_jobs(candidates, GuidanceSweep(n=4))
    b = plan_image_jobs(candidates, GuidanceSweep(n=4))
    assert [(j.job_id, j.request.seed) for j in a] == [(j.job_id, j.request.seed) for j in b]
    assert derive_seed("c", 0) != derive_seed("c", 1)


def test_realize_all_success_distinct_ids(cache, ledger, tmp_path):
    client, _ = scripted_image([], cache, ledger, tmp_path / "images")
    jobs = plan_image_jobs([make_candidate(i) for i in range(10)], GuidanceSweep())
    outcome = realize_images(jobs, client)
    assert len(outcome.candidates) == 100
    assert len({c.candidate_id for c in outcome.candidates}) == 100
    assert not outcome.failed_jobs
    for candidate in outcome.candidates:
        assert candidate.image_source.resolved
        assert candidate.image_source.guidance_scale is not None


def test_realize_scripted_failures_excluded(cache, ledger, tmp_path):
    candidates = [make_candidate(i) for i in range(10)]
    jobs = plan_image_jobs(candidates, GuidanceSweep())
    # 7 scripted failures: pick 7 distinct prompts at one guidance index each.
    fail_prompts = [f"prompt {i}" for i in range(7)]
    rules = [
        {"match": {"digest": _image_key(job)}, "kind": "image", "responses": [{"error": {"status": 500}}], "repeat": True}
        for job in jobs
        if job.candidate.image_source.image_prompt in fail_prompts and job.guidance_index == 0
    ]
    client, _ = scripted_image(rules, cache, ledger, tmp_path / "images", retries=2)
    outcome = realize_images(jobs, client)
    assert len(outcome.candidates) == 93
    assert len(outcome.failed_jobs) == 7
    statuses = {row["status"] for row in outcome.job_status}
    assert statuses == {"done", "failed"}


def _image_key(job):
    from failforge.backends import cache_key

    return cache_key(
        "image",
        {
            "prompt": job.request.prompt,
            "width": job.request.width,
            "height": job.request.height,
            "seed": job.request.seed,
            "guidance_scale": job.request.guidance_scale,
        },
    )


def test_realize_guidance_siblings_distinct_artifacts(cache, ledger, tmp_path):
    client, _ = scripted_image([], cache, ledger, tmp_path / "images")
    jobs = plan_image_jobs([make_candidate(0)], GuidanceSweep(n=2))
    outcome = realize_images(jobs, client)
    a, b = outcome.candidates
    assert a.candidate_id != b.candidate_id
    assert a.image_source.image_ref != b.image_source.image_ref
