import pytest

from failforge import judge, schema
from failforge.judge import (
    FilterVerdict,
    JudgeError,
    filter_candidates,
    judge_candidate,
    judge_candidates,
    parse_rating,
)

from conftest import make_candidate, scripted_chat


def _verdict(candidate, rating):
    return FilterVerdict(candidate_id=candidate.candidate_id, rating=rating, raw_response=str(rating), judge_model="m")


# ---------------------------------------------------------------------------
# rating parse
# ---------------------------------------------------------------------------


def test_parse_rating_clean():
    assert parse_rating("Score: 3 — fully specific") == 3
    assert parse_rating("2") == 2
    assert parse_rating("I grade this sample a 1.") == 1


def test_parse_rating_ambiguous_and_absent():
    assert parse_rating("2 or 3, hard to say") is None
    assert parse_rating("no digits here") is None
    assert parse_rating("maybe 10 out of 10") is None  # 10 is not a standalone 1
    assert parse_rating("2.5 at best") is None  # decimals are not ratings


def test_parse_rating_repeated_same_value():
    assert parse_rating("3. Yes, 3/3.") == 3


def test_judge_happy_path(cache, ledger):
    candidate = make_candidate(0, method=schema.METHOD_M1)
    rules = [{"match": {"contains": candidate.question}, "responses": ["Score: 3 — fully specific"]}]
    client, _ = scripted_chat(rules, cache, ledger, name="judge")
    verdict = judge_candidate(client, candidate)
    assert verdict.rating == 3 and not verdict.unparseable


def test_judge_ambiguous_then_requery(cache, ledger):
    candidate = make_candidate(0, method=schema.METHOD_M1)
    rules = [{"match": {"contains": candidate.question}, "responses": ["2 or 3, hard to say", "2"]}]
    client, script = scripted_chat(rules, cache, ledger, name="judge")
    verdict = judge_candidate(client, candidate)
    assert verdict.rating == 2
    assert script.network_calls == 2  # re-query went out at temperature 0


def test_judge_gibberish_twice_conservative_reject(cache, ledger):
    candidate = make_candidate(0, method=schema.METHOD_M1)
    rules = [{"match": {"contains": candidate.question}, "responses": ["???", "still ???"], "repeat": True}]
    client, _ = scripted_chat(rules, cache, ledger, name="judge")
    verdict = judge_candidate(client, candidate)
    assert verdict.rating == 1 and verdict.unparseable


def test_judge_requires_resolved_image(cache, ledger):
    client, _ = scripted_chat([], cache, ledger, name="judge", default="canned")
    with pytest.raises(JudgeError, match="resolved image"):
        judge_candidate(client, make_candidate(0, method=schema.METHOD_M2, resolved=False))


def test_judge_prompt_carries_rubric_and_image(cache, ledger):
    candidate = make_candidate(0, method=schema.METHOD_M1)
    client, _ = scripted_chat([], cache, ledger, name="judge", default="canned")
    request = judge.judge_request(candidate, client)
    text = request.messages[0].parts[0].text
    assert "grade the sample from 1 to 3" in text
    assert "the only valid answer" in text
    assert candidate.question in text and candidate.answer in text
    assert request.messages[0].parts[1].kind == "image"


def test_judge_transport_failure_defers(cache, ledger):
    candidates = [make_candidate(i, method=schema.METHOD_M1) for i in range(3)]
    rules = [{"match": {"contains": candidates[1].question}, "responses": [{"error": {"status": 500}}], "repeat": True}]
    for c in (candidates[0], candidates[2]):
        rules.append({"match": {"contains": c.question}, "responses": ["3"], "repeat": True})
    client, _ = scripted_chat(rules, cache, ledger, name="judge", retries=2)
    run = judge_candidates(client, candidates)
    assert len(run.verdicts) == 2
    assert [d[0] for d in run.deferred] == [candidates[1].candidate_id]


# ---------------------------------------------------------------------------
# filter_candidates
# ---------------------------------------------------------------------------


def test_filter_81_percent_rejection():
    candidates = [make_candidate(i, method=schema.METHOD_M2, resolved=True, benchmark="vizwiz") for i in range(100)]
    verdicts = [_verdict(c, 3 if i < 19 else 1) for i, c in enumerate(candidates)]
    outcome = filter_candidates(candidates, verdicts)
    assert outcome.retained.n_total == 19
    assert outcome.stats.rejection_rate == pytest.approx(0.81)
    bucket = outcome.stats.buckets["vizwiz/synthetic"]
    assert bucket["rejection_rate"] == pytest.approx(0.81)


def test_filter_all_threes_zero_rejection():
    candidates = [make_candidate(i, method=schema.METHOD_M1) for i in range(5)]
    outcome = filter_candidates(candidates, [_verdict(c, 3) for c in candidates])
    assert outcome.stats.rejection_rate == 0.0
    assert outcome.rejected.n_total == 0


def test_filter_okvqa_29_percent():
    candidates = [make_candidate(i, method=schema.METHOD_M2, resolved=True, benchmark="okvqa") for i in range(100)]
    verdicts = [_verdict(c, 3 if i < 71 else 2) for i, c in enumerate(candidates)]
    outcome = filter_candidates(candidates, verdicts)
    assert outcome.stats.rejection_rate == pytest.approx(0.29)


def test_filter_partition_and_retained_all_threes():
    candidates = [make_candidate(i, method=schema.METHOD_M1) for i in range(40)]
    verdicts = [_verdict(c, 1 + i % 3) for i, c in enumerate(candidates)]
    outcome = filter_candidates(candidates, verdicts)
    retained_ids = {r.record_id for r in outcome.retained.records}
    rejected_ids = {r.record_id for r in outcome.rejected.records}
    assert retained_ids | rejected_ids == {c.candidate_id for c in candidates}
    assert not retained_ids & rejected_ids
    by_id = {v.candidate_id: v for v in verdicts}
    assert all(by_id[i].rating == 3 for i in retained_ids)
    assert sum(b["total"] for b in outcome.stats.buckets.values()) == 40


def test_filter_missing_verdict_lists_ids():
    candidates = [make_candidate(i, method=schema.METHOD_M1) for i in range(3)]
    verdicts = [_verdict(c, 3) for c in candidates[:2]]
    with pytest.raises(JudgeError) as err:
        filter_candidates(candidates, verdicts)
    assert candidates[2].candidate_id in str(err.value)


def test_filter_buckets_by_image_type():
    real = [make_candidate(i, method=schema.METHOD_M1, benchmark="vizwiz") for i in range(4)]
    synthetic = [make_candidate(i + 10, method=schema.METHOD_M2, resolved=True, benchmark="vizwiz") for i in range(6)]
    verdicts = [_verdict(c, 3) for c in real] + [_verdict(c, 1) for c in synthetic]
    outcome = filter_candidates(real + synthetic, verdicts)
    assert outcome.stats.buckets["vizwiz/real"]["retained"] == 4
    assert outcome.stats.buckets["vizwiz/synthetic"]["rejected"] == 6


def test_verdict_rating_domain():
    with pytest.raises(ValueError):
        FilterVerdict(candidate_id="c", rating=4, raw_response="", judge_model="m")
