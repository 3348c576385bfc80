import pytest

from failforge import mining, schema
from failforge.mining import EvalResult, build_failure_set, double_failures, evaluate_split, mining_summary
from failforge.scoring import ScorePolicy

from conftest import make_sample, scripted_chat


def _rules_for(samples, correct_ids):
    rules = []
    for sample in samples:
        answer = sample.reference_answers[0] if sample.sample_id in correct_ids else "definitely wrong"
        rules.append({"match": {"contains": sample.question}, "responses": [answer], "repeat": True})
    return rules


def test_evaluate_split_toy_13_of_20(cache, ledger):
    samples = [make_sample(i) for i in range(20)]
    correct = {s.sample_id for s in samples[:13]}
    client, _ = scripted_chat(_rules_for(samples, correct), cache, ledger, name="baseline", default="error")
    run = evaluate_split(client, samples)
    assert len(run.results) == 20
    assert [r.sample_id for r in run.results] == [s.sample_id for s in samples]  # order preserved
    assert sum(1 for r in run.results if r.score == 1.0) == 13
    assert sum(1 for r in run.results if r.score == 0.0) == 7


def test_evaluate_split_empty(cache, ledger):
    client, _ = scripted_chat([], cache, ledger)
    run = evaluate_split(client, [])
    assert run.results == [] and run.transport_failures == []


def test_evaluate_split_warm_cache_rerun_free(cache, ledger):
    samples = [make_sample(i) for i in range(6)]
    client, script = scripted_chat(_rules_for(samples, set()), cache, ledger, name="baseline")
    first = evaluate_split(client, samples)
    calls = script.network_calls
    second = evaluate_split(client, samples)
    assert script.network_calls == calls  # zero network on re-run
    assert first.results == second.results


def test_evaluate_split_prompt_carries_instruction_and_image(cache, ledger):
    sample = make_sample(1)
    client, _ = scripted_chat([], cache, ledger, default="canned")
    request = mining.evaluation_request(client, sample)
    text = request.messages[0].parts[0].text
    assert sample.question in text and mining.SHORT_ANSWER_INSTRUCTION in text
    assert request.messages[0].parts[1].kind == "image"
    assert request.messages[0].parts[1].media_type


def test_evaluate_split_failure_threshold(cache, ledger):
    samples = [make_sample(i) for i in range(4)]
    rules = _rules_for(samples[:3], {samples[0].sample_id})
    rules.append({"match": {"contains": samples[3].question}, "responses": [{"error": {"status": 500}}], "repeat": True})
    client, _ = scripted_chat(rules, cache, ledger, retries=2)
    with pytest.raises(mining.MiningError, match="rate"):
        evaluate_split(client, samples)
    run = evaluate_split(client, samples, max_failure_rate=0.5)
    assert len(run.results) == 3
    assert run.transport_failures[0][0] == samples[3].sample_id


def test_build_failure_set_toy_intersection():
    samples = [make_sample(i) for i in range(4)]  # a=s0000, b=s0001, c=s0002, d=s0003
    baseline = [
        EvalResult("s0000", "x", 0.0),
        EvalResult("s0001", "x", 0.0),
        EvalResult("s0002", "x", 0.0),
        EvalResult("s0003", "ok", 1.0),
    ]
    frontier = [
        EvalResult("s0000", "x", 0.0),
        EvalResult("s0001", "ok", 1.0),
        EvalResult("s0002", "ok", 1.0),
        EvalResult("s0003", "ok", 1.0),
    ]
    failure_set = build_failure_set(baseline, frontier, samples)
    assert [c.sample.sample_id for c in failure_set.cases] == ["s0001", "s0002"]
    doubles = double_failures(baseline, frontier, samples)
    assert [c.sample.sample_id for c in doubles] == ["s0000"]


def test_build_failure_set_baseline_all_correct():
    samples = [make_sample(i) for i in range(3)]
    results = [EvalResult(s.sample_id, "ok", 1.0) for s in samples]
    failure_set = build_failure_set(results, results, samples)
    assert failure_set.cases == ()


def test_build_failure_set_requires_exact_scores():
    samples = [make_sample(0)]
    baseline = [EvalResult("s0000", "x", 0.0)]
    frontier = [EvalResult("s0000", "y", 0.667)]  # partial credit is not success
    assert build_failure_set(baseline, frontier, samples).cases == ()


def test_build_failure_set_coverage_mismatch_lists_ids():
    samples = [make_sample(i) for i in range(3)]
    baseline = [EvalResult(s.sample_id, "x", 0.0) for s in samples]
    frontier = baseline[:2]
    with pytest.raises(mining.MiningError) as err:
        build_failure_set(baseline, frontier, samples)
    assert "s0002" in str(err.value)


def test_build_failure_set_vizwiz_scale_counts():
    # VizWiz-shaped run: 20,523 samples with 7,785 scripted joint failures.
    n, n_mfs = 20_523, 7_785
    samples = [make_sample(i, benchmark="vizwiz") for i in range(n)]
    baseline, frontier = [], []
    for i, sample in enumerate(samples):
        joint = i < n_mfs
        baseline.append(EvalResult(sample.sample_id, "wrong" if joint else "ok", 0.0 if joint else 1.0))
        frontier.append(EvalResult(sample.sample_id, "ok", 1.0))
    failure_set = build_failure_set(baseline, frontier, samples)
    assert len(failure_set.cases) == n_mfs
    assert failure_set.source_split_size == n
    summary = mining_summary(failure_set, baseline, frontier)
    assert summary["n_mfs"] == n_mfs and summary["split_size"] == n


def test_failure_set_bounds_property():
    import random

    rng = random.Random(5)
    samples = [make_sample(i) for i in range(60)]
    baseline = [EvalResult(s.sample_id, "p", rng.choice([0.0, 1.0])) for s in samples]
    frontier = [EvalResult(s.sample_id, "p", rng.choice([0.0, 0.5, 1.0])) for s in samples]
    failure_set = build_failure_set(baseline, frontier, samples)
    n_baseline_fail = sum(1 for r in baseline if r.score == 0.0)
    n_frontier_success = sum(1 for r in frontier if r.score == 1.0)
    assert len(failure_set.cases) <= min(n_baseline_fail, n_frontier_success)


def test_failure_set_roundtrip(tmp_path):
    samples = [make_sample(i) for i in range(3)]
    baseline = [EvalResult(s.sample_id, "x", 0.0) for s in samples]
    frontier = [EvalResult(s.sample_id, "ok", 1.0) for s in samples]
    failure_set = build_failure_set(baseline, frontier, samples)
    path = tmp_path / "failures.jsonl"
    mining.write_failure_set(failure_set, path)
    loaded = mining.read_failure_set(path, "toy", len(samples))
    assert loaded == failure_set
