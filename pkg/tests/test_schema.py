import json

import pytest

from failforge import schema

from conftest import make_candidate, make_failure, make_sample


# ---------------------------------------------------------------------------
# load_benchmark
# ---------------------------------------------------------------------------


def _sample_row(sample_id, **over):
    row = {
        "sample_id": sample_id,
        "benchmark": "toy",
        "image_ref": f"fixture://toy/{sample_id}.jpg",
        "question": f"q {sample_id}?",
        "reference_answers": ["yes"],
    }
    row.update(over)
    return row


def test_load_benchmark_identity_order(tmp_path):
    path = tmp_path / "bench.jsonl"
    path.write_text("\n".join(json.dumps(_sample_row(i)) for i in ("a", "b", "c")) + "\n")
    samples = schema.load_benchmark(path)
    assert [s.sample_id for s in samples] == ["a", "b", "c"]


def test_load_benchmark_duplicate_cites_both_lines(tmp_path):
    path = tmp_path / "bench.jsonl"
    rows = [_sample_row("a"), _sample_row("b"), _sample_row("a")]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    with pytest.raises(schema.SchemaError) as err:
        schema.load_benchmark(path)
    message = str(err.value)
    assert "duplicate" in message and "'a'" in message
    assert "line 1" in message and "line 3" in message


def test_load_benchmark_malformed_names_line_and_field(tmp_path):
    path = tmp_path / "bench.jsonl"
    rows = [_sample_row("a"), {"sample_id": "b", "benchmark": "toy"}]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    with pytest.raises(schema.SchemaError) as err:
        schema.load_benchmark(path)
    assert "line 2" in str(err.value) and "image_ref" in str(err.value)


def test_load_benchmark_okvqa_scale(tmp_path):
    # OK-VQA's train split carries 9,009 samples; identity load keeps them all.
    path = tmp_path / "okvqa.jsonl"
    with open(path, "w") as f:
        for i in range(9009):
            f.write(json.dumps(_sample_row(f"q{i}", benchmark="okvqa", reference_answers=["a"] * 10)) + "\n")
    samples = schema.load_benchmark(path)
    assert len(samples) == 9009
    assert samples[0].answer_policy == schema.VQA_MULTI_REF


def test_load_benchmark_directory_layout(tmp_path):
    directory = tmp_path / "bench"
    directory.mkdir()
    for sample_id in ("b", "a"):
        (directory / f"{sample_id}.json").write_text(json.dumps(_sample_row(sample_id)))
    samples = schema.load_benchmark(directory, format="directory_layout")
    assert [s.sample_id for s in samples] == ["a", "b"]  # sorted filename order


def test_default_answer_policy_per_benchmark():
    assert make_sample(0, benchmark="toy").answer_policy == schema.EXACT_SINGLE
    row = _sample_row("x", benchmark="vizwiz")
    assert schema.BenchmarkSample.from_dict(row).answer_policy == schema.VQA_MULTI_REF
    row = _sample_row("x", benchmark="infovqa")
    assert schema.BenchmarkSample.from_dict(row).answer_policy == schema.EXACT_SINGLE


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def _refs(n_real, n_syn, path=None):
    refs = [schema.RecordRef(record_id=f"r{i}", tag=schema.REAL_TAG, path=path) for i in range(n_real)]
    refs += [schema.RecordRef(record_id=f"s{i}", tag=schema.SYNTHETIC_TAG, path=path) for i in range(n_syn)]
    return refs


def test_manifest_roundtrip_empty(tmp_path):
    manifest = schema.DatasetManifest.build(())
    path = tmp_path / "m.json"
    digest = schema.write_manifest(manifest, path)
    loaded = schema.read_manifest(path)
    assert loaded.n_total == 0 and loaded.n_synthetic == 0
    assert loaded == manifest
    assert loaded.content_digest() == digest


def test_manifest_roundtrip_counts(tmp_path):
    manifest = schema.DatasetManifest.build(_refs(5, 2))
    path = tmp_path / "m.json"
    schema.write_manifest(manifest, path)
    loaded = schema.read_manifest(path)
    assert (loaded.n_total, loaded.n_synthetic) == (7, 2)
    assert loaded == manifest


def test_manifest_digest_deterministic(tmp_path):
    manifest = schema.DatasetManifest.build(_refs(3, 1), created_at="2026-01-01T00:00:00+00:00")
    d1 = schema.write_manifest(manifest, tmp_path / "m1.json")
    d2 = schema.write_manifest(manifest, tmp_path / "m2.json")
    assert d1 == d2
    # created_at is volatile and excluded from the digest
    later = schema.DatasetManifest.build(_refs(3, 1), created_at="2027-02-02T00:00:00+00:00")
    assert later.content_digest() == manifest.content_digest()


def test_manifest_invariant_violation_rejected_before_write(tmp_path):
    bad = schema.DatasetManifest(records=tuple(_refs(2, 0)), n_total=5, n_synthetic=0)
    path = tmp_path / "m.json"
    with pytest.raises(schema.ManifestError):
        schema.write_manifest(bad, path)
    assert not path.exists()


def test_manifest_duplicate_records_rejected():
    refs = _refs(1, 0) + _refs(1, 0)
    with pytest.raises(schema.ManifestError, match="duplicate"):
        schema.DatasetManifest.build(refs).validate()


def test_manifest_corruption_detected(tmp_path):
    manifest = schema.DatasetManifest.build(_refs(2, 1))
    path = tmp_path / "m.json"
    schema.write_manifest(manifest, path)
    body = json.loads(path.read_text())
    body["n_synthetic"] = 0
    body["records"][-1]["tag"] = schema.REAL_TAG
    path.write_text(json.dumps(body))
    with pytest.raises(schema.CorruptManifestError):
        schema.read_manifest(path)


def test_counts_recomputable_property():
    import random

    rng = random.Random(7)
    for _ in range(50):
        n_real, n_syn = rng.randrange(0, 30), rng.randrange(0, 30)
        manifest = schema.DatasetManifest.build(_refs(n_real, n_syn))
        assert manifest.n_total == len(manifest.records)
        assert manifest.n_synthetic == sum(1 for r in manifest.records if r.tag == schema.SYNTHETIC_TAG)
        assert not manifest.violations()


def test_digest_key_order_normalized():
    assert schema.digest_of({"a": 1, "b": 2}) == schema.digest_of({"b": 2, "a": 1})


# ---------------------------------------------------------------------------
# validate_record
# ---------------------------------------------------------------------------


def test_validate_record_m1_image_mismatch():
    candidate = make_candidate(0, method=schema.METHOD_M1)
    violations = schema.candidate_violations(candidate, origin=make_failure(1))
    assert any("m1 image mismatch" in v for v in violations)
    assert not schema.candidate_violations(candidate, origin=make_failure(0))


def test_validate_record_m2_missing_guidance_names_field():
    row = make_candidate(0, method=schema.METHOD_M2, resolved=True).to_dict()
    del row["image_source"]["guidance_scale"]
    row["image_source"]["guidance_scale"] = None
    with pytest.raises(schema.RecordValidationError) as err:
        schema.validate_record(row)
    assert "guidance_scale" in str(err.value)


def test_validate_record_wellformed_identity():
    candidate = make_candidate(3, method=schema.METHOD_M2, resolved=True)
    parsed = schema.validate_record(json.dumps(candidate.to_dict()))
    assert parsed == candidate


def test_validate_record_accumulates_all_violations():
    row = make_candidate(0, method=schema.METHOD_M2).to_dict()
    row["question"] = ""
    row["diagnosis"] = ""
    row["diversity_mode"] = "nope"
    with pytest.raises(schema.RecordValidationError) as err:
        schema.validate_record(row)
    assert len(err.value.violations) >= 3


def test_validate_records_never_aborts_batch():
    good = make_candidate(1).to_dict()
    bad = make_candidate(2).to_dict()
    bad["answer"] = ""
    candidates, errors = schema.validate_records([good, bad, "not json"])
    assert len(candidates) == 1
    assert [index for index, _ in errors] == [1, 2]


def test_candidate_identity_distinguishes_resolved_siblings():
    pending = make_candidate(0, resolved=False)
    a = schema.resolve_generated(pending, guidance_scale=3.0, seed=1, image_ref="x.png")
    b = schema.resolve_generated(pending, guidance_scale=4.0, seed=1, image_ref="y.png")
    assert a.candidate_id != b.candidate_id != pending.candidate_id
