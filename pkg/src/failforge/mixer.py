"""Training-manifest construction: augmentation, substitution, real-data
equivalents, and instruction-format export.

All sampling is seeded and without replacement; pooled synthetic data is
sampled stratified by source benchmark, proportional to pool sizes. Augment
grows the base by exactly n_syn records; substitute replaces n base records
in place, preserving total size.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import schema
from .mining import SHORT_ANSWER_INSTRUCTION

logger = logging.getLogger(__name__)


class MixerError(ValueError):
    pass


def _seeded_rng(seed: int, *scope: str) -> random.Random:
    raw = hashlib.sha256(f"{seed}:{':'.join(scope)}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(raw[:8], "big"))


def _stratified_sample(refs: Sequence[schema.RecordRef], n: int, seed: int) -> list[schema.RecordRef]:
    """Seeded sample without replacement, stratified by source benchmark.

    Strata get proportional allocations (largest remainder), so pooled
    synthetic data mixes in the pool-size ratio.
    """
    if n > len(refs):
        raise MixerError(f"cannot sample {n} from {len(refs)} records")
    if n == len(refs):
        return list(refs)
    strata: "OrderedDict[str, list[schema.RecordRef]]" = OrderedDict()
    for ref in refs:
        strata.setdefault(ref.benchmark or "_", []).append(ref)
    if len(strata) == 1:
        only = next(iter(strata))
        return _seeded_rng(seed, "sample", only).sample(strata[only], n)

    total = len(refs)
    quotas = {name: n * len(pool) / total for name, pool in strata.items()}
    counts = {name: int(q) for name, q in quotas.items()}
    leftover = n - sum(counts.values())
    for name in sorted(strata, key=lambda s: (-(quotas[s] - counts[s]), s))[:leftover]:
        counts[name] += 1
    out: list[schema.RecordRef] = []
    for name, pool in strata.items():
        take = min(counts[name], len(pool))
        out.extend(_seeded_rng(seed, "sample", name).sample(pool, take))
    # rounding against small strata can leave a shortfall; top up uniformly
    if len(out) < n:
        chosen = {r.record_id for r in out}
        rest = [r for r in refs if r.record_id not in chosen]
        out.extend(_seeded_rng(seed, "topup").sample(rest, n - len(out)))
    return out


def augment(base: schema.DatasetManifest, syn: schema.DatasetManifest, n_syn: int, seed: int) -> schema.DatasetManifest:
    """base + n_syn seeded-sampled synthetic records, order shuffled by seed."""
    if n_syn > syn.n_total:
        raise MixerError(f"n_syn {n_syn} exceeds available synthetic records {syn.n_total}")
    picked = _stratified_sample(syn.records, n_syn, seed)
    combined = list(base.records) + picked
    _seeded_rng(seed, "shuffle").shuffle(combined)
    lineage = base.lineage + (
        schema.LineageEntry(
            stage="augment",
            inputs=(base.content_digest(), syn.content_digest()),
            config=schema.digest_of({"op": "augment", "n_syn": n_syn, "seed": seed}),
        ),
    )
    result = schema.DatasetManifest.build(combined, lineage=lineage)
    if result.n_total != base.n_total + n_syn:
        raise MixerError(f"augment arithmetic violated: {result.n_total} != {base.n_total} + {n_syn}")
    return result


def substitute(base: schema.DatasetManifest, syn: schema.DatasetManifest, n: int, seed: int) -> schema.DatasetManifest:
    """Replace n seeded-uniform base records with synthetic ones; size preserved."""
    if n > base.n_total or n > syn.n_total:
        raise MixerError(
            f"substitute n={n} exceeds base ({base.n_total}) or synthetic ({syn.n_total}) records"
        )
    removal = set(_seeded_rng(seed, "remove").sample(range(base.n_total), n))
    incoming = iter(_stratified_sample(syn.records, n, seed))
    records = [next(incoming) if i in removal else ref for i, ref in enumerate(base.records)]
    lineage = base.lineage + (
        schema.LineageEntry(
            stage="substitute",
            inputs=(base.content_digest(), syn.content_digest()),
            config=schema.digest_of({"op": "substitute", "n": n, "seed": seed}),
        ),
    )
    result = schema.DatasetManifest.build(records, lineage=lineage)
    if result.n_total != base.n_total:
        raise MixerError(f"substitute must preserve n_total ({result.n_total} != {base.n_total})")
    return result


def sample_real_equivalent(
    benchmark_train: Sequence[schema.BenchmarkSample],
    n: int,
    seed: int,
    records_path: Optional[str | Path] = None,
) -> schema.DatasetManifest:
    """Seeded uniform sample of train-split items as real-tagged instruction records.

    Enables the real-data comparison arm. When records_path is given the
    sampled records are materialized there (JSONL) and the manifest
    references that file.
    """
    if n > len(benchmark_train):
        raise MixerError(f"cannot sample {n} from {len(benchmark_train)} train samples")
    picked = _seeded_rng(seed, "real").sample(list(benchmark_train), n)
    records = [schema.record_from_sample(s) for s in picked]
    path_str = None
    if records_path is not None:
        schema.write_jsonl(records_path, (r.to_dict() for r in records))
        path_str = str(records_path)
    refs = [schema.ref_for_record(r, path=path_str) for r in records]
    lineage = (
        schema.LineageEntry(
            stage="sample_real_equivalent",
            inputs=(),
            config=schema.digest_of({"op": "sample_real_equivalent", "n": n, "seed": seed}),
        ),
    )
    return schema.DatasetManifest.build(refs, lineage=lineage)


# ---------------------------------------------------------------------------
# Record resolution and export
# ---------------------------------------------------------------------------


def load_records_file(path: str | Path) -> dict[str, schema.InstructionRecord]:
    """Load a record file; candidate rows are converted to instruction records."""
    out: dict[str, schema.InstructionRecord] = {}
    for row in schema.read_jsonl(path):
        if "candidate_id" in row:
            candidate = schema.SyntheticCandidate.from_dict(row)
            record = schema.record_from_candidate(candidate)
        else:
            record = schema.InstructionRecord.from_dict(row)
        out[record.record_id] = record
    return out


def resolve_records(
    manifest: schema.DatasetManifest,
    extra: Optional[dict[str, schema.InstructionRecord]] = None,
) -> list[schema.InstructionRecord]:
    """Resolve every manifest reference to its record payload, manifest order.

    References resolve against their recorded file path (each file read
    once) or the extra mapping. Unresolvable references error, listing ids.
    """
    by_path: dict[str, dict[str, schema.InstructionRecord]] = {}
    records: list[schema.InstructionRecord] = []
    missing: list[str] = []
    for ref in manifest.records:
        record = None
        if extra and ref.record_id in extra:
            record = extra[ref.record_id]
        elif ref.path:
            if ref.path not in by_path:
                by_path[ref.path] = load_records_file(ref.path)
            record = by_path[ref.path].get(ref.record_id)
        if record is None:
            missing.append(ref.record_id)
        else:
            records.append(record)
    if missing:
        raise MixerError(f"{len(missing)} unresolved records: {missing[:10]}")
    return records


def conversation_object(record: schema.InstructionRecord, instruction_suffix: str = SHORT_ANSWER_INSTRUCTION) -> dict:
    return {
        "id": record.record_id,
        "image": record.image,
        "conversations": [
            {"from": "human", "value": f"{record.question}\n{instruction_suffix}"},
            {"from": "gpt", "value": record.answer},
        ],
    }


def export_instruction_format(
    manifest: schema.DatasetManifest,
    out: str | Path,
    extra_records: Optional[dict[str, schema.InstructionRecord]] = None,
    jsonl: bool = False,
    instruction_suffix: str = SHORT_ANSWER_INSTRUCTION,
) -> str:
    """Emit one single-turn conversation object per record; returns the file digest.

    Every record needs a resolved image locator; ordering follows the
    manifest. The JSON-array form is default; jsonl=True writes one object
    per line.
    """
    manifest.validate()
    records = resolve_records(manifest, extra=extra_records)
    unresolved = [r.record_id for r in records if not r.image]
    if unresolved:
        raise MixerError(f"records without a resolved image: {unresolved[:10]}")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    objects = (conversation_object(r, instruction_suffix) for r in records)
    tmp = out.with_name(out.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        if jsonl:
            for obj in objects:
                f.write(json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False))
                f.write("\n")
        else:
            f.write("[")
            for i, obj in enumerate(objects):
                if i:
                    f.write(",")
                f.write(json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False))
            f.write("]")
    os.replace(tmp, out)
    return schema.digest_file(out)


def import_instruction_export(path: str | Path, instruction_suffix: str = SHORT_ANSWER_INSTRUCTION) -> list[schema.InstructionRecord]:
    """Read an exported file back into records (tags are not round-tripped)."""
    path = Path(path)
    if path.suffix == ".jsonl":
        rows = schema.read_jsonl(path)
    else:
        text = path.read_text(encoding="utf-8")
        rows = json.loads(text) if text.strip() else []
    suffix = f"\n{instruction_suffix}"
    records = []
    for row in rows:
        human = next(t["value"] for t in row["conversations"] if t["from"] == "human")
        answer = next(t["value"] for t in row["conversations"] if t["from"] == "gpt")
        question = human[: -len(suffix)] if human.endswith(suffix) else human
        records.append(
            schema.InstructionRecord(
                record_id=str(row["id"]),
                tag=schema.REAL_TAG,
                image=str(row["image"]),
                question=question,
                answer=answer,
            )
        )
    return records


def base_manifest_from_instruction_json(
    path: str | Path,
    records_path: str | Path,
    instruction_suffix: str = SHORT_ANSWER_INSTRUCTION,
) -> schema.DatasetManifest:
    """Build a real-tagged base manifest from a user-supplied instruction JSON."""
    records = import_instruction_export(path, instruction_suffix)
    schema.write_jsonl(records_path, (r.to_dict() for r in records))
    refs = [schema.ref_for_record(r, path=str(records_path)) for r in records]
    lineage = (
        schema.LineageEntry(stage="base_import", inputs=(schema.digest_file(path),), config=""),
    )
    return schema.DatasetManifest.build(refs, lineage=lineage)
