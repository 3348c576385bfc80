"""On-disk record formats, manifests, digests, and validation.

Every pipeline stage reads and writes records only through this module.
Records live in JSONL files (one record per line, UTF-8, snake_case keys);
manifests are single JSON documents that reference records by id + digest
rather than copying payloads, so stages can share immutable record files.

Digests are lowercase hex SHA-256 of canonical bytes (keys sorted, compact
separators, UTF-8). A manifest's digest covers its canonical body --
records, counts, lineage -- and deliberately excludes the created_at
timestamp so that re-running a stage from the same inputs reproduces the
same digest.

All domain types are frozen dataclasses: immutable after construction and
safe to share across threads. Manifest writers take an advisory file lock.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional, Sequence

try:
    import fcntl
except ImportError:  # non-POSIX: locking degrades to no-op
    fcntl = None

MANIFEST_SCHEMA = "failforge/manifest/v1"

KNOWN_BENCHMARKS = ("vizwiz", "infovqa", "scienceqa", "okvqa")

EXACT_SINGLE = "exact_single"
VQA_MULTI_REF = "vqa_multi_ref"
ANSWER_POLICIES = (EXACT_SINGLE, VQA_MULTI_REF)

# okvqa/vizwiz ship multiple reference answers; infovqa/scienceqa are single-answer.
DEFAULT_ANSWER_POLICY = {
    "vizwiz": VQA_MULTI_REF,
    "okvqa": VQA_MULTI_REF,
    "infovqa": EXACT_SINGLE,
    "scienceqa": EXACT_SINGLE,
}

METHOD_M1 = "m1_real_image"
METHOD_M2 = "m2_full_synthetic"
METHODS = (METHOD_M1, METHOD_M2)

DIVERSITY_MODES = ("similar_domain", "cross_domain")
FORMAT_CONSTRAINTS = ("free", "multiple_choice", "true_false", "unanswerable_allowed", "brief")

REAL_TAG = "real"
SYNTHETIC_TAG = "synthetic"


class SchemaError(ValueError):
    """Malformed record, manifest, or field value."""


class RecordValidationError(SchemaError):
    """Carries every violated constraint for one record."""

    def __init__(self, violations: Sequence[str]):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


class ManifestError(SchemaError):
    pass


class CorruptManifestError(ManifestError):
    """Stored digest does not match recomputed content digest."""


# ---------------------------------------------------------------------------
# Canonical serialization and digests
# ---------------------------------------------------------------------------


def canonical_bytes(obj: Any) -> bytes:
    """Canonical JSON encoding: sorted keys, compact separators, UTF-8."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def digest_of(obj: Any) -> str:
    return hashlib.sha256(canonical_bytes(obj)).hexdigest()


def digest_file(path: str | Path) -> str:
    hasher = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# Benchmark samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkSample:
    """One train-split item over which failures are mined."""

    sample_id: str
    benchmark: str
    image_ref: str
    question: str
    reference_answers: tuple[str, ...]
    answer_policy: str = ""
    image_deferred: bool = False

    def __post_init__(self):
        violations = _sample_violations(self)
        if violations:
            raise RecordValidationError(violations)
        if not self.answer_policy:
            default = DEFAULT_ANSWER_POLICY.get(self.benchmark, EXACT_SINGLE)
            object.__setattr__(self, "answer_policy", default)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "benchmark": self.benchmark,
            "image_ref": self.image_ref,
            "question": self.question,
            "reference_answers": list(self.reference_answers),
            "answer_policy": self.answer_policy,
            "image_deferred": self.image_deferred,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "BenchmarkSample":
        try:
            return cls(
                sample_id=str(row["sample_id"]),
                benchmark=str(row["benchmark"]),
                image_ref=str(row["image_ref"]),
                question=str(row["question"]),
                reference_answers=tuple(str(a) for a in row["reference_answers"]),
                answer_policy=str(row.get("answer_policy", "")),
                image_deferred=bool(row.get("image_deferred", False)),
            )
        except KeyError as exc:
            raise RecordValidationError([f"missing field {exc.args[0]!r}"]) from exc


def _sample_violations(s: BenchmarkSample) -> list[str]:
    out = []
    if not s.sample_id:
        out.append("sample_id empty")
    if not s.benchmark:
        out.append("benchmark empty")
    if not s.image_ref:
        out.append("image_ref empty")
    if not s.reference_answers:
        out.append("reference_answers empty")
    if s.answer_policy and s.answer_policy not in ANSWER_POLICIES:
        out.append(f"answer_policy {s.answer_policy!r} not in {ANSWER_POLICIES}")
    return out


def _looks_local(ref: str) -> bool:
    return "://" not in ref


def load_benchmark(path: str | Path, format: str = "jsonl", check_images: bool = False) -> list[BenchmarkSample]:
    """Load and validate a benchmark split.

    ``jsonl`` expects one sample per line; ``directory_layout`` expects one
    ``*.json`` file per sample, taken in sorted-filename order. File order is
    preserved. Errors name the offending line (or file) and field; a
    duplicate sample_id reports both occurrences.
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"benchmark path does not exist: {path}")

    if format == "jsonl":
        rows = _iter_jsonl_rows(path)
    elif format == "directory_layout":
        rows = _iter_directory_rows(path)
    else:
        raise SchemaError(f"unknown benchmark format {format!r}")

    samples: list[BenchmarkSample] = []
    seen: dict[str, str] = {}
    for where, row in rows:
        try:
            sample = BenchmarkSample.from_dict(row)
        except RecordValidationError as exc:
            raise SchemaError(f"{path}, {where}: {exc}") from exc
        if sample.sample_id in seen:
            raise SchemaError(
                f"{path}: duplicate sample_id {sample.sample_id!r} at {seen[sample.sample_id]} and {where}"
            )
        seen[sample.sample_id] = where
        if check_images and not sample.image_deferred and _looks_local(sample.image_ref):
            if not Path(sample.image_ref).exists():
                raise SchemaError(f"{path}, {where}: image_ref not resolvable: {sample.image_ref}")
        samples.append(sample)
    return samples


def _iter_jsonl_rows(path: Path) -> Iterator[tuple[str, dict]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}, line {lineno}: invalid JSON ({exc.msg})") from exc
            yield f"line {lineno}", row


def _iter_directory_rows(path: Path) -> Iterator[tuple[str, dict]]:
    for sample_file in sorted(path.glob("*.json")):
        try:
            row = json.loads(sample_file.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{sample_file}: invalid JSON ({exc.msg})") from exc
        yield sample_file.name, row


# ---------------------------------------------------------------------------
# Failure cases
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FailureCase:
    """A mined sample: baseline prediction/score plus frontier prediction/score."""

    sample: BenchmarkSample
    baseline_prediction: str
    baseline_score: float
    frontier_prediction: str
    frontier_score: float

    def __post_init__(self):
        for name in ("baseline_score", "frontier_score"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise SchemaError(f"{name} {value} outside [0,1]")

    @property
    def failure_id(self) -> str:
        return f"{self.sample.benchmark}/{self.sample.sample_id}"

    @property
    def is_mfs_member(self) -> bool:
        # Membership requires exactly 0.0 and exactly 1.0.
        return self.baseline_score == 0.0 and self.frontier_score == 1.0

    def to_dict(self) -> dict:
        return {
            "sample": self.sample.to_dict(),
            "baseline_prediction": self.baseline_prediction,
            "baseline_score": self.baseline_score,
            "frontier_prediction": self.frontier_prediction,
            "frontier_score": self.frontier_score,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "FailureCase":
        return cls(
            sample=BenchmarkSample.from_dict(row["sample"]),
            baseline_prediction=str(row["baseline_prediction"]),
            baseline_score=float(row["baseline_score"]),
            frontier_prediction=str(row["frontier_prediction"]),
            frontier_score=float(row["frontier_score"]),
        )


# ---------------------------------------------------------------------------
# Synthetic candidates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RealImage:
    image_ref: str

    @property
    def resolved(self) -> bool:
        return True

    def to_dict(self) -> dict:
        return {"type": "real", "image_ref": self.image_ref}


@dataclass(frozen=True)
class GeneratedImage:
    image_prompt: str
    guidance_scale: Optional[float] = None
    seed: Optional[int] = None
    image_ref: Optional[str] = None  # None while generation is pending

    @property
    def resolved(self) -> bool:
        return self.image_ref is not None

    def to_dict(self) -> dict:
        return {
            "type": "generated",
            "image_prompt": self.image_prompt,
            "guidance_scale": self.guidance_scale,
            "seed": self.seed,
            "image_ref": self.image_ref,
        }


ImageSource = RealImage | GeneratedImage


def image_source_from_dict(row: dict) -> ImageSource:
    kind = row.get("type")
    if kind == "real":
        return RealImage(image_ref=str(row["image_ref"]))
    if kind == "generated":
        return GeneratedImage(
            image_prompt=str(row["image_prompt"]),
            guidance_scale=None if row.get("guidance_scale") is None else float(row["guidance_scale"]),
            seed=None if row.get("seed") is None else int(row["seed"]),
            image_ref=None if row.get("image_ref") is None else str(row["image_ref"]),
        )
    raise RecordValidationError([f"image_source.type {kind!r} not in ('real', 'generated')"])


def candidate_identity(method: str, question: str, answer: str, image_source: ImageSource) -> str:
    """Content digest identifying a candidate: question + answer + image source.

    Pending generated sources hash the prompt only; resolved ones also hash
    guidance and seed, so sweep siblings get distinct ids.
    """
    if isinstance(image_source, RealImage):
        source_key: Any = {"real": image_source.image_ref}
    elif image_source.resolved:
        source_key = {
            "prompt": image_source.image_prompt,
            "guidance": image_source.guidance_scale,
            "seed": image_source.seed,
        }
    else:
        source_key = {"prompt": image_source.image_prompt}
    return digest_of({"method": method, "question": question, "answer": answer, "source": source_key})


@dataclass(frozen=True)
class SyntheticCandidate:
    """A proposed training sample with full provenance back to a mined failure."""

    candidate_id: str
    origin_failure: str  # "<benchmark>/<sample_id>"
    benchmark: str
    method: str
    question: str
    answer: str
    image_source: ImageSource
    diagnosis: str
    diversity_mode: str
    format_constraint: str

    def __post_init__(self):
        violations = candidate_violations(self)
        if violations:
            raise RecordValidationError(violations)

    @property
    def image_type(self) -> str:
        return REAL_TAG if isinstance(self.image_source, RealImage) else SYNTHETIC_TAG

    @property
    def resolved_image_ref(self) -> Optional[str]:
        if isinstance(self.image_source, RealImage):
            return self.image_source.image_ref
        return self.image_source.image_ref

    def to_dict(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "origin_failure": self.origin_failure,
            "benchmark": self.benchmark,
            "method": self.method,
            "question": self.question,
            "answer": self.answer,
            "image_source": self.image_source.to_dict(),
            "diagnosis": self.diagnosis,
            "diversity_mode": self.diversity_mode,
            "format_constraint": self.format_constraint,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "SyntheticCandidate":
        missing = [k for k in ("candidate_id", "origin_failure", "method", "question", "answer", "image_source") if k not in row]
        if missing:
            raise RecordValidationError([f"missing field {k!r}" for k in missing])
        return cls(
            candidate_id=str(row["candidate_id"]),
            origin_failure=str(row["origin_failure"]),
            benchmark=str(row.get("benchmark") or row["origin_failure"].split("/", 1)[0]),
            method=str(row["method"]),
            question=str(row["question"]),
            answer=str(row["answer"]),
            image_source=image_source_from_dict(dict(row["image_source"])),
            diagnosis=str(row.get("diagnosis", "")),
            diversity_mode=str(row.get("diversity_mode", "similar_domain")),
            format_constraint=str(row.get("format_constraint", "free")),
        )


def candidate_violations(c: SyntheticCandidate, origin: Optional[FailureCase] = None) -> list[str]:
    """Every violated candidate constraint; empty when valid.

    Pass the origin FailureCase to additionally check the m1 image binding.
    """
    out = []
    if not c.candidate_id:
        out.append("candidate_id empty")
    if c.method not in METHODS:
        out.append(f"method {c.method!r} not in {METHODS}")
    if not c.question:
        out.append("question empty")
    if not c.answer:
        out.append("answer empty")
    if not c.diagnosis:
        out.append("diagnosis empty")
    if c.diversity_mode not in DIVERSITY_MODES:
        out.append(f"diversity_mode {c.diversity_mode!r} not in {DIVERSITY_MODES}")
    if c.format_constraint not in FORMAT_CONSTRAINTS:
        out.append(f"format_constraint {c.format_constraint!r} not in {FORMAT_CONSTRAINTS}")
    if c.method == METHOD_M1 and not isinstance(c.image_source, RealImage):
        out.append("m1 candidate requires a real image_source")
    if c.method == METHOD_M2 and not isinstance(c.image_source, GeneratedImage):
        out.append("m2 candidate requires a generated image_source")
    if origin is not None and c.method == METHOD_M1 and isinstance(c.image_source, RealImage):
        if c.image_source.image_ref != origin.sample.image_ref:
            out.append("m1 image mismatch: image_ref differs from origin failure's image_ref")
    return out


def make_candidate(
    origin: FailureCase,
    method: str,
    question: str,
    answer: str,
    image_source: ImageSource,
    diagnosis: str,
    diversity_mode: str,
    format_constraint: str,
) -> SyntheticCandidate:
    return SyntheticCandidate(
        candidate_id=candidate_identity(method, question, answer, image_source),
        origin_failure=origin.failure_id,
        benchmark=origin.sample.benchmark,
        method=method,
        question=question,
        answer=answer,
        image_source=image_source,
        diagnosis=diagnosis,
        diversity_mode=diversity_mode,
        format_constraint=format_constraint,
    )


def resolve_generated(candidate: SyntheticCandidate, guidance_scale: float, seed: int, image_ref: str) -> SyntheticCandidate:
    """Clone a pending m2 candidate with its generated artifact bound.

    The candidate_id is re-derived to include guidance and seed so sweep
    siblings stay distinct.
    """
    if not isinstance(candidate.image_source, GeneratedImage):
        raise SchemaError(f"candidate {candidate.candidate_id} is not m2/generated")
    source = GeneratedImage(
        image_prompt=candidate.image_source.image_prompt,
        guidance_scale=guidance_scale,
        seed=seed,
        image_ref=image_ref,
    )
    return replace(
        candidate,
        candidate_id=candidate_identity(candidate.method, candidate.question, candidate.answer, source),
        image_source=source,
    )


def validate_record(raw: str | dict) -> SyntheticCandidate:
    """Parse + validate one candidate record.

    Raises RecordValidationError carrying every violated constraint; callers
    iterating a batch catch per record rather than aborting the batch.
    """
    if isinstance(raw, str):
        try:
            row = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise RecordValidationError([f"invalid JSON: {exc.msg}"]) from exc
    else:
        row = raw
    violations = []
    if not isinstance(row, dict):
        raise RecordValidationError(["record is not an object"])
    if row.get("method") == METHOD_M2:
        source = row.get("image_source") or {}
        if source.get("type") == "generated" and source.get("image_ref") is not None:
            for fld in ("guidance_scale", "seed"):
                if source.get(fld) is None:
                    violations.append(f"resolved generated image_source missing {fld!r}")
    try:
        candidate = SyntheticCandidate.from_dict(row)
    except RecordValidationError as exc:
        raise RecordValidationError(violations + exc.violations) from exc
    if violations:
        raise RecordValidationError(violations)
    return candidate


def validate_records(rows: Iterable[str | dict]) -> tuple[list[SyntheticCandidate], list[tuple[int, list[str]]]]:
    """Validate a batch; never aborts on a single bad record.

    Returns (candidates, [(index, violations), ...]).
    """
    good: list[SyntheticCandidate] = []
    bad: list[tuple[int, list[str]]] = []
    for i, raw in enumerate(rows):
        try:
            good.append(validate_record(raw))
        except RecordValidationError as exc:
            bad.append((i, exc.violations))
    return good, bad


# ---------------------------------------------------------------------------
# Instruction records (the exported training unit)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InstructionRecord:
    """A single-turn question/answer training record bound to an image."""

    record_id: str
    tag: str  # real | synthetic
    image: str
    question: str
    answer: str
    benchmark: Optional[str] = None

    def content_digest(self) -> str:
        # Covers exactly the exported fields, so a re-imported record rehashes equal.
        return digest_of(
            {"record_id": self.record_id, "image": self.image, "question": self.question, "answer": self.answer}
        )

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "tag": self.tag,
            "image": self.image,
            "question": self.question,
            "answer": self.answer,
            "benchmark": self.benchmark,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "InstructionRecord":
        return cls(
            record_id=str(row["record_id"]),
            tag=str(row.get("tag", REAL_TAG)),
            image=str(row["image"]),
            question=str(row["question"]),
            answer=str(row["answer"]),
            benchmark=row.get("benchmark"),
        )


def record_from_candidate(candidate: SyntheticCandidate) -> InstructionRecord:
    ref = candidate.resolved_image_ref
    if ref is None:
        raise SchemaError(f"candidate {candidate.candidate_id} has a pending image")
    return InstructionRecord(
        record_id=candidate.candidate_id,
        tag=SYNTHETIC_TAG,
        image=ref,
        question=candidate.question,
        answer=candidate.answer,
        benchmark=candidate.benchmark,
    )


def record_from_sample(sample: BenchmarkSample) -> InstructionRecord:
    return InstructionRecord(
        record_id=f"{sample.benchmark}/{sample.sample_id}",
        tag=REAL_TAG,
        image=sample.image_ref,
        question=sample.question,
        answer=sample.reference_answers[0],
        benchmark=sample.benchmark,
    )


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RecordRef:
    """Manifest entry: a reference to a record, never a payload copy."""

    record_id: str
    tag: str
    digest: Optional[str] = None
    benchmark: Optional[str] = None
    path: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "tag": self.tag,
            "digest": self.digest,
            "benchmark": self.benchmark,
            "path": self.path,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "RecordRef":
        return cls(
            record_id=str(row["record_id"]),
            tag=str(row["tag"]),
            digest=row.get("digest"),
            benchmark=row.get("benchmark"),
            path=row.get("path"),
        )


def ref_for_record(record: InstructionRecord, path: Optional[str] = None) -> RecordRef:
    return RecordRef(
        record_id=record.record_id,
        tag=record.tag,
        digest=record.content_digest(),
        benchmark=record.benchmark,
        path=path,
    )


@dataclass(frozen=True)
class LineageEntry:
    stage: str
    inputs: tuple[str, ...]
    config: str

    def to_dict(self) -> dict:
        return {"stage": self.stage, "inputs": list(self.inputs), "config": self.config}

    @classmethod
    def from_dict(cls, row: dict) -> "LineageEntry":
        return cls(stage=str(row["stage"]), inputs=tuple(row.get("inputs", ())), config=str(row.get("config", "")))


@dataclass(frozen=True)
class DatasetManifest:
    """An ordered, deduplicated record-reference set with counts and lineage."""

    records: tuple[RecordRef, ...]
    n_total: int
    n_synthetic: int
    lineage: tuple[LineageEntry, ...] = ()
    created_at: str = field(default_factory=utc_now)

    @classmethod
    def build(
        cls,
        records: Sequence[RecordRef],
        lineage: Sequence[LineageEntry] = (),
        created_at: Optional[str] = None,
    ) -> "DatasetManifest":
        records = tuple(records)
        return cls(
            records=records,
            n_total=len(records),
            n_synthetic=sum(1 for r in records if r.tag == SYNTHETIC_TAG),
            lineage=tuple(lineage),
            created_at=created_at or utc_now(),
        )

    def violations(self) -> list[str]:
        out = []
        if self.n_total != len(self.records):
            out.append(f"n_total {self.n_total} != |records| {len(self.records)}")
        n_syn = sum(1 for r in self.records if r.tag == SYNTHETIC_TAG)
        if self.n_synthetic != n_syn:
            out.append(f"n_synthetic {self.n_synthetic} != synthetic-tagged count {n_syn}")
        if self.n_synthetic > self.n_total:
            out.append("n_synthetic > n_total")
        seen: set[str] = set()
        for r in self.records:
            if r.record_id in seen:
                out.append(f"duplicate record_id {r.record_id!r}")
                break
            seen.add(r.record_id)
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ManifestError("; ".join(problems))

    def content_digest(self) -> str:
        """Digest of the canonical body (records, counts, lineage); created_at excluded."""
        cached = getattr(self, "_digest", None)
        if cached is not None:
            return cached
        body = {
            "n_total": self.n_total,
            "n_synthetic": self.n_synthetic,
            "lineage": [e.to_dict() for e in self.lineage],
            "records": [r.to_dict() for r in self.records],
        }
        value = hashlib.sha256(canonical_bytes(body)).hexdigest()
        object.__setattr__(self, "_digest", value)
        return value

    def with_lineage(self, entry: LineageEntry) -> "DatasetManifest":
        return DatasetManifest(
            records=self.records,
            n_total=self.n_total,
            n_synthetic=self.n_synthetic,
            lineage=self.lineage + (entry,),
            created_at=utc_now(),
        )

    def to_dict(self) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "created_at": self.created_at,
            "n_total": self.n_total,
            "n_synthetic": self.n_synthetic,
            "lineage": [e.to_dict() for e in self.lineage],
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, row: dict) -> "DatasetManifest":
        return cls(
            records=tuple(RecordRef.from_dict(r) for r in row["records"]),
            n_total=int(row["n_total"]),
            n_synthetic=int(row["n_synthetic"]),
            lineage=tuple(LineageEntry.from_dict(e) for e in row.get("lineage", ())),
            created_at=str(row.get("created_at", "")),
        )


class _FileLock:
    """Advisory exclusive lock on <path>.lock for manifest writers."""

    def __init__(self, path: Path):
        self._lock_path = Path(str(path) + ".lock")
        self._fd: Optional[int] = None

    def __enter__(self):
        self._fd = os.open(self._lock_path, os.O_CREAT | os.O_RDWR)
        if fcntl is not None:
            fcntl.flock(self._fd, fcntl.LOCK_EX)
        return self

    def __exit__(self, *exc):
        if self._fd is not None:
            if fcntl is not None:
                fcntl.flock(self._fd, fcntl.LOCK_UN)
            os.close(self._fd)
            self._fd = None
        return False


def write_manifest(manifest: DatasetManifest, path: str | Path) -> str:
    """Validate, then atomically write the manifest JSON; returns its digest.

    An invariant violation rejects the write before any bytes are written.
    """
    manifest.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = manifest.to_dict()
    body["digest"] = manifest.content_digest()
    tmp = path.with_name(path.name + ".tmp")
    with _FileLock(path):
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(body, f, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        os.replace(tmp, path)
    return body["digest"]


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        row = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    manifest = DatasetManifest.from_dict(row)
    stored = row.get("digest")
    actual = manifest.content_digest()
    if stored != actual:
        raise CorruptManifestError(f"{path}: stored digest {stored} != content digest {actual}")
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# JSONL helpers
# ---------------------------------------------------------------------------


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> str:
    """Write rows as canonical JSONL; returns the file digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, separators=(",", ":"), ensure_ascii=False))
            f.write("\n")
    os.replace(tmp, path)
    return digest_file(path)


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(json.loads(line))
    return out


def append_jsonl(path: str | Path, row: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps(row, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n"
    with open(path, "a", encoding="utf-8") as f:
        f.write(line)  # single buffered write: concurrent appenders stay line-atomic
        f.flush()
