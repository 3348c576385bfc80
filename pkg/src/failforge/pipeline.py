"""Checkpointed pipeline stages over a run directory.

Stage order: mine -> generate -> images -> filter -> cluster -> mix ->
export. Each stage validates its upstream artifacts, executes, and appends a
checkpoint record {stage, input digests, config digest, output digests,
ledger snapshot}. Re-running a completed stage with identical digests is a
no-op; resume continues from the first incomplete stage, and partially
generated/judged items are picked up from per-item progress ledgers (the
response cache makes redone work free).

The run directory is append-only: no stage mutates another stage's outputs.
Checkpoint output digests are content digests (file bytes for JSONL/JSON
artifacts, the canonical body digest for manifests), so a straight run and
an interrupted-then-resumed run report identical digests.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

from . import generation, imaging, judge, mining, mixer, schema, taxonomy
from .backends import BackendSet, build_backends
from .scoring import ScorePolicy

try:
    import fcntl
except ImportError:
    fcntl = None

logger = logging.getLogger(__name__)

STAGE_ORDER = ("mine", "generate", "images", "filter", "cluster", "mix", "export")

# Per-benchmark method routing defaults (custom benchmarks default to m1).
DEFAULT_ROUTING = {
    "infovqa": ("m1",),
    "scienceqa": ("m1",),
    "okvqa": ("m2",),
    "vizwiz": ("m1", "m2"),
}

METHOD_BY_SHORT = {"m1": schema.METHOD_M1, "m2": schema.METHOD_M2}


class ConfigError(ValueError):
    """Config schema violation; reported with the offending path."""


class MissingInputError(RuntimeError):
    """An upstream artifact is missing; names the stage to run first."""

    def __init__(self, message: str, needed_stage: str):
        super().__init__(message)
        self.needed_stage = needed_stage


class CheckpointError(RuntimeError):
    pass


class LockedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

_SECTION_DEFAULTS = {
    "mining": {"max_failure_rate": 0.0, "max_workers": 4},
    "generation": {
        "n_examples_per_failure": 10,
        "rounds": 1,
        "diversity_mode": "similar_domain",
        "format_constraint": "free",
        "parse_retries": 2,
        "max_workers": 4,
    },
    "imaging": {"guidance_lo": 3.0, "guidance_hi": 13.0, "n_guidance": 10, "resolution": 1024, "max_workers": 4},
    "judge": {"keep_threshold": 3, "max_workers": 4},
    "taxonomy": {"k": 8, "seed": 0, "label_sample_size": 5},
    "mixer": {"mode": "augment", "n_syn": None, "seed": 0, "base_manifest": None, "base_instruction_json": None},
    "export": {"format": "json", "filename": "dataset.json"},
}


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate_config(raw)


def validate_config(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be an object")
    config = dict(raw)
    benchmarks = config.get("benchmarks")
    if not isinstance(benchmarks, list) or not benchmarks:
        raise ConfigError("config: benchmarks must be a non-empty array")
    for i, entry in enumerate(benchmarks):
        if not isinstance(entry, dict):
            raise ConfigError(f"config: benchmarks[{i}] must be an object")
        for key in ("name", "path"):
            if not entry.get(key):
                raise ConfigError(f"config: benchmarks[{i}].{key} is required")
        fmt = entry.get("format", "jsonl")
        if fmt not in ("jsonl", "directory_layout"):
            raise ConfigError(f"config: benchmarks[{i}].format {fmt!r} invalid")
        for m in entry.get("methods", ()):
            if m not in METHOD_BY_SHORT:
                raise ConfigError(f"config: benchmarks[{i}].methods entry {m!r} invalid (use m1|m2)")
    if not isinstance(config.get("backends", {}), dict):
        raise ConfigError("config: backends must be an object")
    for section, defaults in _SECTION_DEFAULTS.items():
        merged = dict(defaults)
        user = config.get(section, {})
        if not isinstance(user, dict):
            raise ConfigError(f"config: {section} must be an object")
        merged.update(user)
        config[section] = merged
    if config["mixer"]["mode"] not in ("augment", "substitute"):
        raise ConfigError("config: mixer.mode must be augment|substitute")
    if config["export"]["format"] not in ("json", "jsonl"):
        raise ConfigError("config: export.format must be json|jsonl")
    gen = config["generation"]
    try:
        generation.GenerationConfig(
            method=schema.METHOD_M1,
            n_examples_per_failure=int(gen["n_examples_per_failure"]),
            diversity_mode=gen["diversity_mode"],
            format_constraint=gen["format_constraint"],
            rounds=int(gen["rounds"]),
        )
    except ValueError as exc:
        raise ConfigError(f"config: generation: {exc}") from exc
    return config


def benchmark_methods(entry: dict) -> tuple[str, ...]:
    if "methods" in entry:
        return tuple(entry["methods"])
    return DEFAULT_ROUTING.get(entry["name"], ("m1",))


# ---------------------------------------------------------------------------
# Run directory, checkpoints, lock
# ---------------------------------------------------------------------------


@dataclass
class StageContext:
    config: dict
    run_dir: Path
    backends: BackendSet
    benchmark_filter: Optional[str] = None

    def benchmarks(self) -> list[dict]:
        entries = self.config["benchmarks"]
        if self.benchmark_filter:
            entries = [e for e in entries if e["name"] == self.benchmark_filter]
        return entries

    def path(self, *parts: str) -> Path:
        return self.run_dir.joinpath(*parts)


def make_context(config: dict, run_dir: str | Path, benchmark: Optional[str] = None,
                 transport=None) -> StageContext:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    backends_cfg = config.get("backends", {})
    cache_dir = backends_cfg.get("cache_dir") or run_dir / "cache"
    backend_set = build_backends(backends_cfg, cache_dir=cache_dir, images_dir=run_dir / "images",
                                 transport=transport)
    return StageContext(config=config, run_dir=run_dir, backends=backend_set, benchmark_filter=benchmark)


def checkpoint_path(run_dir: Path) -> Path:
    return run_dir / "checkpoints.jsonl"


def read_checkpoints(run_dir: Path) -> list[dict]:
    path = checkpoint_path(run_dir)
    if not path.exists():
        return []
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CheckpointError(
                    f"checkpoint log corrupted at line {lineno} of {path}: {exc.msg}. "
                    f"Repair hint: delete that line (or the whole file) to re-run the affected stages."
                ) from exc
            out.append(record)
    return out


def last_checkpoint(checkpoints: list[dict], stage: str) -> Optional[dict]:
    for record in reversed(checkpoints):
        if record.get("stage") == stage:
            return record
    return None


class RunLock:
    """One pipeline run per run_dir."""

    def __init__(self, run_dir: Path):
        self._path = run_dir / ".lock"
        self._fd: Optional[int] = None

    def __enter__(self):
        self._fd = os.open(self._path, os.O_CREAT | os.O_RDWR)
        if fcntl is not None:
            try:
                fcntl.flock(self._fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except OSError as exc:
                os.close(self._fd)
                self._fd = None
                raise LockedError(f"another run holds the lock on {self._path.parent}") from exc
        return self

    def __exit__(self, *exc):
        if self._fd is not None:
            if fcntl is not None:
                fcntl.flock(self._fd, fcntl.LOCK_UN)
            os.close(self._fd)
            self._fd = None
        return False


# ---------------------------------------------------------------------------
# Stage plumbing
# ---------------------------------------------------------------------------


@dataclass
class StagePlan:
    stage: str
    inputs: dict[str, str]
    config_digest: str


@dataclass
class StageResult:
    stage: str
    ran: bool
    outputs: dict[str, str]


def _config_digest(ctx: StageContext, *sections: str) -> str:
    return schema.digest_of({name: ctx.config.get(name) for name in sections})


def _require(path: Path, needed_stage: str, what: str) -> str:
    if not path.exists():
        raise MissingInputError(f"missing {what} ({path.name}); run `failforge {needed_stage}` first", needed_stage)
    return schema.digest_file(path)


def stage_plan(ctx: StageContext, stage: str) -> StagePlan:
    """Input digests + config digest for a stage; validates dependencies."""
    inputs: dict[str, str] = {}
    if stage == "mine":
        for entry in ctx.benchmarks():
            source = Path(entry["path"])
            if not source.exists():
                raise ConfigError(f"benchmark {entry['name']}: path does not exist: {source}")
            inputs[f"split:{entry['name']}"] = (
                schema.digest_file(source) if source.is_file()
                else schema.digest_of(sorted(p.name for p in source.glob('*.json')))
            )
        digest = _config_digest(ctx, "benchmarks", "backends", "mining")
    elif stage == "generate":
        for entry in ctx.benchmarks():
            name = entry["name"]
            inputs[f"failures:{name}"] = _require(ctx.path("failures", f"{name}.jsonl"), "mine", f"failures for {name}")
        digest = _config_digest(ctx, "generation", "backends")
    elif stage == "images":
        for entry in ctx.benchmarks():
            if "m2" not in benchmark_methods(entry):
                continue
            name = entry["name"]
            inputs[f"candidates:{name}.m2"] = _require(
                ctx.path("candidates", f"{name}.m2.jsonl"), "generate", f"m2 candidates for {name}"
            )
        digest = _config_digest(ctx, "imaging", "backends")
    elif stage == "filter":
        for entry in ctx.benchmarks():
            name = entry["name"]
            for method in benchmark_methods(entry):
                if method == "m1":
                    inputs[f"candidates:{name}.m1"] = _require(
                        ctx.path("candidates", f"{name}.m1.jsonl"), "generate", f"m1 candidates for {name}"
                    )
                else:
                    inputs[f"candidates:{name}.m2.resolved"] = _require(
                        ctx.path("candidates", f"{name}.m2.resolved.jsonl"), "images",
                        f"resolved m2 candidates for {name}"
                    )
        digest = _config_digest(ctx, "judge", "backends")
    elif stage == "cluster":
        for entry in ctx.benchmarks():
            name = entry["name"]
            for method in benchmark_methods(entry):
                inputs[f"candidates:{name}.{method}"] = _require(
                    ctx.path("candidates", f"{name}.{method}.jsonl"), "generate", f"candidates for {name}"
                )
        digest = _config_digest(ctx, "taxonomy", "backends")
    elif stage == "mix":
        for entry in ctx.benchmarks():
            name = entry["name"]
            inputs[f"retained:{name}"] = _require(
                ctx.path("filter", f"{name}.retained.manifest.json"), "filter", f"retained manifest for {name}"
            )
        digest = _config_digest(ctx, "mixer")
    elif stage == "export":
        inputs["manifest"] = _require(ctx.path("mix", "mixed.manifest.json"), "mix", "mixed manifest")
        digest = _config_digest(ctx, "export")
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    return StagePlan(stage=stage, inputs=inputs, config_digest=digest)


def stage_up_to_date(ctx: StageContext, plan: StagePlan) -> bool:
    record = last_checkpoint(read_checkpoints(ctx.run_dir), plan.stage)
    if record is None:
        return False
    if record.get("inputs") != plan.inputs or record.get("config") != plan.config_digest:
        return False
    return all(ctx.path(*name.split("/")).exists() for name in record.get("outputs", {}))


def run_stage(ctx: StageContext, stage: str, force: bool = False) -> StageResult:
    plan = stage_plan(ctx, stage)
    if not force and stage_up_to_date(ctx, plan):
        record = last_checkpoint(read_checkpoints(ctx.run_dir), stage)
        logger.info("%s: up to date", stage)
        return StageResult(stage=stage, ran=False, outputs=record.get("outputs", {}))
    outputs = _STAGE_FUNCS[stage](ctx)
    schema.append_jsonl(
        checkpoint_path(ctx.run_dir),
        {
            "stage": stage,
            "inputs": plan.inputs,
            "config": plan.config_digest,
            "outputs": outputs,
            "ledger": ctx.backends.usage_report(),
            "completed_at": schema.utc_now(),
        },
    )
    return StageResult(stage=stage, ran=True, outputs=outputs)


def resume(ctx: StageContext) -> list[StageResult]:
    """Continue from the first incomplete stage through the end of the pipeline."""
    results = []
    for stage in STAGE_ORDER:
        results.append(run_stage(ctx, stage))
    return results


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------


def _stage_mine(ctx: StageContext) -> dict[str, str]:
    outputs: dict[str, str] = {}
    mining_cfg = ctx.config["mining"]
    for entry in ctx.benchmarks():
        name = entry["name"]
        samples = schema.load_benchmark(entry["path"], entry.get("format", "jsonl"))
        if entry.get("answer_policy"):
            samples = [replace(s, answer_policy=entry["answer_policy"]) for s in samples]
        policy = None
        baseline_run = mining.evaluate_split(
            ctx.backends.baseline, samples, policy,
            max_workers=int(mining_cfg["max_workers"]),
            max_failure_rate=float(mining_cfg["max_failure_rate"]),
        )
        frontier_run = mining.evaluate_split(
            ctx.backends.frontier, samples, policy,
            max_workers=int(mining_cfg["max_workers"]),
            max_failure_rate=float(mining_cfg["max_failure_rate"]),
        )
        failure_set = mining.build_failure_set(baseline_run.results, frontier_run.results, samples)
        doubles = mining.double_failures(baseline_run.results, frontier_run.results, samples)

        failures_path = ctx.path("failures", f"{name}.jsonl")
        outputs[f"failures/{name}.jsonl"] = mining.write_failure_set(failure_set, failures_path)
        outputs[f"failures/{name}.double.jsonl"] = schema.write_jsonl(
            ctx.path("failures", f"{name}.double.jsonl"), (c.to_dict() for c in doubles)
        )
        summary = mining.mining_summary(failure_set, baseline_run.results, frontier_run.results)
        summary["transport_failures"] = {
            "baseline": baseline_run.transport_failures,
            "frontier": frontier_run.transport_failures,
        }
        summary_path = ctx.path("failures", f"{name}.summary.json")
        summary_path.parent.mkdir(parents=True, exist_ok=True)
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
        outputs[f"failures/{name}.summary.json"] = schema.digest_file(summary_path)
    return outputs


def _load_failures(ctx: StageContext, name: str) -> list[schema.FailureCase]:
    rows = schema.read_jsonl(ctx.path("failures", f"{name}.jsonl"))
    return [schema.FailureCase.from_dict(row) for row in rows]


def _stage_generate(ctx: StageContext) -> dict[str, str]:
    outputs: dict[str, str] = {}
    gen_cfg = ctx.config["generation"]
    for entry in ctx.benchmarks():
        name = entry["name"]
        failures = _load_failures(ctx, name)
        for method_short in benchmark_methods(entry):
            cfg = generation.GenerationConfig(
                method=METHOD_BY_SHORT[method_short],
                n_examples_per_failure=int(gen_cfg["n_examples_per_failure"]),
                diversity_mode=gen_cfg["diversity_mode"],
                format_constraint=gen_cfg["format_constraint"],
                rounds=int(gen_cfg["rounds"]),
            )
            progress_path = ctx.path("generation", f"{name}.{method_short}.progress.jsonl")
            done: dict[str, dict] = {}
            if progress_path.exists():
                for row in schema.read_jsonl(progress_path):
                    done[row["failure_id"]] = row

            for failure in failures:
                if failure.failure_id in done:
                    continue
                outcome = generation.generate_for_failure(
                    ctx.backends.frontier, failure, cfg, parse_retries=int(gen_cfg["parse_retries"])
                )
                row = {
                    "failure_id": outcome.failure_id,
                    "candidates": [c.to_dict() for c in outcome.candidates],
                    "parse_failures": outcome.parse_failures,
                    "dropped_missing_prompt": outcome.dropped_missing_prompt,
                }
                schema.append_jsonl(progress_path, row)
                done[failure.failure_id] = row

            # assemble the candidates file in (failure, round, example) order
            seen: set[str] = set()
            candidate_rows = []
            per_failure_yield = {}
            for failure in failures:
                row = done[failure.failure_id]
                kept = 0
                for candidate_row in row["candidates"]:
                    if candidate_row["candidate_id"] in seen:
                        continue
                    seen.add(candidate_row["candidate_id"])
                    candidate_rows.append(candidate_row)
                    kept += 1
                per_failure_yield[failure.failure_id] = kept
            candidates_path = ctx.path("candidates", f"{name}.{method_short}.jsonl")
            outputs[f"candidates/{name}.{method_short}.jsonl"] = schema.write_jsonl(candidates_path, candidate_rows)

            report = {
                "benchmark": name,
                "method": METHOD_BY_SHORT[method_short],
                "n_failures": len(failures),
                "n_candidates": len(candidate_rows),
                "parse_failures": sum(r["parse_failures"] for r in done.values()),
                "dropped_missing_prompt": sum(r["dropped_missing_prompt"] for r in done.values()),
                "per_failure_yield": per_failure_yield,
            }
            report_path = ctx.path("candidates", f"{name}.{method_short}.report.json")
            report_path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
            outputs[f"candidates/{name}.{method_short}.report.json"] = schema.digest_file(report_path)
    return outputs


def _sweep_from_config(ctx: StageContext) -> imaging.GuidanceSweep:
    cfg = ctx.config["imaging"]
    return imaging.GuidanceSweep(
        lo=float(cfg["guidance_lo"]),
        hi=float(cfg["guidance_hi"]),
        n=int(cfg["n_guidance"]),
        resolution=int(cfg["resolution"]),
    )


def _stage_images(ctx: StageContext) -> dict[str, str]:
    outputs: dict[str, str] = {}
    sweep = _sweep_from_config(ctx)
    max_workers = int(ctx.config["imaging"]["max_workers"])
    for entry in ctx.benchmarks():
        if "m2" not in benchmark_methods(entry):
            continue
        name = entry["name"]
        rows = schema.read_jsonl(ctx.path("candidates", f"{name}.m2.jsonl"))
        candidates = [schema.SyntheticCandidate.from_dict(row) for row in rows]
        jobs = imaging.plan_image_jobs(candidates, sweep)

        progress_path = ctx.path("imaging", f"{name}.progress.jsonl")
        done: dict[str, dict] = {}
        if progress_path.exists():
            for row in schema.read_jsonl(progress_path):
                done[row["job_id"]] = row

        pending = [job for job in jobs if job.job_id not in done]
        outcome = imaging.realize_images(pending, ctx.backends.image, max_workers=max_workers)
        resolved_by_job = {job.job_id: cand for job, cand in _pair_jobs(pending, outcome)}
        for job, status in zip(pending, outcome.job_status):
            row = {
                "job_id": job.job_id,
                "status": status["status"],
                "attempts": status["attempts"],
                "candidate": resolved_by_job[job.job_id].to_dict() if job.job_id in resolved_by_job else None,
                "error": next((f["error"] for f in outcome.failed_jobs if f["job_id"] == job.job_id), None),
            }
            schema.append_jsonl(progress_path, row)
            done[job.job_id] = row

        resolved_rows, ledger_rows, failed = [], [], []
        for job in jobs:
            row = done[job.job_id]
            ledger_rows.append({"job_id": row["job_id"], "status": row["status"], "attempts": row["attempts"]})
            if row["candidate"] is not None:
                resolved_rows.append(row["candidate"])
            else:
                failed.append(row["job_id"])
        schema.write_jsonl(ctx.path("images", f"jobs.{name}.jsonl"), ledger_rows)
        outputs[f"candidates/{name}.m2.resolved.jsonl"] = schema.write_jsonl(
            ctx.path("candidates", f"{name}.m2.resolved.jsonl"), resolved_rows
        )
        if failed:
            logger.warning("images: %d/%d jobs failed for %s", len(failed), len(jobs), name)
    return outputs


def _pair_jobs(jobs, outcome: imaging.RealizeOutcome):
    """(job, resolved candidate) pairs for successful jobs, preserving order."""
    succeeded = iter(outcome.candidates)
    for job, status in zip(jobs, outcome.job_status):
        if status["status"] == "done":
            yield job, next(succeeded)


def _candidate_files_for_filter(ctx: StageContext, entry: dict) -> list[Path]:
    name = entry["name"]
    paths = []
    for method in benchmark_methods(entry):
        if method == "m1":
            paths.append(ctx.path("candidates", f"{name}.m1.jsonl"))
        else:
            paths.append(ctx.path("candidates", f"{name}.m2.resolved.jsonl"))
    return paths


def _stage_filter(ctx: StageContext) -> dict[str, str]:
    outputs: dict[str, str] = {}
    judge_cfg = ctx.config["judge"]
    keep_threshold = int(judge_cfg["keep_threshold"])
    for entry in ctx.benchmarks():
        name = entry["name"]
        candidates: list[schema.SyntheticCandidate] = []
        record_paths: dict[str, str] = {}
        for path in _candidate_files_for_filter(ctx, entry):
            for row in schema.read_jsonl(path):
                candidate = schema.SyntheticCandidate.from_dict(row)
                candidates.append(candidate)
                record_paths[candidate.candidate_id] = str(path)

        progress_path = ctx.path("judging", f"{name}.progress.jsonl")
        existing: dict[str, judge.FilterVerdict] = {}
        if progress_path.exists():
            for row in schema.read_jsonl(progress_path):
                verdict = judge.FilterVerdict.from_dict(row)
                existing[verdict.candidate_id] = verdict

        todo = [c for c in candidates if c.candidate_id not in existing]
        run = judge.judge_candidates(
            ctx.backends.judge,
            todo,
            max_workers=int(judge_cfg["max_workers"]),
            on_verdict=lambda v: schema.append_jsonl(progress_path, v.to_dict()),
        )
        if run.deferred:
            raise RuntimeError(f"filter: {len(run.deferred)} candidates deferred on transport errors: "
                               f"{run.deferred[:5]}; re-run to retry")
        for verdict in run.verdicts:
            existing[verdict.candidate_id] = verdict

        ordered = [existing[c.candidate_id] for c in candidates]
        outputs[f"verdicts/{name}.jsonl"] = judge.write_verdicts(ordered, ctx.path("verdicts", f"{name}.jsonl"))

        outcome = judge.filter_candidates(candidates, ordered, keep_threshold=keep_threshold)
        retained = _reref_paths(outcome.retained, record_paths)
        rejected = _reref_paths(outcome.rejected, record_paths)
        outputs[f"filter/{name}.retained.manifest.json"] = schema.write_manifest(
            retained, ctx.path("filter", f"{name}.retained.manifest.json")
        )
        outputs[f"filter/{name}.rejected.manifest.json"] = schema.write_manifest(
            rejected, ctx.path("filter", f"{name}.rejected.manifest.json")
        )
        report_path = ctx.path("filter", f"{name}.report.json")
        report_path.write_text(json.dumps(outcome.stats.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        outputs[f"filter/{name}.report.json"] = schema.digest_file(report_path)
    return outputs


def _reref_paths(manifest: schema.DatasetManifest, record_paths: dict[str, str]) -> schema.DatasetManifest:
    refs = [replace(ref, path=record_paths.get(ref.record_id)) for ref in manifest.records]
    return schema.DatasetManifest.build(refs, lineage=manifest.lineage, created_at=manifest.created_at)


def _stage_cluster(ctx: StageContext) -> dict[str, str]:
    tax_cfg = ctx.config["taxonomy"]
    explanations: dict[str, str] = {}
    for entry in ctx.benchmarks():
        name = entry["name"]
        for method in benchmark_methods(entry):
            for row in schema.read_jsonl(ctx.path("candidates", f"{name}.{method}.jsonl")):
                text = row.get("diagnosis", "")
                if text:
                    explanations[f"d-{schema.digest_of(text)[:12]}"] = text
    ids = sorted(explanations)
    texts = [explanations[i] for i in ids]
    k = int(tax_cfg["k"])
    report = taxonomy.cluster_explanations(ctx.backends.embedding, texts, k=k, seed=int(tax_cfg["seed"]), ids=ids)
    vectors = {eid: vec for eid, vec in zip(ids, ctx.backends.embedding.embed(texts))}
    report = taxonomy.summarize_clusters(
        ctx.backends.frontier, report, explanations,
        sample_size=int(tax_cfg["label_sample_size"]), vectors=vectors,
    )
    outputs = {}
    report_path = ctx.path("taxonomy", "report.json")
    taxonomy.write_report(report, report_path)
    outputs["taxonomy/report.json"] = schema.digest_file(report_path)
    taxonomy.write_csv(report, ctx.path("taxonomy", "clusters.csv"))
    outputs["taxonomy/clusters.csv"] = schema.digest_file(ctx.path("taxonomy", "clusters.csv"))
    return outputs


def _stage_mix(ctx: StageContext) -> dict[str, str]:
    mix_cfg = ctx.config["mixer"]
    retained_refs: list[schema.RecordRef] = []
    for entry in ctx.benchmarks():
        manifest = schema.read_manifest(ctx.path("filter", f"{entry['name']}.retained.manifest.json"))
        retained_refs.extend(manifest.records)
    syn = schema.DatasetManifest.build(retained_refs)

    if mix_cfg.get("base_manifest"):
        base = schema.read_manifest(mix_cfg["base_manifest"])
    elif mix_cfg.get("base_instruction_json"):
        base = mixer.base_manifest_from_instruction_json(
            mix_cfg["base_instruction_json"], ctx.path("mix", "base.records.jsonl")
        )
    else:
        base = schema.DatasetManifest.build(())

    n_syn = mix_cfg.get("n_syn")
    n_syn = syn.n_total if n_syn is None else int(n_syn)
    seed = int(mix_cfg["seed"])
    if mix_cfg["mode"] == "augment":
        mixed = mixer.augment(base, syn, n_syn, seed)
    else:
        mixed = mixer.substitute(base, syn, n_syn, seed)
    digest = schema.write_manifest(mixed, ctx.path("mix", "mixed.manifest.json"))
    return {"mix/mixed.manifest.json": digest}


def _stage_export(ctx: StageContext) -> dict[str, str]:
    export_cfg = ctx.config["export"]
    manifest = schema.read_manifest(ctx.path("mix", "mixed.manifest.json"))
    filename = export_cfg["filename"]
    digest = mixer.export_instruction_format(
        manifest, ctx.path("export", filename), jsonl=export_cfg["format"] == "jsonl"
    )
    return {f"export/{filename}": digest}


_STAGE_FUNCS: dict[str, Callable[[StageContext], dict]] = {
    "mine": _stage_mine,
    "generate": _stage_generate,
    "images": _stage_images,
    "filter": _stage_filter,
    "cluster": _stage_cluster,
    "mix": _stage_mix,
    "export": _stage_export,
}


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


def render_report(ctx: StageContext) -> str:
    """Per-benchmark fan-out table plus the failure-mode cluster table."""
    lines = []
    header = f"{'benchmark':<14}{'image type':<12}{'original':>10}{'failures':>10}{'filtered':>10}"
    lines.append(header)
    lines.append("-" * len(header))
    for entry in ctx.benchmarks():
        name = entry["name"]
        summary_path = ctx.path("failures", f"{name}.summary.json")
        report_path = ctx.path("filter", f"{name}.report.json")
        split_size = n_mfs = None
        if summary_path.exists():
            summary = json.loads(summary_path.read_text(encoding="utf-8"))
            split_size, n_mfs = summary.get("split_size"), summary.get("n_mfs")
        buckets = {}
        if report_path.exists():
            buckets = json.loads(report_path.read_text(encoding="utf-8")).get("buckets", {})
        if buckets:
            for bucket_name in sorted(buckets):
                image_type = bucket_name.split("/", 1)[1]
                lines.append(
                    f"{name:<14}{image_type:<12}{_fmt(split_size):>10}{_fmt(n_mfs):>10}"
                    f"{buckets[bucket_name]['retained']:>10}"
                )
        else:
            lines.append(f"{name:<14}{'-':<12}{_fmt(split_size):>10}{_fmt(n_mfs):>10}{'-':>10}")

    taxonomy_path = ctx.path("taxonomy", "report.json")
    if taxonomy_path.exists():
        report = json.loads(taxonomy_path.read_text(encoding="utf-8"))
        lines.append("")
        lines.append(f"{'cluster':<40}{'share %':>8}")
        lines.append("-" * 48)
        labels = report.get("labels") or [f"cluster-{i}" for i in range(report["k"])]
        for label, share in zip(labels, report["shares"]):
            lines.append(f"{label:<40}{share:>8.1f}")
    return "\n".join(lines)


def _fmt(value) -> str:
    return "-" if value is None else f"{value:,}"
