from __future__ import annotations

import json

import pytest

from failforge import schema
from failforge.backends import (
    BackendConfig,
    ChatClient,
    EmbeddingClient,
    ImageClient,
    PriceTable,
    ResponseCache,
    UsageLedger,
)
from failforge.mocks import MockScript, ScriptedTransport, load_script


def make_sample(i: int, benchmark: str = "toy", n_refs: int = 1, question: str | None = None) -> schema.BenchmarkSample:
    return schema.BenchmarkSample(
        sample_id=f"s{i:04d}",
        benchmark=benchmark,
        image_ref=f"fixture://{benchmark}/img{i:04d}.jpg",
        question=question or f"toy question token-q{i:04d}?",
        reference_answers=tuple(f"answer{i}" for _ in range(n_refs)),
        answer_policy=schema.EXACT_SINGLE,
    )


def make_failure(i: int = 0, benchmark: str = "toy") -> schema.FailureCase:
    return schema.FailureCase(
        sample=make_sample(i, benchmark),
        baseline_prediction="wrong",
        baseline_score=0.0,
        frontier_prediction=f"answer{i}",
        frontier_score=1.0,
    )


def make_candidate(
    i: int = 0,
    method: str = schema.METHOD_M2,
    benchmark: str = "toy",
    resolved: bool = False,
) -> schema.SyntheticCandidate:
    failure = make_failure(i, benchmark)
    if method == schema.METHOD_M1:
        source: schema.ImageSource = schema.RealImage(image_ref=failure.sample.image_ref)
    elif resolved:
        source = schema.GeneratedImage(
            image_prompt=f"prompt {i}", guidance_scale=3.0, seed=i, image_ref=f"images/art{i}.png"
        )
    else:
        source = schema.GeneratedImage(image_prompt=f"prompt {i}")
    return schema.make_candidate(
        origin=failure,
        method=method,
        question=f"candidate question cq{i:04d}?",
        answer=f"canswer{i}",
        image_source=source,
        diagnosis=f"diagnosis text {i % 3}",
        diversity_mode="similar_domain",
        format_constraint="free",
    )


@pytest.fixture
def cache(tmp_path):
    return ResponseCache(tmp_path / "cache")


@pytest.fixture
def ledger():
    return UsageLedger(PriceTable(per_million_tokens=7.0, per_image=0.01))


def scripted_chat(
    rules: list,
    cache: ResponseCache,
    ledger: UsageLedger,
    name: str = "frontier",
    default: str = "canned",
    **config,
) -> tuple[ChatClient, MockScript]:
    script = load_script(rules, default=default)
    cfg = BackendConfig(name=name, base_url="http://mock", model_id=config.pop("model_id", "mock-model"),
                        backoff_base=0.001, **config)
    client = ChatClient(cfg, cache, ledger, transport=ScriptedTransport(script))
    return client, script


def scripted_image(
    rules: list,
    cache: ResponseCache,
    ledger: UsageLedger,
    images_dir,
    default: str = "canned",
    **config,
) -> tuple[ImageClient, MockScript]:
    script = load_script(rules, default=default)
    cfg = BackendConfig(name="image", base_url="http://mock", backoff_base=0.001, **config)
    client = ImageClient(cfg, cache, ledger, images_dir=images_dir, transport=ScriptedTransport(script))
    return client, script


def scripted_embedding(
    rules: list,
    cache: ResponseCache,
    ledger: UsageLedger,
    default: str = "canned",
    **config,
) -> tuple[EmbeddingClient, MockScript]:
    script = load_script(rules, default=default)
    cfg = BackendConfig(name="embedding", base_url="http://mock", backoff_base=0.001, **config)
    client = EmbeddingClient(cfg, cache, ledger, transport=ScriptedTransport(script))
    return client, script


def write_benchmark_jsonl(path, samples) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sample in samples:
            f.write(json.dumps(sample.to_dict() if hasattr(sample, "to_dict") else sample) + "\n")
