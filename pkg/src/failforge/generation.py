"""Synthetic example generation from mined failures.

Drives the frontier model through a five-step diagnosis-and-proposal prompt
for each failure case and parses structured candidates out of the response.
Step 5 (turning each example into a text-to-image prompt) is included only
for the fully-synthetic method; the real-image method skips it and binds
every proposed example to the original image.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from . import schema
from .backends import ChatClient, ChatRequest, image_part, text_part, user_message

logger = logging.getLogger(__name__)

PROMPT_PREAMBLE = (
    "You are analyzing the performance of a vision-language model (called Model A). "
    "Model A's answer could deviate from the ground truth due to limitations in visual "
    "understanding, interpretation, or reasoning."
)

STEP_1 = "Step 1: Describe the image."
STEP_2 = (
    "Step 2: Given a question, the Ground truth answer, and Model A's generated answer, "
    "describe any key visual elements that might influence Model A's interpretation."
)
STEP_3 = (
    "Step 3: Analyze the reasoning steps Model A might have used to generate its answer, "
    "considering both the visual and textual information. Identify any weaknesses, errors, "
    "or gaps in Model A response compared to the ground truth."
)
STEP_4 = "Step 4: Suggest {n} additional challenging detailed examples to address these limitations."
STEP_5 = (
    "Step 5: Transform each example into a detailed prompt designed to generate a clear "
    "and realistic image using a text-to-image generation model."
)

CROSS_DOMAIN_SENTENCE = (
    "Provide examples that challenge Model A's weaknesses using scenarios from entirely different domains."
)

FORMAT_CLAUSES = {
    "free": "",
    "multiple_choice": (
        "Format every example as a multiple-choice question listing the answer options; "
        "the answer must be exactly one of the listed options."
    ),
    "true_false": 'Format every example as a true/false question; the answer must be "True" or "False".',
    "unanswerable_allowed": (
        'Include examples whose correct answer is "Unanswerable" when the image alone cannot resolve '
        'the question; "Unanswerable" is an admissible answer.'
    ),
    "brief": "Answers must be brief: a single word or a short phrase.",
}

_JSON_KEYS_M1 = '"question", "answer"'
_JSON_KEYS_M2 = '"question", "answer", "image_prompt"'

OUTPUT_CONTRACT = (
    "Respond with exactly one fenced JSON code block containing an object with keys "
    '"image_description", "visual_elements", "reasoning_analysis", and "examples" '
    "(a list of objects with keys {keys})."
)

REPARSE_NOTE = (
    "(Attempt {attempt}: your previous response could not be parsed. "
    "Respond with exactly one fenced JSON code block as instructed.)"
)


@dataclass(frozen=True)
class GenerationConfig:
    method: str = schema.METHOD_M2
    n_examples_per_failure: int = 10
    diversity_mode: str = "similar_domain"
    format_constraint: str = "free"
    rounds: int = 1

    def __post_init__(self):
        if self.method not in schema.METHODS:
            raise ValueError(f"method {self.method!r} not in {schema.METHODS}")
        if self.n_examples_per_failure < 1:
            raise ValueError("n_examples_per_failure must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.diversity_mode not in schema.DIVERSITY_MODES:
            raise ValueError(f"diversity_mode {self.diversity_mode!r} not in {schema.DIVERSITY_MODES}")
        if self.format_constraint not in schema.FORMAT_CONSTRAINTS:
            raise ValueError(f"format_constraint {self.format_constraint!r} not in {schema.FORMAT_CONSTRAINTS}")


def round_plan(cfg: GenerationConfig) -> list[tuple[str, str]]:
    """Per-round (diversity_mode, format_constraint) rotation.

    Diversity alternates starting from the configured mode; the format
    constraint cycles through the constraint list starting from the
    configured one. Single-round configs use the config verbatim.
    """
    modes = list(schema.DIVERSITY_MODES)
    start_mode = modes.index(cfg.diversity_mode)
    constraints = list(schema.FORMAT_CONSTRAINTS)
    start_fc = constraints.index(cfg.format_constraint)
    return [
        (modes[(start_mode + r) % len(modes)], constraints[(start_fc + r) % len(constraints)])
        for r in range(cfg.rounds)
    ]


@dataclass(frozen=True)
class Diagnosis:
    image_description: str
    visual_elements: str
    reasoning_analysis: str
    raw_response: str

    def __post_init__(self):
        if not self.reasoning_analysis:
            raise ValueError("reasoning_analysis must be non-empty (it feeds clustering)")


@dataclass(frozen=True)
class ProposedExample:
    question: str
    answer: str
    image_prompt: Optional[str] = None


@dataclass
class ParsedGeneration:
    diagnosis: Optional[Diagnosis]
    examples: list[ProposedExample]
    dropped_missing_prompt: int = 0
    failed: bool = False


def build_generation_prompt(failure: schema.FailureCase, cfg: GenerationConfig, client: ChatClient,
                            attempt: int = 0) -> ChatRequest:
    """Pure function of (failure, cfg, client defaults): byte-identical requests cache-hit.

    Steps 1-4 always; Step 5 only for the fully-synthetic method. The
    cross-domain sentence is appended to Step 4 when requested, and the
    format constraint contributes its instruction clause.
    """
    step_4 = STEP_4.format(n=cfg.n_examples_per_failure)
    if cfg.diversity_mode == "cross_domain":
        step_4 = f"{step_4} {CROSS_DOMAIN_SENTENCE}"
    clause = FORMAT_CLAUSES[cfg.format_constraint]
    if clause:
        step_4 = f"{step_4} {clause}"

    steps = [STEP_1, STEP_2, STEP_3, step_4]
    keys = _JSON_KEYS_M1
    if cfg.method == schema.METHOD_M2:
        steps.append(STEP_5)
        keys = _JSON_KEYS_M2

    lines = [
        PROMPT_PREAMBLE,
        "",
        f"Question: {failure.sample.question}",
        f"Ground truth answer: {failure.sample.reference_answers[0]}",
        f"Model A's answer: {failure.baseline_prediction}",
        "",
        *steps,
        "",
        OUTPUT_CONTRACT.format(keys=keys),
    ]
    if attempt > 0:
        lines.append(REPARSE_NOTE.format(attempt=attempt))
    return client.request([user_message(text_part("\n".join(lines)), image_part(failure.sample.image_ref))])


_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)
_NUMBERED_RE = re.compile(
    r"^\s*\d+[.)]\s*(?:Q(?:uestion)?\s*[:.]\s*)(?P<q>.+?)\s*"
    r"A(?:nswer)?\s*[:.]\s*(?P<a>.+?)\s*"
    r"(?:(?:Image\s*prompt|Prompt)\s*[:.]\s*(?P<p>.+?)\s*)?$",
    re.IGNORECASE | re.MULTILINE,
)


def parse_generation_response(response_text: str, cfg: GenerationConfig) -> ParsedGeneration:
    """Extract the diagnosis and proposed examples from a model response.

    Prefers the first fenced JSON block; falls back to a numbered-list
    heuristic ("1) Q: ... A: ... [Image prompt: ...]"). Fully-synthetic
    examples missing their image_prompt are dropped with a warning count.
    Returns failed=True when neither route yields anything usable.
    """
    parsed = _parse_json_block(response_text, cfg)
    if parsed is None:
        parsed = _parse_numbered_list(response_text, cfg)
    if parsed is None:
        return ParsedGeneration(diagnosis=None, examples=[], failed=True)
    return parsed


def _parse_json_block(text: str, cfg: GenerationConfig) -> Optional[ParsedGeneration]:
    match = _FENCE_RE.search(text)
    if not match:
        return None
    try:
        payload = json.loads(match.group(1))
    except json.JSONDecodeError:
        return None
    if not isinstance(payload, dict):
        return None
    reasoning = str(payload.get("reasoning_analysis", "")).strip()
    if not reasoning:
        return None
    diagnosis = Diagnosis(
        image_description=str(payload.get("image_description", "")),
        visual_elements=str(payload.get("visual_elements", "")),
        reasoning_analysis=reasoning,
        raw_response=text,
    )
    examples, dropped = [], 0
    for row in payload.get("examples", []):
        if not isinstance(row, dict):
            continue
        question = str(row.get("question", "")).strip()
        answer = str(row.get("answer", "")).strip()
        prompt = row.get("image_prompt")
        prompt = str(prompt).strip() if prompt is not None else None
        if not question or not answer:
            continue
        if cfg.method == schema.METHOD_M2 and not prompt:
            dropped += 1
            continue
        examples.append(ProposedExample(question=question, answer=answer, image_prompt=prompt))
    if not examples:
        return None
    return ParsedGeneration(diagnosis=diagnosis, examples=examples, dropped_missing_prompt=dropped)


def _parse_numbered_list(text: str, cfg: GenerationConfig) -> Optional[ParsedGeneration]:
    matches = list(_NUMBERED_RE.finditer(text))
    if not matches:
        return None
    examples, dropped = [], 0
    for m in matches:
        prompt = m.group("p")
        prompt = prompt.strip() if prompt else None
        if cfg.method == schema.METHOD_M2 and not prompt:
            dropped += 1
            continue
        examples.append(ProposedExample(question=m.group("q").strip(), answer=m.group("a").strip(), image_prompt=prompt))
    if not examples:
        return None
    # Free-form responses carry no structured diagnosis; the text preceding
    # the first numbered item is the closest thing to the reasoning analysis.
    preamble = text[: matches[0].start()].strip()
    diagnosis = Diagnosis(
        image_description="",
        visual_elements="",
        reasoning_analysis=preamble or text.strip(),
        raw_response=text,
    )
    return ParsedGeneration(diagnosis=diagnosis, examples=examples, dropped_missing_prompt=dropped)


@dataclass
class FailureGeneration:
    failure_id: str
    candidates: list[schema.SyntheticCandidate]
    parse_failures: int = 0
    dropped_missing_prompt: int = 0
    rounds_completed: int = 0


def generate_for_failure(
    client: ChatClient,
    failure: schema.FailureCase,
    cfg: GenerationConfig,
    parse_retries: int = 2,
) -> FailureGeneration:
    """Run the configured rounds for one failure and collect candidates.

    Real-image candidates are bound to the failure's original image;
    fully-synthetic ones carry their image prompt with a pending source.
    Parse failures re-query up to parse_retries times (with a marker that
    changes the cache key), then reduce yield; candidates are never
    fabricated. Duplicate candidate_ids are dropped at insert. Output order
    is deterministic: (round, example index).
    """
    outcome = FailureGeneration(failure_id=failure.failure_id, candidates=[])
    seen: set[str] = set()
    for round_index, (diversity_mode, format_constraint) in enumerate(round_plan(cfg)):
        round_cfg = replace(cfg, diversity_mode=diversity_mode, format_constraint=format_constraint)
        parsed = None
        for attempt in range(parse_retries + 1):
            request = build_generation_prompt(failure, round_cfg, client, attempt=attempt)
            response = client.chat(request)
            candidate_parse = parse_generation_response(response.content, round_cfg)
            if not candidate_parse.failed:
                parsed = candidate_parse
                break
        if parsed is None:
            outcome.parse_failures += 1
            logger.warning("parse failure for %s round %d after %d attempts",
                           failure.failure_id, round_index, parse_retries + 1)
            continue
        outcome.dropped_missing_prompt += parsed.dropped_missing_prompt
        outcome.rounds_completed += 1
        assert parsed.diagnosis is not None
        for example in parsed.examples[: cfg.n_examples_per_failure]:
            if cfg.method == schema.METHOD_M1:
                source: schema.ImageSource = schema.RealImage(image_ref=failure.sample.image_ref)
            else:
                source = schema.GeneratedImage(image_prompt=example.image_prompt or "")
            candidate = schema.make_candidate(
                origin=failure,
                method=cfg.method,
                question=example.question,
                answer=example.answer,
                image_source=source,
                diagnosis=parsed.diagnosis.reasoning_analysis,
                diversity_mode=diversity_mode,
                format_constraint=format_constraint,
            )
            if candidate.candidate_id in seen:
                continue
            seen.add(candidate.candidate_id)
            outcome.candidates.append(candidate)
    bound = cfg.n_examples_per_failure * cfg.rounds
    if len(outcome.candidates) > bound:
        raise RuntimeError(f"yield bound violated: {len(outcome.candidates)} > {bound}")
    return outcome


def generation_report(outcomes: Sequence[FailureGeneration]) -> dict:
    return {
        "n_failures": len(outcomes),
        "n_candidates": sum(len(o.candidates) for o in outcomes),
        "parse_failures": sum(o.parse_failures for o in outcomes),
        "dropped_missing_prompt": sum(o.dropped_missing_prompt for o in outcomes),
        "per_failure": {o.failure_id: len(o.candidates) for o in outcomes},
    }
