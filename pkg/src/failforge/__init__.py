"""failforge: failure-grounded synthetic data generation for multimodal instruction tuning.

Pipeline: mine a baseline model's failures against a frontier model, drive
the frontier model through a structured diagnosis-and-proposal prompt,
expand fully-synthetic triplets across a guidance sweep, filter candidates
with a model judge, cluster failure explanations into a taxonomy, and mix
/export instruction-tuning datasets with full provenance.
"""

from .backends import (
    BackendConfig,
    BackendError,
    BackendSet,
    ChatClient,
    ChatRequest,
    ChatResponse,
    EmbeddingClient,
    ImageClient,
    ImageRequest,
    PriceTable,
    ResponseCache,
    TransportError,
    UsageLedger,
    build_backends,
    cache_key,
)
from .generation import Diagnosis, GenerationConfig, build_generation_prompt, generate_for_failure, parse_generation_response
from .imaging import GuidanceSweep, guidance_schedule, plan_image_jobs, realize_images
from .judge import FilterVerdict, filter_candidates, judge_candidate, parse_rating
from .mining import FailureSet, build_failure_set, evaluate_split
from .mixer import augment, export_instruction_format, sample_real_equivalent, substitute
from .schema import (
    BenchmarkSample,
    DatasetManifest,
    FailureCase,
    GeneratedImage,
    RealImage,
    RecordRef,
    SyntheticCandidate,
    load_benchmark,
    read_manifest,
    validate_record,
    write_manifest,
)
from .scoring import ScorePolicy, normalize_answer, score_answer
from .taxonomy import ClusterReport, cluster_explanations, kmeans, summarize_clusters

__version__ = "0.1.0"
