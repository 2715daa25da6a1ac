"""On-the-fly self-speculative decoding with layer skipping."""

from .bench import MetricsReport, StreamSpec, expected_speedup, ingest_jsonl, run_benchmark
from .config import SwiftConfig, load_config
from .draft import DraftStep, DraftTree, draft, k_for_confidence, linearize
from .model_io import ArchConfig, ModelBundle, Tokenizer, load_bundle, save_bundle
from .optimizer import (
    ContextBuffer,
    OptimizerState,
    Phase,
    check_alpha_tolerance,
    evaluate_candidate,
    init_uniform_mask,
    optimize_step,
    suggest,
)
from .orchestrator import GenerationRequest, SessionTrace, SwiftSession, create_session, generate, generate_vanilla
from .synthetic import make_synthetic_model
from .transformer import AttentionMaskSpec, KVCache, LayerMask, checkpoint, forward, rollback, softmax_row
from .verify import VerifyOutcome, spec_sample_accept, verify_greedy, verify_sampling

__version__ = "0.1.0"
