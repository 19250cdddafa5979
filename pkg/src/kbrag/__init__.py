"""Retrieval-gated RAG engine with a tag-based document filtering stack."""

__version__ = "0.1.0"

from .errors import (
    GatewayConnectionError,
    GatewayError,
    GatewayProtocolError,
    KbragError,
    ValidationError,
)
from .kb import (
    Document,
    KnowledgeBase,
    QueryRecord,
    RankedRun,
    RetrievalHit,
    ingest_kb,
    ingest_ranked_run,
    load_queries,
)
from .gateway import MockOracle, OracleTruthTable, RemoteGateway, serve_mock
from .harness import Matcher, evaluate, run_ablation, run_sweep
from .pipeline import PipelineConfig, QueryTrace, StageFlags, run_batch, run_query
from .tokens import (
    ContextSet,
    RetDecision,
    ScoredDoc,
    SrtSelectionMode,
    apply_mct,
    decide_ret,
    run_token_stack,
    select_srt,
    softmax_pair,
)

__all__ = [
    "ContextSet",
    "Document",
    "GatewayConnectionError",
    "GatewayError",
    "GatewayProtocolError",
    "KbragError",
    "KnowledgeBase",
    "Matcher",
    "MockOracle",
    "OracleTruthTable",
    "PipelineConfig",
    "QueryRecord",
    "QueryTrace",
    "RankedRun",
    "RemoteGateway",
    "RetDecision",
    "RetrievalHit",
    "ScoredDoc",
    "SrtSelectionMode",
    "StageFlags",
    "ValidationError",
    "apply_mct",
    "decide_ret",
    "evaluate",
    "ingest_kb",
    "ingest_ranked_run",
    "load_queries",
    "run_ablation",
    "run_batch",
    "run_query",
    "run_sweep",
    "run_token_stack",
    "select_srt",
    "serve_mock",
    "softmax_pair",
]
