"""End-to-end query answering with per-query trace recording.

``run_query`` drives retrieve -> token stack -> generate for one query and
records everything the ablation harness needs. ``run_batch`` fans out over
a thread pool; traces come back sorted by query_id so output bytes do not
depend on scheduling.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

from .errors import (
    GatewayConnectionError,
    KbragError,
    ValidationError,
)
from .kb import QueryRecord, RetrievalHit, RetrievalSource
from .tokens import (
    ContextSet,
    MCT_STRATEGIES,
    RetDecision,
    ScoredDoc,
    SrtSelectionMode,
    run_token_stack_traced,
)
from .wire import PROMPT_VQA, canonical_json

if TYPE_CHECKING:
    from .gateway import Gateway
    from .harness import Matcher

logger = logging.getLogger(__name__)

TRACE_SCHEMA = 1


@dataclass(frozen=True)
class StageFlags:
    ret: bool = False
    srt: bool = False
    mct: bool = False

    def to_json(self) -> dict:
        return {"ret": self.ret, "srt": self.srt, "mct": self.mct}

    @classmethod
    def parse(cls, value) -> StageFlags:
        if isinstance(value, dict):
            return cls(ret=bool(value.get("ret")), srt=bool(value.get("srt")), mct=bool(value.get("mct")))
        if isinstance(value, str):
            names = {part.strip() for part in value.split(",") if part.strip()} - {"none"}
            unknown = names - {"ret", "srt", "mct"}
            if unknown:
                raise ValidationError(f"unknown stage flags: {sorted(unknown)}")
            return cls(ret="ret" in names, srt="srt" in names, mct="mct" in names)
        raise ValidationError(f"cannot parse stage flags from {value!r}")


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable in one place; defaults follow the standard setup."""

    gamma: float = 0.5
    k: int = 5
    srt_mode: SrtSelectionMode = field(default_factory=SrtSelectionMode.auto)
    mct_strategy: str | None = None
    tau_percent: float = 50.0
    stage_flags: StageFlags = field(default_factory=StageFlags)

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValidationError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if self.tau_percent < 0:
            raise ValidationError(f"tau_percent must be >= 0, got {self.tau_percent}")
        if self.mct_strategy is not None and self.mct_strategy not in MCT_STRATEGIES:
            raise ValidationError(f"unknown MCT strategy {self.mct_strategy!r}")
        if self.stage_flags.mct:
            if not self.stage_flags.srt:
                raise ValidationError("MCT consumes the SRT selection; enable srt with mct")
            if self.mct_strategy is None:
                raise ValidationError("mct enabled but no mct_strategy configured")

    def to_json(self) -> dict:
        return {
            "gamma": self.gamma,
            "k": self.k,
            "srt_mode": self.srt_mode.to_json(),
            "mct_strategy": self.mct_strategy,
            "tau_percent": self.tau_percent,
            "stage_flags": self.stage_flags.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> PipelineConfig:
        if not isinstance(obj, dict):
            raise ValidationError("config must be a JSON object")
        known = {"gamma", "k", "srt_mode", "mct_strategy", "tau_percent", "stage_flags"}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        kwargs = {}
        if "gamma" in obj:
            kwargs["gamma"] = float(obj["gamma"])
        if "k" in obj:
            kwargs["k"] = int(obj["k"])
        if "srt_mode" in obj:
            kwargs["srt_mode"] = SrtSelectionMode.parse(obj["srt_mode"])
        if "mct_strategy" in obj:
            value = obj["mct_strategy"]
            kwargs["mct_strategy"] = None if value is None else str(value)
        if "tau_percent" in obj:
            kwargs["tau_percent"] = float(obj["tau_percent"])
        if "stage_flags" in obj:
            kwargs["stage_flags"] = StageFlags.parse(obj["stage_flags"])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> PipelineConfig:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: malformed config JSON: {exc}") from exc
        return cls.from_json(obj)

    def override(self, **changes) -> PipelineConfig:
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, **changes) if changes else self


@dataclass
class QueryTrace:
    """One query's journey through the pipeline.

    Stage fields are None when the stage did not run; ``retrieved`` is []
    for gated-off queries. ``error_kind`` classifies failures for exit
    codes and is not serialized.
    """

    query_id: str
    ret_decision: RetDecision | None = None
    retrieved: list[RetrievalHit] = field(default_factory=list)
    srt_scores: list[ScoredDoc] | None = None
    final_context: ContextSet | None = None
    answer: str | None = None
    correct: bool | None = None
    error: str | None = None
    error_kind: str | None = None

    def to_payload(self) -> dict:
        return {
            "trace_schema": TRACE_SCHEMA,
            "query_id": self.query_id,
            "ret_decision": (
                None
                if self.ret_decision is None
                else {
                    "score": self.ret_decision.score,
                    "label": self.ret_decision.label,
                    "gamma": self.ret_decision.gamma,
                }
            ),
            "retrieved": [
                {"doc_id": h.doc_id, "similarity": h.similarity, "rank": h.rank}
                for h in self.retrieved
            ],
            "srt_scores": (
                None
                if self.srt_scores is None
                else [
                    {"doc_id": d.doc_id, "srt_score": d.srt_score, "retrieval_rank": d.retrieval_rank}
                    for d in self.srt_scores
                ]
            ),
            "final_context": (
                None
                if self.final_context is None
                else {
                    "doc_ids": [d.doc_id for d in self.final_context.docs],
                    "summary": self.final_context.synthetic_summary,
                    "provenance": self.final_context.strategy_provenance,
                }
            ),
            "answer": self.answer,
            "correct": self.correct,
            "error": self.error,
        }


def run_query(
    query: QueryRecord,
    source: RetrievalSource,
    config: PipelineConfig,
    gateway: "Gateway",
    matcher: "Matcher | None" = None,
) -> QueryTrace:
    """Answer one query; failures are recorded, not raised."""
    trace = QueryTrace(query_id=query.query_id)
    try:
        stack = run_token_stack_traced(
            query,
            config,
            gateway,
            source.doc,
            lambda: source.hits_for(query, config.k),
        )
        trace.ret_decision = stack.ret_decision
        trace.retrieved = stack.retrieved
        trace.srt_scores = stack.srt_scores
        trace.final_context = stack.context
        generation = gateway.generate(
            query,
            list(stack.context.docs),
            PROMPT_VQA,
            summary=stack.context.synthetic_summary,
        )
        trace.answer = generation.text
        if matcher is not None:
            trace.correct = matcher.is_correct(generation.text, query)
    except KbragError as exc:
        logger.warning("query %s failed: %s", query.query_id, exc)
        trace.error = str(exc)
        trace.error_kind = "connection" if isinstance(exc, GatewayConnectionError) else "other"
        if matcher is not None:
            trace.correct = False
    return trace


def run_batch(
    queries: Sequence[QueryRecord],
    source: RetrievalSource,
    config: PipelineConfig,
    gateway: "Gateway",
    parallelism: int = 1,
    matcher: "Matcher | None" = None,
) -> list[QueryTrace]:
    """One trace per query, ordered by query_id regardless of scheduling."""
    if parallelism < 1:
        raise ValidationError(f"parallelism must be >= 1, got {parallelism}")
    if not queries:
        return []
    if parallelism == 1:
        traces = [run_query(q, source, config, gateway, matcher) for q in queries]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            traces = list(
                pool.map(lambda q: run_query(q, source, config, gateway, matcher), queries)
            )
    traces.sort(key=lambda t: t.query_id)
    return traces


def traces_to_jsonl(traces: Sequence[QueryTrace]) -> str:
    return "".join(canonical_json(t.to_payload()) + "\n" for t in traces)


def write_traces(traces: Sequence[QueryTrace], path: str | Path) -> None:
    Path(path).write_text(traces_to_jsonl(traces), encoding="utf-8")


def load_trace_payloads(path: str | Path) -> list[dict]:
    payloads: list[dict] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed trace line: {exc}") from exc
            if obj.get("trace_schema") != TRACE_SCHEMA:
                raise ValidationError(
                    f"{path}:{lineno}: unsupported trace_schema {obj.get('trace_schema')!r}"
                )
            payloads.append(obj)
    return payloads
