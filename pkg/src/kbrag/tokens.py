"""Token-system decision logic.

Three gates compose, in order: a retrieval-necessity gate over the
``[Ret]``/``[NoRet]`` pair, per-document relevance scoring over
``[Rel]``/``[NoRel]`` with threshold or top-n selection, and a
multi-document consistency pass deployed as one of three strategies
(filter / merge / rerank). Everything here is pure given a gateway handle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Sequence

from .errors import GatewayProtocolError, ValidationError
from .kb import Document, QueryRecord, RetrievalHit
from .wire import (
    PROMPT_CST,
    PROMPT_RET,
    PROMPT_SRT,
    RET_TAGS,
    SRT_TAGS,
    TAG_NOREL,
    TAG_NORET,
    TAG_REL,
    TAG_RET,
)

if TYPE_CHECKING:
    from .gateway import Gateway
    from .pipeline import PipelineConfig

AUTO_THRESHOLD = 0.5
MCT_STRATEGIES = ("filter", "merge", "rerank")

LABEL_RET = "Ret"
LABEL_NORET = "NoRet"


def softmax_pair(z_pos: float, z_neg: float) -> float:
    """Two-way softmax probability of the positive tag.

    Equals ``exp(z_pos) / (exp(z_pos) + exp(z_neg))``, computed with
    max-subtraction so magnitudes up to 1e4 neither overflow nor lose the
    result's finiteness. Strictly inside (0, 1) until float64 saturates
    (|z_pos - z_neg| beyond ~745).
    """
    if not (math.isfinite(z_pos) and math.isfinite(z_neg)):
        raise ValidationError(f"softmax_pair requires finite logits, got ({z_pos}, {z_neg})")
    m = max(z_pos, z_neg)
    ea = math.exp(z_pos - m)
    eb = math.exp(z_neg - m)
    return ea / (ea + eb)


@dataclass(frozen=True)
class RetDecision:
    """Outcome of the retrieval-necessity gate: Ret iff score > gamma."""

    score: float
    label: str
    gamma: float


def decide_ret(score: float, gamma: float) -> RetDecision:
    """Threshold the retrieval score; equality resolves to NoRet."""
    if not 0.0 < gamma < 1.0:
        raise ValidationError(f"gamma must be in (0, 1), got {gamma}")
    label = LABEL_RET if score > gamma else LABEL_NORET
    return RetDecision(score=score, label=label, gamma=gamma)


@dataclass(frozen=True)
class ScoredDoc:
    doc_id: str
    srt_score: float
    retrieval_rank: int


@dataclass(frozen=True)
class SrtSelectionMode:
    """Either keep everything scoring above 0.5 (auto) or the top n (fixed)."""

    kind: str  # "auto" | "fixed"
    n: int | None = None

    def __post_init__(self) -> None:
        if self.kind == "auto":
            if self.n is not None:
                raise ValidationError("auto selection mode takes no n")
        elif self.kind == "fixed":
            if self.n is None or self.n < 1:
                raise ValidationError(f"fixed selection mode needs n >= 1, got {self.n}")
        else:
            raise ValidationError(f"unknown selection mode {self.kind!r}")

    @classmethod
    def auto(cls) -> SrtSelectionMode:
        return cls(kind="auto")

    @classmethod
    def fixed(cls, n: int) -> SrtSelectionMode:
        return cls(kind="fixed", n=n)

    @classmethod
    def parse(cls, value) -> SrtSelectionMode:
        if value == "auto":
            return cls.auto()
        if isinstance(value, int) and not isinstance(value, bool):
            return cls.fixed(value)
        raise ValidationError(f"srt_mode must be \"auto\" or a positive integer, got {value!r}")

    def to_json(self):
        return "auto" if self.kind == "auto" else self.n


def select_srt(scored: Sequence[ScoredDoc], mode: SrtSelectionMode) -> list[ScoredDoc]:
    """Order by relevance score descending and keep per the mode.

    Ties break by ascending retrieval rank, then ascending doc_id. Auto
    mode keeps strictly-above-0.5 scores only and may return nothing.
    """
    ordered = sorted(scored, key=lambda d: (-d.srt_score, d.retrieval_rank, d.doc_id))
    if mode.kind == "auto":
        return [d for d in ordered if d.srt_score > AUTO_THRESHOLD]
    return ordered[: min(mode.n, len(ordered))]


@dataclass(frozen=True)
class ContextSet:
    """The reference documents (or merged summary) handed to generation."""

    docs: tuple[Document, ...]
    synthetic_summary: str | None = None
    strategy_provenance: str = "none"

    def __post_init__(self) -> None:
        if self.strategy_provenance == "mct-merge":
            if self.docs or self.synthetic_summary is None:
                raise ValidationError("merge context must be document-free with a summary")
        elif self.synthetic_summary is not None:
            raise ValidationError("only merge contexts carry a synthetic summary")

    @classmethod
    def empty(cls, provenance: str = "none") -> ContextSet:
        return cls(docs=(), synthetic_summary=None, strategy_provenance=provenance)


def apply_mct(
    query: QueryRecord,
    selected: ContextSet,
    strategy: str,
    gateway: "Gateway",
) -> ContextSet:
    """Refine a selected document set with the consistency backend.

    filter keeps only backend-kept documents; merge replaces them with the
    backend summary; rerank moves kept documents to the front. A single
    document passes through untouched, with no backend call.
    """
    if strategy not in MCT_STRATEGIES:
        raise ValidationError(f"unknown MCT strategy {strategy!r}")
    if not selected.docs:
        raise ValidationError("apply_mct requires a non-empty document set")
    if len(selected.docs) == 1:
        return selected

    result = gateway.refine_consistency(query, list(selected.docs), PROMPT_CST)
    kept = result.kept_indices
    if kept and kept[-1] >= len(selected.docs):
        raise GatewayProtocolError(
            f"consistency backend kept index {kept[-1]} for {len(selected.docs)} documents"
        )
    if strategy == "filter":
        return ContextSet(
            docs=tuple(selected.docs[i] for i in kept),
            strategy_provenance="mct-filter",
        )
    if strategy == "merge":
        if not result.summary:
            raise GatewayProtocolError("consistency backend returned no summary for merge strategy")
        return ContextSet(
            docs=(),
            synthetic_summary=result.summary,
            strategy_provenance="mct-merge",
        )
    kept_set = set(kept)
    reordered = [selected.docs[i] for i in kept]
    reordered.extend(d for i, d in enumerate(selected.docs) if i not in kept_set)
    return ContextSet(docs=tuple(reordered), strategy_provenance="mct-rerank")


@dataclass
class TokenStackTrace:
    """Everything the stack observed, for trace recording."""

    ret_decision: RetDecision | None
    retrieved: list[RetrievalHit]
    srt_scores: list[ScoredDoc] | None
    context: ContextSet


def run_token_stack_traced(
    query: QueryRecord,
    config: "PipelineConfig",
    gateway: "Gateway",
    resolve_doc: Callable[[str], Document],
    provide_hits: Callable[[], list[RetrievalHit]],
) -> TokenStackTrace:
    """Compose the enabled stages; retrieval is pulled lazily.

    A NoRet gate decision short-circuits before ``provide_hits`` runs, so
    gated-off queries never touch the retriever.
    """
    flags = config.stage_flags
    ret_decision: RetDecision | None = None
    if flags.ret:
        logits = gateway.score_tags(query, None, PROMPT_RET, RET_TAGS)
        score = softmax_pair(logits.tag_to_logit[TAG_RET], logits.tag_to_logit[TAG_NORET])
        ret_decision = decide_ret(score, config.gamma)
        if ret_decision.label == LABEL_NORET:
            return TokenStackTrace(ret_decision, [], None, ContextSet.empty("none"))

    retrieved = provide_hits()
    docs = [resolve_doc(hit.doc_id) for hit in retrieved]
    if not flags.srt:
        return TokenStackTrace(
            ret_decision, retrieved, None, ContextSet(docs=tuple(docs), strategy_provenance="none")
        )

    scored: list[ScoredDoc] = []
    for hit, doc in zip(retrieved, docs):
        logits = gateway.score_tags(query, doc, PROMPT_SRT, SRT_TAGS)
        score = softmax_pair(logits.tag_to_logit[TAG_REL], logits.tag_to_logit[TAG_NOREL])
        scored.append(ScoredDoc(doc_id=doc.doc_id, srt_score=score, retrieval_rank=hit.rank))
    selected = select_srt(scored, config.srt_mode)
    context = ContextSet(
        docs=tuple(resolve_doc(d.doc_id) for d in selected), strategy_provenance="srt"
    )
    if not context.docs:
        return TokenStackTrace(ret_decision, retrieved, scored, ContextSet.empty("srt"))

    if flags.mct:
        context = apply_mct(query, context, config.mct_strategy, gateway)
    return TokenStackTrace(ret_decision, retrieved, scored, context)


def run_token_stack(
    query: QueryRecord,
    retrieved: Sequence[RetrievalHit],
    config: "PipelineConfig",
    gateway: "Gateway",
    resolve_doc: Callable[[str], Document],
) -> ContextSet:
    """Stack over an already-materialized retrieval list (see traced variant)."""
    trace = run_token_stack_traced(
        query, config, gateway, resolve_doc, lambda: list(retrieved)
    )
    return trace.context
