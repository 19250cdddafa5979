"""Answer matchers, accuracy aggregation, and the ablation/sweep runners.

The matchers here define "correct" for the whole package: the trace
recorder and the training-data builders all judge answers through the
same predicate, so there is exactly one notion of correctness.

The relaxed normalized match stands in for learned answer-equivalence
scoring; absolute numbers are not comparable to metrics computed with a
learned scorer, and reports say so in their config snapshots.
"""

from __future__ import annotations

import logging
import re
import unicodedata
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Sequence

from .errors import ValidationError
from .kb import QueryRecord, RetrievalSource
from .pipeline import PipelineConfig, QueryTrace, StageFlags, run_batch
from .tokens import SrtSelectionMode

if TYPE_CHECKING:
    from .gateway import Gateway

logger = logging.getLogger(__name__)

MATCHER_KINDS = ("vqa_score", "relaxed_match", "numeric_range")
_ARTICLES = ("a", "an", "the")
_FIRST_NUMBER = re.compile(r"[-+]?(?:\d+\.\d*|\.\d+|\d+)")
UNTAGGED_SPLIT = "untagged"


@dataclass(frozen=True)
class Matcher:
    """Deterministic answer-correctness predicate.

    ``judge`` returns a fractional score in [0, 1]; ``is_correct``
    binarizes it at ``correct_threshold`` (strictly greater), so a
    two-annotator agreement counts as correct under vqa_score.

    Queries carrying an answer_range are always judged by numeric
    containment; ``kind`` selects the behavior for gold-answer queries
    (numeric_range falls back to relaxed matching there).
    """

    kind: str = "relaxed_match"
    lowercase: bool = True
    strip_punctuation: bool = True
    strip_articles: bool = True
    correct_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in MATCHER_KINDS:
            raise ValidationError(f"unknown matcher kind {self.kind!r}")

    def normalize(self, text: str) -> str:
        s = text
        if self.lowercase:
            s = s.lower()
        if self.strip_punctuation:
            s = "".join(" " if unicodedata.category(c).startswith("P") else c for c in s)
        words = s.split()
        if self.strip_articles:
            while words and words[0] in _ARTICLES:
                words.pop(0)
        return " ".join(words)

    def judge(self, prediction: str, query: QueryRecord) -> float:
        if not prediction or not prediction.strip():
            raise ValidationError("prediction must be non-empty")
        if query.answer_range is not None:
            lo, hi = query.answer_range
            match = _FIRST_NUMBER.search(prediction)
            if match is None:
                return 0.0
            return 1.0 if lo <= float(match.group()) <= hi else 0.0
        assert query.gold_answers is not None
        norm_pred = self.normalize(prediction)
        if self.kind == "vqa_score":
            matches = sum(1 for gold in query.gold_answers if self.normalize(gold) == norm_pred)
            return min(matches / 3.0, 1.0)
        hit = any(self.normalize(gold) == norm_pred for gold in query.gold_answers)
        return 1.0 if hit else 0.0

    def is_correct(self, prediction: str, query: QueryRecord) -> bool:
        return self.judge(prediction, query) > self.correct_threshold


def judge(prediction: str, query: QueryRecord, matcher: Matcher) -> float:
    return matcher.judge(prediction, query)


@dataclass
class EvalReport:
    """Accuracy per split plus the config snapshot that produced it.

    ``overall`` is computed over every trace; it equals the count-weighted
    mean of the split accuracies whenever split tags partition the query
    set (queries with no tags land in the "untagged" split).
    """

    config: dict
    overall: float
    splits: dict[str, float]
    counts: dict[str, int]

    def to_payload(self) -> dict:
        return {
            "config": self.config,
            "overall": self.overall,
            "splits": self.splits,
            "counts": self.counts,
        }


def evaluate(
    traces: Sequence[QueryTrace],
    queries: Sequence[QueryRecord],
    matcher: Matcher,
    config: PipelineConfig | None = None,
) -> EvalReport:
    """Aggregate judge scores over traces; deterministic given its inputs."""
    if not traces:
        raise ValidationError("no traces to evaluate")
    by_id = {q.query_id: q for q in queries}
    total_score = 0.0
    split_scores: dict[str, float] = {}
    split_counts: dict[str, int] = {}
    for trace in traces:
        query = by_id.get(trace.query_id)
        if query is None:
            raise ValidationError(f"trace references unknown query {trace.query_id!r}")
        score = 0.0 if trace.answer is None else matcher.judge(trace.answer, query)
        total_score += score
        tags = query.split_tags or (UNTAGGED_SPLIT,)
        for tag in tags:
            split_scores[tag] = split_scores.get(tag, 0.0) + score
            split_counts[tag] = split_counts.get(tag, 0) + 1
    splits = {tag: split_scores[tag] / split_counts[tag] for tag in sorted(split_scores)}
    counts = {tag: split_counts[tag] for tag in sorted(split_counts)}
    counts["total"] = len(traces)
    snapshot = {"matcher": matcher.kind}
    if config is not None:
        snapshot.update(config.to_json())
    return EvalReport(
        config=snapshot,
        overall=total_score / len(traces),
        splits=splits,
        counts=counts,
    )


def trace_from_payload(obj: dict) -> QueryTrace:
    """Rehydrate the fields evaluation needs from a traces.jsonl line."""
    return QueryTrace(
        query_id=str(obj["query_id"]),
        answer=obj.get("answer"),
        correct=obj.get("correct"),
        error=obj.get("error"),
    )


ABLATION_ROWS: tuple[tuple[str, StageFlags, str], ...] = (
    ("none", StageFlags(), "5"),
    ("ret", StageFlags(ret=True), "5"),
    ("srt", StageFlags(srt=True), "auto"),
    ("ret+srt", StageFlags(ret=True, srt=True), "auto"),
    ("srt+mct", StageFlags(srt=True, mct=True), "auto"),
    ("ret+srt+mct", StageFlags(ret=True, srt=True, mct=True), "auto"),
)


def _row_config(base: PipelineConfig, flags: StageFlags, srt_mode: SrtSelectionMode, k: int) -> PipelineConfig:
    strategy = base.mct_strategy
    if flags.mct and strategy is None:
        strategy = "filter"
    return PipelineConfig(
        gamma=base.gamma,
        k=k,
        srt_mode=srt_mode,
        mct_strategy=strategy,
        tau_percent=base.tau_percent,
        stage_flags=flags,
    )


def run_ablation(
    queries: Sequence[QueryRecord],
    source: RetrievalSource,
    gateway: "Gateway",
    base_config: PipelineConfig,
    matcher: Matcher,
    parallelism: int = 1,
) -> list[tuple[str, EvalReport]]:
    """Six stage combinations, from no tokens to the full stack.

    The first two rows keep the raw top-k context (k from the base
    config); rows with the relevance stage use auto selection. When the
    base config names no MCT strategy the filter strategy is used.
    """
    rows: list[tuple[str, EvalReport]] = []
    for label, flags, _k_display in ABLATION_ROWS:
        mode = SrtSelectionMode.auto() if flags.srt else base_config.srt_mode
        config = _row_config(base_config, flags, mode, base_config.k)
        traces = run_batch(queries, source, config, gateway, parallelism, matcher)
        report = evaluate(traces, queries, matcher, config)
        report.config["stages"] = label
        rows.append((label, report))
        logger.info("ablation row %-12s overall=%.4f", label, report.overall)
    return rows


def _sweep_point(base: PipelineConfig, value) -> tuple[SrtSelectionMode, int]:
    """Map a swept k value to (selection mode, retrieval depth)."""
    mode = SrtSelectionMode.parse(value)
    k = base.k if mode.kind == "auto" else max(base.k, mode.n)
    return mode, k


def run_sweep(
    queries: Sequence[QueryRecord],
    source: RetrievalSource,
    gateway: "Gateway",
    base_config: PipelineConfig,
    matcher: Matcher,
    sweep: dict,
    parallelism: int = 1,
) -> list[tuple[str, EvalReport]]:
    """Run a parameter grid: {"srt_k": [...]} or {"mct_strategy": [...], "k": [...]}.

    Swept k is the relevance-selection mode ("auto" or a fixed top-n);
    retrieval depth grows to cover fixed n. Retrieval gating stays off so
    every query exercises the swept stage.
    """
    rows: list[tuple[str, EvalReport]] = []
    if "srt_k" in sweep:
        for value in sweep["srt_k"]:
            mode, k = _sweep_point(base_config, value)
            config = _row_config(base_config, StageFlags(srt=True), mode, k)
            traces = run_batch(queries, source, config, gateway, parallelism, matcher)
            report = evaluate(traces, queries, matcher, config)
            label = f"srt_k={value}"
            report.config["sweep_point"] = label
            rows.append((label, report))
    elif "mct_strategy" in sweep:
        k_values = sweep.get("k", ["auto"])
        for strategy in sweep["mct_strategy"]:
            if strategy not in ("filter", "merge", "rerank"):
                raise ValidationError(f"unknown MCT strategy {strategy!r}")
            for value in k_values:
                mode, k = _sweep_point(base_config, value)
                config = replace(
                    _row_config(base_config, StageFlags(srt=True, mct=True), mode, k),
                    mct_strategy=strategy,
                )
                traces = run_batch(queries, source, config, gateway, parallelism, matcher)
                report = evaluate(traces, queries, matcher, config)
                label = f"{strategy},k={value}"
                report.config["sweep_point"] = label
                rows.append((label, report))
    else:
        raise ValidationError("sweep must specify srt_k or mct_strategy")
    return rows
