"""Training-data construction from the target model's own behavior.

Every label is derived by probing the answer backend: a query answered
correctly without context needs no retrieval; a document that flips a
wrong answer to a right one is relevant, one that corrupts a right answer
is not; pairs that change nothing produce no record. Mixtures for the
consistency task contaminate the relevant set with sampled irrelevant
documents and remember where the relevant ones landed.

Label polarity note: correct-without-retrieval maps to [NoRet]. The gate's
inference semantics define [Ret] as "needs external references", so the
label marks what the model should do at inference time, not what it just
demonstrated.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

from .errors import KbragError, ValidationError
from .kb import QueryRecord, RetrievalSource
from .prompts import render_document_block, render_documents
from .wire import PROMPT_CST, PROMPT_RET, PROMPT_SRT, PROMPT_VQA, canonical_json

if TYPE_CHECKING:
    from .gateway import Gateway
    from .harness import Matcher

logger = logging.getLogger(__name__)

LABEL_REL = "Rel"
LABEL_NOREL = "NoRel"


@dataclass(frozen=True)
class RetExample:
    query_id: str
    label: str  # Ret | NoRet


@dataclass(frozen=True)
class SrtExample:
    query_id: str
    doc_id: str
    label: str  # Rel | NoRel


@dataclass(frozen=True)
class MctExample:
    query_id: str
    summary: str
    mixed_doc_ids: tuple[str, ...]
    idx: tuple[int, ...]  # positions of the relevant docs within the mix


def build_ret_dataset(
    queries: Sequence[QueryRecord],
    gateway: "Gateway",
    matcher: "Matcher",
) -> list[RetExample]:
    """Label each query by whether the bare model already answers it."""
    examples: list[RetExample] = []
    for query in sorted(queries, key=lambda q: q.query_id):
        try:
            answer = gateway.generate(query, [], PROMPT_VQA).text
        except KbragError as exc:
            logger.warning("ret dataset: skipping %s: %s", query.query_id, exc)
            continue
        label = "NoRet" if matcher.is_correct(answer, query) else "Ret"
        examples.append(RetExample(query_id=query.query_id, label=label))
    return examples


def build_srt_dataset(
    queries: Sequence[QueryRecord],
    source: RetrievalSource,
    k: int,
    gateway: "Gateway",
    matcher: "Matcher",
) -> list[SrtExample]:
    """Contrastive relevance labels from answer flips.

    Per query: answer once with no context, then once per top-k document.
    incorrect -> correct yields Rel, correct -> incorrect yields NoRel,
    unchanged correctness yields nothing.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    examples: list[SrtExample] = []
    for query in sorted(queries, key=lambda q: q.query_id):
        try:
            direct = gateway.generate(query, [], PROMPT_VQA).text
            hits = source.hits_for(query, k)
        except KbragError as exc:
            logger.warning("srt dataset: skipping %s: %s", query.query_id, exc)
            continue
        direct_correct = matcher.is_correct(direct, query)
        for hit in hits:
            doc = source.doc(hit.doc_id)
            try:
                conditioned = gateway.generate(query, [doc], PROMPT_VQA).text
            except KbragError as exc:
                logger.warning(
                    "srt dataset: skipping pair (%s, %s): %s", query.query_id, doc.doc_id, exc
                )
                continue
            with_doc_correct = matcher.is_correct(conditioned, query)
            if not direct_correct and with_doc_correct:
                examples.append(SrtExample(query.query_id, doc.doc_id, LABEL_REL))
            elif direct_correct and not with_doc_correct:
                examples.append(SrtExample(query.query_id, doc.doc_id, LABEL_NOREL))
    examples.sort(key=lambda e: (e.query_id, e.doc_id))
    return examples


def _query_rng(seed: int, query_id: str) -> random.Random:
    # Hash-derived so per-query sampling survives query-set changes.
    digest = hashlib.sha256(f"{seed}:{query_id}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def build_mct_dataset(
    srt_dataset: Sequence[SrtExample],
    queries: Sequence[QueryRecord],
    source: RetrievalSource,
    tau_percent: float,
    gateway: "Gateway",
    seed: int = 0,
) -> list[MctExample]:
    """Contaminated consistency mixtures from the relevance dataset.

    Only queries with more than one relevant document qualify. The mix
    holds the relevant set plus ceil(tau% of its size) sampled irrelevant
    documents (capped by availability), uniformly shuffled with a
    per-query seeded generator; idx records where the relevant ones sit.
    """
    if tau_percent < 0:
        raise ValidationError(f"tau_percent must be >= 0, got {tau_percent}")
    by_id = {q.query_id: q for q in queries}
    rel: dict[str, list[str]] = {}
    irrel: dict[str, list[str]] = {}
    for example in srt_dataset:
        bucket = rel if example.label == LABEL_REL else irrel
        bucket.setdefault(example.query_id, []).append(example.doc_id)

    examples: list[MctExample] = []
    for query_id in sorted(rel):
        relevant = sorted(rel[query_id])
        if len(relevant) <= 1:
            continue
        query = by_id.get(query_id)
        if query is None:
            raise ValidationError(f"srt dataset references unknown query {query_id!r}")
        try:
            consistency = gateway.refine_consistency(
                query, [source.doc(d) for d in relevant], PROMPT_CST
            )
        except KbragError as exc:
            logger.warning("mct dataset: skipping %s: %s", query_id, exc)
            continue
        pool = sorted(irrel.get(query_id, []))
        n_neg = min(math.ceil(tau_percent / 100.0 * len(relevant)), len(pool))
        rng = _query_rng(seed, query_id)
        injected = rng.sample(pool, n_neg)
        mixed = relevant + injected
        rng.shuffle(mixed)
        relevant_set = set(relevant)
        idx = tuple(i for i, doc_id in enumerate(mixed) if doc_id in relevant_set)
        examples.append(
            MctExample(
                query_id=query_id,
                summary=consistency.summary,
                mixed_doc_ids=tuple(mixed),
                idx=idx,
            )
        )
    return examples


def _dataset_payload(example) -> dict:
    if isinstance(example, RetExample):
        return {"query_id": example.query_id, "label": example.label}
    if isinstance(example, SrtExample):
        return {"query_id": example.query_id, "doc_id": example.doc_id, "label": example.label}
    if isinstance(example, MctExample):
        return {
            "query_id": example.query_id,
            "summary": example.summary,
            "mixed_doc_ids": list(example.mixed_doc_ids),
            "idx": list(example.idx),
        }
    raise ValidationError(f"not a dataset example: {example!r}")


def write_dataset(examples: Sequence, path: str | Path) -> None:
    lines = "".join(canonical_json(_dataset_payload(e)) + "\n" for e in examples)
    Path(path).write_text(lines, encoding="utf-8")


def load_srt_dataset(path: str | Path) -> list[SrtExample]:
    examples: list[SrtExample] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed JSON line: {exc}") from exc
            label = str(obj.get("label"))
            if label not in (LABEL_REL, LABEL_NOREL):
                raise ValidationError(f"{path}:{lineno}: bad label {label!r}")
            examples.append(
                SrtExample(query_id=str(obj["query_id"]), doc_id=str(obj["doc_id"]), label=label)
            )
    return examples


def export_sft(
    dataset: Sequence,
    kind: str,
    prompts: dict[str, str],
    out_path: str | Path,
    queries: Sequence[QueryRecord],
    source: RetrievalSource | None = None,
    sample_percent: float = 100.0,
    seed: int = 0,
) -> int:
    """Render a dataset into prompt/target JSONL ready for fine-tuning.

    Targets are the literal tag strings for ret/srt and the
    "IDX: ... | SUMMARY: ..." encoding for mct. ``sample_percent`` keeps a
    seeded random subset (the small-high-quality-dataset regime); output
    order stays sorted, so a fixed seed reproduces the file byte for byte.
    """
    if kind not in ("ret", "srt", "mct"):
        raise ValidationError(f"unknown dataset kind {kind!r}")
    if not dataset:
        raise ValidationError("cannot export an empty dataset")
    if not 0.0 < sample_percent <= 100.0:
        raise ValidationError(f"sample_percent must be in (0, 100], got {sample_percent}")
    if kind in ("srt", "mct") and source is None:
        raise ValidationError(f"{kind} export needs a document source")
    by_id = {q.query_id: q for q in queries}

    def question(query_id: str) -> str:
        query = by_id.get(query_id)
        if query is None:
            raise ValidationError(f"dataset references unknown query {query_id!r}")
        return query.question

    chosen = list(dataset)
    if sample_percent < 100.0:
        keep = max(1, round(len(chosen) * sample_percent / 100.0))
        rng = _query_rng(seed, f"sft:{kind}")
        chosen = rng.sample(chosen, keep)
        chosen.sort(key=lambda e: (e.query_id, getattr(e, "doc_id", "")))

    lines: list[str] = []
    for example in chosen:
        if kind == "ret":
            rendered = prompts[PROMPT_RET].format(question=question(example.query_id))
            target = f"[{example.label}]"
        elif kind == "srt":
            doc = source.doc(example.doc_id)
            rendered = prompts[PROMPT_SRT].format(
                question=question(example.query_id),
                document=render_document_block(doc.page_title, doc.text),
            )
            target = f"[{example.label}]"
        else:
            blocks = []
            for i, doc_id in enumerate(example.mixed_doc_ids):
                doc = source.doc(doc_id)
                blocks.append(f"[{i}] {render_document_block(doc.page_title, doc.text)}")
            rendered = prompts[PROMPT_CST].format(
                question=question(example.query_id),
                documents=render_documents(blocks),
            )
            idx_text = ",".join(str(i) for i in example.idx)
            target = f"IDX: {idx_text} | SUMMARY: {example.summary}"
        lines.append(canonical_json({"input": rendered, "target": target}) + "\n")

    Path(out_path).write_text("".join(lines), encoding="utf-8")
    return len(lines)
