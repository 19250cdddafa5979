"""Wire protocol between the engine and model backends.

Three JSON-over-HTTP endpoints; tag strings travel verbatim. Requests carry
structured fields plus a prompt id, never rendered prompt text, so any
inference stack can implement the backend with its own templates.

All payloads serialize through :func:`canonical_json`; golden fixtures
assert that parse -> serialize is byte-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
import json

from .errors import GatewayProtocolError, ValidationError

TAG_RET = "[Ret]"
TAG_NORET = "[NoRet]"
TAG_REL = "[Rel]"
TAG_NOREL = "[NoRel]"
RET_TAGS: tuple[str, str] = (TAG_RET, TAG_NORET)
SRT_TAGS: tuple[str, str] = (TAG_REL, TAG_NOREL)

PROMPT_RET = "P_RET"
PROMPT_SRT = "P_SRT"
PROMPT_CST = "P_CST"
PROMPT_VQA = "P_VQA"

SCORE_TAGS_PATH = "/v1/score_tags"
GENERATE_PATH = "/v1/generate"
CONSIST_PATH = "/v1/consist"


def canonical_json(payload) -> str:
    """Deterministic JSON encoding: sorted keys, compact separators."""
    return json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def _req(obj: dict, key: str, kind: str):
    if not isinstance(obj, dict) or key not in obj:
        raise ValidationError(f"{kind}: missing field {key!r}")
    return obj[key]


@dataclass(frozen=True)
class WireQuery:
    query_id: str
    question: str

    def to_payload(self) -> dict:
        return {"query_id": self.query_id, "question": self.question}

    @classmethod
    def from_payload(cls, obj: dict) -> WireQuery:
        return cls(
            query_id=str(_req(obj, "query_id", "query")),
            question=str(_req(obj, "question", "query")),
        )


@dataclass(frozen=True)
class WireDoc:
    doc_id: str
    page_title: str
    section_id: str
    text: str

    def to_payload(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "page_title": self.page_title,
            "section_id": self.section_id,
            "text": self.text,
        }

    @classmethod
    def from_payload(cls, obj: dict) -> WireDoc:
        return cls(
            doc_id=str(_req(obj, "doc_id", "document")),
            page_title=str(obj.get("page_title", "")),
            section_id=str(obj.get("section_id", "")),
            text=str(_req(obj, "text", "document")),
        )


@dataclass(frozen=True)
class ScoreTagsRequest:
    query: WireQuery
    document: WireDoc | None
    prompt_id: str
    tags: tuple[str, str]

    def to_payload(self) -> dict:
        return {
            "query": self.query.to_payload(),
            "document": self.document.to_payload() if self.document else None,
            "prompt_id": self.prompt_id,
            "tags": list(self.tags),
        }

    @classmethod
    def from_payload(cls, obj: dict) -> ScoreTagsRequest:
        tags = _req(obj, "tags", "score_tags request")
        if not isinstance(tags, list) or len(tags) != 2:
            raise ValidationError("score_tags request: tags must be a pair")
        doc_obj = obj.get("document")
        prompt_id = str(_req(obj, "prompt_id", "score_tags request"))
        if prompt_id not in (PROMPT_RET, PROMPT_SRT):
            raise ValidationError(f"score_tags request: bad prompt_id {prompt_id!r}")
        if prompt_id == PROMPT_SRT and doc_obj is None:
            raise ValidationError("score_tags request: P_SRT requires a document")
        if prompt_id == PROMPT_RET and doc_obj is not None:
            raise ValidationError("score_tags request: P_RET must not carry a document")
        return cls(
            query=WireQuery.from_payload(_req(obj, "query", "score_tags request")),
            document=WireDoc.from_payload(doc_obj) if doc_obj is not None else None,
            prompt_id=prompt_id,
            tags=(str(tags[0]), str(tags[1])),
        )


@dataclass(frozen=True)
class TagLogits:
    """Raw first-token logits for exactly the requested tag strings."""

    tag_to_logit: dict[str, float]

    def to_payload(self) -> dict:
        return {"logits": {tag: float(z) for tag, z in self.tag_to_logit.items()}}

    @classmethod
    def from_payload(cls, obj: dict, expected_tags: tuple[str, ...] | None = None) -> TagLogits:
        logits = _req(obj, "logits", "score_tags response")
        if not isinstance(logits, dict):
            raise GatewayProtocolError("score_tags response: logits must be an object")
        parsed = {str(tag): float(z) for tag, z in logits.items()}
        for z in parsed.values():
            if not math.isfinite(z):
                raise GatewayProtocolError("score_tags response: non-finite logit")
        if expected_tags is not None and set(parsed) != set(expected_tags):
            missing = set(expected_tags) - set(parsed)
            raise GatewayProtocolError(
                f"score_tags response: logits do not match requested tags "
                f"(missing {sorted(missing)!r})" if missing else
                "score_tags response: logits carry unrequested tags"
            )
        return cls(tag_to_logit=parsed)


@dataclass(frozen=True)
class GenerateRequest:
    query: WireQuery
    context_docs: tuple[WireDoc, ...]
    summary: str | None
    prompt_id: str

    def to_payload(self) -> dict:
        return {
            "query": self.query.to_payload(),
            "context_docs": [d.to_payload() for d in self.context_docs],
            "summary": self.summary,
            "prompt_id": self.prompt_id,
        }

    @classmethod
    def from_payload(cls, obj: dict) -> GenerateRequest:
        docs = _req(obj, "context_docs", "generate request")
        if not isinstance(docs, list):
            raise ValidationError("generate request: context_docs must be a list")
        summary = obj.get("summary")
        return cls(
            query=WireQuery.from_payload(_req(obj, "query", "generate request")),
            context_docs=tuple(WireDoc.from_payload(d) for d in docs),
            summary=str(summary) if summary is not None else None,
            prompt_id=str(_req(obj, "prompt_id", "generate request")),
        )


@dataclass(frozen=True)
class GenerationResult:
    text: str

    def to_payload(self) -> dict:
        return {"text": self.text}

    @classmethod
    def from_payload(cls, obj: dict) -> GenerationResult:
        text = str(_req(obj, "text", "generate response"))
        if not text.strip():
            raise GatewayProtocolError("generate response: empty generation")
        return cls(text=text)


@dataclass(frozen=True)
class ConsistRequest:
    query: WireQuery
    docs: tuple[WireDoc, ...]
    prompt_id: str

    def to_payload(self) -> dict:
        return {
            "query": self.query.to_payload(),
            "docs": [d.to_payload() for d in self.docs],
            "prompt_id": self.prompt_id,
        }

    @classmethod
    def from_payload(cls, obj: dict) -> ConsistRequest:
        docs = _req(obj, "docs", "consist request")
        if not isinstance(docs, list) or not docs:
            raise ValidationError("consist request: docs must be a non-empty list")
        return cls(
            query=WireQuery.from_payload(_req(obj, "query", "consist request")),
            docs=tuple(WireDoc.from_payload(d) for d in docs),
            prompt_id=str(_req(obj, "prompt_id", "consist request")),
        )


@dataclass(frozen=True)
class ConsistencyResult:
    """Indices of documents judged mutually consistent, plus a merged summary."""

    kept_indices: tuple[int, ...]
    summary: str

    def to_payload(self) -> dict:
        return {"kept_indices": list(self.kept_indices), "summary": self.summary}

    @classmethod
    def from_payload(cls, obj: dict, doc_count: int | None = None) -> ConsistencyResult:
        kept = _req(obj, "kept_indices", "consist response")
        if not isinstance(kept, list) or not all(isinstance(i, int) for i in kept):
            raise GatewayProtocolError("consist response: kept_indices must be integers")
        if sorted(set(kept)) != kept:
            raise GatewayProtocolError("consist response: kept_indices must be unique and ascending")
        if kept and kept[0] < 0:
            raise GatewayProtocolError("consist response: negative document index")
        if doc_count is not None and kept and kept[-1] >= doc_count:
            raise GatewayProtocolError(
                f"consist response: document index {kept[-1]} out of range for {doc_count} docs"
            )
        summary = str(_req(obj, "summary", "consist response"))
        if kept and not summary:
            raise GatewayProtocolError("consist response: summary empty while documents were kept")
        return cls(kept_indices=tuple(kept), summary=summary)
