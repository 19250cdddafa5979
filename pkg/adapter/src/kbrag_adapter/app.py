"""FastAPI service implementing the engine's wire protocol.

Endpoints: POST /v1/score_tags, /v1/generate, /v1/consist. Malformed
requests get 422 (FastAPI validation), model failures 503, and a
consistency reply the strict parser rejects gets 502 with the raw model
output attached for debugging. A single bad request never takes the
process down.
"""

from __future__ import annotations

import logging
import re
from importlib import resources
from pathlib import Path
from typing import Literal

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .model import CausalBackbone, TagBindingError

logger = logging.getLogger(__name__)

PROMPT_FILES = {
    "P_RET": "p_ret.txt",
    "P_SRT": "p_srt.txt",
    "P_CST": "p_cst.txt",
    "P_VQA": "p_vqa.txt",
}

_CONSIST_RE = re.compile(r"^\s*IDX:\s*(?P<idx>[0-9,\s]*)\|\s*SUMMARY:\s*(?P<summary>.*)$", re.DOTALL)


class ConsistParseError(Exception):
    def __init__(self, reason: str, raw: str):
        super().__init__(reason)
        self.raw = raw


def load_templates(directory: str | Path | None = None) -> dict[str, str]:
    templates: dict[str, str] = {}
    if directory is None:
        base = resources.files("kbrag_adapter") / "prompts"
        for prompt_id, name in PROMPT_FILES.items():
            templates[prompt_id] = (base / name).read_text(encoding="utf-8")
        return templates
    directory = Path(directory)
    for prompt_id, name in PROMPT_FILES.items():
        templates[prompt_id] = (directory / name).read_text(encoding="utf-8")
    return templates


class WireQuery(BaseModel):
    query_id: str
    question: str


class WireDoc(BaseModel):
    doc_id: str
    page_title: str = ""
    section_id: str = ""
    text: str


class ScoreTagsRequest(BaseModel):
    query: WireQuery
    document: WireDoc | None = None
    prompt_id: Literal["P_RET", "P_SRT"]
    tags: list[str] = Field(min_length=2, max_length=2)


class ScoreTagsResponse(BaseModel):
    logits: dict[str, float]


class GenerateRequest(BaseModel):
    query: WireQuery
    context_docs: list[WireDoc] = Field(default_factory=list)
    summary: str | None = None
    prompt_id: str


class GenerateResponse(BaseModel):
    text: str


class ConsistRequest(BaseModel):
    query: WireQuery
    docs: list[WireDoc] = Field(min_length=1)
    prompt_id: str


class ConsistResponse(BaseModel):
    kept_indices: list[int]
    summary: str


def doc_block(doc: WireDoc) -> str:
    return f"{doc.page_title} — {doc.text}" if doc.page_title else doc.text


def join_blocks(blocks: list[str]) -> str:
    return "\n\n".join(blocks) if blocks else "(none)"


def parse_consist_reply(text: str, doc_count: int) -> ConsistResponse:
    """Strictly parse 'IDX: i1,i2,... | SUMMARY: ...' model output."""
    match = _CONSIST_RE.match(text)
    if match is None:
        raise ConsistParseError("reply does not match 'IDX: ... | SUMMARY: ...'", raw=text)
    idx_text = match.group("idx").replace(" ", "")
    try:
        indices = [int(part) for part in idx_text.split(",") if part]
    except ValueError:
        raise ConsistParseError("non-integer document index", raw=text) from None
    if sorted(set(indices)) != indices:
        raise ConsistParseError("indices must be unique and ascending", raw=text)
    if indices and (indices[0] < 0 or indices[-1] >= doc_count):
        raise ConsistParseError(f"index out of range for {doc_count} documents", raw=text)
    summary = match.group("summary").strip()
    if indices and not summary:
        raise ConsistParseError("summary missing while documents were kept", raw=text)
    return ConsistResponse(kept_indices=indices, summary=summary)


def create_app(backbone: CausalBackbone, templates: dict[str, str] | None = None) -> FastAPI:
    templates = templates or load_templates()
    app = FastAPI(title="kbrag-adapter")

    @app.exception_handler(ConsistParseError)
    async def _consist_error(_, exc: ConsistParseError):
        return JSONResponse(
            status_code=502,
            content={"error": f"unparseable consistency output: {exc}", "raw": exc.raw},
        )

    @app.exception_handler(TagBindingError)
    async def _binding_error(_, exc: TagBindingError):
        return JSONResponse(status_code=422, content={"error": str(exc)})

    @app.exception_handler(Exception)
    async def _model_error(_, exc: Exception):
        logger.exception("model failure")
        return JSONResponse(status_code=503, content={"error": f"model failure: {exc}"})

    @app.post("/v1/score_tags", response_model=ScoreTagsResponse)
    def score_tags(request: ScoreTagsRequest):
        if request.prompt_id == "P_SRT":
            if request.document is None:
                return JSONResponse(
                    status_code=422, content={"error": "P_SRT requires a document"}
                )
            prompt = templates["P_SRT"].format(
                question=request.query.question, document=doc_block(request.document)
            )
        else:
            if request.document is not None:
                return JSONResponse(
                    status_code=422, content={"error": "P_RET must not carry a document"}
                )
            prompt = templates["P_RET"].format(question=request.query.question)
        logits = backbone.score_first_token(prompt, (request.tags[0], request.tags[1]))
        return ScoreTagsResponse(logits=logits)

    @app.post("/v1/generate", response_model=GenerateResponse)
    def generate(request: GenerateRequest):
        blocks = [doc_block(d) for d in request.context_docs]
        if request.summary:
            blocks.append(request.summary)
        prompt = templates["P_VQA"].format(
            question=request.query.question, documents=join_blocks(blocks)
        )
        text = backbone.generate_text(prompt)
        if not text:
            return JSONResponse(status_code=503, content={"error": "model produced empty output"})
        return GenerateResponse(text=text)

    @app.post("/v1/consist", response_model=ConsistResponse)
    def consist(request: ConsistRequest):
        blocks = [f"[{i}] {doc_block(d)}" for i, d in enumerate(request.docs)]
        prompt = templates["P_CST"].format(
            question=request.query.question, documents=join_blocks(blocks)
        )
        reply = backbone.generate_text(prompt)
        return parse_consist_reply(reply, doc_count=len(request.docs))

    return app
