"""Model-backend contract, deterministic mock oracle, and HTTP plumbing.

The engine only ever talks to a :class:`Gateway`. Two implementations ship
here: :class:`MockOracle`, a pure function of a truth table (the test
backend), and :class:`RemoteGateway`, an HTTP client for any service that
implements the wire protocol. ``serve_mock`` hosts a MockOracle behind the
same protocol, so in-process and served mock runs are byte-identical.
"""

from __future__ import annotations

import abc
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Sequence

import requests

from .errors import (
    GatewayConnectionError,
    GatewayError,
    GatewayProtocolError,
    ValidationError,
)
from .kb import Document, QueryRecord
from .wire import (
    CONSIST_PATH,
    GENERATE_PATH,
    PROMPT_RET,
    PROMPT_SRT,
    SCORE_TAGS_PATH,
    ConsistencyResult,
    ConsistRequest,
    GenerateRequest,
    GenerationResult,
    ScoreTagsRequest,
    TagLogits,
    WireDoc,
    WireQuery,
    canonical_json,
)

logger = logging.getLogger(__name__)

DEFAULT_MARGIN = 2.0
DEFAULT_TIMEOUT = 30.0
DEFAULT_RETRIES = 2
DEFAULT_MAX_INFLIGHT = 8


def _check_score_tags_args(document: Document | None, prompt_id: str) -> None:
    if prompt_id == PROMPT_SRT and document is None:
        raise ValidationError("score_tags with P_SRT requires a document")
    if prompt_id == PROMPT_RET and document is not None:
        raise ValidationError("score_tags with P_RET must not carry a document")
    if prompt_id not in (PROMPT_RET, PROMPT_SRT):
        raise ValidationError(f"score_tags: unsupported prompt_id {prompt_id!r}")


class Gateway(abc.ABC):
    """Tag scoring, answer generation, and consistency refinement."""

    @abc.abstractmethod
    def score_tags(
        self,
        query: QueryRecord,
        document: Document | None,
        prompt_id: str,
        tags: tuple[str, str],
    ) -> TagLogits: ...

    @abc.abstractmethod
    def generate(
        self,
        query: QueryRecord,
        context_docs: Sequence[Document],
        prompt_id: str,
        summary: str | None = None,
    ) -> GenerationResult: ...

    @abc.abstractmethod
    def refine_consistency(
        self,
        query: QueryRecord,
        docs: Sequence[Document],
        prompt_id: str,
    ) -> ConsistencyResult: ...


@dataclass(frozen=True)
class AnswerEntry:
    answer: str
    correct: bool


@dataclass(frozen=True)
class ConsistencyEntry:
    consistent_doc_ids: tuple[str, ...]
    summary: str


@dataclass
class OracleTruthTable:
    """Fixed answers driving the mock backend.

    ``direct`` answers a query with no context; ``conditioned`` answers a
    query when a given document is in context; ``consistency`` fixes the
    refinement output. ``margin`` is the logit gap the mock emits for
    decided tag pairs.
    """

    direct: dict[str, AnswerEntry] = field(default_factory=dict)
    conditioned: dict[tuple[str, str], AnswerEntry] = field(default_factory=dict)
    consistency: dict[str, ConsistencyEntry] = field(default_factory=dict)
    margin: float = DEFAULT_MARGIN

    def __post_init__(self) -> None:
        if not (self.margin > 0):
            raise ValidationError(f"truth table margin must be > 0, got {self.margin}")

    @classmethod
    def from_payload(cls, obj: dict) -> OracleTruthTable:
        def answer_entry(raw, where: str) -> AnswerEntry:
            if not isinstance(raw, dict) or "answer" not in raw or "correct" not in raw:
                raise ValidationError(f"truth table: {where}: need answer and correct fields")
            answer = str(raw["answer"])
            if not answer.strip():
                raise ValidationError(f"truth table: {where}: answer must be non-empty")
            return AnswerEntry(answer=answer, correct=bool(raw["correct"]))

        direct = {
            str(qid): answer_entry(raw, f"direct[{qid}]")
            for qid, raw in obj.get("direct", {}).items()
        }
        conditioned: dict[tuple[str, str], AnswerEntry] = {}
        for qid, per_doc in obj.get("conditioned", {}).items():
            if not isinstance(per_doc, dict):
                raise ValidationError(f"truth table: conditioned[{qid}] must map doc_id to entry")
            for doc_id, raw in per_doc.items():
                conditioned[(str(qid), str(doc_id))] = answer_entry(
                    raw, f"conditioned[{qid}][{doc_id}]"
                )
        consistency: dict[str, ConsistencyEntry] = {}
        for qid, raw in obj.get("consistency", {}).items():
            ids = raw.get("consistent_doc_ids")
            summary = str(raw.get("summary", ""))
            if not isinstance(ids, list):
                raise ValidationError(f"truth table: consistency[{qid}]: consistent_doc_ids required")
            if ids and not summary:
                raise ValidationError(
                    f"truth table: consistency[{qid}]: summary required when docs are kept"
                )
            consistency[str(qid)] = ConsistencyEntry(
                consistent_doc_ids=tuple(str(d) for d in ids), summary=summary
            )
        return cls(
            direct=direct,
            conditioned=conditioned,
            consistency=consistency,
            margin=float(obj.get("margin", DEFAULT_MARGIN)),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> OracleTruthTable:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: malformed truth table JSON: {exc}") from exc
        return cls.from_payload(obj)

    def to_payload(self) -> dict:
        conditioned: dict[str, dict] = {}
        for (qid, doc_id), entry in self.conditioned.items():
            conditioned.setdefault(qid, {})[doc_id] = {
                "answer": entry.answer,
                "correct": entry.correct,
            }
        return {
            "margin": self.margin,
            "direct": {
                qid: {"answer": e.answer, "correct": e.correct} for qid, e in self.direct.items()
            },
            "conditioned": conditioned,
            "consistency": {
                qid: {"consistent_doc_ids": list(e.consistent_doc_ids), "summary": e.summary}
                for qid, e in self.consistency.items()
            },
        }


class MockOracle(Gateway):
    """Deterministic stand-in model: a pure function of (truth table, request).

    Logit construction: decided pairs get ``+margin/2 / -margin/2``; a
    document whose presence leaves correctness unchanged gets 0.0 on both
    tags (probability 0.5, no signal). The first tag of the requested pair
    is the positive one (retrieve / relevant).
    """

    def __init__(self, table: OracleTruthTable):
        self.table = table

    def _direct(self, query_id: str) -> AnswerEntry:
        try:
            return self.table.direct[query_id]
        except KeyError:
            raise GatewayProtocolError(f"no truth-table entry for query {query_id!r}") from None

    def score_tags(self, query, document, prompt_id, tags):
        _check_score_tags_args(document, prompt_id)
        direct = self._direct(query.query_id)
        half = self.table.margin / 2.0
        pos, neg = tags
        if prompt_id == PROMPT_RET:
            # Retrieval is needed exactly when the direct answer fails.
            z_pos, z_neg = (-half, half) if direct.correct else (half, -half)
        else:
            cond = self.table.conditioned.get((query.query_id, document.doc_id))
            with_doc_correct = cond.correct if cond is not None else direct.correct
            if not direct.correct and with_doc_correct:
                z_pos, z_neg = half, -half
            elif direct.correct and not with_doc_correct:
                z_pos, z_neg = -half, half
            else:
                z_pos = z_neg = 0.0
        return TagLogits(tag_to_logit={pos: z_pos, neg: z_neg})

    def generate(self, query, context_docs, prompt_id, summary=None):
        direct = self._direct(query.query_id)
        # First context document with a conditioned entry wins, which makes
        # SRT/MCT ordering observable. The summary carries no mock signal.
        for doc in context_docs:
            cond = self.table.conditioned.get((query.query_id, doc.doc_id))
            if cond is not None:
                return GenerationResult(text=cond.answer)
        return GenerationResult(text=direct.answer)

    def refine_consistency(self, query, docs, prompt_id):
        if not docs:
            raise ValidationError("refine_consistency requires at least one document")
        try:
            entry = self.table.consistency[query.query_id]
        except KeyError:
            raise GatewayProtocolError(
                f"no truth-table entry for query {query.query_id!r} in consistency table"
            ) from None
        keep = set(entry.consistent_doc_ids)
        kept = tuple(i for i, doc in enumerate(docs) if doc.doc_id in keep)
        return ConsistencyResult(kept_indices=kept, summary=entry.summary)


class RemoteGateway(Gateway):
    """HTTP client for any backend implementing the wire protocol.

    Requests are idempotent by construction, so connection failures,
    timeouts and 5xx responses are retried with exponential backoff.
    In-flight concurrency is capped by a semaphore (default 8).
    """

    def __init__(
        self,
        base_url: str,
        timeout: float = DEFAULT_TIMEOUT,
        retries: int = DEFAULT_RETRIES,
        backoff: float = 0.5,
        max_inflight: int = DEFAULT_MAX_INFLIGHT,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._slots = threading.Semaphore(max_inflight)
        self._session = session or requests.Session()

    def _post(self, path: str, payload: dict) -> dict:
        url = self.base_url + path
        body = canonical_json(payload).encode("utf-8")
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                with self._slots:
                    resp = self._session.post(
                        url,
                        data=body,
                        headers={"Content-Type": "application/json"},
                        timeout=self.timeout,
                    )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_exc = exc
                logger.warning("backend request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code >= 500:
                last_exc = GatewayProtocolError(f"backend returned {resp.status_code}")
                logger.warning("backend 5xx (attempt %d): %s", attempt + 1, resp.status_code)
                continue
            if resp.status_code != 200:
                raise GatewayProtocolError(self._error_detail(resp))
            try:
                obj = resp.json()
            except ValueError as exc:
                raise GatewayProtocolError(f"backend returned malformed JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise GatewayProtocolError("backend response must be a JSON object")
            return obj
        if isinstance(last_exc, GatewayError):
            raise last_exc
        raise GatewayConnectionError(f"backend unreachable at {url}: {last_exc}")

    @staticmethod
    def _error_detail(resp: requests.Response) -> str:
        try:
            obj = resp.json()
            if isinstance(obj, dict) and "error" in obj:
                return str(obj["error"])
        except ValueError:
            pass
        return f"backend returned {resp.status_code}"

    def score_tags(self, query, document, prompt_id, tags):
        _check_score_tags_args(document, prompt_id)
        request = ScoreTagsRequest(
            query=WireQuery(**query.wire_payload()),
            document=WireDoc(**document.wire_payload()) if document else None,
            prompt_id=prompt_id,
            tags=tags,
        )
        obj = self._post(SCORE_TAGS_PATH, request.to_payload())
        return TagLogits.from_payload(obj, expected_tags=tags)

    def generate(self, query, context_docs, prompt_id, summary=None):
        request = GenerateRequest(
            query=WireQuery(**query.wire_payload()),
            context_docs=tuple(WireDoc(**d.wire_payload()) for d in context_docs),
            summary=summary,
            prompt_id=prompt_id,
        )
        obj = self._post(GENERATE_PATH, request.to_payload())
        return GenerationResult.from_payload(obj)

    def refine_consistency(self, query, docs, prompt_id):
        if not docs:
            raise ValidationError("refine_consistency requires at least one document")
        request = ConsistRequest(
            query=WireQuery(**query.wire_payload()),
            docs=tuple(WireDoc(**d.wire_payload()) for d in docs),
            prompt_id=prompt_id,
        )
        obj = self._post(CONSIST_PATH, request.to_payload())
        return ConsistencyResult.from_payload(obj, doc_count=len(docs))


def _doc_from_wire(wire: WireDoc) -> Document:
    return Document(
        doc_id=wire.doc_id,
        page_title=wire.page_title,
        section_id=wire.section_id,
        text=wire.text,
    )


def _query_from_wire(wire: WireQuery) -> QueryRecord:
    return QueryRecord(query_id=wire.query_id, question=wire.question)


class _MockHandler(BaseHTTPRequestHandler):
    oracle: MockOracle  # set on the server class by serve_mock

    def log_message(self, fmt, *args):  # route http.server chatter to logging
        logger.debug("mock server: " + fmt, *args)

    def _send(self, status: int, payload: dict) -> None:
        body = canonical_json(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):  # noqa: N802 (http.server naming)
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        try:
            obj = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            self._send(400, {"error": f"malformed request JSON: {exc}"})
            return
        oracle = self.server.oracle  # type: ignore[attr-defined]
        try:
            if self.path == SCORE_TAGS_PATH:
                req = ScoreTagsRequest.from_payload(obj)
                doc = _doc_from_wire(req.document) if req.document else None
                result = oracle.score_tags(_query_from_wire(req.query), doc, req.prompt_id, req.tags)
            elif self.path == GENERATE_PATH:
                req = GenerateRequest.from_payload(obj)
                result = oracle.generate(
                    _query_from_wire(req.query),
                    [_doc_from_wire(d) for d in req.context_docs],
                    req.prompt_id,
                    summary=req.summary,
                )
            elif self.path == CONSIST_PATH:
                req = ConsistRequest.from_payload(obj)
                result = oracle.refine_consistency(
                    _query_from_wire(req.query),
                    [_doc_from_wire(d) for d in req.docs],
                    req.prompt_id,
                )
            else:
                self._send(404, {"error": f"unknown endpoint {self.path}"})
                return
        except (ValidationError, GatewayError) as exc:
            # Verbatim message: clients re-raise it, keeping served and
            # in-process error traces identical.
            self._send(422, {"error": str(exc)})
            return
        self._send(200, result.to_payload())


class MockServer(ThreadingHTTPServer):
    daemon_threads = True
    oracle: MockOracle


def serve_mock(oracle: MockOracle, host: str = "127.0.0.1", port: int = 0) -> MockServer:
    """Host the oracle behind the wire protocol; caller drives serve_forever."""
    server = MockServer((host, port), _MockHandler)
    server.oracle = oracle
    return server


class running_mock_server:
    """Context manager: serve a MockOracle on an ephemeral port."""

    def __init__(self, oracle: MockOracle, host: str = "127.0.0.1", port: int = 0):
        self._server = serve_mock(oracle, host, port)
        self.url = f"http://{host}:{self._server.server_address[1]}"
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def __enter__(self) -> str:
        self._thread.start()
        return self.url

    def __exit__(self, *exc_info) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)
