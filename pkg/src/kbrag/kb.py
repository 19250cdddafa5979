"""Knowledge-base ingestion and deterministic dense retrieval.

A knowledge base is three files: ``docs.jsonl`` (one document per line),
``vectors.bin`` (row-major little-endian float32) and ``manifest.json``
describing the vector file. Query records live in a separate
``queries.jsonl`` but index rows of the same vector file, so query-image
and document-image embeddings share one space.

Retrieval is an exhaustive cosine scan: exact, order-independent and
reproducible, which is what the test oracles require at desk scale.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-4


@dataclass(frozen=True)
class Document:
    """One knowledge-base passage (a Wikipedia section, typically)."""

    doc_id: str
    page_title: str
    section_id: str
    text: str
    embedding_rows: tuple[int, ...] = ()

    def wire_payload(self) -> dict:
        """Fields transmitted to model backends (embeddings stay local)."""
        return {
            "doc_id": self.doc_id,
            "page_title": self.page_title,
            "section_id": self.section_id,
            "text": self.text,
        }


@dataclass(frozen=True)
class QueryRecord:
    """An image-question pair with its gold labels.

    Exactly one of ``gold_answers`` / ``answer_range`` is set.
    ``embedding_row`` may be None when retrieval comes from a ranked run.
    """

    query_id: str
    question: str
    embedding_row: int | None = None
    gold_answers: tuple[str, ...] | None = None
    answer_range: tuple[float, float] | None = None
    split_tags: tuple[str, ...] = ()

    def wire_payload(self) -> dict:
        """Fields transmitted to model backends (gold labels stay local)."""
        return {"query_id": self.query_id, "question": self.question}


@dataclass(frozen=True)
class RetrievalHit:
    doc_id: str
    similarity: float
    rank: int


class RetrievalSource(Protocol):
    """Anything the pipeline can pull ranked context documents from."""

    def hits_for(self, query: QueryRecord, k: int) -> list[RetrievalHit]: ...

    def doc(self, doc_id: str) -> Document: ...


@dataclass
class VectorStore:
    """In-memory view of the binary vector file, rows renormalized to unit L2."""

    dim: int
    count: int
    vectors: np.ndarray  # float64, shape (count, dim), unit rows
    normalized: bool

    @classmethod
    def load(cls, manifest_path: str | Path, vectors_path: str | Path) -> VectorStore:
        manifest_path = Path(manifest_path)
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{manifest_path}: malformed manifest JSON: {exc}") from exc
        for key in ("dim", "count", "dtype", "normalized"):
            if key not in manifest:
                raise ValidationError(f"{manifest_path}: manifest missing field {key!r}")
        if manifest["dtype"] != "f32le":
            raise ValidationError(f"{manifest_path}: unsupported dtype {manifest['dtype']!r}")
        dim = int(manifest["dim"])
        count = int(manifest["count"])
        if dim <= 0:
            raise ValidationError(f"{manifest_path}: dim must be positive")
        if count < 0:
            raise ValidationError(f"{manifest_path}: count must be non-negative")

        raw = np.fromfile(vectors_path, dtype="<f4")
        if raw.size != count * dim:
            raise ValidationError(
                f"{vectors_path}: vector file size mismatch: "
                f"expected {count}x{dim} float32 ({count * dim * 4} bytes), "
                f"found {raw.size * 4} bytes"
            )
        vectors = raw.reshape(count, dim).astype(np.float64)

        if not np.all(np.isfinite(vectors)):
            bad = int(np.argwhere(~np.isfinite(vectors).all(axis=1))[0][0])
            raise ValidationError(f"{vectors_path}: non-finite values in row {bad}")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0.0):
            bad = int(np.argmin(norms))
            raise ValidationError(f"{vectors_path}: zero vector at row {bad}")
        if manifest["normalized"] and count:
            worst = float(np.max(np.abs(norms - 1.0)))
            if worst > NORM_TOLERANCE:
                raise ValidationError(
                    f"{vectors_path}: manifest claims normalized vectors but "
                    f"a row deviates from unit norm by {worst:.2e}"
                )
        # Exact renormalization keeps cosine values inside [-1, 1] regardless
        # of what the manifest promised.
        vectors = vectors / norms[:, None]
        return cls(dim=dim, count=count, vectors=vectors, normalized=bool(manifest["normalized"]))

    def row(self, index: int) -> np.ndarray:
        if not 0 <= index < self.count:
            raise ValidationError(f"embedding row out of range: {index} (store has {self.count} rows)")
        return self.vectors[index]


def _parse_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed JSON line: {exc}") from exc
            if not isinstance(obj, dict):
                raise ValidationError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ValidationError(f"{where}: missing field {key!r}")
    return obj[key]


def load_documents(path: str | Path) -> list[Document]:
    docs: list[Document] = []
    seen: set[str] = set()
    for lineno, obj in _parse_jsonl(path):
        where = f"{path}:{lineno}"
        doc_id = str(_require(obj, "doc_id", where))
        if doc_id in seen:
            raise ValidationError(f"{where}: duplicate doc_id {doc_id!r}")
        seen.add(doc_id)
        text = str(_require(obj, "text", where))
        if not text:
            raise ValidationError(f"{where}: document text must be non-empty")
        rows = obj.get("embedding_rows", [])
        if not isinstance(rows, list) or not all(isinstance(r, int) for r in rows):
            raise ValidationError(f"{where}: embedding_rows must be a list of integers")
        docs.append(
            Document(
                doc_id=doc_id,
                page_title=str(obj.get("page_title", "")),
                section_id=str(obj.get("section_id", "")),
                text=text,
                embedding_rows=tuple(rows),
            )
        )
    return docs


def load_queries(path: str | Path) -> list[QueryRecord]:
    queries: list[QueryRecord] = []
    seen: set[str] = set()
    for lineno, obj in _parse_jsonl(path):
        where = f"{path}:{lineno}"
        query_id = str(_require(obj, "query_id", where))
        if query_id in seen:
            raise ValidationError(f"{where}: duplicate query_id {query_id!r}")
        seen.add(query_id)
        question = str(_require(obj, "question", where))

        gold = obj.get("gold_answers")
        rng = obj.get("answer_range")
        if (gold is None) == (rng is None):
            raise ValidationError(
                f"{where}: exactly one of gold_answers / answer_range must be present"
            )
        gold_answers: tuple[str, ...] | None = None
        answer_range: tuple[float, float] | None = None
        if gold is not None:
            if not isinstance(gold, list) or not gold:
                raise ValidationError(f"{where}: gold_answers must be a non-empty list")
            gold_answers = tuple(str(a) for a in gold)
        else:
            if not isinstance(rng, list) or len(rng) != 2:
                raise ValidationError(f"{where}: answer_range must be [lo, hi]")
            lo, hi = float(rng[0]), float(rng[1])
            if not (np.isfinite(lo) and np.isfinite(hi)):
                raise ValidationError(f"{where}: answer_range bounds must be finite")
            if lo > hi:
                raise ValidationError(f"{where}: answer_range has lo > hi")
            answer_range = (lo, hi)

        row = obj.get("embedding_row")
        if row is not None and (not isinstance(row, int) or row < 0):
            raise ValidationError(f"{where}: embedding_row must be a non-negative integer or null")
        tags = obj.get("split_tags", [])
        if not isinstance(tags, list):
            raise ValidationError(f"{where}: split_tags must be a list")
        queries.append(
            QueryRecord(
                query_id=query_id,
                question=question,
                embedding_row=row,
                gold_answers=gold_answers,
                answer_range=answer_range,
                split_tags=tuple(str(t) for t in tags),
            )
        )
    return queries


@dataclass
class KnowledgeBase:
    """Immutable document index with exhaustive top-k cosine retrieval.

    Safe for unlimited concurrent readers once constructed; nothing here
    mutates after ``__init__``.
    """

    documents: dict[str, Document]
    store: VectorStore
    _flat_rows: np.ndarray = field(init=False, repr=False)
    _flat_owner: np.ndarray = field(init=False, repr=False)
    _candidate_ids: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        # Candidates are documents with at least one embedding row; rows are
        # validated against the store once, up front.
        candidate_ids: list[str] = []
        flat_rows: list[int] = []
        flat_owner: list[int] = []
        for doc in self.documents.values():
            if not doc.embedding_rows:
                continue
            owner = len(candidate_ids)
            candidate_ids.append(doc.doc_id)
            for row in doc.embedding_rows:
                if not 0 <= row < self.store.count:
                    raise ValidationError(
                        f"document {doc.doc_id!r}: embedding row out of range: "
                        f"{row} (store has {self.store.count} rows)"
                    )
                flat_rows.append(row)
                flat_owner.append(owner)
        self._flat_rows = np.asarray(flat_rows, dtype=np.int64)
        self._flat_owner = np.asarray(flat_owner, dtype=np.int64)
        self._candidate_ids = np.asarray(candidate_ids, dtype=object)

    @classmethod
    def from_parts(cls, documents: list[Document], store: VectorStore) -> KnowledgeBase:
        by_id: dict[str, Document] = {}
        for doc in documents:
            if doc.doc_id in by_id:
                raise ValidationError(f"duplicate doc_id {doc.doc_id!r}")
            by_id[doc.doc_id] = doc
        return cls(documents=by_id, store=store)

    def __len__(self) -> int:
        return len(self.documents)

    def doc(self, doc_id: str) -> Document:
        try:
            return self.documents[doc_id]
        except KeyError:
            raise ValidationError(f"unknown doc_id {doc_id!r}") from None

    def query_vector(self, query: QueryRecord) -> np.ndarray:
        if query.embedding_row is None:
            raise ValidationError(
                f"query {query.query_id!r} has no embedding_row; "
                "provide a ranked run or an embedding"
            )
        return self.store.row(query.embedding_row)

    def retrieve_topk(self, query_vector, k: int) -> list[RetrievalHit]:
        """Top-k documents by cosine similarity, exhaustively scanned.

        A document with several image embeddings scores by its best image.
        Ties break by ascending doc_id; ranks are consecutive from 1.
        """
        if k < 1:
            raise ValidationError(f"k must be >= 1, got {k}")
        q = np.asarray(query_vector, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.store.dim:
            raise ValidationError(
                f"query vector dimension {q.shape[0]} does not match store dim {self.store.dim}"
            )
        if not np.all(np.isfinite(q)):
            raise ValidationError("query vector contains non-finite values")
        norm = float(np.linalg.norm(q))
        if norm == 0.0:
            raise ValidationError("query vector must be non-zero")
        q = q / norm

        n = self._candidate_ids.shape[0]
        if n == 0:
            return []
        sims = self.store.vectors @ q
        best = np.full(n, -np.inf, dtype=np.float64)
        np.maximum.at(best, self._flat_owner, sims[self._flat_rows])

        # lexsort: last key is primary, so similarity descending then doc_id.
        order = np.lexsort((self._candidate_ids, -best))
        top = order[: min(k, n)]
        return [
            RetrievalHit(doc_id=str(self._candidate_ids[i]), similarity=float(best[i]), rank=r)
            for r, i in enumerate(top, start=1)
        ]

    def hits_for(self, query: QueryRecord, k: int) -> list[RetrievalHit]:
        return self.retrieve_topk(self.query_vector(query), k)


def ingest_kb(
    docs_path: str | Path,
    manifest_path: str | Path,
    vectors_path: str | Path,
) -> KnowledgeBase:
    """Load and cross-validate a knowledge base from its three files."""
    store = VectorStore.load(manifest_path, vectors_path)
    docs = load_documents(docs_path)
    kb = KnowledgeBase.from_parts(docs, store)
    logger.info("ingested %d documents (%d vectors, dim %d)", len(kb), store.count, store.dim)
    return kb


@dataclass
class RankedRun:
    """Externally produced per-query rankings, consumed verbatim.

    Substitutes for vector retrieval: ``hits_for`` returns the listed
    documents in file order (truncated to k) with similarity pinned to 0.0
    since the run carries no scores.
    """

    kb: KnowledgeBase
    rankings: dict[str, tuple[str, ...]]

    def doc(self, doc_id: str) -> Document:
        return self.kb.doc(doc_id)

    def hits_for(self, query: QueryRecord, k: int) -> list[RetrievalHit]:
        if query.query_id not in self.rankings:
            raise ValidationError(f"ranked run has no entry for query {query.query_id!r}")
        ids = self.rankings[query.query_id][:k]
        return [
            RetrievalHit(doc_id=doc_id, similarity=0.0, rank=r)
            for r, doc_id in enumerate(ids, start=1)
        ]


def ingest_ranked_run(path: str | Path, kb: KnowledgeBase) -> RankedRun:
    rankings: dict[str, tuple[str, ...]] = {}
    for lineno, obj in _parse_jsonl(path):
        where = f"{path}:{lineno}"
        query_id = str(_require(obj, "query_id", where))
        if query_id in rankings:
            raise ValidationError(f"{where}: duplicate query_id {query_id!r}")
        doc_ids = _require(obj, "doc_ids", where)
        if not isinstance(doc_ids, list):
            raise ValidationError(f"{where}: doc_ids must be a list")
        for doc_id in doc_ids:
            if str(doc_id) not in kb.documents:
                raise ValidationError(f"{where}: unknown doc_id {doc_id!r}")
        rankings[query_id] = tuple(str(d) for d in doc_ids)
    return RankedRun(kb=kb, rankings=rankings)


def write_bundle(
    docs_path: str | Path,
    manifest_path: str | Path,
    vectors_path: str | Path,
    out_dir: str | Path,
) -> tuple[int, str]:
    """Validate inputs and write a normalized index bundle.

    The bundle holds ``docs.jsonl`` (copied verbatim), ``vectors.bin``
    (rows renormalized, float32 little-endian) and ``manifest.json`` with
    ``normalized: true``. Returns (document count, sha256 digest over the
    bundle files); identical inputs yield an identical digest.
    """
    kb = ingest_kb(docs_path, manifest_path, vectors_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    shutil.copyfile(docs_path, out / "docs.jsonl")
    vectors32 = kb.store.vectors.astype("<f4")
    vectors32.tofile(out / "vectors.bin")
    manifest = {
        "dim": kb.store.dim,
        "count": kb.store.count,
        "dtype": "f32le",
        "normalized": True,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
    )

    digest = hashlib.sha256()
    for name in ("manifest.json", "vectors.bin", "docs.jsonl"):
        digest.update(name.encode("utf-8"))
        digest.update((out / name).read_bytes())
    return len(kb), digest.hexdigest()


def open_bundle(bundle_dir: str | Path) -> KnowledgeBase:
    bundle = Path(bundle_dir)
    return ingest_kb(bundle / "docs.jsonl", bundle / "manifest.json", bundle / "vectors.bin")
