"""Builders for in-memory micro knowledge bases used across test modules."""

from __future__ import annotations

import numpy as np

from kbrag.kb import Document, KnowledgeBase, VectorStore


def make_store(vectors: np.ndarray) -> VectorStore:
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    return VectorStore(
        dim=vectors.shape[1],
        count=vectors.shape[0],
        vectors=vectors / norms,
        normalized=True,
    )


def make_kb(vectors: np.ndarray, docs_spec: list[tuple[str, list[int]]]) -> KnowledgeBase:
    """Build an in-memory KB; docs_spec maps doc_id -> vector row indices."""
    docs = [
        Document(
            doc_id=doc_id,
            page_title=f"Title {doc_id}",
            section_id="s0",
            text=f"Text for {doc_id}.",
            embedding_rows=tuple(rows),
        )
        for doc_id, rows in docs_spec
    ]
    return KnowledgeBase.from_parts(docs, make_store(vectors))
