"""Synthetic desk-scale benchmark with a fully controlled truth table.

Queries split into four behavior groups, each fixed by a different part of
the stack:

* ``easy``:   answered correctly with no context; retrieval is harmless.
* ``ret``:    answered correctly with no context, but the top retrieved
               document poisons the answer; the retrieval gate (or an
               empty relevance selection) avoids it.
* ``srt``:    answered incorrectly without help; two mid-ranked documents
               fix the answer, and relevance selection isolates them.
* ``mct``:    answered incorrectly without help; two documents score as
               relevant but the first-ranked one misleads, and only the
               consistency pass removes it.

Geometry is exact: query i embeds as basis vector e_i, and its documents
mix e_i with a reserved noise dimension, so query i retrieves exactly its
own documents at fixed descending similarities. No randomness anywhere;
identical inputs give identical files.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .wire import canonical_json

GROUP_FRACTIONS = (("easy", 0.40), ("ret", 0.20), ("srt", 0.25), ("mct", 0.15))


def group_counts(n_queries: int) -> dict[str, int]:
    counts = {
        "easy": int(n_queries * 0.40),
        "ret": int(n_queries * 0.20),
        "srt": int(n_queries * 0.25),
    }
    counts["mct"] = n_queries - sum(counts.values())
    return counts


def group_of(index: int, n_queries: int) -> str:
    counts = group_counts(n_queries)
    bound = 0
    for name in ("easy", "ret", "srt"):
        bound += counts[name]
        if index < bound:
            return name
    return "mct"


def _query_id(i: int) -> str:
    return f"q{i:04d}"


def _doc_id(i: int, r: int) -> str:
    return f"d{i:04d}-{r}"


def build_scenario(
    out_dir: str | Path,
    n_queries: int = 200,
    docs_per_query: int = 5,
    dim: int = 256,
) -> dict:
    """Write docs/queries/vectors/manifest/truth_table into out_dir."""
    if docs_per_query < 3 or docs_per_query > 9:
        raise ValidationError("docs_per_query must be in [3, 9]")
    if dim < n_queries + 8:
        raise ValidationError(f"dim must be at least n_queries + 8, got {dim}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    n_doc_rows = n_queries * docs_per_query
    vectors = np.zeros((n_doc_rows + n_queries, dim), dtype=np.float64)
    noise_dims = dim - n_queries
    similarities = [0.95 - 0.1 * r for r in range(docs_per_query)]

    doc_lines: list[str] = []
    query_lines: list[str] = []
    direct: dict[str, dict] = {}
    conditioned: dict[str, dict] = {}
    consistency: dict[str, dict] = {}

    for i in range(n_queries):
        qid = _query_id(i)
        group = group_of(i, n_queries)
        numeric = i % 10 == 7
        gold_display = f"about {i} units" if numeric else f"answer {i}"
        wrong_direct = f"offbase {i + 100000}"
        wrong_context = f"decoy {i + 200000}"

        vectors[n_doc_rows + i, i] = 1.0
        for r in range(docs_per_query):
            row = i * docs_per_query + r
            c = similarities[r]
            vectors[row, i] = c
            vectors[row, n_queries + (i * docs_per_query + r) % noise_dims] = math.sqrt(
                1.0 - c * c
            )
            doc_lines.append(
                canonical_json(
                    {
                        "doc_id": _doc_id(i, r),
                        "page_title": f"Topic {i}",
                        "section_id": f"s{r}",
                        "text": f"Passage {r} for topic {i}.",
                        "embedding_rows": [row],
                    }
                )
            )

        record: dict = {
            "query_id": qid,
            "question": f"What is shown as item {i}?",
            "embedding_row": n_doc_rows + i,
            "split_tags": ["unseen-q" if i % 2 == 0 else "unseen-e"],
        }
        if numeric:
            record["answer_range"] = [float(i), float(i) + 0.5]
        else:
            record["gold_answers"] = [f"answer {i}", f"final answer {i}"]
        query_lines.append(canonical_json(record))

        if group == "easy":
            direct[qid] = {"answer": gold_display, "correct": True}
            consistency[qid] = {"consistent_doc_ids": [], "summary": f"summary {i}"}
        elif group == "ret":
            direct[qid] = {"answer": gold_display, "correct": True}
            conditioned[qid] = {_doc_id(i, 0): {"answer": wrong_context, "correct": False}}
            consistency[qid] = {"consistent_doc_ids": [], "summary": f"summary {i}"}
        elif group == "srt":
            # Two helpful documents: relevance selection isolates them, and
            # queries in this group carry a multi-document relevant set for
            # the consistency-mixture builder.
            direct[qid] = {"answer": wrong_direct, "correct": False}
            conditioned[qid] = {
                _doc_id(i, 0): {"answer": wrong_context, "correct": False},
                _doc_id(i, 2): {"answer": gold_display, "correct": True},
                _doc_id(i, 3): {"answer": gold_display, "correct": True},
            }
            consistency[qid] = {
                "consistent_doc_ids": [_doc_id(i, 2), _doc_id(i, 3)],
                "summary": f"summary {i}",
            }
        else:  # mct: the rank-1 document scores as relevant but misleads
            direct[qid] = {"answer": wrong_direct, "correct": False}
            conditioned[qid] = {
                _doc_id(i, 0): {"answer": wrong_context, "correct": True},
                _doc_id(i, 1): {"answer": gold_display, "correct": True},
            }
            consistency[qid] = {
                "consistent_doc_ids": [_doc_id(i, 1)],
                "summary": f"summary {i}",
            }

    docs_path = out / "docs.jsonl"
    docs_path.write_text("\n".join(doc_lines) + "\n", encoding="utf-8")
    queries_path = out / "queries.jsonl"
    queries_path.write_text("\n".join(query_lines) + "\n", encoding="utf-8")
    vectors_path = out / "vectors.bin"
    vectors.astype("<f4").tofile(vectors_path)
    manifest_path = out / "manifest.json"
    manifest_path.write_text(
        json.dumps(
            {"dim": dim, "count": vectors.shape[0], "dtype": "f32le", "normalized": True},
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    table_path = out / "truth_table.json"
    table_path.write_text(
        json.dumps(
            {
                "margin": 2.0,
                "direct": direct,
                "conditioned": conditioned,
                "consistency": consistency,
            },
            sort_keys=True,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    return {
        "docs": str(docs_path),
        "queries": str(queries_path),
        "vectors": str(vectors_path),
        "manifest": str(manifest_path),
        "truth_table": str(table_path),
        "n_queries": n_queries,
        "n_docs": n_doc_rows,
        "groups": group_counts(n_queries),
    }
