"""Shared fixtures: micro knowledge bases and the synthetic benchmark."""

from __future__ import annotations

import numpy as np
import pytest

from kbrag.gateway import MockOracle, OracleTruthTable
from kbrag.harness import Matcher
from kbrag.kb import QueryRecord
from kbrag.scenario import build_scenario

from support import make_kb


@pytest.fixture
def mini_world():
    """Two queries over three documents with a hand-written truth table.

    q_flip answers wrong on its own; document d7 (retrieval rank 2) fixes
    it. q_direct needs no help.
    """
    dim = 8
    vectors = np.zeros((5, dim))
    vectors[0, 0] = 1.0  # d1
    vectors[1, 0] = 0.9  # d7 mixes in a side dimension
    vectors[1, 1] = np.sqrt(1 - 0.81)
    vectors[2, 2] = 1.0  # dX
    vectors[3, 0] = 1.0  # q_flip image
    vectors[4, 2] = 1.0  # q_direct image

    kb = make_kb(vectors, [("d1", [0]), ("d7", [1]), ("dX", [2])])
    queries = {
        "q_direct": QueryRecord(
            query_id="q_direct",
            question="What city is this?",
            embedding_row=4,
            gold_answers=("paris",),
            split_tags=("seen",),
        ),
        "q_flip": QueryRecord(
            query_id="q_flip",
            question="Which capital is shown?",
            embedding_row=3,
            gold_answers=("berlin",),
            split_tags=("unseen",),
        ),
    }
    table = OracleTruthTable.from_payload(
        {
            "margin": 2.0,
            "direct": {
                "q_direct": {"answer": "paris", "correct": True},
                "q_flip": {"answer": "munich", "correct": False},
            },
            "conditioned": {
                "q_flip": {"d7": {"answer": "berlin", "correct": True}},
            },
            "consistency": {
                "q_direct": {"consistent_doc_ids": [], "summary": "nothing needed"},
                "q_flip": {"consistent_doc_ids": ["d7"], "summary": "d7 covers it"},
            },
        }
    )
    return kb, queries, MockOracle(table), Matcher()


@pytest.fixture(scope="session")
def scenario_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scenario")
    info = build_scenario(out)
    return info


@pytest.fixture(scope="session")
def scenario_world(scenario_dir):
    from kbrag.kb import ingest_kb, load_queries

    kb = ingest_kb(scenario_dir["docs"], scenario_dir["manifest"], scenario_dir["vectors"])
    queries = load_queries(scenario_dir["queries"])
    oracle = MockOracle(OracleTruthTable.from_file(scenario_dir["truth_table"]))
    return kb, queries, oracle, Matcher()
