"""Token-system math and selection logic against independent oracles."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mpmath

from kbrag.errors import GatewayProtocolError, ValidationError
from kbrag.gateway import Gateway, MockOracle, OracleTruthTable
from kbrag.kb import Document, QueryRecord, RetrievalHit
from kbrag.pipeline import PipelineConfig, StageFlags
from kbrag.tokens import (
    ContextSet,
    ScoredDoc,
    SrtSelectionMode,
    apply_mct,
    decide_ret,
    run_token_stack,
    select_srt,
    softmax_pair,
)
from kbrag.wire import ConsistencyResult, GenerationResult


def logistic_oracle(z_pos: float, z_neg: float) -> float:
    """High-precision reference: 1 / (1 + exp(z_neg - z_pos)) at 50 digits."""
    with mpmath.workdps(50):
        return float(1 / (1 + mpmath.e ** (mpmath.mpf(z_neg) - mpmath.mpf(z_pos))))


finite_logits = st.floats(min_value=-1e4, max_value=1e4, allow_nan=False)


class TestSoftmaxPair:
    def test_symmetry_point(self):
        assert softmax_pair(0.0, 0.0) == 0.5

    def test_known_value(self):
        assert softmax_pair(2.0, 0.0) == pytest.approx(0.8807970779778823, abs=1e-12)

    def test_extreme_no_overflow(self):
        score = softmax_pair(1e4, -1e4)
        assert np.isfinite(score)
        assert score > 1 - 1e-12

    def test_nonfinite_rejected(self):
        with pytest.raises(ValidationError):
            softmax_pair(float("nan"), 0.0)
        with pytest.raises(ValidationError):
            softmax_pair(0.0, float("inf"))

    @given(finite_logits, finite_logits)
    @settings(max_examples=200)
    def test_matches_oracle(self, a, b):
        assert softmax_pair(a, b) == pytest.approx(logistic_oracle(a, b), abs=1e-12)

    @given(finite_logits, finite_logits)
    @settings(max_examples=200)
    def test_pair_sum_is_one(self, a, b):
        assert softmax_pair(a, b) + softmax_pair(b, a) == pytest.approx(1.0, abs=1e-12)

    @given(finite_logits, finite_logits,
           st.floats(min_value=-1e3, max_value=1e3, allow_nan=False))
    @settings(max_examples=200)
    def test_shift_invariance(self, a, b, c):
        assert softmax_pair(a + c, b + c) == pytest.approx(softmax_pair(a, b), abs=1e-12)

    @given(st.floats(min_value=-18, max_value=18), st.floats(min_value=-18, max_value=18))
    @settings(max_examples=200)
    def test_strictly_inside_unit_interval(self, a, b):
        # float64 saturates to exactly 1.0 once the logit gap passes ~36;
        # strictness is testable only inside the representable range.
        assert 0.0 < softmax_pair(a, b) < 1.0

    def test_monotone_in_positive_logit(self):
        scores = [softmax_pair(z, 0.0) for z in np.linspace(-20, 20, 400)]
        assert all(s1 < s2 for s1, s2 in zip(scores, scores[1:]))


class TestDecideRet:
    def test_above_threshold(self):
        assert decide_ret(0.7, 0.5).label == "Ret"

    def test_equality_is_noret(self):
        assert decide_ret(0.5, 0.5).label == "NoRet"

    def test_high_threshold(self):
        assert decide_ret(0.7, 0.9).label == "NoRet"

    @pytest.mark.parametrize("gamma", [0.0, 1.0, -0.1, 1.5])
    def test_gamma_range(self, gamma):
        with pytest.raises(ValidationError):
            decide_ret(0.5, gamma)

    def test_label_matches_score_field(self):
        decision = decide_ret(0.51, 0.5)
        assert (decision.score, decision.gamma, decision.label) == (0.51, 0.5, "Ret")


def brute_force_select(scored, mode):
    ordered = sorted(scored, key=lambda d: (-d.srt_score, d.retrieval_rank, d.doc_id))
    if mode.kind == "auto":
        return [d for d in ordered if d.srt_score > 0.5]
    return ordered[: mode.n]


class TestSelectSrt:
    def _docs(self, scores: dict[str, float]):
        return [
            ScoredDoc(doc_id=doc_id, srt_score=score, retrieval_rank=rank)
            for rank, (doc_id, score) in enumerate(scores.items(), start=1)
        ]

    def test_auto_keeps_above_half(self):
        docs = self._docs({"A": 0.9, "B": 0.3, "C": 0.7})
        assert [d.doc_id for d in select_srt(docs, SrtSelectionMode.auto())] == ["A", "C"]

    def test_fixed_keeps_all_when_short(self):
        docs = self._docs({"A": 0.9, "B": 0.3, "C": 0.7})
        assert [d.doc_id for d in select_srt(docs, SrtSelectionMode.fixed(5))] == ["A", "C", "B"]

    def test_exact_half_dropped_in_auto(self):
        docs = self._docs({"A": 0.5})
        assert select_srt(docs, SrtSelectionMode.auto()) == []

    def test_tie_break_rank_then_doc_id(self):
        docs = [
            ScoredDoc("zz", 0.8, 1),
            ScoredDoc("aa", 0.8, 2),
            ScoredDoc("bb", 0.8, 2),
        ]
        kept = select_srt(docs, SrtSelectionMode.fixed(3))
        assert [d.doc_id for d in kept] == ["zz", "aa", "bb"]

    def test_random_sets_match_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            n = int(rng.integers(1, 25))
            docs = [
                ScoredDoc(f"d{i:02d}", float(rng.choice([0.1, 0.5, 0.73, 0.88, 0.27])),
                          int(rng.integers(1, 6)))
                for i in range(n)
            ]
            for mode in (SrtSelectionMode.auto(), SrtSelectionMode.fixed(10)):
                assert select_srt(docs, mode) == brute_force_select(docs, mode)

    def test_prefix_monotonicity(self):
        rng = np.random.default_rng(1)
        docs = [
            ScoredDoc(f"d{i:02d}", float(rng.random()), int(rng.integers(1, 21)))
            for i in range(20)
        ]
        for n in range(1, 21):
            for m in range(n, 21):
                short = select_srt(docs, SrtSelectionMode.fixed(n))
                longer = select_srt(docs, SrtSelectionMode.fixed(m))
                assert longer[: len(short)] == short

    def test_mode_validation(self):
        with pytest.raises(ValidationError):
            SrtSelectionMode.fixed(0)
        with pytest.raises(ValidationError):
            SrtSelectionMode.parse("sometimes")
        assert SrtSelectionMode.parse(3) == SrtSelectionMode.fixed(3)
        assert SrtSelectionMode.parse("auto").kind == "auto"


def _doc(doc_id: str) -> Document:
    return Document(doc_id=doc_id, page_title=doc_id.upper(), section_id="s", text=f"text {doc_id}")


QUERY = QueryRecord(query_id="q", question="?", gold_answers=("x",))


class StubConsist(Gateway):
    """Scripted consistency result; counts calls."""

    def __init__(self, kept, summary="stub summary"):
        self.kept = tuple(kept)
        self.summary = summary
        self.calls = 0

    def score_tags(self, query, document, prompt_id, tags):
        raise AssertionError("not used")

    def generate(self, query, context_docs, prompt_id, summary=None):
        return GenerationResult(text="stub")

    def refine_consistency(self, query, docs, prompt_id):
        self.calls += 1
        return ConsistencyResult(kept_indices=self.kept, summary=self.summary)


class TestApplyMct:
    def _ctx(self, *doc_ids):
        return ContextSet(docs=tuple(_doc(d) for d in doc_ids), strategy_provenance="srt")

    def test_filter_restricts_by_index(self):
        out = apply_mct(QUERY, self._ctx("A", "B", "C"), "filter", StubConsist([0, 2]))
        assert [d.doc_id for d in out.docs] == ["A", "C"]
        assert out.strategy_provenance == "mct-filter"

    def test_rerank_moves_kept_first(self):
        out = apply_mct(QUERY, self._ctx("A", "B", "C"), "rerank", StubConsist([2]))
        assert [d.doc_id for d in out.docs] == ["C", "A", "B"]
        assert out.strategy_provenance == "mct-rerank"

    def test_merge_replaces_docs_with_summary(self):
        out = apply_mct(QUERY, self._ctx("A", "B"), "merge", StubConsist([0], summary="S"))
        assert out.docs == ()
        assert out.synthetic_summary == "S"
        assert out.strategy_provenance == "mct-merge"

    def test_single_doc_pass_through_skips_backend(self):
        stub = StubConsist([0])
        ctx = self._ctx("A")
        assert apply_mct(QUERY, ctx, "filter", stub) is ctx
        assert stub.calls == 0

    def test_empty_selection_rejected(self):
        with pytest.raises(ValidationError):
            apply_mct(QUERY, ContextSet.empty("srt"), "filter", StubConsist([]))

    def test_unknown_strategy(self):
        with pytest.raises(ValidationError):
            apply_mct(QUERY, self._ctx("A", "B"), "drop", StubConsist([]))

    def test_out_of_range_index_from_backend(self):
        with pytest.raises(GatewayProtocolError):
            apply_mct(QUERY, self._ctx("A", "B"), "filter", StubConsist([7]))

    def test_random_structural_properties(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            n = int(rng.integers(2, 9))
            ids = [f"d{i}" for i in range(n)]
            kept = sorted(rng.choice(n, size=int(rng.integers(0, n + 1)), replace=False).tolist())
            ctx = self._ctx(*ids)

            filtered = apply_mct(QUERY, ctx, "filter", StubConsist(kept))
            kept_ids = [ids[i] for i in kept]
            assert [d.doc_id for d in filtered.docs] == kept_ids  # subsequence

            reranked = apply_mct(QUERY, ctx, "rerank", StubConsist(kept))
            assert sorted(d.doc_id for d in reranked.docs) == sorted(ids)  # permutation
            assert [d.doc_id for d in reranked.docs][: len(kept)] == kept_ids

            merged = apply_mct(QUERY, ctx, "merge", StubConsist(kept))
            assert merged.docs == ()
            assert merged.synthetic_summary


class TestContextSetInvariants:
    def test_merge_requires_summary(self):
        with pytest.raises(ValidationError):
            ContextSet(docs=(), synthetic_summary=None, strategy_provenance="mct-merge")

    def test_merge_rejects_docs(self):
        with pytest.raises(ValidationError):
            ContextSet(docs=(_doc("A"),), synthetic_summary="s", strategy_provenance="mct-merge")

    def test_summary_only_for_merge(self):
        with pytest.raises(ValidationError):
            ContextSet(docs=(), synthetic_summary="s", strategy_provenance="srt")


class TestRunTokenStack:
    def _world(self):
        table = OracleTruthTable.from_payload(
            {
                "direct": {"q": {"answer": "wrong", "correct": False},
                           "qq": {"answer": "x", "correct": True}},
                "conditioned": {"q": {"d2": {"answer": "x", "correct": True}}},
                "consistency": {"q": {"consistent_doc_ids": ["d2"], "summary": "keep d2"}},
            }
        )
        docs = {n: _doc(n) for n in ("d1", "d2", "d3")}
        hits = [
            RetrievalHit("d1", 0.9, 1),
            RetrievalHit("d2", 0.8, 2),
            RetrievalHit("d3", 0.7, 3),
        ]
        return MockOracle(table), docs, hits

    def test_all_disabled_is_identity_on_topk(self):
        oracle, docs, hits = self._world()
        config = PipelineConfig(stage_flags=StageFlags())
        ctx = run_token_stack(QUERY, hits, config, oracle, lambda d: docs[d])
        assert [d.doc_id for d in ctx.docs] == ["d1", "d2", "d3"]
        assert ctx.strategy_provenance == "none"

    def test_ret_short_circuits_before_retrieval(self):
        oracle, docs, _ = self._world()
        config = PipelineConfig(stage_flags=StageFlags(ret=True))
        query = QueryRecord(query_id="qq", question="?", gold_answers=("x",))
        calls = []

        def provider():
            calls.append(1)
            return []

        from kbrag.tokens import run_token_stack_traced

        trace = run_token_stack_traced(query, config, oracle, lambda d: docs[d], provider)
        assert trace.ret_decision.label == "NoRet"
        assert trace.context.docs == ()
        assert calls == []

    def test_srt_reorders_and_filters(self):
        oracle, docs, hits = self._world()
        config = PipelineConfig(stage_flags=StageFlags(srt=True))
        ctx = run_token_stack(QUERY, hits, config, oracle, lambda d: docs[d])
        assert [d.doc_id for d in ctx.docs] == ["d2"]
        assert ctx.strategy_provenance == "srt"

    def test_empty_auto_selection_gives_empty_context(self):
        oracle, docs, hits = self._world()
        config = PipelineConfig(stage_flags=StageFlags(srt=True))
        query = QueryRecord(query_id="qq", question="?", gold_answers=("x",))
        ctx = run_token_stack(query, hits, config, oracle, lambda d: docs[d])
        assert ctx.docs == ()
        assert ctx.strategy_provenance == "srt"

    def test_full_stack_chain(self):
        oracle, docs, hits = self._world()
        config = PipelineConfig(
            stage_flags=StageFlags(ret=True, srt=True, mct=True), mct_strategy="filter"
        )
        ctx = run_token_stack(QUERY, hits, config, oracle, lambda d: docs[d])
        # d2 alone survives SRT; single doc means MCT passes it through.
        assert [d.doc_id for d in ctx.docs] == ["d2"]
