"""Ranking metric tests: frozen hand fixtures, oracle equality, properties."""

import math

import pytest
from hypothesis import given, settings, strategies as st

from moerec import metrics as m
from moerec.errors import ValidationError

from oracles import ORACLES, exhaustive_cases

# label aliases so fixtures read like the worked examples
A, B, C, D, X, Y, Z = 0, 1, 2, 3, 10, 11, 12


class TestPrecision:
    def test_manual_intersection(self):
        truth = {"u": {A, B, C}}
        assert m.precision_at_k(truth, {"u": [A, X, B, Y, Z]}, 5) == pytest.approx(0.4, abs=1e-12)

    def test_all_topk_relevant(self):
        truth = {"u": {A, B, C, D, X}}
        assert m.precision_at_k(truth, {"u": [A, B, C, D, X]}, 5) == 1.0

    def test_mean_over_users(self):
        truth = {"u1": {A, B, C}, "u2": {A, B, C, D}}
        rankings = {"u1": [A, X, B, Y, Z], "u2": [A, B, C, D, Y]}
        assert m.precision_at_k(truth, rankings, 5) == pytest.approx(0.6, abs=1e-12)

    def test_bad_k(self):
        with pytest.raises(ValidationError):
            m.precision_at_k({"u": {A}}, {"u": [A]}, 0)


class TestRecall:
    def test_single_relevant_hit(self):
        assert m.recall_at_k({"u": {A}}, {"u": [X, A]}, 5) == 1.0

    def test_partial(self):
        truth = {"u": {A, B, C, D}}
        assert m.recall_at_k(truth, {"u": [A, B, X, Y, Z]}, 5) == pytest.approx(0.5, abs=1e-12)

    def test_no_hits(self):
        assert m.recall_at_k({"u": {A}}, {"u": [X, Y]}, 5) == 0.0


class TestNdcg:
    def test_perfect(self):
        assert m.ndcg_at_k({"u": {A, B}}, {"u": [A, B]}, 2) == pytest.approx(1.0, abs=1e-12)

    def test_discount_at_rank_two(self):
        got = m.ndcg_at_k({"u": {A}}, {"u": [X, A]}, 2)
        assert got == pytest.approx(1.0 / math.log2(3.0), abs=1e-12)
        assert got == pytest.approx(0.6309, abs=1e-4)

    def test_none_retrieved(self):
        assert m.ndcg_at_k({"u": {A}}, {"u": [X, Y]}, 2) == 0.0


class TestMap:
    def test_precision_at_hit_positions(self):
        got = m.map_at_k({"u": {A, B}}, {"u": [A, X, B]}, 3)
        assert got == pytest.approx((1.0 + 2.0 / 3.0) / 2.0, abs=1e-12)
        assert got == pytest.approx(0.8333, abs=1e-4)

    def test_perfect_covering(self):
        assert m.map_at_k({"u": {A, B, C}}, {"u": [A, B, C]}, 3) == pytest.approx(1.0, abs=1e-12)

    def test_exhaustive_five_items_small_truth(self):
        from itertools import combinations, permutations

        items = range(5)
        for r in (1, 2, 3):
            for rel in combinations(items, r):
                for ranking in permutations(items):
                    got = m.ap_user(set(rel), list(ranking), 5)
                    assert got == ORACLES["map"](set(rel), list(ranking), 5)


class TestOracleEquivalence:
    def test_streaming_equals_bruteforce_exact(self):
        impl = {"precision": m.precision_user, "recall": m.recall_user,
                "ndcg": m.ndcg_user, "map": m.ap_user}
        n_cases = 0
        for relevant, ranking, k in exhaustive_cases(6):
            for name, fn in impl.items():
                assert fn(set(relevant), list(ranking), k) == \
                    ORACLES[name](relevant, ranking, k)
            n_cases += 1
        assert n_cases > 50_000


class TestAveragingRules:
    def test_empty_truth_users_excluded(self):
        truth = {"u1": {A}, "u2": set()}
        rankings = {"u1": [A], "u2": [A]}
        report = m.evaluate(truth, rankings, 1)
        assert report.n_users_evaluated == 1
        assert report.precision_at_k == 1.0

    def test_missing_ranking_scores_zero(self):
        truth = {"u1": {A}, "u2": {A}}
        report = m.evaluate(truth, {"u1": [A]}, 1)
        assert report.precision_at_k == pytest.approx(0.5)
        assert report.n_users_evaluated == 2

    def test_duplicate_labels_rejected(self):
        with pytest.raises(ValidationError):
            m.precision_at_k({"u": {A}}, {"u": [A, A]}, 2)

    def test_report_fields_in_unit_interval(self):
        truth = {"u": {A, B}}
        report = m.evaluate(truth, {"u": [A, X, B]}, 3)
        for value in (report.precision_at_k, report.recall_at_k,
                      report.ndcg_at_k, report.map_at_k):
            assert 0.0 <= value <= 1.0


@st.composite
def ranking_case(draw):
    n = draw(st.integers(2, 10))
    items = list(range(n))
    ranking = draw(st.permutations(items))
    relevant = draw(st.sets(st.sampled_from(items), min_size=1))
    k = draw(st.integers(1, n))
    return set(relevant), list(ranking), k


class TestProperties:
    @given(ranking_case())
    @settings(max_examples=300, deadline=None)
    def test_appending_below_k_changes_nothing(self, case):
        relevant, ranking, k = case
        truncated = ranking[:k]
        for fn in (m.precision_user, m.recall_user, m.ndcg_user, m.ap_user):
            assert fn(relevant, truncated + [100, 101], k) == fn(relevant, truncated, k)

    @given(ranking_case())
    @settings(max_examples=300, deadline=None)
    def test_swap_relevant_upward_monotone(self, case):
        relevant, ranking, k = case
        hit_positions = [i for i, x in enumerate(ranking) if x in relevant]
        miss_positions = [i for i, x in enumerate(ranking) if x not in relevant]
        candidates = [(j, i) for i in hit_positions for j in miss_positions if j < i]
        if not candidates:
            return
        j, i = candidates[0]
        swapped = list(ranking)
        swapped[j], swapped[i] = swapped[i], swapped[j]
        assert m.ndcg_user(relevant, swapped, k) >= m.ndcg_user(relevant, ranking, k)
        assert m.ap_user(relevant, swapped, k) >= m.ap_user(relevant, ranking, k)
        if i < k and j < k:
            assert m.precision_user(relevant, swapped, k) == m.precision_user(relevant, ranking, k)
            assert m.recall_user(relevant, swapped, k) == m.recall_user(relevant, ranking, k)

    @given(ranking_case())
    @settings(max_examples=300, deadline=None)
    def test_values_in_unit_interval(self, case):
        relevant, ranking, k = case
        for fn in (m.precision_user, m.recall_user, m.ndcg_user, m.ap_user):
            assert 0.0 <= fn(relevant, ranking, k) <= 1.0


class TestFileInterfaces:
    def test_round_trip(self, tmp_path):
        truth = {"u1": {1, 2}, "u2": {3}}
        rankings = {"u1": [1, 5, 2], "u2": [4, 3]}
        m.save_truth(truth, tmp_path / "truth.jsonl")
        m.save_rankings(rankings, tmp_path / "rankings.jsonl")
        assert m.load_truth(tmp_path / "truth.jsonl") == truth
        assert m.load_rankings(tmp_path / "rankings.jsonl") == rankings

    def test_bad_line_reports_lineno(self, tmp_path):
        path = tmp_path / "truth.jsonl"
        path.write_text('{"user_id": "u", "relevant": [1]}\n{"user_id": "v"}\n')
        with pytest.raises(ValidationError, match=":2"):
            m.load_truth(path)
