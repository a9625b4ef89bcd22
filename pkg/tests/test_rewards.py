import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from curriculum_rl.canon import answers_match, canonical_answer
from curriculum_rl.policy import Completion
from curriculum_rl.rewards import (GroupRewards, RewardConfig, RewardError, aggregate,
                                   assign_by_rank, index_mean, mean_reward, rankwise_aggregate,
                                   ranks, score, score_all)


def comp(answer, ok):
    return Completion((0,), np.zeros(1), answer, ok)


def brute_force_rankwise(per_problem):
    """Sort each problem with plain Python, then average position by position."""
    rows = [sorted(float(x) for x in r) for r in per_problem]
    G = len(rows[0])
    return [sum(row[g] for row in rows) / len(rows) for g in range(G)]


@st.composite
def groups(draw):
    G = draw(st.integers(1, 8))
    n = draw(st.integers(1, 5))
    vals = st.one_of(st.sampled_from([0.0, 0.1, 0.9]), st.floats(0, 1, allow_nan=False))
    return [draw(st.lists(vals, min_size=G, max_size=G)) for _ in range(n)]


class TestScore:
    def test_three_cases(self):
        assert score(comp("ab", True), "ab") == 0.9
        assert score(comp("ba", True), "ab") == 0.1
        assert score(comp("ab", False), "ab") == 0.0

    def test_numeric_canonicalization(self):
        assert score(comp("0.50", True), " .5 ") == 0.9

    def test_additive_mode(self):
        cfg = RewardConfig(mode="additive")
        assert score(comp("x", True), "x", cfg) == pytest.approx(1.0)
        assert score(comp("y", True), "x", cfg) == pytest.approx(0.1)
        assert score(comp("x", False), "x", cfg) == 0.0
        assert cfg.max_reward == pytest.approx(1.0)

    def test_bad_config(self):
        with pytest.raises(RewardError):
            RewardConfig(correct_value=0.1, format_value=0.9)
        with pytest.raises(RewardError):
            RewardConfig(mode="other")

    @given(st.text("abcd", max_size=4), st.text("abcd", min_size=1, max_size=4), st.booleans())
    def test_value_set(self, pred, gold, ok):
        r = score(comp(pred, ok), gold)
        assert r in (0.0, 0.1, 0.9)
        assert (r == 0.9) == (ok and pred == gold)

    def test_mean_reward(self):
        assert mean_reward([0.9, 0.1, 0.0, 0.0]) == pytest.approx(0.25)
        with pytest.raises(RewardError):
            mean_reward([])

    def test_score_all(self):
        out = score_all([comp("a", True), comp("b", True), comp("a", False)], "a")
        assert out.tolist() == [0.9, 0.1, 0.0]


class TestCanon:
    @pytest.mark.parametrize("raw,canon", [
        (" 0.50 ", "0.5"), ("2.0", "2"), ("+3", "3"), ("-0.0", "0"), ("007", "7"),
        (".25", "0.25"), ("ABC", "abc"), ("1/2", "1/2"),
    ])
    def test_examples(self, raw, canon):
        assert canonical_answer(raw) == canon

    def test_match(self):
        assert answers_match("3.10", "3.1") and not answers_match("3", "4")


class TestRankwise:
    def test_worked_example(self):
        g = GroupRewards("p", ([0.9, 0.0, 0.1], [0.0, 0.0, 0.9], [0.1, 0.9, 0.9]))
        assert rankwise_aggregate(g).tolist() == pytest.approx([0.0333333333, 0.3333333333, 0.9])

    def test_single_problem_is_sorted(self):
        g = GroupRewards("p", ([0.9, 0.0, 0.1, 0.9],))
        assert rankwise_aggregate(g).tolist() == [0.0, 0.1, 0.9, 0.9]

    def test_ragged_rejected(self):
        with pytest.raises(RewardError, match="ragged"):
            GroupRewards("p", ([0.9, 0.0], [0.1]))

    def test_empty_rejected(self):
        with pytest.raises(RewardError):
            GroupRewards("p", ())

    def test_ranks_stable_ties(self):
        assert ranks(np.array([0.1, 0.0, 0.1, 0.0])).tolist() == [2, 0, 3, 1]

    def test_assign_by_rank(self):
        g = GroupRewards("p", ([0.9, 0.0], [0.1, 0.0]))
        agg = rankwise_aggregate(g)  # [0.0, 0.5]
        out = assign_by_rank(g)
        assert out[0].tolist() == [agg[1], agg[0]]
        assert out[1].tolist() == [agg[1], agg[0]]

    def test_index_mean_and_none(self):
        g = GroupRewards("p", ([0.9, 0.0], [0.1, 0.0]))
        assert [r.tolist() for r in index_mean(g)] == [[0.5, 0.0], [0.5, 0.0]]
        assert [r.tolist() for r in aggregate(g, "none")] == [[0.9, 0.0], [0.1, 0.0]]
        with pytest.raises(RewardError):
            aggregate(g, "median")

    @given(groups())
    def test_matches_oracle(self, per_problem):
        got = rankwise_aggregate(GroupRewards("p", tuple(map(tuple, per_problem))))
        want = brute_force_rankwise(per_problem)
        assert np.allclose(got, want, rtol=0, atol=1e-15)

    @given(groups(), st.randoms(use_true_random=False))
    def test_permutation_invariant(self, per_problem, rnd):
        shuffled = [rnd.sample(r, len(r)) for r in per_problem]
        rnd.shuffle(shuffled)
        a = rankwise_aggregate(GroupRewards("p", tuple(map(tuple, per_problem))))
        b = rankwise_aggregate(GroupRewards("p", tuple(map(tuple, shuffled))))
        assert np.allclose(a, b, rtol=0, atol=1e-15)

    @given(groups())
    def test_mean_preserved(self, per_problem):
        agg = rankwise_aggregate(GroupRewards("p", tuple(map(tuple, per_problem))))
        assert agg.mean() == pytest.approx(np.mean(per_problem), abs=1e-12)

    @given(groups())
    def test_non_decreasing(self, per_problem):
        agg = rankwise_aggregate(GroupRewards("p", tuple(map(tuple, per_problem))))
        assert np.all(np.diff(agg) >= 0)
