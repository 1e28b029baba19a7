import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import kolmogorov

from viewagg import evaluation as ev
from viewagg.errors import DataError

from froc_cases import (
    HAND2_CANDIDATES, HAND2_OBJECTS, HAND2_POINTS, HAND2_VOLUMES, HAND_CANDIDATES, HAND_OBJECTS,
    HAND_POINTS, HAND_THRESHOLDS, HAND_VOLUMES, froc_oracle, random_candidates,
)


def pairwise_auc(s, y):
    pos, neg = s[y > 0], s[y <= 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


class TestFolds:
    """Patient-level folds."""

    def test_sizes(self):
        assert [len(f) for f in ev.split_patients(range(12), 6, 0).folds] == [2] * 6
        assert sorted(len(f) for f in ev.split_patients(range(13), 6, 0).folds) == [2, 2, 2, 2, 2, 3]

    @given(st.integers(6, 40), st.integers(1, 6), st.integers(0, 1000))
    def test_partition(self, n, k, seed):
        s = ev.split_patients([f"{i:03d}" for i in range(n)], k, seed)
        flat = [p for f in s.folds for p in f]
        assert sorted(flat) == [f"{i:03d}" for i in range(n)]
        for i in range(k):
            assert not set(s.train_patients(i)) & set(s.test_patients(i))
        assert s == ev.split_patients([f"{i:03d}" for i in range(n)], k, seed)

    def test_errors(self):
        with pytest.raises(DataError):
            ev.split_patients(["a", "a"], 1)
        with pytest.raises(DataError):
            ev.split_patients(["a", "b"], 3)


class TestAuc:
    """Mann-Whitney AUC."""

    def test_examples(self):
        assert ev.roc_auc([(0.1, -1), (0.4, 1), (0.35, -1), (0.8, 1)]) == 1.0
        assert ev.roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
        with pytest.raises(DataError):
            ev.roc_auc([0.1, 0.2], [1, 1])

    @given(st.integers(0, 2**32 - 1), st.integers(2, 60))
    def test_matches_pairwise_count(self, seed, n):
        rng = np.random.default_rng(seed)
        s = np.round(rng.normal(size=n), 1)
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        assert ev.roc_auc(s, y) == pytest.approx(pairwise_auc(s, y), abs=1e-12)
        # negating scores swaps the roles of the classes
        assert ev.roc_auc(-s, y) == pytest.approx(1 - ev.roc_auc(s, y), abs=1e-12)

    def test_roc_points(self):
        pts = ev.roc_points([0.9, 0.5, 0.5, 0.1], [1, 1, 0, 0])
        assert pts == [(0.9, 0.0, 0.5), (0.5, 0.5, 1.0), (0.1, 1.0, 1.0)]


class TestKs:
    """Two-sample Kolmogorov-Smirnov test."""

    def test_identical_samples(self):
        r = ev.ks_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert r.D == 0 and r.p == 1.0

    def test_disjoint_supports(self):
        r = ev.ks_test(np.arange(1000.0), np.arange(1000.0) + 5000)
        assert r.D == 1.0 and r.p < 1e-10

    @given(st.floats(0.01, 4.0))
    def test_series_matches_scipy(self, lam):
        assert ev.kolmogorov_sf(lam) == pytest.approx(float(kolmogorov(lam)), abs=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_statistic_and_p(self, seed):
        rng = np.random.default_rng(seed)
        a = np.round(rng.normal(size=int(rng.integers(1, 50))), 1)
        b = np.round(rng.normal(0.5, size=int(rng.integers(1, 50))), 1)
        grid = np.concatenate([a, b])
        D = max(abs((a <= x).mean() - (b <= x).mean()) for x in grid)
        r = ev.ks_test(a, b)
        assert r.D == pytest.approx(D, abs=1e-12)
        lam = math.sqrt(len(a) * len(b) / (len(a) + len(b))) * D
        assert r.p == pytest.approx(float(kolmogorov(lam)), abs=1e-12)

    def test_empty(self):
        with pytest.raises(DataError):
            ev.ks_test([], [1.0])


class TestFroc:
    """Object-level FROC curves and their readings."""

    def test_hand_case(self):
        c = ev.froc(HAND_CANDIDATES, HAND_VOLUMES, HAND_OBJECTS)
        assert c.thresholds == HAND_THRESHOLDS
        assert c.points == HAND_POINTS
        assert ev.sensitivity_at(c, 0.5) == 1 / 3
        assert ev.sensitivity_at(c, 1.0) == 2 / 3
        assert ev.sensitivity_at(c, 99.0) == 2 / 3
        assert ev.sensitivity_at(c, -1.0) == 0.0
        # steps: 1/3 on [0, 1), 2/3 on [1, 2]
        assert ev.partial_auc(c, 2.0) == pytest.approx(0.5)

    def test_missed_object_and_duplicates(self):
        c = ev.froc(HAND2_CANDIDATES, HAND2_VOLUMES, HAND2_OBJECTS)
        assert c.points == HAND2_POINTS
        assert max(c.sensitivity()) == 0.5

    def test_fuzzed_against_definition(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            cands = random_candidates(rng)
            n_obj = len({(c[0], c[1]) for c in cands if c[2] == 1}) + int(rng.integers(0, 3))
            c = ev.froc(cands, 4, n_obj)
            want = froc_oracle(cands, 4, n_obj) if n_obj else None
            if want:
                assert c.thresholds == [w[0] for w in want]
                assert c.points == [(w[1], w[2]) for w in want]

    def test_default_object_count(self):
        c = ev.froc(HAND_CANDIDATES, HAND_VOLUMES)
        assert c.n_objects == 2 and c.points[-1][1] == 1.0

    def test_errors(self):
        with pytest.raises(DataError):
            ev.froc(HAND_CANDIDATES, 0)
        with pytest.raises(DataError):
            ev.froc(HAND_CANDIDATES, 2, 1)
        with pytest.raises(DataError):
            ev.froc([("p", 0, -1, float("nan"))], 1)

    def test_csv(self, tmp_path):
        c = ev.froc(HAND_CANDIDATES, HAND_VOLUMES, HAND_OBJECTS)
        ev.write_froc_csv(c, tmp_path / "f.csv")
        lines = (tmp_path / "f.csv").read_text().splitlines()
        assert lines[0] == "threshold,fp_per_vol,sensitivity"
        assert lines[1] == f"0.9,0.0,{1 / 3!r}"


class TestSliceStats:
    """Per-VOI counts of positively classified views."""

    def test_counts(self):
        P = np.array([[0.9, 0.6, 0.1], [0.2, 0.5, 0.4], [0.1, 0.1, 0.1]])
        s = ev.slice_stats(P, [1, -1, -1])
        assert s["per_voi_mean_pos_slices"] == 2.0
        assert s["per_voi_mean_neg_slices"] == 0.5
        assert s["auc"] == pytest.approx(ev.roc_auc(P.ravel(), np.repeat([1, 0, 0], 3)))
