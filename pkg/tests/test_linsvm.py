import numpy as np
import pytest
from hypothesis import given, strategies as st

from viewagg import linsvm as svm
from viewagg.errors import DataError

from svm_oracle import primal_minimum


def tiny_dataset(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(2, 41)), int(rng.integers(1, 3))
    X = rng.normal(size=(n, d)) * rng.uniform(0.2, 3.0)
    y = np.where(X @ rng.normal(size=d) + rng.normal(scale=0.7, size=n) > 0, 1.0, -1.0)
    y[0], y[1] = 1.0, -1.0
    return X, y, float(rng.choice([0.1, 1.0, 10.0]))


class TestSolver:
    """Dual coordinate descent against direct primal minimisation."""

    def test_two_point_closed_form(self):
        # 0.5 w^2 + 2 (1 - w)^2 is minimised at w = 0.8
        m = svm.train_svm([[1.0], [-1.0]], [1, -1], svm.SvmConfig(C=1.0, tolerance=1e-9))
        assert m.omega[0] == pytest.approx(0.8, abs=1e-6)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_oracle(self, seed):
        X, y, C = tiny_dataset(seed)
        m = svm.train_svm(X, y, svm.SvmConfig(C=C))
        _, f = primal_minimum(X, y, C)
        assert m.primal == pytest.approx(f, rel=1e-4)
        assert m.primal - m.dual <= 1e-4 * max(1.0, m.primal)
        assert m.primal >= m.dual - 1e-12

    def test_kkt_conditions(self, rng):
        X = rng.normal(size=(200, 5))
        y = np.where(X[:, 0] + 0.3 * rng.normal(size=200) > 0, 1.0, -1.0)
        cfg = svm.SvmConfig(C=0.5, tolerance=1e-6, gap_tolerance=1e-8)
        m = svm.train_svm(X, y, cfg)
        # stationarity of the primal: w = 2C sum_i max(0, 1 - y_i w.x_i) y_i x_i
        xi = np.maximum(0.0, 1 - y * (X @ m.omega))
        np.testing.assert_allclose(m.omega, 2 * cfg.C * (xi * y) @ X, atol=1e-4)

    def test_shrinking_reaches_same_optimum(self, rng):
        X = rng.normal(size=(600, 10))
        y = np.where(X @ rng.normal(size=10) + rng.normal(size=600) > 0, 1.0, -1.0)
        a = svm.train_svm(X, y, svm.SvmConfig(seed=1))
        b = svm.train_svm(X, y, svm.SvmConfig(seed=2))
        assert a.primal == pytest.approx(b.primal, rel=2e-4)
        assert a.primal - a.dual <= 1e-4 * a.primal

    def test_bias_term(self):
        X = np.array([[3.0], [4.0], [5.0], [6.0]])
        y = np.array([-1, -1, 1, 1])
        m = svm.train_svm(X, y, svm.SvmConfig(C=100.0, bias=True))
        assert len(m.omega) == 2 and m.feature_dim == 1
        assert np.all(np.sign(m.decision(X)) == y)

    def test_deterministic(self, rng):
        X, y, C = tiny_dataset(99)
        a = svm.train_svm(X, y, svm.SvmConfig(C=C, seed=4))
        b = svm.train_svm(X, y, svm.SvmConfig(C=C, seed=4))
        assert np.array_equal(a.omega, b.omega)

    def test_validation(self):
        with pytest.raises(DataError):
            svm.train_svm([[1.0], [2.0]], [1, 1])
        with pytest.raises(DataError):
            svm.train_svm([[1.0], [2.0]], [1, 0])
        with pytest.raises(DataError):
            svm.train_svm([[np.nan], [2.0]], [1, -1])
        with pytest.raises(ValueError):
            svm.SvmConfig(C=0)


class TestModel:
    """Scoring, the logistic link and serialisation."""

    @given(st.floats(-1e6, 1e6))
    def test_sigmoid_stable_and_symmetric(self, t):
        s = svm.sigmoid(t)
        assert 0.0 <= s <= 1.0
        assert s + svm.sigmoid(-t) == pytest.approx(1.0, abs=1e-12)

    def test_sigmoid_extremes(self):
        with np.errstate(over="raise"):
            assert svm.sigmoid(-800.0) == 0.0 and svm.sigmoid(800.0) == 1.0
        assert svm.sigmoid(0.0) == 0.5

    def test_score_and_json(self):
        m = svm.LinearModel(np.array([0.5, -1.0, 2.0]), svm.SvmConfig(bias=True))
        assert m.feature_dim == 2
        assert svm.score_view(m, [2.0, 1.0]) == pytest.approx(2.0)
        back = svm.LinearModel.from_json(m.to_json())
        assert np.array_equal(back.omega, m.omega) and back.config.bias
        with pytest.raises(DataError):
            svm.score_view(m, [1.0, 2.0, 3.0])
        with pytest.raises(DataError):
            svm.LinearModel.from_json('{"version": 2}')
