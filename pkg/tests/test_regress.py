import numpy as np
import pytest

from sugar import regress
from sugar.errors import ContractViolationError
from sugar.regress import RegressionConfig

FAST = RegressionConfig(epochs=60)


class TestFit:
    def test_constant_target_converges_to_constant(self):
        rng = np.random.default_rng(0)
        data = np.column_stack([rng.normal(size=1500), np.full(1500, 2.5)])
        model = regress.fit_conditional_mean(data, 1, [0], seed=0)
        grid = np.linspace(-2, 2, 40)[:, None]
        preds = regress.predict_rows(model, grid)
        assert np.max(np.abs(preds - 2.5)) < 1e-2

    def test_linear_truth_recovered(self):
        rng = np.random.default_rng(1)
        x1 = rng.uniform(-1, 1, size=4000)
        data = np.column_stack([x1, 2.0 * x1])
        model = regress.fit_conditional_mean(data, 1, [0], seed=1)
        grid = np.linspace(-1, 1, 200)[:, None]
        preds = regress.predict_rows(model, grid)
        mse = float(np.mean((preds - 2.0 * grid[:, 0]) ** 2))
        assert mse < 0.01

    def test_sine_truth_recovered_on_held_out_grid(self):
        rng = np.random.default_rng(2)
        x1 = rng.uniform(-3, 3, size=4000)
        y = np.sin(x1) + rng.normal(scale=0.1, size=4000)
        data = np.column_stack([x1, y])
        model = regress.fit_conditional_mean(data, 1, [0], seed=2)
        grid = np.linspace(-2.8, 2.8, 100)[:, None]
        preds = regress.predict_rows(model, grid)
        mse = float(np.mean((preds - np.sin(grid[:, 0])) ** 2))
        assert mse < 0.02

    def test_empty_conditioning_set_is_sample_mean(self):
        rng = np.random.default_rng(3)
        data = rng.normal(loc=1.7, size=(500, 2))
        model = regress.fit_conditional_mean(data, 0, [], seed=0)
        assert model.constant == pytest.approx(data[:, 0].mean())
        assert regress.predict(model, []) == model.constant
        assert np.all(regress.predict_from_full(model, data) == model.constant)

    def test_loss_trace_finite_and_running_min_nonincreasing(self):
        rng = np.random.default_rng(4)
        x1 = rng.normal(size=1000)
        data = np.column_stack([x1, np.sin(x1) + 0.1 * rng.normal(size=1000)])
        model = regress.fit_conditional_mean(data, 1, [0], config=FAST, seed=3)
        trace = np.array(model.training_loss_trace)
        assert np.isfinite(trace).all()
        running_min = np.minimum.accumulate(trace)
        assert np.all(np.diff(running_min) <= 1e-9)
        assert running_min[-1] < trace[0]

    def test_member_order_convention_is_canonical(self):
        rng = np.random.default_rng(5)
        data = rng.normal(size=(800, 4))
        data[:, 3] = data[:, 0] - data[:, 2] + 0.1 * rng.normal(size=800)
        a = regress.fit_conditional_mean(data, 3, [0, 2], config=FAST, seed=7)
        b = regress.fit_conditional_mean(data, 3, [2, 0], config=FAST, seed=7)
        assert a.feature_index_map == b.feature_index_map == (0, 2)
        rows = rng.normal(size=(10, 2))
        assert np.array_equal(
            regress.predict_rows(a, rows), regress.predict_rows(b, rows)
        )

    def test_bad_members_rejected(self):
        data = np.zeros((10, 3))
        with pytest.raises(ContractViolationError):
            regress.fit_conditional_mean(data, 1, [1], seed=0)
        with pytest.raises(ContractViolationError):
            regress.fit_conditional_mean(data, 1, [5], seed=0)


class TestPredict:
    def _model(self):
        rng = np.random.default_rng(6)
        x1 = rng.normal(size=600)
        data = np.column_stack([x1, 0.5 * x1])
        return regress.fit_conditional_mean(data, 1, [0], config=FAST, seed=0)

    def test_predict_deterministic(self):
        model = self._model()
        assert regress.predict(model, [0.3]) == regress.predict(model, [0.3])

    def test_predict_matches_rows(self):
        model = self._model()
        assert regress.predict(model, [0.7]) == pytest.approx(
            regress.predict_rows(model, [[0.7]])[0]
        )

    def test_length_mismatch_rejected(self):
        model = self._model()
        with pytest.raises(ContractViolationError):
            regress.predict(model, [0.1, 0.2])

    def test_predict_from_full_slices_features(self):
        model = self._model()
        full = np.array([[0.4, 99.0]])
        assert regress.predict_from_full(model, full)[0] == pytest.approx(
            regress.predict(model, [0.4])
        )
