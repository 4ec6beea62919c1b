import numpy as np
import pytest

from sugar import simgen
from sugar.errors import ConfigurationError, DataFormatError


class TestSampleDag:
    def test_zero_edge_probability_gives_empty_graph(self):
        truth = simgen.sample_dag(10, 0.0, seed=0)
        assert truth.adjacency.sum() == 0

    def test_expected_edge_count_within_binomial_bounds(self):
        d, zeta = 50, 0.1
        n_slots = d * (d - 1) / 2
        counts = [
            simgen.sample_dag(d, zeta, seed=s).adjacency.sum() for s in range(10)
        ]
        mean = zeta * n_slots  # 122.5
        sigma = np.sqrt(n_slots * zeta * (1 - zeta))
        for c in counts:
            assert abs(c - mean) < 3 * sigma + 1

    def test_same_seed_identical(self):
        a = simgen.sample_dag(8, 0.3, seed=42)
        b = simgen.sample_dag(8, 0.3, seed=42)
        assert np.array_equal(a.adjacency, b.adjacency)
        assert a.pair_coeffs.keys() == b.pair_coeffs.keys()

    def test_strictly_lower_triangular(self):
        truth = simgen.sample_dag(12, 0.4, seed=1)
        assert np.array_equal(truth.adjacency, np.tril(truth.adjacency, k=-1))

    def test_coefficient_ranges(self):
        truth = simgen.sample_dag(10, 0.5, mode="nonlinear", seed=2)
        for c, _, _ in truth.pair_coeffs.values():
            assert 0.5 <= abs(c) <= 1.5
        lin = simgen.sample_dag(10, 0.5, mode="linear", seed=2)
        for c in lin.single_coeffs.values():
            assert 0.3 <= abs(c) <= 0.5

    def test_zero_fraction_zeroes_some(self):
        truth = simgen.sample_dag(12, 0.5, mode="linear", seed=3, zero_fraction=0.5)
        values = list(truth.single_coeffs.values())
        assert any(v == 0.0 for v in values) and any(v != 0.0 for v in values)

    def test_bad_zeta_rejected(self):
        with pytest.raises(ConfigurationError):
            simgen.sample_dag(5, 1.5)


class TestArNoise:
    def test_phi_zero_is_standard_normal(self):
        series = simgen.ar_noise(10000, 0.0, seed=0)
        assert abs(series.var() - 1.0) < 0.05

    def test_lag_one_autocorrelation(self):
        series = simgen.ar_noise(10000, 0.5, seed=1)
        s = series - series.mean()
        rho1 = (s[1:] * s[:-1]).mean() / s.var()
        assert abs(rho1 - 0.5) < 0.03

    def test_stationary_variance(self):
        series = simgen.ar_noise(10000, 0.5, seed=2)
        assert abs(series.var() - 4.0 / 3.0) < 0.05 * 4.0 / 3.0

    def test_unstable_phi_rejected(self):
        with pytest.raises(ConfigurationError):
            simgen.ar_noise(100, 1.0)


def reevaluate_nonlinear(truth, x, eps):
    """Straight-line oracle re-evaluation of the nonlinear recursion."""
    out = np.empty_like(x)
    for j in range(truth.d):
        acc = eps[:, :, j].copy()
        pa = truth.parents(j)
        for a, k1 in enumerate(pa):
            for k2 in pa[a:]:
                c, f1, f2 = truth.pair_coeffs[(j, k1, k2)]
                acc = acc + c * f1(out[:, :, k1]) * f2(out[:, :, k2])
        for k3 in pa:
            c, f3 = truth.single_coeffs[(j, k3)]
            acc = acc + c * f3(out[:, :, k3])
        out[:, :, j] = acc
    return out


class TestSimulate:
    def test_empty_graph_gives_independent_ar_series(self):
        truth = simgen.sample_dag(3, 0.0, seed=0)
        ds = simgen.simulate_nonlinear(truth, 4, 5000, seed=1)
        for j in range(3):
            s = ds.values[0, :, j]
            s = s - s.mean()
            rho1 = (s[1:] * s[:-1]).mean() / s.var()
            assert abs(rho1 - 0.5) < 0.05

    def test_root_nodes_keep_ar_structure(self):
        truth = simgen.sample_dag(4, 0.4, seed=3)
        ds = simgen.simulate_nonlinear(truth, 2, 8000, seed=2)
        s = ds.values[0, :, 0] - ds.values[0, :, 0].mean()
        rho1 = (s[1:] * s[:-1]).mean() / s.var()
        assert abs(rho1 - 0.5) < 0.05

    def test_children_match_reevaluation_oracle(self):
        truth = simgen.sample_dag(5, 0.5, seed=4)
        n, t = 3, 50
        # regenerate the error series exactly as the simulator does
        rng = np.random.default_rng(9)
        eps = np.empty((n, t, 5))
        for j in range(5):
            eps[:, :, j] = simgen.ar_noise(t, 0.5, rng=rng, size=(n,))
        ds = simgen.simulate_nonlinear(truth, n, t, seed=9)
        assert np.array_equal(ds.values, reevaluate_nonlinear(truth, ds.values, eps))

    def test_linear_child_is_linear_combination(self):
        truth = simgen.sample_dag(3, 0.9, mode="linear", seed=5)
        ds = simgen.simulate_linear(truth, 2, 100, seed=6)
        rng = np.random.default_rng(6)
        eps = np.empty((2, 100, 3))
        for j in range(3):
            eps[:, :, j] = simgen.ar_noise(100, 0.5, rng=rng, size=(2,))
        x = ds.values
        for j in range(3):
            acc = eps[:, :, j].copy()
            for k in truth.parents(j):
                acc += truth.single_coeffs[(j, k)] * x[:, :, k]
            assert np.allclose(x[:, :, j], acc, atol=1e-12)

    def test_same_seed_bitwise_identical(self):
        truth = simgen.sample_dag(4, 0.3, seed=7)
        a = simgen.simulate_nonlinear(truth, 3, 20, seed=8)
        b = simgen.simulate_nonlinear(truth, 3, 20, seed=8)
        assert np.array_equal(a.values, b.values)

    def test_mode_mismatch_rejected(self):
        truth = simgen.sample_dag(3, 0.5, mode="linear", seed=0)
        with pytest.raises(Exception):
            simgen.simulate_nonlinear(truth, 2, 10, seed=0)


class TestVStructure:
    def test_first_two_variables_uncorrelated(self):
        ds = simgen.vstructure_example(10, 1000, seed=0)
        x = ds.values.reshape(-1, 3)
        cov = np.cov(x[:, 0], x[:, 1])[0, 1]
        assert abs(cov) < 0.05

    def test_third_moment_identity(self):
        # E[(X3 - X2) X1] = E[eps1^3] = 0 for symmetric errors
        ds = simgen.vstructure_example(10, 1000, seed=1)
        x = ds.values.reshape(-1, 3)
        val = ((x[:, 2] - x[:, 1]) * x[:, 0]).mean()
        assert abs(val) < 0.1

    def test_variance_of_sink(self):
        ds = simgen.vstructure_example(20, 2000, seed=2)
        x = ds.values.reshape(-1, 3)
        assert abs(x[:, 2].var() - 4.0) < 0.4

    def test_structural_equation_exact(self):
        ds = simgen.vstructure_example(3, 50, seed=3)
        x = ds.values
        rng = np.random.default_rng(3)
        eps = rng.normal(size=(3, 50, 3))
        assert np.array_equal(x[:, :, 0], eps[:, :, 0])
        assert np.array_equal(x[:, :, 1], eps[:, :, 1])
        assert np.allclose(
            x[:, :, 2], x[:, :, 0] ** 2 + x[:, :, 1] + eps[:, :, 2], atol=1e-12
        )


class TestPersistence:
    def test_csv_roundtrip(self, tmp_path):
        ds = simgen.vstructure_example(3, 7, seed=0)
        path = tmp_path / "data.csv"
        simgen.write_csv(ds, path)
        back = simgen.read_csv(path)
        assert np.array_equal(back.values, ds.values)

    def test_csv_header_required(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,1,1,0.5\n")
        with pytest.raises(DataFormatError):
            simgen.read_csv(path)

    def test_csv_bad_row_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("subject,time,variable,value\n1,1,1,not-a-number\n")
        with pytest.raises(DataFormatError) as err:
            simgen.read_csv(path)
        assert err.value.line == 2

    def test_binary_roundtrip(self, tmp_path):
        ds = simgen.vstructure_example(2, 5, seed=4)
        path = tmp_path / "dump.npz"
        simgen.write_binary(ds, path)
        back = simgen.read_binary(path)
        assert np.array_equal(back.values, ds.values)
        assert back.provenance == ds.provenance

    def test_truth_csv(self, tmp_path):
        truth = simgen.sample_dag(4, 0.9, seed=0)
        path = tmp_path / "truth.csv"
        simgen.write_truth_csv(truth, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "parent,child"
        assert len(lines) - 1 == truth.adjacency.sum()
