import math
from types import SimpleNamespace

import numpy as np
import pytest

from pathrev.core import (DomainError, MatrixField, ParameterError,
                          VectorField, make_grid)
from pathrev.density import DensityFlow, exact_flow_density
from pathrev.entropy import (ActionEstimate, current_osmosis_decomposition,
                             entropy_vs_counting, fisher_information,
                             fisher_information_mc, gaussian_relative_entropy,
                             girsanov_action, heat_flow_dissipation,
                             jump_entropy_integrand, rw_relative_entropy)
from pathrev.models import (Gaussian, biased_cycle_walk, bm_diffusion,
                            ou_diffusion, ou_marginal_flow, ou_reference,
                            walk_marginal_fn)
from pathrev.simulate import SimConfig, euler_maruyama

E_NEG_2 = 0.1353352832366127
F_DROP = -0.43233235838169365  # (e^{-2} - 1) / 2


class TestGaussianRelativeEntropy:
    def test_shifted_against_stationary(self):
        p = Gaussian(np.array([1.0]), np.eye(1) * 0.5)
        r = Gaussian(np.zeros(1), np.eye(1) * 0.5)
        assert gaussian_relative_entropy(p, r) == pytest.approx(1.0, abs=1e-15)

    def test_self_entropy_vanishes(self):
        p = Gaussian(np.array([0.3, -0.2]), np.eye(2) * 0.7)
        assert gaussian_relative_entropy(p, p) == pytest.approx(0.0, abs=1e-14)

    def test_variance_mismatch(self):
        p = Gaussian(np.zeros(1), np.eye(1) * 2.0)
        r = Gaussian(np.zeros(1), np.eye(1))
        expected = 0.5 * (2.0 - 1.0 + math.log(1.0 / 2.0))
        assert gaussian_relative_entropy(p, r) == pytest.approx(expected, abs=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ParameterError):
            gaussian_relative_entropy(Gaussian(np.zeros(1), np.eye(1)),
                                      Gaussian(np.zeros(2), np.eye(2)))


class TestGirsanovAction:
    def _bm_ensemble(self, n_steps=256, n_paths=10, seed=1):
        spec = bm_diffusion(Gaussian(np.zeros(1), np.eye(1)))
        return euler_maruyama(spec, SimConfig(n_paths, seed, make_grid(1.0, n_steps)))

    def test_constant_momentum_is_exact(self):
        # |beta|^2/2 = 1/2 along every path; on a dyadic grid the trapezoid
        # rule reproduces 0.5 without rounding, so the spread is exactly zero
        e = self._bm_ensemble()
        est = girsanov_action(VectorField.constant([1.0]), MatrixField.identity(1), e)
        assert est.value == 0.5
        assert est.stderr == 0.0
        assert est.n_paths == 10
        assert est.n_excluded == 0

    def test_nonfinite_paths_are_dropped(self):
        e = self._bm_ensemble(n_steps=64, n_paths=40)
        bad = VectorField(lambda t, X: np.where(X > 0.8, np.nan, 1.0), 1)
        est = girsanov_action(bad, MatrixField.identity(1), e)
        assert est.n_paths + est.n_excluded == 40
        assert est.n_excluded > 0
        assert math.isfinite(est.value)

    def test_all_paths_dropped(self):
        e = self._bm_ensemble(n_steps=16, n_paths=5)
        bad = VectorField(lambda t, X: np.full_like(X, np.nan), 1)
        with pytest.raises(ParameterError):
            girsanov_action(bad, MatrixField.identity(1), e)


@pytest.fixture(scope="module")
def report():
    ref, _ = ou_reference()
    flow = ou_marginal_flow([1.0], [[0.5]])
    spec = ou_diffusion(Gaussian(np.array([1.0]), np.eye(1) * 0.5))
    e = euler_maruyama(spec, SimConfig(2000, 42, make_grid(1.0, 400)))
    return current_osmosis_decomposition(ref.drift, exact_flow_density(flow),
                                         ref, e)


class TestCurrentOsmosisDecomposition:
    def test_boundary_terms_closed_form(self, report):
        assert report.boundary_initial == pytest.approx(1.0, abs=1e-14)
        assert report.boundary_terminal == pytest.approx(E_NEG_2, abs=1e-14)
        assert report.boundary_initial_stderr == 0.0
        assert report.boundary_terminal_stderr == 0.0

    def test_forward_action_vanishes(self, report):
        # the forward process is the reference itself
        assert report.action_fwd == 0.0
        assert report.action_fwd_stderr == 0.0
        assert report.total == report.boundary_initial

    def test_backward_route_agrees(self, report):
        assert report.action_bwd == pytest.approx(0.8646665181474632, abs=1e-9)
        assert abs(report.backward_total - report.total) <= 5e-6
        assert abs(report.backward_total - report.total) <= \
            3 * report.backward_total_stderr + 1e-4

    def test_current_equals_osmotic_here(self, report):
        # beta_fwd = 0 makes the half-sum and half-difference mirror images
        assert report.action_current == report.action_osmotic
        assert report.action_current == pytest.approx(0.2161666295368658, abs=1e-9)

    def test_free_energy_split(self, report):
        assert report.free_energy_change == pytest.approx(F_DROP, abs=1e-14)
        co_total = report.free_energy_change + report.current_osmotic_action
        assert abs(co_total) <= 2e-6  # trapezoid bias only

    def test_parallelogram_residual(self, report):
        assert report.parallelogram_residual <= 1e-15

    def test_bookkeeping(self, report):
        assert report.n_paths == 2000
        assert report.n_excluded == 0
        d = report.to_dict()
        assert len(d) == 20
        assert d["backward_total"] == report.backward_total

    def test_mc_boundary_route(self):
        # densities without Gaussian structure fall back to slice averages
        ref, _ = ou_reference()
        flow = ou_marginal_flow([1.0], [[0.5]])
        plain = DensityFlow(flow.pdf, flow.score,
                            lambda t: flow.at(t).max_pdf(), 1, 1e-12)
        spec = ou_diffusion(Gaussian(np.array([1.0]), np.eye(1) * 0.5))
        e = euler_maruyama(spec, SimConfig(2000, 43, make_grid(1.0, 100)))
        rep = current_osmosis_decomposition(ref.drift, plain, ref, e)
        assert rep.boundary_initial_stderr > 0.0
        assert abs(rep.boundary_initial - 1.0) <= 3 * rep.boundary_initial_stderr + 0.01

    def test_dimension_mismatch(self):
        ref, _ = ou_reference()
        flow = ou_marginal_flow([1.0, 0.0], np.eye(2))
        spec = ou_diffusion(Gaussian(np.zeros(2), np.eye(2)))
        e = euler_maruyama(spec, SimConfig(10, 0, make_grid(1.0, 8)))
        with pytest.raises(ParameterError):
            current_osmosis_decomposition(spec.drift, exact_flow_density(flow),
                                          ref, e)


class TestFisherInformation:
    def test_closed_form_value(self):
        ref, _ = ou_reference()
        mu = Gaussian(np.array([1.0]), np.eye(1) * 0.8)
        # A = (2 - 1.25)/2, c = 1: (A^2 * 0.8 + 1)/2 = 0.55625
        assert fisher_information(mu, ref.m) == pytest.approx(0.55625, abs=1e-15)

    def test_vanishes_at_equilibrium(self):
        ref, _ = ou_reference()
        assert fisher_information(ref.m, ref.m) == pytest.approx(0.0, abs=1e-15)

    def test_scales_with_a(self):
        ref, _ = ou_reference()
        mu = Gaussian(np.array([1.0]), np.eye(1) * 0.8)
        base = fisher_information(mu, ref.m)
        assert fisher_information(mu, ref.m, a=2 * np.eye(1)) == \
            pytest.approx(2 * base, rel=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ParameterError):
            fisher_information(Gaussian(np.zeros(2), np.eye(2)),
                               Gaussian(np.zeros(1), np.eye(1)))

    def test_mc_agrees_with_closed_form(self):
        ref, _ = ou_reference()
        flow = ou_marginal_flow([1.0], [[0.8]])
        density = exact_flow_density(flow)
        from pathrev.core import path_rng
        X = flow.at(0.0).sample(path_rng(606, 0), 200000)
        est = fisher_information_mc(density, ref, 0.0, X)
        closed = fisher_information(flow.at(0.0), ref.m)
        assert abs(est.value - closed) <= 3 * est.stderr
        assert isinstance(est, ActionEstimate)


class TestHeatFlowDissipation:
    def test_identity_residual(self):
        ref, _ = ou_reference()
        flow = ou_marginal_flow([1.0], [[0.5]])
        report, residual = heat_flow_dissipation(flow, ref.m, make_grid(1.0, 400))
        assert residual <= 1e-5
        assert report.free_energy[-1] - report.free_energy[0] == \
            pytest.approx(F_DROP, abs=1e-14)
        assert report.fisher.min() >= 0.0

    def test_rows_iterate_in_order(self):
        ref, _ = ou_reference()
        flow = ou_marginal_flow([1.0], [[0.5]])
        report, _ = heat_flow_dissipation(flow, ref.m, make_grid(1.0, 4))
        rows = list(report.to_rows())
        assert len(rows) == 5
        assert rows[0][0] == 0.0 and rows[-1][0] == 1.0
        assert rows[0][1] == pytest.approx(0.5, abs=1e-14)

    def test_stationary_flow_is_flat(self):
        ref, flow = ou_reference()
        report, residual = heat_flow_dissipation(flow, ref.m, make_grid(1.0, 50))
        assert residual <= 1e-14
        assert np.allclose(report.fisher, 0.0, atol=1e-15)


class TestJumpEntropyIntegrand:
    def test_special_points(self):
        assert jump_entropy_integrand(0.0) == 1.0
        assert jump_entropy_integrand(1.0) == 0.0
        assert jump_entropy_integrand(2.0) == pytest.approx(2 * math.log(2) - 1,
                                                            abs=1e-15)
        assert jump_entropy_integrand(-0.5) == math.inf

    def test_scalar_returns_float(self):
        out = jump_entropy_integrand(1.0)
        assert isinstance(out, float)

    def test_vectorized(self):
        out = jump_entropy_integrand(np.array([0.0, 1.0, -1.0, 2.0]))
        assert out.shape == (4,)
        assert out[0] == 1.0 and out[1] == 0.0 and out[2] == math.inf

    def test_convexity_minimum_at_one(self):
        xs = np.linspace(0.1, 3.0, 50)
        vals = jump_entropy_integrand(xs)
        assert vals.min() >= 0.0
        assert vals[np.argmin(np.abs(xs - 1.0))] == vals.min()


class TestEntropyVsCounting:
    def test_uniform_four_states(self):
        assert entropy_vs_counting(np.full(4, 0.25)) == \
            pytest.approx(-math.log(4.0), abs=1e-15)

    def test_point_mass_is_zero(self):
        assert entropy_vs_counting(np.array([1.0, 0.0, 0.0])) == 0.0

    def test_invalid_vectors(self):
        with pytest.raises(ParameterError):
            entropy_vs_counting(np.array([0.5, -0.1, 0.6]))
        with pytest.raises(ParameterError):
            entropy_vs_counting(np.array([0.5, 0.2]))


class TestRwRelativeEntropy:
    def test_biased_cycle_frozen_value(self):
        spec = biased_cycle_walk(4, rate_cw=2.0, rate_ccw=1.0)
        H = rw_relative_entropy(spec, walk_marginal_fn(spec), make_grid(1.0, 200))
        # -log 4 + (h(2) + h(1)) with h(2) = 2 log 2 - 1 = log 4 - 1
        assert H == -1.0

    def test_unit_rates_leave_only_the_boundary(self):
        spec = biased_cycle_walk(4, rate_cw=1.0, rate_ccw=1.0)
        H = rw_relative_entropy(spec, walk_marginal_fn(spec), make_grid(1.0, 100))
        assert H == pytest.approx(-math.log(4.0), abs=1e-14)

    def test_negative_intensity_is_domain_error(self):
        base = biased_cycle_walk(4, rate_cw=2.0, rate_ccw=1.0)
        J = np.array(base.intensity_matrix)
        J[0, 1] = -2.0
        stub = SimpleNamespace(adjacency=base.adjacency, p0=base.p0,
                               intensity=lambda t: J)
        with pytest.raises(DomainError):
            rw_relative_entropy(stub, lambda t: base.p0, make_grid(1.0, 10))
