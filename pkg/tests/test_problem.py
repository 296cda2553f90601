import numpy as np
import pytest
from hypothesis import given, strategies as st

import cnmfg
from cnmfg.problem import (
    MeasureSummary,
    box_minimize_batch,
    hamiltonian,
    make_instance,
    minimize_hamiltonian,
    minimize_hamiltonian_batch,
    validate_spec,
)


class TestMeasureSummary:
    def test_weights_must_normalize(self):
        with pytest.raises(ValueError):
            MeasureSummary([[0.0], [1.0]], [0.5, 0.6])

    def test_moments_cached(self):
        mu = MeasureSummary.from_atoms([[1.0], [3.0]], [0.25, 0.75], p=2.0)
        assert mu.mean[0] == pytest.approx(2.5)
        assert mu.pth_moment == pytest.approx(0.25 * 1 + 0.75 * 9)
        assert mu.moment_check()

    def test_dirac(self):
        mu = MeasureSummary.dirac([2.0, 0.0], p=2.0)
        assert mu.pth_moment == pytest.approx(4.0)


class TestHamiltonian:
    def test_all_terms_vanish(self, lq_unit_spec, dirac0):
        assert hamiltonian(lq_unit_spec, 0.0, [0.0], dirac0, [0.0], [0.0]) == pytest.approx(0.0)

    def test_hand_value(self, lq_unit_spec, dirac0):
        # 0.5*0.25 + 0.5*1 + 0.2*0.5, checked by independent scalar arithmetic
        a, z, x = 0.5, 0.2, 1.0
        expected = 0.5 * a * a + 0.5 * x * x + z * a
        got = hamiltonian(lq_unit_spec, 0.0, [x], dirac0, [a], [z])
        assert got == pytest.approx(expected)
        assert got == pytest.approx(0.725)

    def test_zero_adjoint_is_running_cost(self, lq_unit_spec):
        mu = MeasureSummary.from_atoms([[0.3], [-0.1]], p=2.0)
        x = np.array([[0.7]])
        a = np.array([[0.4]])
        f = lq_unit_spec.running_cost(0.3, x, mu, a)[0]
        assert hamiltonian(lq_unit_spec, 0.3, [0.7], mu, [0.4], [0.0]) == pytest.approx(f)

    def test_rejects_action_outside_box(self, lq_unit_spec, dirac0):
        with pytest.raises(ValueError):
            hamiltonian(lq_unit_spec, 0.0, [0.0], dirac0, [1.5], [0.0])

    def test_rejects_nonfinite(self, lq_unit_spec, dirac0):
        with pytest.raises(ValueError):
            hamiltonian(lq_unit_spec, 0.0, [np.nan], dirac0, [0.0], [0.0])

    @given(z1=st.floats(-3, 3), z2=st.floats(-3, 3), x=st.floats(-2, 2), a=st.floats(-1, 1))
    def test_affine_in_adjoint(self, lq_unit_spec, dirac0, z1, z2, x, a):
        h = lambda z: hamiltonian(lq_unit_spec, 0.5, [x], dirac0, [a], [z])
        assert abs(h(z1 + z2) - h(z1) - h(z2) + h(0.0)) < 1e-10


class TestMinimizeHamiltonian:
    def test_interior_vertex(self, lq_unit_spec, dirac0):
        a, h = minimize_hamiltonian(lq_unit_spec, 0.0, [0.0], dirac0, [0.3])
        assert a[0] == pytest.approx(-0.3, abs=1e-6)
        assert h == pytest.approx(-0.045, abs=1e-9)

    def test_clipped_to_boundary(self, lq_unit_spec, dirac0):
        a, _ = minimize_hamiltonian(lq_unit_spec, 0.0, [0.0], dirac0, [2.0])
        assert a[0] == pytest.approx(-1.0)

    def test_symmetric_minimum_at_origin(self, lq_unit_spec, dirac0):
        a, h = minimize_hamiltonian(lq_unit_spec, 0.0, [0.0], dirac0, [0.0])
        assert a[0] == pytest.approx(0.0, abs=1e-9)
        assert h == pytest.approx(0.0, abs=1e-12)

    @given(z=st.floats(-2, 2), x=st.floats(-2, 2))
    def test_minimizer_beats_sampled_actions(self, lq_unit_spec, dirac0, z, x):
        _, h = minimize_hamiltonian(lq_unit_spec, 0.2, [x], dirac0, [z])
        actions = np.linspace(-1, 1, 100)
        for a in actions:
            assert h <= hamiltonian(lq_unit_spec, 0.2, [x], dirac0, [a], [z]) + 1e-9

    def test_support_reordering_invariance(self, lq_unit_spec):
        pts = np.array([[0.4], [-0.2], [1.1]])
        w = np.array([0.5, 0.2, 0.3])
        mu1 = MeasureSummary(pts, w)
        perm = [2, 0, 1]
        mu2 = MeasureSummary(pts[perm], w[perm])
        a1, h1 = minimize_hamiltonian(lq_unit_spec, 0.1, [0.3], mu1, [0.7])
        a2, h2 = minimize_hamiltonian(lq_unit_spec, 0.1, [0.3], mu2, [0.7])
        # float summation order perturbs the search path; grid tolerance applies
        assert a1[0] == pytest.approx(a2[0], abs=1e-6)
        assert h1 == pytest.approx(h2, abs=1e-10)

    def test_tie_break_lexicographic(self):
        # flat objective: every grid point ties, the smallest action wins
        def flat(a):
            return np.zeros(a.shape[0])

        a, _ = box_minimize_batch(flat, [-1.0], [1.0], 1)
        assert a[0, 0] == pytest.approx(-1.0)

    def test_batch_matches_pointwise(self, lq_unit_spec, dirac0):
        z = np.array([[0.3], [-0.8], [2.0]])
        x = np.zeros((3, 1))
        a_batch, h_batch = minimize_hamiltonian_batch(lq_unit_spec, 0.0, x, dirac0, z)
        for i in range(3):
            a_single, h_single = minimize_hamiltonian(lq_unit_spec, 0.0, x[i], dirac0, z[i])
            assert a_batch[i, 0] == pytest.approx(a_single[0], abs=1e-12)
            assert h_batch[i] == pytest.approx(h_single, abs=1e-12)


class TestValidateSpec:
    def test_lq_passes(self, lq_spec):
        report = validate_spec(lq_spec, n_probes=128, seed=1)
        assert report.passed
        assert report.max_drift == pytest.approx(1.0)

    def test_zero_sigma_fails(self):
        spec = make_instance("lq", sigma=0.0)
        report = validate_spec(spec, n_probes=16, seed=1)
        assert not report.passed
        assert not report.sigma_ok
        assert any("singular" in n for n in report.notes)
        with pytest.raises(ValueError):
            spec.sigma_inv

    def test_drift_bound_violation(self):
        base = make_instance("lq")
        from dataclasses import replace

        spec = replace(base, drift=lambda t, x, mu, a: 2.0 * a, drift_bound=1.0)
        report = validate_spec(spec, n_probes=64, seed=2)
        assert not report.passed
        assert report.max_drift > 1.0 + 1e-9

    def test_p_below_two_rejected(self):
        with pytest.raises(ValueError):
            make_instance("lq", p=1.5)


class TestFamilies:
    def test_unknown_family(self):
        with pytest.raises(ValueError, match="unknown instance family"):
            make_instance("nosuch")

    def test_registry_hook(self):
        called = {}

        def builder(**kw):
            called.update(kw)
            return make_instance("lq")

        cnmfg.register_family("custom-test", builder)
        spec = make_instance("custom-test", interaction=0.5)
        assert called == {"interaction": 0.5}
        assert spec.d_state == 1

    def test_tanh_family_bound(self):
        spec = make_instance("tanh", gain=0.5)
        assert spec.drift_bound == pytest.approx(1.5)
        assert validate_spec(spec, n_probes=64, seed=3).passed
