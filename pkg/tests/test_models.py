import numpy as np
import pytest
from hypothesis import given, settings

from supermarket import (build_map, build_params, build_ph, erlang_ph, exponential_ph, mm_params,
                         example_map, poisson_map)
from supermarket.errors import StabilityError, StructuralError, ValidationError
from supermarket.models import params_from_dict

from conftest import models


class TestMap:
    def test_example_rate(self):
        m = example_map()
        np.testing.assert_allclose(m.gamma, [0.4375, 0.5625], rtol=1e-14)
        assert m.lam == pytest.approx(4.125, rel=1e-14)
        assert m.order == 2

    def test_poisson(self):
        m = poisson_map(2.5)
        assert m.lam == pytest.approx(2.5)
        np.testing.assert_array_equal(m.gamma, [1.0])

    def test_negative_d_entry_named(self):
        with pytest.raises(ValidationError, match=r"\(0, 1\)"):
            build_map([[-1.0, 0.5], [0.5, -1.0]], [[0.5, -0.1], [0.5, 0.0]])

    def test_row_sum(self):
        with pytest.raises(ValidationError, match="row 1"):
            build_map([[-2.0, 1.0], [1.0, -1.0]], [[1.0, 0.0], [0.0, 1.0]])

    def test_nonnegative_diagonal(self):
        with pytest.raises(ValidationError, match="diagonal"):
            build_map([[0.0]], [[0.0]])

    def test_shape_mismatch(self):
        with pytest.raises(StructuralError):
            build_map([[-1.0]], [[1.0, 0.0]])

    def test_reducible(self):
        with pytest.raises(StructuralError):
            build_map([[-1.0, 0.0], [0.0, -1.0]], [[1.0, 0.0], [0.0, 1.0]])


class TestPh:
    def test_exponential(self):
        ph = exponential_ph(4.0)
        assert ph.mu == pytest.approx(4.0)
        np.testing.assert_allclose(ph.T0, [4.0])
        np.testing.assert_allclose(ph.tau, [1.0])

    @pytest.mark.parametrize("m", [1, 2, 3, 5])
    def test_erlang(self, m):
        ph = erlang_ph(m, 3.0)
        assert ph.mean == pytest.approx(m / 3.0, rel=1e-14)
        # the residual-phase vector of an Erlang is uniform over phases
        np.testing.assert_allclose(ph.tau, np.full(m, 1.0 / m), rtol=1e-12)

    def test_alpha_not_normalized(self):
        with pytest.raises(ValidationError, match="sums to"):
            build_ph([0.5, 0.4], [[-1.0, 0.0], [0.0, -1.0]])

    def test_no_exit(self):
        with pytest.raises(ValidationError, match="positive sum"):
            build_ph([1.0, 0.0], [[-1.0, 2.0], [1.0, -1.0]])

    def test_conformance(self):
        with pytest.raises(StructuralError):
            build_ph([1.0], [[-1.0, 0.0], [0.0, -1.0]])


class TestParams:
    def test_mm_scalars(self):
        p = mm_params(0.5, 2, mu=3.0)
        assert p.rho == pytest.approx(0.5)
        assert (p.theta, p.omega, p.psi) == (1.0, 1.0, 1.0)
        assert p.is_poisson and p.m_a == p.m_b == 1

    def test_unstable(self):
        with pytest.raises(StabilityError):
            build_params(poisson_map(2.0), exponential_ph(2.0), 2)

    @pytest.mark.parametrize("d", [0, 1.5, 33])
    def test_bad_d(self, d):
        with pytest.raises(ValidationError):
            build_params(poisson_map(1.0), exponential_ph(2.0), d)

    def test_example_theta(self):
        p = build_params(example_map(), exponential_ph(10.0), 2)
        expected = 1.0 / (np.sqrt(0.4375) + np.sqrt(0.5625))
        assert p.theta == pytest.approx(expected, rel=1e-14)
        assert p.rho == pytest.approx(0.4125, rel=1e-14)

    @given(models())
    @settings(max_examples=40, deadline=None)
    def test_derived_ranges(self, p):
        assert 0 < p.theta <= 1 + 1e-12
        assert 0 < p.omega <= 1 + 1e-12
        assert 0 < p.psi <= 1 + 1e-12
        assert 0 < p.rho < 1
        assert abs(p.map.gamma.sum() - 1) < 1e-12
        assert abs(p.ph.tau.sum() - 1) < 1e-12

    def test_from_dict_roundtrip(self):
        p = build_params(example_map(), erlang_ph(2, 40.0), 3)
        q = params_from_dict(p.to_dict())
        assert q.rho == pytest.approx(p.rho)
        assert q.d == 3
        np.testing.assert_array_equal(q.ph.T, p.ph.T)

    def test_from_dict_missing(self):
        with pytest.raises(ValidationError, match="missing"):
            params_from_dict({"map": {"C": [[-1]], "D": [[1]]}, "d": 2})
