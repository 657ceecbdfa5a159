import numpy as np
import pytest

from supermarket import (build_params, erlang_ph, exponential_ph, kurtz_convergence, mm_params,
                         example_map, poisson_map, replicate, simulate)
from supermarket.errors import ConfigError, StabilityError
from supermarket.simulation import make_rng


@pytest.fixture(scope="module")
def example():
    return build_params(example_map(), exponential_ph(10.0), 2)


@pytest.fixture(scope="module")
def short_run(example):
    return simulate(example, 40, 60.0, warmup=10.0, seed=3)


class TestSimulate:
    def test_same_seed_same_path(self, example):
        a = simulate(example, 20, 20.0, seed=11)
        b = simulate(example, 20, 20.0, seed=11)
        np.testing.assert_array_equal(a.empirical_tails, b.empirical_tails)
        assert a.event_count == b.event_count and a.sojourn_mean == b.sojourn_mean

    def test_different_seeds_differ(self, example):
        a = simulate(example, 20, 20.0, seed=1)
        b = simulate(example, 20, 20.0, seed=2)
        assert a.event_count != b.event_count

    def test_conservation(self, short_run):
        r = short_run
        assert r.arrivals == r.departures + r.in_system
        assert r.customers > 0

    def test_tail_shape(self, short_run, example):
        r = short_run
        assert r.empirical_tails.shape[1:] == (example.m_a, example.m_b)
        assert r.tail_sums[0] == pytest.approx(1.0)
        assert np.all(np.diff(r.tail_sums) <= 1e-12)
        assert np.all((r.tail_sums >= 0) & (r.tail_sums <= 1 + 1e-12))
        # level-0 rows are the MAP phase occupancy
        assert r.empirical_tails[0, :, 0].sum() == pytest.approx(1.0)

    def test_load_matches_utilization(self):
        # long-run busy fraction of a stable system is rho
        r = simulate(mm_params(0.6, 2), 200, 400.0, warmup=50.0, seed=5)
        assert r.tail_sums[1] == pytest.approx(0.6, abs=0.02)

    def test_phase_type_service(self):
        p = build_params(poisson_map(0.5), erlang_ph(3, 3.0), 2)
        r = simulate(p, 50, 100.0, warmup=20.0, seed=0)
        assert r.empirical_tails.shape[2] == 3
        assert r.tail_sums[1] == pytest.approx(0.5, abs=0.06)

    def test_without_replacement(self):
        p = mm_params(0.5, 2)
        r = simulate(p, 2, 50.0, seed=0, with_replacement=False)
        assert r.arrivals > 0
        with pytest.raises(ConfigError):
            simulate(mm_params(0.5, 3), 2, 10.0, with_replacement=False)

    def test_sampling(self, example):
        grid = np.linspace(0, 5, 11)
        r = simulate(example, 30, 5.0, seed=0, sample_times=grid, sample_levels=4)
        assert r.samples.shape == (11, 4, 1)
        np.testing.assert_array_equal(r.samples[0], 0.0)

    @pytest.mark.parametrize("kw", [{"n": 0, "horizon": 10.0}, {"n": 5, "horizon": 0.0},
                                    {"n": 5, "horizon": 10.0, "warmup": 20.0}])
    def test_bad_config(self, kw, example):
        with pytest.raises(ConfigError):
            simulate(example, **kw)

    def test_unstable(self):
        p = mm_params(0.5, 2)
        unstable = type(p)(map=p.map, ph=p.ph, d=2, rho=1.2, theta=1.0, omega=1.0, psi=1.0)
        with pytest.raises(StabilityError):
            simulate(unstable, 10, 10.0)

    def test_rng_is_counter_based(self):
        assert make_rng(7).bit_generator.__class__.__name__ == "Philox"


class TestReplicate:
    def test_seeds_are_consecutive(self, example):
        s = replicate(example, 15, 10.0, 2.0, seed=100, reps=3)
        assert [r.seed for r in s.results] == [100, 101, 102]
        one = simulate(example, 15, 10.0, 2.0, seed=101)
        np.testing.assert_array_equal(s.results[1].tail_sums, one.tail_sums)
        assert np.all(np.isfinite(s.tail_stderr))

    def test_worker_pool_matches_serial(self, example):
        a = replicate(example, 10, 5.0, 1.0, seed=0, reps=2)
        b = replicate(example, 10, 5.0, 1.0, seed=0, reps=2, workers=2)
        np.testing.assert_array_equal(a.tail_mean, b.tail_mean)

    def test_zero_reps(self, example):
        with pytest.raises(ConfigError):
            replicate(example, 10, 5.0, 0.0, seed=0, reps=0)


class TestKurtz:
    def test_small_run(self):
        rows, traj = kurtz_convergence(mm_params(0.5, 2), [20, 80], 2.0, 2, seed=0, step=0.01)
        assert [r.n for r in rows] == [20, 80]
        assert all(0 <= r.sup_distance <= 1 for r in rows)
        assert traj.times[-1] == pytest.approx(2.0)

    @pytest.mark.parametrize("n_list", [[], [100, 50]])
    def test_bad_n_list(self, n_list, example):
        with pytest.raises(ConfigError):
            kurtz_convergence(example, n_list, 1.0, 2, seed=0)
