import math

import numpy as np
import pytest

from aseplab import _kernels
from aseplab.harness import ExperimentConfig, ring_records
from aseplab.lattice import Params, ValidationError
from aseplab.oracle import (GeneratorMatrix, blocking_detailed_balance,
                            change_of_measure_identity, dump_vector_csv,
                            enumerate_states, ring_generator,
                            stationarity_check, total_variation,
                            transient_distribution, _blocking_weights)


class TestGenerator:
    def test_row_sums_vanish_and_offdiagonals_nonnegative(self):
        for p, n, c in ((0.7, 4, 2), (0.9, 5, 3), (1.0, 6, 2)):
            gen = ring_generator(n, Params(p), c)
            G = gen.rates
            assert np.allclose(G.sum(axis=1), 0.0, atol=1e-14)
            off = G - np.diag(np.diag(G))
            assert off.min() >= 0.0

    def test_transitions_only_adjacent_swaps(self):
        gen = ring_generator(5, Params(0.7), 2)
        for a, sa in enumerate(gen.states):
            for b, sb in enumerate(gen.states):
                if a != b and gen.rates[a, b] > 0:
                    x = sa ^ sb
                    # exactly two flipped sites, ring-adjacent
                    bits = [k for k in range(5) if (x >> k) & 1]
                    assert len(bits) == 2
                    i, j = bits
                    assert (j - i) % 5 in (1, 4)

    def test_fixed_count_enumeration_is_lexicographic(self):
        states = enumerate_states(4, 2)
        assert states == sorted(states)
        assert len(states) == 6

    def test_size_cap(self):
        with pytest.raises(ValidationError):
            enumerate_states(13)


class TestStationarity:
    def test_uniform_exact_on_three_ring(self):
        gen = ring_generator(3, Params(0.7), 1)
        assert stationarity_check(gen, gen.stationary_uniform()) <= 1e-15

    def test_uniform_on_four_ring_two_particles(self):
        gen = ring_generator(4, Params(0.7), 2)
        assert stationarity_check(gen, gen.stationary_uniform()) <= 1e-12

    def test_perturbed_measure_fails(self):
        gen = ring_generator(4, Params(0.7), 2)
        mu = gen.stationary_uniform()
        mu[0] += 0.05
        mu /= mu.sum()
        assert stationarity_check(gen, mu) > 1e-4

    def test_dimension_checked(self):
        gen = ring_generator(4, Params(0.7), 2)
        with pytest.raises(ValidationError):
            stationarity_check(gen, np.ones(5) / 5)


class TestTransient:
    def test_time_zero_point_mass(self):
        gen = ring_generator(4, Params(0.7), 2)
        v = transient_distribution(gen, gen.states[2], 0.0)
        assert v[2] == 1.0 and v.sum() == 1.0

    def test_probability_vector_at_positive_time(self):
        gen = ring_generator(5, Params(0.7), 2)
        v = transient_distribution(gen, gen.states[0], 1.3)
        assert abs(v.sum() - 1.0) <= 1e-10
        assert v.min() >= 0.0

    def test_long_run_converges_to_uniform(self):
        gen = ring_generator(5, Params(0.7), 2)
        v = transient_distribution(gen, gen.states[0], 60.0)
        assert total_variation(v, gen.stationary_uniform()) <= 1e-6

    def test_simulator_matches_uniformization_smoke(self):
        cfg = ExperimentConfig(kind="oracle-compare", p=0.7, times=(1.0,),
                               replicas=20_000, seed=9, ring_n=4,
                               ring_count=2)
        gen = ring_generator(4, Params(0.7), 2)
        rec = ring_records(cfg, 1.0)
        exact = transient_distribution(gen, int(rec["initial_mask"]), 1.0)
        counts = np.zeros(len(gen.states))
        for mask in rec["mask"]:
            counts[gen.index[int(mask)]] += 1
        assert total_variation(counts / counts.sum(), exact) <= 0.02


class TestBlockingMeasure:
    def test_detailed_balance_tight_across_grid(self):
        worst = max(blocking_detailed_balance(Params(p), K)
                    for p in (0.6, 0.7, 0.9) for K in (5, 20, 60))
        assert worst <= 1e-14

    def test_totally_asymmetric_frozen_profile(self):
        assert blocking_detailed_balance(Params(1.0), 10) == 0.0

    def test_sensitivity_to_perturbed_marginal(self):
        b, _ = _blocking_weights(Params(0.7), 10)
        b = b.copy()
        b[10 + 3] += 0.01
        assert blocking_detailed_balance(Params(0.7), 10, marginals=b) > 1e-4


class TestChangeOfMeasure:
    def test_equal_densities_trivial(self):
        lhs, rhs = change_of_measure_identity(0.5, 0.5, 12)
        assert lhs == pytest.approx(1.0, abs=1e-12)
        assert rhs == 1.0

    def test_single_site_algebra(self):
        rho, lam = 0.6, 0.35
        lhs, rhs = change_of_measure_identity(rho, lam, 1)
        direct = (1 - lam) ** 2 / (1 - rho) + lam ** 2 / rho
        assert lhs == pytest.approx(direct, rel=1e-14)
        assert rhs == pytest.approx(direct, rel=1e-14)

    def test_log_space_summation_to_n30(self):
        for rho, lam in ((0.5, 0.4), (0.8, 0.3), (0.55, 0.45)):
            for n in range(31):
                lhs, rhs = change_of_measure_identity(rho, lam, n)
                assert abs(lhs - rhs) / rhs <= 1e-10

    def test_preconditions(self):
        with pytest.raises(ValidationError):
            change_of_measure_identity(0.4, 0.5, 3)
        with pytest.raises(ValidationError):
            change_of_measure_identity(0.5, 0.4, -1)


class TestGoldenDump:
    def test_fifteen_digit_csv(self, tmp_path):
        gen = ring_generator(3, Params(0.7), 1)
        v = transient_distribution(gen, gen.states[0], 0.7)
        path = tmp_path / "transient.csv"
        dump_vector_csv(gen.states, v, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "state,probability"
        assert len(lines) == 1 + len(gen.states)
        back = np.array([float(ln.split(",")[1]) for ln in lines[1:]])
        assert np.allclose(back, v, rtol=1e-14)
