import math

import numpy as np
import pytest
from scipy import stats

from aseplab import _kernels
from aseplab.couplings import (CoupledEnsemble, CouplingBugError,
                               TruncationError, build_five_process,
                               build_segment_perturbation,
                               count_discrepancies, evolve_coupled,
                               mark_law_snapshot, mark_probability,
                               mark_truncation, priority_pi, sample_mu_pair,
                               segment_offset, track_priority_chain,
                               track_walkers)
from aseplab.harness import geometric_test
from aseplab.lattice import (Configuration, Params, ValidationError, Window,
                             char_speed, int_toward_zero, sample_bernoulli)
from reference import FiveReference, SegmentReference


class TestMuPair:
    def test_cell_frequencies(self):
        win = Window(-50_000, 50_000)
        rho, lam = 0.55, 0.45
        eta, omega = sample_mu_pair(win, rho, lam, seed=31)
        n = win.n_sites
        both = int(np.sum((eta.occ == 1) & (omega.occ == 1)))
        disc = int(np.sum((eta.occ == 0) & (omega.occ == 1)))
        empty = int(np.sum((eta.occ == 0) & (omega.occ == 0)))
        bad = int(np.sum((eta.occ == 1) & (omega.occ == 0)))
        assert bad == 0
        for count, prob in ((both, lam), (disc, rho - lam), (empty, 1 - rho)):
            se = math.sqrt(prob * (1 - prob) / n)
            assert abs(count / n - prob) < 3 * se

    def test_equal_densities_glue_the_pair(self):
        win = Window(-100, 100)
        eta, omega = sample_mu_pair(win, 0.4, 0.4, seed=8)
        assert eta == omega

    def test_marginal_matches_bernoulli_sampler(self):
        win = Window(-200, 200)
        _, omega = sample_mu_pair(win, 0.55, 0.45, seed=12)
        assert omega == sample_bernoulli(win, 0.55, seed=12)


class TestMarkLaw:
    def test_label_zero_is_fair(self):
        assert mark_probability(Params(0.7), 0) == 0.5

    def test_totally_asymmetric_limits(self):
        p1 = Params(1.0)
        assert mark_probability(p1, 1) == 1.0
        assert mark_probability(p1, -1) == 0.0
        assert mark_probability(p1, 0) == 0.5

    def test_point_value(self):
        # (p/q)^-1 / (1 + (p/q)^-1) at p = 0.7 is (3/7)/(10/7)
        assert mark_probability(Params(0.7), -1) == pytest.approx(0.3, abs=1e-15)

    def test_truncation_bound(self):
        K = mark_truncation(Params(0.7))
        assert K == 34
        r = 3.0 / 7.0
        assert r ** K / (1 - r) <= 1e-12
        assert r ** (K - 1) / (1 - r) > 1e-12

    def test_priority_law(self):
        assert priority_pi(Params(0.7), 0) == pytest.approx(4.0 / 7.0, abs=1e-15)
        total = sum(priority_pi(Params(0.7), -k) for k in range(200))
        assert total == pytest.approx(1.0, abs=1e-12)
        assert priority_pi(Params(0.7), 1) == 0.0


def five_params(p=0.7):
    return Params(p, rho=0.55, lam=0.45)


class TestFiveProcessConstruction:
    def test_origin_walkers_and_label_zero(self):
        win = Window(-400, 400)
        five = build_five_process(win, five_params(), K=10, seed=4)
        assert five.registry.position(0) == 0
        assert five.walker_Q.position == 0
        assert five.walker_Qa.position == 0
        pos = five.registry.positions
        assert np.all(np.diff(pos) > 0)

    def test_registry_extremes_consistent(self):
        win = Window(-400, 400)
        five = build_five_process(win, five_params(), K=10, seed=21)
        reg = five.registry
        assert reg.mark(reg.n_R) == 0
        assert all(reg.mark(k) == 1 for k in range(reg.n_R + 1, reg.k_max + 1))
        assert reg.mark(reg.n_L) == 1
        assert all(reg.mark(k) == 0 for k in range(reg.k_min, reg.n_L))
        assert five.event_A == (reg.n_R >= 0)
        assert five.event_B == (five.event_A and reg.n_L <= 0)

    def test_conditioning_forces_events(self):
        win = Window(-400, 400)
        for seed in range(12):
            a = build_five_process(win, five_params(), K=10, seed=seed,
                                   condition="A")
            assert a.event_A
            b = build_five_process(win, five_params(), K=10, seed=seed,
                                   condition="B")
            assert b.event_A and b.event_B

    def test_event_b_impossible_for_tasep(self):
        with pytest.raises(ValidationError):
            build_five_process(Window(-400, 400), five_params(1.0), K=5,
                               seed=1, condition="B")

    def test_truncation_failure_when_window_too_small(self):
        with pytest.raises(TruncationError):
            build_five_process(Window(-30, 30), five_params(), K=30, seed=2)

    def test_mark_frequencies_at_time_zero(self):
        win = Window(-900, 900)
        params = five_params()
        reps = 4000
        ones = np.zeros(21)
        for seed in range(reps):
            five = build_five_process(win, params, K=10, seed=seed)
            ones += five.registry.marks
        for idx, k in enumerate(range(-10, 11)):
            b = mark_probability(params, k)
            se = math.sqrt(max(b * (1 - b), 1e-12) / reps)
            assert abs(ones[idx] / reps - b) < 4 * se + 2.0 / reps


class TestFiveKernelAgainstReference:
    @pytest.mark.parametrize("p,seed", [(0.7, 5), (0.7, 17), (0.55, 3),
                                        (1.0, 9)])
    def test_trajectories_match(self, p, seed):
        params = Params(p, rho=0.6, lam=0.45)
        win = Window(-60, 60)
        five = build_five_process(win, params, K=None, seed=seed)
        times = [0.0, 1.5, 4.0]
        v = char_speed(params.rho, params)
        traj = track_walkers(five, 4.0, times)
        ref = FiveReference(five).run(4.0, times, v)
        for si, rec in enumerate(ref):
            assert traj.Q[si] == rec["Q"]
            assert traj.Qa[si] == rec["Qa"]
            assert traj.X0[si] == rec["X0"]
            assert traj.R[si] == rec["R"]
            assert traj.L[si] == rec["L"]
            assert traj.n_R[si] == rec["n_R"]
            assert traj.n_L[si] == rec["n_L"]
            assert traj.J_rho[si] == rec["J_rho"]
            k0 = -five.k_min
            want = rec["marks"]
            got = traj.marks[si]
            assert np.array_equal(got, want)


class TestPairKernelAgainstReference:
    @pytest.mark.parametrize("kind,seed", [(0, 2), (0, 13), (1, 2), (1, 31)])
    def test_walker_trajectory_matches(self, kind, seed):
        p, rho = 0.7, 0.45
        win = Window(-50, 50)
        occ = _kernels._init_bernoulli(seed, win.lo, win.n_sites, rho,
                                       1 if kind == 0 else 2)
        base = Configuration(win, occ.copy())
        perturbed = base.copy()
        perturbed.occ[-win.lo] = 1 if kind == 0 else 0
        members = [base, perturbed] if kind == 0 else [perturbed, base]
        ensemble = CoupledEnsemble(members, [(0, 1)], Params(p), seed)
        times = [0.0, 2.0, 5.0]
        walker = []

        def on_sample(t, arrays, anchors):
            diff = np.flatnonzero(arrays[0] != arrays[1])
            assert diff.size == 1
            walker.append(int(win.lo + diff[0]))

        evolve_coupled(ensemble, 5.0, sample_times=times, on_sample=on_sample)
        st, wout, _ = _kernels.kern_pair(seed, win.lo, win.n_sites, p, 5.0,
                                         occ.copy(), 0, kind,
                                         np.array(times))
        assert st == 0
        assert list(wout) == walker


class TestSingleKernelAgainstReference:
    def test_final_configuration_matches(self):
        p, rho, seed = 0.7, 0.5, 44
        win = Window(-40, 40)
        occ0 = _kernels._init_bernoulli(seed, win.lo, win.n_sites, rho, 0)
        ensemble = CoupledEnsemble([Configuration(win, occ0.copy())], [],
                                   Params(p), seed)
        out = evolve_coupled(ensemble, 6.0)
        st, _, occf = _kernels.kern_single(seed, win.lo, win.n_sites, False,
                                           p, 6.0, occ0.copy(),
                                           np.zeros(0), np.zeros(0, np.int64),
                                           False)
        assert st == 0
        assert np.array_equal(out.members[0].occ, occf)


class TestAttractivity:
    def test_thousand_replicas_preserve_order(self):
        win = Window(-20, 20)
        params = Params(0.7, rho=0.6, lam=0.3)
        for seed in range(1000):
            eta, omega = sample_mu_pair(win, 0.6, 0.3, seed=seed)
            ens = CoupledEnsemble([eta, omega], [(0, 1)], params, seed)
            evolve_coupled(ens, 3.0)  # raises CouplingBugError on violation

    def test_identical_members_stay_identical(self):
        win = Window(-20, 20)
        cfg = sample_bernoulli(win, 0.5, seed=6)
        ens = CoupledEnsemble([cfg.copy(), cfg.copy()], [(0, 1), (1, 0)],
                              Params(0.8), 6)
        out = evolve_coupled(ens, 5.0)
        assert out.members[0] == out.members[1]

    def test_violation_detected(self):
        win = Window(0, 3)
        a = Configuration.from_sites(win, [1])
        b = Configuration.from_sites(win, [2])
        with pytest.raises(CouplingBugError):
            CoupledEnsemble([a, b], [(0, 1)], Params(0.7), 1)


class TestContainmentsAndTasepOrder:
    def test_containments_hold_in_batches(self):
        # the kernel asserts Qa <= R on A (and L <= Q on B) at every event
        params = five_params()
        win_lo, n = -700, 1401
        for cond in (1, 2):
            out = _kernels.batch_five(np.uint64(99), 0, 200, win_lo, n,
                                      params.p, params.rho, params.lam, 12,
                                      cond, 0, 6.0, np.array([6.0]),
                                      np.array([0], np.int64), 0,
                                      np.zeros(0, np.int64))
            assert np.count_nonzero(out[0]) == 0

    def test_tasep_keeps_particle_above_antiparticle(self):
        params = Params(1.0, rho=0.6, lam=0.45)
        out = _kernels.batch_five(np.uint64(7), 0, 1000, -700, 1401,
                                  params.p, params.rho, params.lam, 12,
                                  0, 0, 6.0, np.array([6.0]),
                                  np.array([0], np.int64), 0,
                                  np.zeros(0, np.int64))
        assert np.count_nonzero(out[0]) == 0
        assert np.all(out[1] >= out[2])  # Q >= Qa pathwise at the sample


class TestDiscrepancyCount:
    def test_equal_configurations_count_zero(self):
        win = Window(-30, 30)
        cfg = sample_bernoulli(win, 0.5, seed=3)
        assert count_discrepancies(cfg, cfg, 0, 10) == 0

    def test_initial_mean_matches_binomial(self):
        win = Window(-30, 30)
        rho, lam, u = 0.55, 0.45, 10
        total = 0
        reps = 3000
        for seed in range(reps):
            eta, omega = sample_mu_pair(win, rho, lam, seed=seed)
            total += count_discrepancies(eta, omega, 0, u)
        mean = total / reps
        target = 2 * u * (rho - lam)
        se = math.sqrt(2 * u * (rho - lam) * (1 - rho + lam) / reps)
        assert abs(mean - target) < 3 * se

    def test_window_bounds_checked(self):
        win = Window(-5, 5)
        cfg = Configuration.empty(win)
        with pytest.raises(ValidationError):
            count_discrepancies(cfg, cfg, 0, 10)


class TestSegmentConstruction:
    def test_offset_formula_example(self):
        params = Params(1.0, rho=0.6, lam=0.5)
        assert segment_offset(params, 100.0, 10) == 30

    def test_offset_degenerates_to_u(self):
        # t chosen so no speed lands on an integer-part boundary
        params = Params(0.7, rho=0.6, lam=0.6 - 1e-9)
        assert segment_offset(params, 97.0, 7) == 7

    def test_build_places_walker_and_chain(self):
        params = five_params()
        seg = build_segment_perturbation(None, params, 10.0, 5, seed=3)
        assert seg.walker.position == -seg.n_offset
        reg = seg.registry
        assert reg.k_max == 0
        assert reg.position(0) <= -seg.n_offset
        assert np.all(np.diff(reg.positions) > 0)
        assert reg.priority <= 0

    def test_u_must_be_positive_integer(self):
        with pytest.raises(ValidationError):
            build_segment_perturbation(None, five_params(), 10.0, 0, seed=1)

    def test_priority_draw_matches_pi(self):
        params = five_params()
        counts = {}
        reps = 4000
        for seed in range(reps):
            seg = build_segment_perturbation(None, params, 2.0, 3, seed=seed)
            counts[seg.registry.priority] = counts.get(seg.registry.priority, 0) + 1
        for k in (0, -1, -2):
            freq = counts.get(k, 0) / reps
            b = priority_pi(params, k)
            se = math.sqrt(b * (1 - b) / reps)
            assert abs(freq - b) < 4 * se


class TestSegmentKernelAgainstReference:
    @pytest.mark.parametrize("p,seed", [(0.7, 1), (0.7, 23), (0.6, 11),
                                        (1.0, 4)])
    def test_trajectories_match(self, p, seed):
        params = Params(p, rho=0.6, lam=0.45)
        seg = build_segment_perturbation(None, params, 6.0, 3, seed=seed)
        times = [0.0, 2.0, 6.0]
        v = char_speed(params.rho, params)
        traj = track_priority_chain(seg, 6.0, times)
        ref = SegmentReference(seg).run(6.0, times, v)
        for si, rec in enumerate(ref):
            assert traj.Q[si] == rec["Q"]
            assert traj.m[si] == rec["m"]
            assert traj.m_Q[si] == rec["m_Q"]
            assert traj.N[si] == rec["N"]
            assert traj.J_eta[si] == rec["J_eta"]
            assert traj.J_zeta[si] == rec["J_zeta"]
            assert traj.riding[si] == rec["riding"]


class TestPriorityChainLaw:
    def test_geometric_marginal_smoke(self):
        params = five_params()
        seg = build_segment_perturbation(None, params, 4.0, 3, seed=0)
        win = seg.window
        out = _kernels.batch_segment(np.uint64(42), 0, 3000, win.lo,
                                     win.n_sites, params.p, params.rho,
                                     params.lam, seg.n_offset, seg.n_labels,
                                     4.0, np.array([4.0]),
                                     np.array([0], np.int64))
        assert np.count_nonzero(out[0]) == 0
        res = geometric_test(out[4][:, 0], params.q / params.p)
        assert res["passed"], res

    def test_dominance_and_current_bound_reported(self):
        params = five_params()
        seg = build_segment_perturbation(None, params, 6.0, 4, seed=9)
        traj = track_priority_chain(seg, 6.0, [1.0, 3.0, 6.0])
        assert np.all(traj.m <= traj.m_Q)
        assert np.all(traj.N == -traj.m)
        v = char_speed(params.rho, params)
        for si, t in enumerate(traj.times):
            if traj.Q[si] <= int_toward_zero(v * t):
                assert traj.J_zeta[si] - traj.J_eta[si] <= traj.N[si]


class TestMarkSnapshot:
    def test_snapshot_shapes_and_expectations(self):
        params = five_params()
        rows = np.array([[0, 1, 1], [1, 1, 0], [0, 1, 1], [0, 1, 1]],
                        dtype=np.uint8)
        snap = mark_law_snapshot(rows, -1, params)
        assert [r["k"] for r in snap] == [-1, 0, 1]
        assert snap[0]["freq"] == 0.25
        assert snap[1]["expected"] == 0.5
