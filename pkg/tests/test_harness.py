import json
import math
import os

import numpy as np
import pytest

from aseplab import _kernels, harness
from aseplab.couplings import CouplingBugError
from aseplab.harness import (ExperimentConfig, chi_square_gof, fit_exponent,
                             geometric_test, mark_law_tests, moment_table,
                             run_identity, run_replicas, thread_count)
from aseplab.lattice import Params, ValidationError
from aseplab.observables import variance_with_se


class TestConfig:
    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(kind="nope")

    def test_zero_replicas(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(kind="identity", replicas=0)

    def test_too_few_replicas_for_statistics(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(kind="identity", replicas=50)

    def test_times_must_increase(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(kind="identity", times=(2.0, 2.0))

    def test_window_factor_restricted(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(kind="identity", window_factor=3)

    def test_audits_need_lam(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(kind="mark-audit", times=(1.0,))

    def test_degenerate_densities_rejected(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(kind="identity", rho=1.0, times=(1.0,))
        with pytest.raises(ValidationError):
            ExperimentConfig(kind="identity", rho=0.0, times=(1.0,))

    def test_digest_tracks_content(self):
        a = ExperimentConfig(kind="identity", seed=1, times=(5.0,))
        b = ExperimentConfig(kind="identity", seed=2, times=(5.0,))
        assert a.digest() != b.digest()
        assert a.digest() == ExperimentConfig(kind="identity", seed=1,
                                              times=(5.0,)).digest()


class TestFitExponent:
    def test_exact_power_law_recovered(self):
        t = np.array([16.0 * 2 ** k for k in range(8)])
        y = 3.7 * t ** (2.0 / 3.0)
        fit = fit_exponent(t, y)
        assert abs(fit.alpha - 2.0 / 3.0) < 1e-12
        assert abs(fit.intercept - math.log(3.7)) < 1e-10

    def test_weighted_fit_covers_truth(self):
        rng = np.random.default_rng(11)
        t = np.array([16.0 * 2 ** k for k in range(8)])
        y_true = 0.8 * t ** 0.66
        ses = 0.02 * y_true
        y = y_true * np.exp(rng.normal(0, 0.02, size=t.size))
        fit = fit_exponent(t, y, ses)
        lo, hi = fit.ci(3.0)
        assert lo < 0.66 < hi

    def test_curvature_flagged_for_bent_series(self):
        t = np.array([16.0 * 2 ** k for k in range(8)])
        ses = 0.001 * t ** 0.5
        straight = 2.0 * t ** 0.5
        bent = 2.0 * t ** 0.5 * np.exp(0.02 * np.log(t) ** 2)
        assert abs(fit_exponent(t, straight, ses).curvature_z) < 3.0
        assert abs(fit_exponent(t, bent, ses).curvature_z) > 5.0

    def test_degenerate_series_rejected(self):
        with pytest.raises(ValidationError):
            fit_exponent([1, 2, 3], [1, 2, 3])
        with pytest.raises(ValidationError):
            fit_exponent([16, 18, 20, 22, 24], np.ones(5))
        with pytest.raises(ValidationError):
            fit_exponent([16, 32, 64, 128, 2048], [1, 2, 3, -4, 5])


class TestStatHelpers:
    def test_chi_square_pools_thin_tail(self):
        counts = np.array([800.0, 150.0, 40.0, 8.0, 1.0, 1.0])
        probs = np.array([0.8, 0.15, 0.04, 0.008, 0.0015, 0.0005])
        stat, dof, p = chi_square_gof(counts, probs)
        assert dof <= 4
        assert 0.0 <= p <= 1.0

    def test_geometric_test_accepts_the_law(self):
        rng = np.random.default_rng(5)
        r = 3.0 / 7.0
        x = rng.geometric(1.0 - r, size=20_000) - 1
        assert geometric_test(x, r)["passed"]

    def test_geometric_test_rejects_wrong_ratio(self):
        rng = np.random.default_rng(6)
        x = rng.geometric(1.0 - 0.2, size=20_000) - 1
        assert not geometric_test(x, 3.0 / 7.0)["passed"]

    def test_mark_tests_accept_and_reject(self):
        params = Params(0.7)
        rng = np.random.default_rng(7)
        ks = np.arange(-6, 7)
        probs = np.array([float(_kernels._mark_prob(0.7, k)) for k in ks])
        rows = (rng.random((20_000, ks.size)) < probs).astype(np.uint8)
        res = mark_law_tests(rows, -6, params)
        assert all(r["passed"] for r in res)
        bad = rows.copy()
        bad[:, 6] = rng.random(20_000) < 0.65  # label 0 should be fair
        res = mark_law_tests(bad, -6, params)
        assert not res[6]["passed"]

    def test_variance_se_brackets_truth(self):
        rng = np.random.default_rng(12)
        x = rng.normal(0, 2.0, size=5000)
        var, se = variance_with_se(x)
        assert abs(var - 4.0) < 4 * se


class TestMomentTable:
    def test_rows_and_ratio(self):
        params = Params(0.7)
        q_by_t = {4.0: np.arange(-10, 30), 16.0: np.arange(-20, 60)}
        rows, ratios = moment_table(q_by_t, [1.0], 0.5, params)
        assert len(rows) == 2
        assert ratios[1.0] >= 1.0


class TestDeterminismAndResume:
    def test_identity_outputs_byte_identical(self, tmp_path):
        outs = []
        for sub in ("a", "b"):
            cfg = ExperimentConfig(kind="identity", p=0.7, rho=0.4,
                                   times=(3.0,), replicas=200, seed=5,
                                   outdir=str(tmp_path / sub))
            run_identity(cfg)
            echo = (tmp_path / sub / "config.echo").read_text().splitlines()
            outs.append({
                "summary": (tmp_path / sub / "summary.json").read_bytes(),
                "currents": (tmp_path / sub / "currents.csv").read_bytes(),
                "echo": [ln for ln in echo if not ln.startswith("outdir")],
            })
        assert outs[0] == outs[1]

    def test_chunks_reused_on_rerun(self, tmp_path, monkeypatch):
        cfg = ExperimentConfig(kind="identity", p=0.7, rho=0.4, times=(3.0,),
                               replicas=200, seed=5, outdir=str(tmp_path))
        first = run_identity(cfg)

        def bomb(*args, **kwargs):
            raise AssertionError("batch recomputed despite cached chunks")

        monkeypatch.setattr(_kernels, "batch_single", bomb)
        monkeypatch.setattr(_kernels, "batch_pair", bomb)
        second = run_identity(cfg)
        assert json.dumps(first, sort_keys=True, default=harness._jsonable) == \
            json.dumps(second, sort_keys=True, default=harness._jsonable)

    def test_merge_order_independence(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=4001)
        var_a, se_a = variance_with_se(x)
        perm = rng.permutation(x.size)
        var_b, se_b = variance_with_se(x[perm][np.argsort(perm)])
        assert abs(var_a - var_b) <= 1e-12
        assert abs(se_a - se_b) <= 1e-12


class TestThreads:
    def test_env_overrides(self, monkeypatch):
        monkeypatch.setenv("ASEPLAB_THREADS", "1")
        assert thread_count(8) == 1
        monkeypatch.delenv("ASEPLAB_THREADS")
        assert thread_count(8) == 8
        assert thread_count(None) == 0


class TestRunReplicasDispatch:
    def test_identity_summary_checks_pass_at_smoke_scale(self):
        cfg = ExperimentConfig(kind="identity", p=0.7, rho=0.3, times=(5.0,),
                               replicas=600, seed=1)
        s = run_replicas(cfg)
        assert all(c["mean_within_3se"] for c in s["currents"])
        assert s["second_class"]["Q_within_3se"]
        assert s["diffusivity"]["forms_agree"]

    def test_statuses_surface_replay_seed(self):
        bad = np.zeros(5, dtype=np.int64)
        bad[3] = _kernels.ERR_ORDER
        with pytest.raises(CouplingBugError, match="replay seed"):
            harness._check_statuses(bad, np.uint64(7), "unit")


class TestAuditRunners:
    def test_segment_audit_writes_the_audit_trail(self, tmp_path):
        from aseplab.harness import run_segment_audit

        cfg = ExperimentConfig(kind="segment-audit", p=0.7, rho=0.55,
                               lam=0.45, u=3, times=(1.0, 2.0), replicas=400,
                               seed=4, outdir=str(tmp_path))
        s = run_segment_audit(cfg)
        assert s["priority_dominance"] and s["zero_violations"]
        assert s["geometric_all"]
        lines = [json.loads(ln) for ln in
                 (tmp_path / "audit.jsonl").read_text().splitlines()]
        assert len(lines) == 2
        assert {"t", "Q", "Qa", "X0", "R", "L", "m", "N",
                "eventA", "eventB"} <= set(lines[0])
        assert lines[0]["m"] is not None and lines[0]["Qa"] is None

    def test_coupling_audit_reports_tail_and_events(self, tmp_path):
        from aseplab.harness import run_coupling_audit

        cfg = ExperimentConfig(kind="coupling-audit", p=0.7, rho=0.55,
                               lam=0.45, times=(2.0,), replicas=400,
                               seed=6, outdir=str(tmp_path))
        s = run_coupling_audit(cfg)
        assert s["zero_violations"]
        assert 0.5 < s["event_rates"]["A"] < 1.0
        assert s["nj_tail_decays"]
        lines = [json.loads(ln) for ln in
                 (tmp_path / "audit.jsonl").read_text().splitlines()]
        assert lines[0]["Q"] is not None and lines[0]["R"] is not None
        assert isinstance(lines[0]["eventA"], bool)
