"""Coupled processes on one clock stream.

The basic coupling runs several configurations under the shared Poisson
clocks, which preserves sitewise order.  On top of it live the tracked
objects: the single-discrepancy walkers Q and Q_a, the labeled
omega-minus-eta second class particles X_k with their exchangeable 0/1
marks, the mark extremes R and L with the mark-measurable events A and B,
and in segment-perturbation mode the tagged walker Q^(-n), the labeled
chain Y_k and the priority label m with its geometric stationary law.

The compiled kernels do the heavy evolution; `evolve_coupled` is the
plain-python reference used to cross-check them event by event.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .clockwork import ClockStream
from .lattice import (RIGHT, Configuration, Params, ValidationError,
                      Window, char_speed, experiment_window, observer_column)

MARK_EPSILON = 1e-12


class CouplingBugError(RuntimeError):
    """A coupling invariant failed; this is always a bug, never recoverable."""


class TruncationError(ValueError):
    """The labeled truncation could not certify the requested state."""


def _raise_status(status: int, seed: int, context: str):
    if status == _kernels.OK:
        return
    name = _kernels.ERROR_NAMES.get(status, f"status {status}")
    if status in (_kernels.ERR_TRUNCATION, _kernels.ERR_REJECTION):
        raise TruncationError(f"{context}: {name} (replica seed {seed})")
    raise CouplingBugError(f"{context}: {name} (replica seed {seed})")


def mark_probability(params: Params, n: int) -> float:
    """Blocking-measure chance that label n carries mark 1.

    (p/q)^n / (1 + (p/q)^n), evaluated in the overflow-safe form; the
    totally asymmetric case takes the limit 1 for n > 0, 0 for n < 0 and
    1/2 at n = 0.
    """
    return float(_kernels._mark_prob(params.p, n))


def priority_pi(params: Params, k: int) -> float:
    """Stationary law of the priority label: (1 - q/p)(q/p)^|k| on k <= 0."""
    if k > 0:
        return 0.0
    r = params.q / params.p
    return (1.0 - r) * r ** abs(k)


def mark_truncation(params: Params, epsilon: float = MARK_EPSILON) -> int:
    """Smallest K with P(any anomalous mark beyond +-K) below 2 epsilon."""
    if params.p == 1.0:
        return 1
    r = params.q / params.p
    return int(math.ceil(math.log(epsilon * (1.0 - r)) / math.log(r)))


def sample_mu_pair(window: Window, rho: float, lam: float,
                   seed: int) -> tuple[Configuration, Configuration]:
    """Sitewise-coupled pair (eta, omega) with Bernoulli(lam)/(rho) marginals.

    Cell probabilities: both empty 1-rho, discrepancy rho-lam, never
    eta-only, both occupied lam; eta <= omega everywhere.
    """
    if not (0.0 <= lam <= rho <= 1.0):
        raise ValidationError(f"need 0 <= lam <= rho <= 1, got {lam}, {rho}")
    eta, isD = _kernels.init_mu_cells(seed, window.lo, window.n_sites,
                                      rho, lam, False)
    return (Configuration(window, eta),
            Configuration(window, (eta | isD).astype(np.uint8)))


@dataclass
class DiscrepancyWalker:
    kind: str          # "second-class", "antiparticle" or "tagged"
    position: int
    pair: str          # which two ensemble members it separates


@dataclass
class LabeledRegistry:
    """Labeled second class particles with their marks (or priority label)."""

    k_min: int
    k_max: int
    positions: np.ndarray  # absolute site per label, index k - k_min
    marks: np.ndarray | None = None
    n_R: int | None = None
    n_L: int | None = None
    priority: int | None = None

    def position(self, k: int) -> int:
        if not (self.k_min <= k <= self.k_max):
            raise ValidationError(f"label {k} outside [{self.k_min}, {self.k_max}]")
        return int(self.positions[k - self.k_min])

    def mark(self, k: int) -> int:
        return int(self.marks[k - self.k_min])

    @property
    def R(self) -> int:
        return self.position(self.n_R)

    @property
    def L(self) -> int:
        return self.position(self.n_L)


@dataclass
class FiveTrajectory:
    """Sampled observables of one five-process replica."""

    times: np.ndarray
    Q: np.ndarray
    Qa: np.ndarray
    X0: np.ndarray
    R: np.ndarray
    L: np.ndarray
    n_R: np.ndarray
    n_L: np.ndarray
    J_rho: np.ndarray
    N_j: np.ndarray
    marks: np.ndarray       # (samples, labels)
    event_A: bool
    event_B: bool


@dataclass
class FiveProcess:
    """Five coupled processes eta <= {eta+, zeta, omega-} <= omega."""

    params: Params
    window: Window
    seed: int
    k_min: int
    k_max: int
    condition: str
    mark_dynamics: str
    eta0: Configuration
    omega0: Configuration
    registry: LabeledRegistry
    walker_Q: DiscrepancyWalker
    walker_Qa: DiscrepancyWalker
    event_A: bool
    event_B: bool

    def run(self, horizon: float, sample_times, j_speed: float | None = None,
            nj_j: int = 0, nj_2us=()) -> FiveTrajectory:
        return track_walkers(self, horizon, sample_times, j_speed=j_speed,
                             nj_j=nj_j, nj_2us=nj_2us)


_CONDITIONS = {"none": _kernels.COND_NONE, "A": _kernels.COND_A,
               "B": _kernels.COND_B}
_MARK_MODES = {"coupled": _kernels.MARKS_COUPLED,
               "independent": _kernels.MARKS_INDEPENDENT}


def five_process_window(params: Params, t: float, K: int,
                        factor: int = 1) -> Window:
    """Window wide enough for the light cone plus the labeled truncation."""
    gap = params.rho - params.lam
    span = int(math.ceil((K + 8.0 * math.sqrt(K) + 20.0) / gap))
    v = char_speed(params.rho, params)
    return experiment_window(t, v, extra_left=span, extra_right=span,
                             factor=factor)


def build_five_process(window: Window, params: Params, K: int | None,
                       seed: int, condition: str = "none",
                       mark_dynamics: str = "coupled") -> FiveProcess:
    """Construct the conditioned pair, labels, marks and perturbations.

    K = None labels every discrepancy inside the window (used by the
    reference cross-checks); otherwise labels -K..K must exist in the
    window or a TruncationError is raised.
    """
    rho, lam = params.rho, params.lam
    if rho is None or lam is None:
        raise ValidationError("five-process coupling needs both densities")
    if condition not in _CONDITIONS:
        raise ValidationError(f"unknown condition {condition!r}")
    if mark_dynamics not in _MARK_MODES:
        raise ValidationError(f"unknown mark dynamics {mark_dynamics!r}")
    if condition == "B" and params.p == 1.0:
        raise ValidationError("event B has probability zero when p = 1")
    lo, n = window.lo, window.n_sites
    if K is None:
        eta, isD = _kernels.init_mu_cells(seed, lo, n, rho, lam, True)
        ranks = np.flatnonzero(isD)
        rank0 = int(np.searchsorted(ranks, -lo))
        k_min, k_max = -rank0, len(ranks) - 1 - rank0
    else:
        k_min, k_max = -K, K
    out = _kernels.init_five(seed, lo, n, params.p, rho, lam,
                             -k_min, k_max, _CONDITIONS[condition])
    status, eta, isD, pos, marks, nR_idx, nL_idx, fA, fB = out
    _raise_status(status, seed, "five-process construction")
    omega = (eta | isD).astype(np.uint8)
    registry = LabeledRegistry(k_min, k_max, pos.copy(), marks.copy(),
                               n_R=int(nR_idx) + k_min, n_L=int(nL_idx) + k_min)
    return FiveProcess(
        params=params, window=window, seed=seed, k_min=k_min, k_max=k_max,
        condition=condition, mark_dynamics=mark_dynamics,
        eta0=Configuration(window, eta.copy()),
        omega0=Configuration(window, omega),
        registry=registry,
        walker_Q=DiscrepancyWalker("second-class", 0, "eta+/eta"),
        walker_Qa=DiscrepancyWalker("antiparticle", 0, "omega/omega-"),
        event_A=bool(fA), event_B=bool(fB))


def track_walkers(five: FiveProcess, horizon: float, sample_times,
                  j_speed: float | None = None, nj_j: int = 0,
                  nj_2us=()) -> FiveTrajectory:
    """Evolve one five-process replica and sample walker/label observables."""
    stimes = np.asarray(sample_times, dtype=np.float64)
    _check_samples(stimes, horizon)
    params, win = five.params, five.window
    v = char_speed(params.rho, params) if j_speed is None else j_speed
    jcols = np.array([observer_column(v, t) for t in stimes], dtype=np.int64)
    lo, n = win.lo, win.n_sites
    out = _kernels.init_five(five.seed, lo, n, params.p, params.rho,
                             params.lam, -five.k_min, five.k_max,
                             _CONDITIONS[five.condition])
    status, eta, isD, pos, marks, nR_idx, nL_idx, fA, fB = out
    _raise_status(status, five.seed, "five-process construction")
    nj_arr = np.asarray(nj_2us, dtype=np.int64)
    res = _kernels.kern_five(five.seed, lo, n, params.p, horizon, eta, isD,
                             pos, marks, -five.k_min, nR_idx, nL_idx, fA, fB,
                             _MARK_MODES[five.mark_dynamics], stimes, jcols,
                             nj_j, nj_arr)
    _raise_status(res[0], five.seed, "five-process evolution")
    return FiveTrajectory(times=stimes, Q=res[1], Qa=res[2], X0=res[3],
                          R=res[4], L=res[5], n_R=res[6], n_L=res[7],
                          J_rho=res[8], N_j=res[9], marks=res[10],
                          event_A=bool(fA), event_B=bool(fB))


def count_discrepancies(eta: Configuration, omega: Configuration,
                        j: int, u: int, t_marker: float | None = None) -> int:
    """Exact discrepancy count N_j = sum_{i=j+1}^{j+2u} (omega_i - eta_i)."""
    win = eta.window
    if win != omega.window:
        raise ValidationError("configurations live on different windows")
    if j + 1 < win.lo or j + 2 * u > win.hi:
        raise ValidationError("count window extends outside the simulation window")
    lo_k = win.index(j + 1)
    hi_k = win.index(j + 2 * u)
    diff = omega.occ[lo_k:hi_k + 1].astype(np.int64) - eta.occ[lo_k:hi_k + 1]
    if diff.min(initial=0) < 0:
        raise CouplingBugError("pair ordering eta <= omega violated")
    return int(diff.sum())


@dataclass
class SegmentTrajectory:
    times: np.ndarray
    Q: np.ndarray
    m: np.ndarray
    m_Q: np.ndarray
    N: np.ndarray
    J_eta: np.ndarray
    J_zeta: np.ndarray
    riding: np.ndarray


@dataclass
class SegmentPerturbation:
    """Segment-perturbed coupling eta <= xi <= zeta with the tagged walker."""

    params: Params
    window: Window
    seed: int
    t_target: float
    u: int
    n_offset: int
    n_labels: int
    eta0: Configuration
    xi0: Configuration
    zeta0: Configuration
    registry: LabeledRegistry
    walker: DiscrepancyWalker

    def run(self, horizon: float, sample_times,
            v: float | None = None) -> SegmentTrajectory:
        return track_priority_chain(self, horizon, sample_times, v=v)


def segment_offset(params: Params, t: float, u: int) -> int:
    """n = [V^lambda t] - [V^rho t] + u locating the perturbed segment."""
    vr = char_speed(params.rho, params)
    vl = char_speed(params.lam, params)
    return observer_column(vl, t) - observer_column(vr, t) + u


def segment_labels(params: Params, epsilon: float = MARK_EPSILON) -> int:
    """Labeled chain length: the priority label never reaches the far end."""
    return mark_truncation(params, epsilon) + 50


def segment_window(params: Params, t: float, u: int, factor: int = 1) -> Window:
    n_off = segment_offset(params, t, u)
    n_lab = segment_labels(params)
    gap = params.rho - params.lam
    span = int(math.ceil((n_lab + 8.0 * math.sqrt(n_lab) + 20.0) / gap))
    v = char_speed(params.rho, params)
    return experiment_window(t, v, extra_left=n_off + span, extra_right=0,
                             factor=factor)


def build_segment_perturbation(window: Window | None, params: Params,
                               t: float, u: int, seed: int) -> SegmentPerturbation:
    """Realize the four-branch initial law with the tagged walker at -n."""
    rho, lam = params.rho, params.lam
    if rho is None or lam is None:
        raise ValidationError("segment coupling needs both densities")
    if not (isinstance(u, int) and u > 0):
        raise ValidationError(f"u must be a positive integer, got {u!r}")
    n_off = segment_offset(params, t, u)
    n_lab = segment_labels(params)
    if window is None:
        window = segment_window(params, t, u)
    lo, n = window.lo, window.n_sites
    out = _kernels.init_segment(seed, lo, n, params.p, rho, lam, n_off, n_lab)
    status, eta, xi, zeta, posY, m_idx = out
    _raise_status(status, seed, "segment construction")
    registry = LabeledRegistry(-(n_lab - 1), 0, posY.copy(),
                               priority=int(m_idx) - (n_lab - 1))
    return SegmentPerturbation(
        params=params, window=window, seed=seed, t_target=t, u=u,
        n_offset=n_off, n_labels=n_lab,
        eta0=Configuration(window, eta.copy()),
        xi0=Configuration(window, xi.copy()),
        zeta0=Configuration(window, zeta.copy()),
        registry=registry,
        walker=DiscrepancyWalker("tagged", -n_off, "eta+/eta"))


def track_priority_chain(seg: SegmentPerturbation, horizon: float,
                         sample_times, v: float | None = None) -> SegmentTrajectory:
    """Evolve one segment replica; m, m_Q, N(t) and the current bound."""
    stimes = np.asarray(sample_times, dtype=np.float64)
    _check_samples(stimes, horizon)
    params, win = seg.params, seg.window
    if v is None:
        v = char_speed(params.rho, params)
    vcols = np.array([observer_column(v, t) for t in stimes], dtype=np.int64)
    lo, n = win.lo, win.n_sites
    out = _kernels.init_segment(seg.seed, lo, n, params.p, params.rho,
                                params.lam, seg.n_offset, seg.n_labels)
    status, eta, xi, zeta, posY, m_idx = out
    _raise_status(status, seg.seed, "segment construction")
    res = _kernels.kern_segment(seg.seed, lo, n, params.p, horizon, eta, xi,
                                zeta, posY, m_idx, seg.n_offset, stimes, vcols)
    _raise_status(res[0], seg.seed, "segment evolution")
    return SegmentTrajectory(times=stimes, Q=res[1], m=res[2], m_Q=res[3],
                             N=res[4], J_eta=res[5], J_zeta=res[6],
                             riding=res[7])


def _check_samples(stimes: np.ndarray, horizon: float) -> None:
    if stimes.size and (np.any(np.diff(stimes) < 0) or stimes[-1] > horizon
                        or stimes[0] < 0):
        raise ValidationError("sample times must be ascending within [0, horizon]")


@dataclass
class CoupledEnsemble:
    """Ordered stack of configurations driven by one clock stream."""

    members: list[Configuration]
    orderings: list[tuple[int, int]]
    params: Params
    seed: int
    anchors: list[int] = field(default_factory=list)

    def __post_init__(self):
        win = self.members[0].window
        for m in self.members[1:]:
            if m.window != win:
                raise ValidationError("ensemble members must share one window")
        if not self.anchors:
            self.anchors = [0] * len(self.members)
        for a, b in self.orderings:
            if np.any(self.members[a].occ > self.members[b].occ):
                raise CouplingBugError(
                    f"declared ordering {a} <= {b} fails initially")


def evolve_coupled(ensemble: CoupledEnsemble, horizon: float,
                   sample_times=(), on_sample=None,
                   on_event=None, on_event_pre=None) -> CoupledEnsemble:
    """Reference basic coupling: every member consumes the same events.

    Declared sitewise orderings are asserted at the touched bond after
    every event (they cannot break elsewhere).  on_sample(t, arrays,
    anchors) fires at each sample time; on_event_pre(event, arrays) right
    before an event applies and on_event(event, arrays) after.  Returns
    the evolved ensemble; column-0 brick counts are carried in `anchors`
    so members' currents stay available.
    """
    win = ensemble.members[0].window
    arrays = [m.occ.copy() for m in ensemble.members]
    anchors = list(ensemble.anchors)
    stimes = list(sample_times)
    _check_samples(np.asarray(stimes, dtype=np.float64), horizon)
    sp = 0
    stream = ClockStream(ensemble.seed, win, ensemble.params, horizon)
    while True:
        ev = stream.next_event()
        t_next = math.inf if ev is None else ev.time
        while sp < len(stimes) and stimes[sp] < t_next:
            if on_sample is not None:
                on_sample(stimes[sp], arrays, anchors)
            sp += 1
        if ev is None:
            break
        bond = ev.site if ev.direction == RIGHT else ev.site - 1
        i = bond - win.lo
        j = i + 1
        if on_event_pre is not None:
            on_event_pre(ev, arrays)
        for m, occ in enumerate(arrays):
            if ev.direction == RIGHT:
                if occ[i] == 1 and occ[j] == 0:
                    occ[i], occ[j] = 0, 1
                    if bond == 0:
                        anchors[m] += 1
            else:
                if occ[j] == 1 and occ[i] == 0:
                    occ[j], occ[i] = 0, 1
                    if bond == 0:
                        anchors[m] -= 1
        for a, b in ensemble.orderings:
            if arrays[a][i] > arrays[b][i] or arrays[a][j] > arrays[b][j]:
                raise CouplingBugError(
                    f"ordering member{a} <= member{b} broken at bond "
                    f"({bond}, {bond + 1}) by event t={ev.time:.6f} "
                    f"(seed {ensemble.seed})")
        if on_event is not None:
            on_event(ev, arrays)
    members = [Configuration(win, occ) for occ in arrays]
    return CoupledEnsemble(members, ensemble.orderings, ensemble.params,
                           ensemble.seed, anchors=anchors)


def mark_law_snapshot(mark_rows: np.ndarray, k_min: int, params: Params):
    """Per-label empirical mark frequencies from replicated runs at one time.

    Returns a list of dicts {k, n, freq, se, expected}; the caller picks
    the test (exact binomial for the extreme labels, chi-square inland).
    """
    rows = np.asarray(mark_rows)
    if rows.ndim != 2:
        raise ValidationError("expected a (replicas, labels) mark matrix")
    n_rep, nlab = rows.shape
    out = []
    for idx in range(nlab):
        k = k_min + idx
        ones = int(rows[:, idx].sum())
        freq = ones / n_rep
        out.append({
            "k": k,
            "n": n_rep,
            "ones": ones,
            "freq": freq,
            "se": math.sqrt(max(freq * (1.0 - freq), 1e-300) / n_rep),
            "expected": mark_probability(params, k),
        })
    return out


def write_audit_jsonl(path, times, records_by_field, event_A=None, event_B=None):
    """One JSON record per sampled time: {t, Q, Qa, X0, R, L, m, N, ...}."""
    fields = ("Q", "Qa", "X0", "R", "L", "m", "N")
    with open(path, "w", encoding="utf-8") as fh:
        for s, t in enumerate(times):
            rec = {"t": float(t)}
            for name in fields:
                arr = records_by_field.get(name)
                rec[name] = None if arr is None else int(arr[s])
            rec["eventA"] = None if event_A is None else bool(event_A)
            rec["eventB"] = None if event_B is None else bool(event_B)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
