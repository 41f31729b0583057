"""Compiled event kernels.

Every kernel realizes the same graphical construction: per-site rate-1
splitmix64 interarrival streams with a direction coin of bias p, merged
through a binary min-heap keyed by (time, site).  The coin is skipped when
p == 1 exactly.  Events at a frozen boundary whose bond would leave the
window are drawn but not applied, so a site consumes the same stream
regardless of which other sites exist.

Kernels return a status code instead of raising; couplings map nonzero
codes to fatal errors carrying the replica seed.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from ._rng import (TAG_CLOCK, TAG_INIT, TAG_MARK, TAG_MARKCLOCK,
                   TAG_PRIORITY, mix64, next_unit, stream_init)

U64 = np.uint64

OK = 0
ERR_ORDER = 1          # a declared sitewise ordering was violated
ERR_WALKER = 2         # walker left the discrepancy set
ERR_LABEL = 3          # label order or adjacency violated
ERR_TRUNCATION = 4     # labeled truncation could not certify the state
ERR_MQ = 5             # priority dominance m <= m_Q violated
ERR_CURRENT = 6        # height current != crossing-count current
ERR_CONTAINMENT = 7    # Q_a <= R on A, or L <= Q on B, failed
ERR_TASEP_ORDER = 8    # Q >= Q_a failed with p = 1
ERR_CURRENT_BOUND = 9  # current-difference bound by N(t) failed
ERR_HEIGHT_ORDER = 10  # height majorization failed
ERR_REJECTION = 11     # conditioning rejection cap exceeded
ERR_MARKCOUNT = 12     # mark multiset not conserved
ERR_RIDING = 13        # tagged walker detached from its label

ERROR_NAMES = {
    ERR_ORDER: "ordering violation",
    ERR_WALKER: "walker off the discrepancy set",
    ERR_LABEL: "label order violation",
    ERR_TRUNCATION: "label truncation failure",
    ERR_MQ: "priority dominance violation",
    ERR_CURRENT: "height/crossing current mismatch",
    ERR_CONTAINMENT: "R/L containment violation",
    ERR_TASEP_ORDER: "TASEP Q >= Q_a violation",
    ERR_CURRENT_BOUND: "current bound by N(t) violation",
    ERR_HEIGHT_ORDER: "height ordering violation",
    ERR_REJECTION: "mark conditioning rejection cap exceeded",
    ERR_MARKCOUNT: "mark counts not conserved",
    ERR_RIDING: "tagged walker detached from its label",
}

_PID_EMPTY = np.int64(-(2**62))
_NOLAB = np.int32(-1)

COND_NONE = 0
COND_A = 1
COND_B = 2

MARKS_COUPLED = 0
MARKS_INDEPENDENT = 1

_REJECTION_CAP = 200_000


@njit(cache=True, inline="always")
def _sift(times, sidx, k, n):
    t = times[k]
    s = sidx[k]
    while True:
        c = 2 * k + 1
        if c >= n:
            break
        r = c + 1
        if r < n and (times[r] < times[c] or (times[r] == times[c] and sidx[r] < sidx[c])):
            c = r
        if times[c] < t or (times[c] == t and sidx[c] < s):
            times[k] = times[c]
            sidx[k] = sidx[c]
            k = c
        else:
            break
    times[k] = t
    sidx[k] = s


@njit(cache=True, inline="always")
def _clock_setup(seed, tag, lo, n):
    states = np.empty(n, np.uint64)
    times = np.empty(n, np.float64)
    sidx = np.empty(n, np.int64)
    for k in range(n):
        states[k] = stream_init(U64(seed), U64(tag), U64(lo + k))
        times[k] = -np.log(next_unit(states, k))
        sidx[k] = k
    for k in range(n // 2 - 1, -1, -1):
        _sift(times, sidx, k, n)
    return states, times, sidx


@njit(cache=True, inline="always")
def _derive(master, a, b):
    s = U64(master)
    s = mix64(s ^ mix64(U64(a) + U64(0x632BE59BD9B4E019)))
    s = mix64(s ^ mix64(U64(b) + U64(0x632BE59BD9B4E019)))
    return s


@njit(cache=True, inline="always")
def _init_heights(occ, i0, out):
    # out[k] = initial height of column lo+k (valid for k in [0, n-2])
    n = occ.shape[0]
    run = np.int64(0)
    for k in range(n):
        run += occ[k]
        out[k] = run
    base = out[i0]
    for k in range(n):
        out[k] = -(out[k] - base)


@njit(cache=True)
def kern_events(seed, lo, n, p, horizon, max_events):
    """Emit the merged event log (time, site, direction) for replay tests."""
    states, times, sidx = _clock_setup(seed, TAG_CLOCK, lo, n)
    out_t = np.empty(max_events, np.float64)
    out_s = np.empty(max_events, np.int64)
    out_d = np.empty(max_events, np.int8)
    m = 0
    tasep = p == 1.0
    while m < max_events:
        t = times[0]
        if t > horizon:
            break
        k = sidx[0]
        if tasep:
            right = True
        else:
            right = next_unit(states, k) < p
        times[0] = t - np.log(next_unit(states, k))
        _sift(times, sidx, 0, n)
        if right and k == n - 1:
            continue
        if (not right) and k == 0:
            continue
        out_t[m] = t
        out_s[m] = lo + k
        out_d[m] = 1 if right else -1
        m += 1
    return out_t[:m], out_s[:m], out_d[:m]


@njit(cache=True)
def _init_bernoulli(seed, lo, n, rho, cond_mode):
    """Product-Bernoulli(rho) occupancy; cond_mode 1/2 forces site 0 empty/occupied."""
    occ = np.zeros(n, np.uint8)
    st = np.empty(1, np.uint64)
    for k in range(n):
        site = lo + k
        if site == 0 and cond_mode == 1:
            occ[k] = 0
            continue
        if site == 0 and cond_mode == 2:
            occ[k] = 1
            continue
        st[0] = stream_init(U64(seed), U64(TAG_INIT), U64(site))
        occ[k] = 1 if next_unit(st, 0) < rho else 0
    return occ


@njit(cache=True)
def kern_single(seed, lo, n, ring, p, horizon, occ, stimes, scols, track):
    """Plain ASEP run.

    Mutates occ in place.  Samples the height current J = h_col(t) at each
    (stimes[j], scols[j]) and, when track is true, verifies it against the
    particle-crossing count.  Returns (status, J, occ).
    """
    S = stimes.shape[0]
    jout = np.zeros(S, np.int64)
    status = OK
    i0 = -lo
    net = np.zeros(n, np.int64)
    ih = np.zeros(n, np.int64)
    pid = np.empty(1, np.int64)
    if track and not ring:
        _init_heights(occ, i0, ih)
        pid = np.empty(n, np.int64)
        for k in range(n):
            pid[k] = lo + k if occ[k] == 1 else _PID_EMPTY
    states, times, sidx = _clock_setup(seed, TAG_CLOCK, lo, n)
    tasep = p == 1.0
    sp = 0
    while True:
        t = times[0]
        while sp < S and stimes[sp] < t:
            status = _sample_single(track, ring, ih, net, pid, lo, n,
                                    scols[sp], jout, sp, status)
            sp += 1
        if t > horizon or status != OK:
            break
        k = sidx[0]
        if tasep:
            right = True
        else:
            right = next_unit(states, k) < p
        times[0] = t - np.log(next_unit(states, k))
        _sift(times, sidx, 0, n)
        if ring:
            i = k if right else (k - 1 + n) % n
            j = (i + 1) % n
        else:
            if right and k == n - 1:
                continue
            if (not right) and k == 0:
                continue
            i = k if right else k - 1
            j = i + 1
        if right:
            if occ[i] == 1 and occ[j] == 0:
                occ[i] = 0
                occ[j] = 1
                if track and not ring:
                    net[i] += 1
                    pid[j] = pid[i]
                    pid[i] = _PID_EMPTY
        else:
            if occ[j] == 1 and occ[i] == 0:
                occ[j] = 0
                occ[i] = 1
                if track and not ring:
                    net[i] -= 1
                    pid[i] = pid[j]
                    pid[j] = _PID_EMPTY
    while sp < S and status == OK:
        status = _sample_single(track, ring, ih, net, pid, lo, n,
                                scols[sp], jout, sp, status)
        sp += 1
    return status, jout, occ


@njit(cache=True, inline="always")
def _sample_single(track, ring, ih, net, pid, lo, n, col, jout, sp, status):
    if ring or not track:
        return status
    kc = col - lo
    j_height = ih[kc] + net[kc]
    plus = np.int64(0)
    minus = np.int64(0)
    for k in range(n):
        q = pid[k]
        if q == _PID_EMPTY:
            continue
        if lo + k > col and q <= 0:
            plus += 1
        if lo + k <= col and q >= 1:
            minus += 1
    jout[sp] = j_height
    if j_height != plus - minus:
        return ERR_CURRENT
    return status


@njit(cache=True)
def kern_pair(seed, lo, n, p, horizon, occ, w0, kind, stimes):
    """Base ASEP plus a single discrepancy walker.

    kind 0: second class particle on the base (base vacant at w0);
    kind 1: second class antiparticle (base occupied at w0).  The walker
    follows the basic-coupling swap rules and the base evolves untouched.
    Returns (status, walker trajectory, occ).
    """
    S = stimes.shape[0]
    wout = np.zeros(S, np.int64)
    status = OK
    w = w0
    if kind == 0:
        if occ[w - lo] != 0:
            status = ERR_WALKER
    else:
        if occ[w - lo] != 1:
            status = ERR_WALKER
    states, times, sidx = _clock_setup(seed, TAG_CLOCK, lo, n)
    tasep = p == 1.0
    sp = 0
    while status == OK:
        t = times[0]
        while sp < S and stimes[sp] < t:
            wout[sp] = w
            sp += 1
        if t > horizon:
            break
        k = sidx[0]
        if tasep:
            right = True
        else:
            right = next_unit(states, k) < p
        times[0] = t - np.log(next_unit(states, k))
        _sift(times, sidx, 0, n)
        if right and k == n - 1:
            continue
        if (not right) and k == 0:
            continue
        i = k if right else k - 1
        j = i + 1
        oi = occ[i]
        oj = occ[j]
        iabs = lo + i
        jabs = lo + j
        # same swap algebra for particle and antiparticle: the perturbed
        # copy moves where the base is blocked and vice versa
        if right:
            if iabs == w and oj == 0:
                w = jabs
            elif jabs == w and oi == 1:
                w = iabs
        else:
            if jabs == w and oi == 0:
                w = iabs
            elif iabs == w and oj == 1:
                w = jabs
        if right:
            if oi == 1 and oj == 0:
                occ[i] = 0
                occ[j] = 1
        else:
            if oj == 1 and oi == 0:
                occ[j] = 0
                occ[i] = 1
        # the walker site must keep the conditioning parity
        kw = w - lo
        if kind == 0:
            if occ[kw] != 0:
                status = ERR_WALKER
        else:
            if occ[kw] != 1:
                status = ERR_WALKER
    while sp < S and status == OK:
        wout[sp] = w
        sp += 1
    return status, wout, occ


@njit(cache=True, inline="always")
def _mark_prob(p, k):
    # P(mark = 1) for label k; totally asymmetric case takes the limit values
    if p == 1.0:
        if k > 0:
            return 1.0
        if k < 0:
            return 0.0
        return 0.5
    x = (1.0 - p) / p  # q/p < 1
    if k >= 0:
        xk = x**k
        return 1.0 / (1.0 + xk)
    xk = x ** (-k)
    return xk / (1.0 + xk)


@njit(cache=True)
def init_mu_cells(seed, lo, n, rho, lam, force_origin):
    """Cellwise two-density product law; optional discrepancy at the origin.

    Returns (eta, isD) where isD flags omega-minus-eta discrepancies.
    """
    eta = np.zeros(n, np.uint8)
    isD = np.zeros(n, np.uint8)
    st = np.empty(1, np.uint64)
    for k in range(n):
        site = lo + k
        if site == 0 and force_origin:
            isD[k] = 1
            continue
        st[0] = stream_init(U64(seed), U64(TAG_INIT), U64(site))
        u = next_unit(st, 0)
        if u < lam:
            eta[k] = 1
        elif u < rho:
            isD[k] = 1
    return eta, isD


@njit(cache=True)
def init_five(seed, lo, n, p, rho, lam, Kl, Kr, condition):
    """Initial state of the five-process coupling.

    Draws (eta, omega) cellwise with the two-density product law
    conditioned on a discrepancy at the origin, labels the discrepancies
    -Kl..Kr around it, and assigns marks by the blocking-measure law,
    rejection-sampling on the marks alone when conditioning on the
    mark-measurable events A or B.

    Returns (status, eta, isD, pos, marks, nR_idx, nL_idx, flagA, flagB).
    """
    nlab = Kl + Kr + 1
    pos = np.zeros(nlab, np.int64)
    marks = np.zeros(nlab, np.uint8)
    eta, isD = init_mu_cells(seed, lo, n, rho, lam, True)
    ndisc = 0
    for k in range(n):
        ndisc += isD[k]
    # positions of discrepancies, ascending; locate the origin's rank
    disc = np.empty(ndisc, np.int64)
    m = 0
    rank0 = -1
    for k in range(n):
        if isD[k] == 1:
            if lo + k == 0:
                rank0 = m
            disc[m] = lo + k
            m += 1
    if rank0 < Kl or (ndisc - 1 - rank0) < Kr:
        return (ERR_TRUNCATION, eta, isD, pos, marks,
                np.int64(-1), np.int64(-1), False, False)
    for idx in range(nlab):
        pos[idx] = disc[rank0 - Kl + idx]
    # mark sampling with rejection on the conditioning event
    mstates = np.empty(nlab, np.uint64)
    for idx in range(nlab):
        mstates[idx] = stream_init(U64(seed), U64(TAG_MARK), U64(pos[idx]))
    accepted = False
    for _ in range(_REJECTION_CAP):
        for idx in range(nlab):
            b = _mark_prob(p, idx - Kl)
            marks[idx] = 1 if next_unit(mstates, idx) < b else 0
        ok = True
        if condition == COND_A or condition == COND_B:
            ok = False
            for idx in range(Kl, nlab):  # labels k >= 0
                if marks[idx] == 0:
                    ok = True
                    break
        if ok and condition == COND_B:
            ok = False
            for idx in range(Kl + 1):  # labels k <= 0
                if marks[idx] == 1:
                    ok = True
                    break
        if ok:
            accepted = True
            break
    if not accepted:
        return (ERR_REJECTION, eta, isD, pos, marks,
                np.int64(-1), np.int64(-1), False, False)
    nR_idx = np.int64(-1)
    nL_idx = np.int64(-1)
    for idx in range(nlab):
        if marks[idx] == 0:
            nR_idx = idx
        if marks[nlab - 1 - idx] == 1:
            nL_idx = nlab - 1 - idx
    if nR_idx < 0 or nL_idx < 0:
        return (ERR_TRUNCATION, eta, isD, pos, marks,
                np.int64(-1), np.int64(-1), False, False)
    flagA = nR_idx >= Kl
    flagB = flagA and nL_idx <= Kl
    return OK, eta, isD, pos, marks, nR_idx, nL_idx, flagA, flagB


@njit(cache=True)
def kern_five(seed, lo, n, p, horizon, eta, isD, pos, marks, Kl,
              nR_idx, nL_idx, flagA, flagB, mark_mode,
              stimes, jcols, nj_j, nj_2us):
    """Five-process coupling driven by one clock stream.

    eta/isD encode the ordered pair (eta, omega): isD flags the
    omega-minus-eta second class particles.  Labeled discrepancies carry
    marks splitting them into the middle process; exchanges across the
    label truncation are frozen so the labeled mark multiset is conserved.
    The perturbation walkers Q (on eta) and Q_a (on omega) ride the
    discrepancy set.  mark_mode 1 drives mark exchanges from an
    independent clock collection instead of the shared one.

    Samples at stimes: Q, Q_a, X_0, R, L, labels n_R/n_L, the omega
    current at jcols, the discrepancy counts over (nj_j, nj_j + 2u] for
    each 2u in nj_2us, and the mark row.  Returns a status plus those
    arrays.
    """
    nlab = pos.shape[0]
    S = stimes.shape[0]
    q_tr = np.zeros(S, np.int64)
    qa_tr = np.zeros(S, np.int64)
    x0_tr = np.zeros(S, np.int64)
    r_tr = np.zeros(S, np.int64)
    l_tr = np.zeros(S, np.int64)
    nr_tr = np.zeros(S, np.int64)
    nl_tr = np.zeros(S, np.int64)
    jrho_tr = np.zeros(S, np.int64)
    U = nj_2us.shape[0]
    nj_tr = np.zeros((S, U), np.int64)
    marks_tr = np.zeros((S, nlab), np.uint8)
    status = OK
    lab = np.full(n, _NOLAB, np.int32)
    for idx in range(nlab):
        lab[pos[idx] - lo] = np.int32(idx)
    net_eta = np.zeros(n, np.int64)
    net_om = np.zeros(n, np.int64)
    ih_om = np.zeros(n, np.int64)
    om0 = np.empty(n, np.uint8)
    for k in range(n):
        om0[k] = eta[k] | isD[k]
    _init_heights(om0, -lo, ih_om)
    nmarks1 = np.int64(0)
    for idx in range(nlab):
        nmarks1 += marks[idx]
    q = np.int64(0)
    qa = np.int64(0)
    tasep = p == 1.0
    states, times, sidx = _clock_setup(seed, TAG_CLOCK, lo, n)
    use_mk = mark_mode == MARKS_INDEPENDENT
    mk_states, mk_times, mk_sidx = _clock_setup(seed, TAG_MARKCLOCK, lo, n)
    sp = 0
    while status == OK:
        t = times[0]
        from_main = True
        if use_mk and mk_times[0] < t:
            t = mk_times[0]
            from_main = False
        while sp < S and stimes[sp] < t:
            q_tr[sp] = q
            qa_tr[sp] = qa
            x0_tr[sp] = pos[Kl]
            r_tr[sp] = pos[nR_idx]
            l_tr[sp] = pos[nL_idx]
            nr_tr[sp] = nR_idx - Kl
            nl_tr[sp] = nL_idx - Kl
            for idx in range(nlab):
                marks_tr[sp, idx] = marks[idx]
            kc = jcols[sp] - lo
            jrho_tr[sp] = ih_om[kc] + net_om[kc]
            for uu in range(U):
                cnt = np.int64(0)
                for s_ in range(nj_j + 1, nj_j + nj_2us[uu] + 1):
                    cnt += isD[s_ - lo]
                nj_tr[sp, uu] = cnt
            tot = np.int64(0)
            for idx in range(nlab):
                tot += marks[idx]
            if tot != nmarks1:
                status = ERR_MARKCOUNT
            sp += 1
        if t > horizon or status != OK:
            break
        if from_main:
            k = sidx[0]
            if tasep:
                right = True
            else:
                right = next_unit(states, k) < p
            times[0] = t - np.log(next_unit(states, k))
            _sift(times, sidx, 0, n)
        else:
            k = mk_sidx[0]
            if tasep:
                right = True
            else:
                right = next_unit(mk_states, k) < p
            mk_times[0] = t - np.log(next_unit(mk_states, k))
            _sift(mk_times, mk_sidx, 0, n)
        if right and k == n - 1:
            continue
        if (not right) and k == 0:
            continue
        i = k if right else k - 1
        j = i + 1
        iabs = lo + i
        jabs = lo + j
        if not from_main:
            # independent mark clocks only exchange marks of adjacent labels
            k1 = lab[i]
            k2 = lab[j]
            if k1 >= 0 and k2 >= 0:
                if k2 != k1 + 1:
                    status = ERR_LABEL
                    break
                if right and marks[k1] == 1 and marks[k2] == 0:
                    marks[k1] = 0
                    marks[k2] = 1
                    if k2 == nR_idx:
                        nR_idx = k1
                    if k1 == nL_idx:
                        nL_idx = k2
                elif (not right) and marks[k1] == 0 and marks[k2] == 1:
                    marks[k1] = 1
                    marks[k2] = 0
                    if k1 == nR_idx:
                        nR_idx = k2
                    if k2 == nL_idx:
                        nL_idx = k1
            continue
        ei = eta[i]
        di = isD[i]
        ej = eta[j]
        dj = isD[j]
        om_i = ei | di
        om_j = ej | dj
        # perturbation walkers respond to the same arrow (pre-event state)
        if right:
            if iabs == q and ej == 0:
                q = jabs
            elif jabs == q and ei == 1:
                q = iabs
            if iabs == qa and om_j == 0:
                qa = jabs
            elif jabs == qa and om_i == 1:
                qa = iabs
        else:
            if jabs == q and ei == 0:
                q = iabs
            elif iabs == q and ej == 1:
                q = jabs
            if jabs == qa and om_i == 0:
                qa = iabs
            elif iabs == qa and om_j == 1:
                qa = jabs
        if right:
            if ei == 1:
                if ej == 0 and dj == 0:
                    eta[i] = 0
                    eta[j] = 1
                    net_eta[i] += 1
                    net_om[i] += 1
                elif dj == 1:
                    # first class swaps with the second class particle
                    eta[i] = 0
                    eta[j] = 1
                    isD[j] = 0
                    isD[i] = 1
                    net_eta[i] += 1
                    kb = lab[j]
                    lab[j] = _NOLAB
                    lab[i] = kb
                    if kb >= 0:
                        pos[kb] = iabs
                        if kb > 0 and pos[kb - 1] >= iabs:
                            status = ERR_LABEL
            elif di == 1:
                if ej == 0 and dj == 0:
                    isD[i] = 0
                    isD[j] = 1
                    net_om[i] += 1
                    kb = lab[i]
                    lab[i] = _NOLAB
                    lab[j] = kb
                    if kb >= 0:
                        pos[kb] = jabs
                        if kb < nlab - 1 and pos[kb + 1] <= jabs:
                            status = ERR_LABEL
                elif dj == 1 and mark_mode == MARKS_COUPLED:
                    k1 = lab[i]
                    k2 = lab[j]
                    if k1 >= 0 and k2 >= 0:
                        if k2 != k1 + 1:
                            status = ERR_LABEL
                        elif marks[k1] == 1 and marks[k2] == 0:
                            marks[k1] = 0
                            marks[k2] = 1
                            if k2 == nR_idx:
                                nR_idx = k1
                            if k1 == nL_idx:
                                nL_idx = k2
        else:
            if ej == 1:
                if ei == 0 and di == 0:
                    eta[j] = 0
                    eta[i] = 1
                    net_eta[i] -= 1
                    net_om[i] -= 1
                elif di == 1:
                    eta[j] = 0
                    eta[i] = 1
                    isD[i] = 0
                    isD[j] = 1
                    net_eta[i] -= 1
                    kb = lab[i]
                    lab[i] = _NOLAB
                    lab[j] = kb
                    if kb >= 0:
                        pos[kb] = jabs
                        if kb < nlab - 1 and pos[kb + 1] <= jabs:
                            status = ERR_LABEL
            elif dj == 1:
                if ei == 0 and di == 0:
                    isD[j] = 0
                    isD[i] = 1
                    net_om[i] -= 1
                    kb = lab[j]
                    lab[j] = _NOLAB
                    lab[i] = kb
                    if kb >= 0:
                        pos[kb] = iabs
                        if kb > 0 and pos[kb - 1] >= iabs:
                            status = ERR_LABEL
                elif di == 1 and mark_mode == MARKS_COUPLED:
                    k1 = lab[i]
                    k2 = lab[j]
                    if k1 >= 0 and k2 >= 0:
                        if k2 != k1 + 1:
                            status = ERR_LABEL
                        elif marks[k1] == 0 and marks[k2] == 1:
                            marks[k1] = 1
                            marks[k2] = 0
                            if k1 == nR_idx:
                                nR_idx = k2
                            if k2 == nL_idx:
                                nL_idx = k1
        # event-level invariants, zero tolerance; the R/L containments are
        # pathwise statements of the shared-clock construction only
        if isD[q - lo] != 1 or isD[qa - lo] != 1:
            status = ERR_WALKER
        if mark_mode == MARKS_COUPLED:
            if flagA and qa > pos[nR_idx]:
                status = ERR_CONTAINMENT
            if flagB and pos[nL_idx] > q:
                status = ERR_CONTAINMENT
        if tasep and q < qa:
            status = ERR_TASEP_ORDER
    return (status, q_tr, qa_tr, x0_tr, r_tr, l_tr, nr_tr, nl_tr,
            jrho_tr, nj_tr, marks_tr, eta, isD)


@njit(cache=True)
def init_segment(seed, lo, n, p, rho, lam, n_off, nY):
    """Initial state for the segment-perturbed coupling.

    The pair (eta, zeta) is drawn from the four-branch site law: the
    two-density cell law outside the segment, eta vacant with zeta at the
    higher density at site -n_off, and the two processes glued at the
    lower density inside (-n_off, 0].  xi copies zeta left of -n_off
    (inclusive) and eta to the right.  The walkers below -n_off become the
    labeled chain Y_{-(nY-1)..0}; the priority label starts from its
    reversible geometric law.

    Returns (status, eta, xi, zeta, posY, m_idx).
    """
    eta = np.zeros(n, np.uint8)
    xi = np.zeros(n, np.uint8)
    zeta = np.zeros(n, np.uint8)
    posY = np.zeros(nY, np.int64)
    st = np.empty(1, np.uint64)
    for k in range(n):
        site = lo + k
        st[0] = stream_init(U64(seed), U64(TAG_INIT), U64(site))
        u = next_unit(st, 0)
        if site < -n_off or site > 0:
            if u < lam:
                eta[k] = 1
                zeta[k] = 1
            elif u < rho:
                zeta[k] = 1
        elif site == -n_off:
            if u < rho:
                zeta[k] = 1
        else:
            if u < lam:
                eta[k] = 1
                zeta[k] = 1
        xi[k] = zeta[k] if site <= -n_off else eta[k]
    cnt = np.int64(0)
    for k in range(n):
        if xi[k] > eta[k]:
            cnt += 1
    if cnt < nY:
        return ERR_TRUNCATION, eta, xi, zeta, posY, np.int64(-1)
    m = np.int64(0)
    for k in range(n):
        if xi[k] > eta[k]:
            m += 1
            back = cnt - m  # how many walkers lie above this one
            if back < nY:
                posY[nY - 1 - back] = lo + k
    if p == 1.0:
        m_idx = np.int64(nY - 1)  # the geometric law degenerates at zero
    else:
        st[0] = stream_init(U64(seed), U64(TAG_PRIORITY), U64(0))
        u = next_unit(st, 0)
        g = np.int64(np.floor(np.log(u) / np.log((1.0 - p) / p)))
        if g >= nY:
            return ERR_TRUNCATION, eta, xi, zeta, posY, np.int64(-1)
        m_idx = np.int64(nY - 1 - g)
    return OK, eta, xi, zeta, posY, m_idx


@njit(cache=True)
def kern_segment(seed, lo, n, p, horizon, eta, xi, zeta, posY, m_idx, n_off,
                 stimes, vcols):
    """Segment-perturbation coupling with the tagged walker and priority chain.

    Evolves eta <= xi <= zeta under one clock stream, moves the tagged
    second class particle Q (initially at -n_off) by the swap rules on
    eta, lets the priority label m ride the labeled chain, and maintains
    m_Q = max{k : Y_k <= Q}.  At each sample time it asserts the height
    majorization h_zeta <= h_xi, the identity -m_Q = (xi - eta mass right
    of Q) = h^xi_Q - h^eta_Q, and the current bound
    J^zeta - J^eta <= N(t) = -m(t) whenever Q <= [V t].

    Returns (status, q_tr, m_tr, mq_tr, n_tr, je_tr, jz_tr, ride_tr).
    """
    nY = posY.shape[0]
    S = stimes.shape[0]
    q_tr = np.zeros(S, np.int64)
    m_tr = np.zeros(S, np.int64)
    mq_tr = np.zeros(S, np.int64)
    n_tr = np.zeros(S, np.int64)
    je_tr = np.zeros(S, np.int64)
    jz_tr = np.zeros(S, np.int64)
    ride_tr = np.zeros(S, np.uint8)
    status = OK
    labY = np.full(n, _NOLAB, np.int32)
    for idx in range(nY):
        labY[posY[idx] - lo] = np.int32(idx)
    net_eta = np.zeros(n, np.int64)
    net_xi = np.zeros(n, np.int64)
    net_zeta = np.zeros(n, np.int64)
    ih_eta = np.zeros(n, np.int64)
    ih_xi = np.zeros(n, np.int64)
    ih_zeta = np.zeros(n, np.int64)
    _init_heights(eta, -lo, ih_eta)
    _init_heights(xi, -lo, ih_xi)
    _init_heights(zeta, -lo, ih_zeta)
    q = np.int64(-n_off)
    mQ_idx = np.int64(nY - 1)
    riding = xi[q - lo] == 1
    tasep = p == 1.0
    states, times, sidx = _clock_setup(seed, TAG_CLOCK, lo, n)
    sp = 0
    while status == OK:
        t = times[0]
        while sp < S and stimes[sp] < t:
            q_tr[sp] = q
            m_tr[sp] = m_idx - (nY - 1)
            mq_tr[sp] = mQ_idx - (nY - 1)
            n_tr[sp] = (nY - 1) - m_idx
            ride_tr[sp] = 1 if riding else 0
            kc = vcols[sp] - lo
            je = ih_eta[kc] + net_eta[kc]
            jz = ih_zeta[kc] + net_zeta[kc]
            je_tr[sp] = je
            jz_tr[sp] = jz
            if q <= vcols[sp] and jz - je > n_tr[sp]:
                status = ERR_CURRENT_BOUND
            # -m_Q equals the xi-eta mass strictly right of Q, which is
            # the height gap at column Q
            mass = np.int64(0)
            for k in range(q - lo + 1, n):
                mass += xi[k] - eta[k]
            kq = q - lo
            gap = (ih_xi[kq] + net_xi[kq]) - (ih_eta[kq] + net_eta[kq])
            if mass != -(mQ_idx - (nY - 1)) or gap != mass:
                status = ERR_MQ
            for k in range(n - 1):
                if ih_zeta[k] + net_zeta[k] > ih_xi[k] + net_xi[k]:
                    status = ERR_HEIGHT_ORDER
            sp += 1
        if t > horizon or status != OK:
            break
        k = sidx[0]
        if tasep:
            right = True
        else:
            right = next_unit(states, k) < p
        times[0] = t - np.log(next_unit(states, k))
        _sift(times, sidx, 0, n)
        if right and k == n - 1:
            continue
        if (not right) and k == 0:
            continue
        i = k if right else k - 1
        j = i + 1
        iabs = lo + i
        jabs = lo + j
        ei = eta[i]
        ej = eta[j]
        xi_i = xi[i]
        xi_j = xi[j]
        zi = zeta[i]
        zj = zeta[j]
        if right:
            # priority label hops along adjacent chain particles
            if m_idx < nY - 1 and posY[m_idx] == iabs and posY[m_idx + 1] == jabs:
                m_idx += 1
            if labY[i] >= 0 and xi_j == 0:
                kb = labY[i]
                labY[i] = _NOLAB
                labY[j] = kb
                posY[kb] = jabs
                if kb < nY - 1 and posY[kb + 1] <= jabs:
                    status = ERR_LABEL
            elif labY[j] >= 0 and ei == 1:
                kb = labY[j]
                labY[j] = _NOLAB
                labY[i] = kb
                posY[kb] = iabs
                if kb > 0 and posY[kb - 1] >= iabs:
                    status = ERR_LABEL
            if iabs == q and ej == 0:
                q = jabs
            elif jabs == q and ei == 1:
                q = iabs
            if ei == 1 and ej == 0:
                eta[i] = 0
                eta[j] = 1
                net_eta[i] += 1
            if xi_i == 1 and xi_j == 0:
                xi[i] = 0
                xi[j] = 1
                net_xi[i] += 1
            if zi == 1 and zj == 0:
                zeta[i] = 0
                zeta[j] = 1
                net_zeta[i] += 1
        else:
            if m_idx > 0 and posY[m_idx] == jabs and posY[m_idx - 1] == iabs:
                m_idx -= 1
            if labY[j] >= 0 and xi_i == 0:
                kb = labY[j]
                labY[j] = _NOLAB
                labY[i] = kb
                posY[kb] = iabs
                if kb > 0 and posY[kb - 1] >= iabs:
                    status = ERR_LABEL
            elif labY[i] >= 0 and ej == 1:
                kb = labY[i]
                labY[i] = _NOLAB
                labY[j] = kb
                posY[kb] = jabs
                if kb < nY - 1 and posY[kb + 1] <= jabs:
                    status = ERR_LABEL
            if jabs == q and ei == 0:
                q = iabs
            elif iabs == q and ej == 1:
                q = jabs
            if ej == 1 and ei == 0:
                eta[j] = 0
                eta[i] = 1
                net_eta[i] -= 1
            if xi_j == 1 and xi_i == 0:
                xi[j] = 0
                xi[i] = 1
                net_xi[i] -= 1
            if zj == 1 and zi == 0:
                zeta[j] = 0
                zeta[i] = 1
                net_zeta[i] -= 1
        # sitewise orderings at the touched bond
        if eta[i] > xi[i] or xi[i] > zeta[i] or eta[j] > xi[j] or xi[j] > zeta[j]:
            status = ERR_ORDER
        # m_Q tracks max{k : Y_k <= Q}
        while mQ_idx < nY - 1 and posY[mQ_idx + 1] <= q:
            mQ_idx += 1
        while status == OK and posY[mQ_idx] > q:
            mQ_idx -= 1
            if mQ_idx < 0:
                status = ERR_TRUNCATION
                break
        if m_idx > mQ_idx:
            status = ERR_MQ
        ride_now = xi[q - lo] == 1 and eta[q - lo] == 0
        if riding and not ride_now:
            status = ERR_RIDING
        if ride_now and posY[mQ_idx] != q:
            status = ERR_RIDING
        riding = ride_now
    while sp < S and status == OK:
        q_tr[sp] = q
        m_tr[sp] = m_idx - (nY - 1)
        mq_tr[sp] = mQ_idx - (nY - 1)
        n_tr[sp] = (nY - 1) - m_idx
        ride_tr[sp] = 1 if riding else 0
        kc = vcols[sp] - lo
        je_tr[sp] = ih_eta[kc] + net_eta[kc]
        jz_tr[sp] = ih_zeta[kc] + net_zeta[kc]
        if q <= vcols[sp] and jz_tr[sp] - je_tr[sp] > n_tr[sp]:
            status = ERR_CURRENT_BOUND
        sp += 1
    return status, q_tr, m_tr, mq_tr, n_tr, je_tr, jz_tr, ride_tr


@njit(cache=True, parallel=True)
def batch_single(master, start, count, lo, n, p, rho, cond, horizon,
                 stimes, scols, track):
    """Stationary runs for replica indices [start, start+count)."""
    S = stimes.shape[0]
    jr = np.zeros((count, S), np.int64)
    st = np.zeros(count, np.int64)
    for r in prange(count):
        seed = _derive(U64(master), U64(0), U64(start + r))
        occ = _init_bernoulli(seed, lo, n, rho, cond)
        s, jout, _ = kern_single(seed, lo, n, False, p, horizon, occ,
                                 stimes, scols, track)
        st[r] = s
        for k in range(S):
            jr[r, k] = jout[k]
    return st, jr


@njit(cache=True, parallel=True)
def batch_ring(master, start, count, occ0, p, horizon):
    """Ring runs from a fixed initial state; final states as bitmasks."""
    n = occ0.shape[0]
    masks = np.zeros(count, np.int64)
    st = np.zeros(count, np.int64)
    empty_t = np.zeros(0, np.float64)
    empty_c = np.zeros(0, np.int64)
    for r in prange(count):
        seed = _derive(U64(master), U64(0), U64(start + r))
        occ = occ0.copy()
        s, _, occf = kern_single(seed, 0, n, True, p, horizon, occ,
                                 empty_t, empty_c, False)
        mask = np.int64(0)
        for k in range(n):
            mask |= np.int64(occf[k]) << k
        masks[r] = mask
        st[r] = s
    return st, masks


@njit(cache=True, parallel=True)
def batch_pair(master, start, count, lo, n, p, rho, kind, horizon, stimes):
    """Conditioned runs carrying one discrepancy walker from the origin."""
    S = stimes.shape[0]
    wr = np.zeros((count, S), np.int64)
    st = np.zeros(count, np.int64)
    cond = 1 if kind == 0 else 2
    for r in prange(count):
        seed = _derive(U64(master), U64(0), U64(start + r))
        occ = _init_bernoulli(seed, lo, n, rho, cond)
        s, wout, _ = kern_pair(seed, lo, n, p, horizon, occ, 0, kind, stimes)
        st[r] = s
        for k in range(S):
            wr[r, k] = wout[k]
    return st, wr


@njit(cache=True, parallel=True)
def batch_five(master, start, count, lo, n, p, rho, lam, K, condition,
               mark_mode, horizon, stimes, jcols, nj_j, nj_2us):
    """Replicated five-process runs with symmetric label truncation K."""
    S = stimes.shape[0]
    nlab = 2 * K + 1
    st = np.zeros(count, np.int64)
    q_tr = np.zeros((count, S), np.int64)
    qa_tr = np.zeros((count, S), np.int64)
    x0_tr = np.zeros((count, S), np.int64)
    r_tr = np.zeros((count, S), np.int64)
    l_tr = np.zeros((count, S), np.int64)
    nr_tr = np.zeros((count, S), np.int64)
    nl_tr = np.zeros((count, S), np.int64)
    jrho_tr = np.zeros((count, S), np.int64)
    U = nj_2us.shape[0]
    nj_tr = np.zeros((count, S, U), np.int64)
    marks_tr = np.zeros((count, S, nlab), np.uint8)
    flags = np.zeros((count, 2), np.uint8)
    for r in prange(count):
        seed = _derive(U64(master), U64(0), U64(start + r))
        s0, eta, isD, pos, marks, nR_idx, nL_idx, fA, fB = init_five(
            seed, lo, n, p, rho, lam, K, K, condition)
        if s0 != OK:
            st[r] = s0
            continue
        flags[r, 0] = 1 if fA else 0
        flags[r, 1] = 1 if fB else 0
        out = kern_five(seed, lo, n, p, horizon, eta, isD, pos, marks, K,
                        nR_idx, nL_idx, fA, fB, mark_mode,
                        stimes, jcols, nj_j, nj_2us)
        st[r] = out[0]
        for k in range(S):
            q_tr[r, k] = out[1][k]
            qa_tr[r, k] = out[2][k]
            x0_tr[r, k] = out[3][k]
            r_tr[r, k] = out[4][k]
            l_tr[r, k] = out[5][k]
            nr_tr[r, k] = out[6][k]
            nl_tr[r, k] = out[7][k]
            jrho_tr[r, k] = out[8][k]
            for uu in range(U):
                nj_tr[r, k, uu] = out[9][k, uu]
            for m in range(nlab):
                marks_tr[r, k, m] = out[10][k, m]
    return (st, q_tr, qa_tr, x0_tr, r_tr, l_tr, nr_tr, nl_tr, jrho_tr,
            nj_tr, marks_tr, flags)


@njit(cache=True, parallel=True)
def batch_segment(master, start, count, lo, n, p, rho, lam, n_off, nY,
                  horizon, stimes, vcols):
    """Replicated segment-perturbation runs."""
    S = stimes.shape[0]
    st = np.zeros(count, np.int64)
    q_tr = np.zeros((count, S), np.int64)
    m_tr = np.zeros((count, S), np.int64)
    mq_tr = np.zeros((count, S), np.int64)
    n_tr = np.zeros((count, S), np.int64)
    je_tr = np.zeros((count, S), np.int64)
    jz_tr = np.zeros((count, S), np.int64)
    ride_tr = np.zeros((count, S), np.uint8)
    for r in prange(count):
        seed = _derive(U64(master), U64(0), U64(start + r))
        s0, eta, xi, zeta, posY, m_idx = init_segment(
            seed, lo, n, p, rho, lam, n_off, nY)
        if s0 != OK:
            st[r] = s0
            continue
        s, qq, mm, mq, nn, je, jz, rd = kern_segment(
            seed, lo, n, p, horizon, eta, xi, zeta, posY, m_idx, n_off,
            stimes, vcols)
        st[r] = s
        for k in range(S):
            q_tr[r, k] = qq[k]
            m_tr[r, k] = mm[k]
            mq_tr[r, k] = mq[k]
            n_tr[r, k] = nn[k]
            je_tr[r, k] = je[k]
            jz_tr[r, k] = jz[k]
            ride_tr[r, k] = rd[k]
    return st, q_tr, m_tr, mq_tr, n_tr, je_tr, jz_tr, ride_tr
