"""Currents, identity estimators, two-point function and diffusivity.

The current seen by an observer moving at speed v is the height of the
column over [[vt], [vt]+1]; with the h_0(0) = 0 normalization it equals
the signed number of particle crossings of the observer's path.  The
estimators below wire the current to the second class particle via the
exact identities: mean current t(p-q)rho(1-rho) - rho[vt], current
variance rho(1-rho) E|[vt] - Q(t)|, two-point mass rho(1-rho) P(Q(t)=i)
and diffusivity Var Q(t) / t.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .lattice import (HeightState, Params, ValidationError,
                      observer_column)


@dataclass(frozen=True)
class CurrentSample:
    v: float
    t: float
    J: int
    process_tag: str = ""


@dataclass
class TwoPointTable:
    """Estimated two-point function at one time, offsets around [V t]."""

    t: float
    offsets: np.ndarray     # i - [V^rho t]
    S: np.ndarray
    S_se: np.ndarray
    below_mass: float       # probability mass folded into the boundary bins
    above_mass: float


def current(height_state: HeightState, v: float, t: float) -> int:
    """J^(v)(t) = height of column [vt] at time t."""
    col = observer_column(v, t)
    win = height_state.config.window
    if not (win.lo <= col < win.hi):
        raise ValidationError(f"observer column {col} outside window")
    return height_state.height(col)


def mean_current_formula(params: Params, rho: float, v: float, t: float) -> float:
    """Exact stationary mean t(p-q)rho(1-rho) - rho[vt]."""
    return t * params.drift * rho * (1.0 - rho) - rho * observer_column(v, t)


def sigma2_formula(params: Params, rho: float, v: float) -> float:
    """Gaussian limit variance off the characteristic."""
    return rho * (1.0 - rho) * abs(params.drift * (1.0 - 2.0 * rho) - v)


def mean_with_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise ValidationError("need at least two samples")
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def variance_with_se(x, n_batches: int = 50) -> tuple[float, float]:
    """Sample variance with a jackknife-over-batches standard error.

    Replicas are cut into n_batches blocks; the variance estimator is
    recomputed leaving one block out at a time.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2 * n_batches:
        n_batches = max(2, x.size // 4)
    if x.size < 8:
        raise ValidationError("need at least eight samples for a variance SE")
    var = float(x.var(ddof=1))
    bounds = np.linspace(0, x.size, n_batches + 1).astype(int)
    n = float(x.size)
    s1 = float(x.sum())
    s2 = float((x * x).sum())
    loo = np.empty(n_batches)
    for b in range(n_batches):
        blk = x[bounds[b]:bounds[b + 1]]
        nb = n - blk.size
        t1 = s1 - float(blk.sum())
        t2 = s2 - float((blk * blk).sum())
        loo[b] = (t2 - t1 * t1 / nb) / (nb - 1.0)
    se = math.sqrt(max((n_batches - 1) / n_batches
                       * float(((loo - loo.mean()) ** 2).sum()), 0.0))
    return var, se


def variance_identity_estimators(j_samples, q_samples, qa_samples,
                                 rho: float, vt_col: int) -> dict:
    """Both sides of the stationary current-variance identity.

    lhs: Var J^(V)(t) from unconditioned stationary replicas; rhs and
    rhs_a: rho(1-rho) E|[Vt] - Q(t)| from the conditioned walker replicas
    (origin empty for Q, occupied for the antiparticle).
    """
    j = np.asarray(j_samples, dtype=np.float64)
    q = np.asarray(q_samples, dtype=np.float64)
    qa = np.asarray(qa_samples, dtype=np.float64)
    if min(j.size, q.size, qa.size) < 100:
        raise ValidationError("need at least 100 replicas per estimator")
    chi = rho * (1.0 - rho)
    lhs, lhs_se = variance_with_se(j)
    rm, rse = mean_with_se(np.abs(vt_col - q))
    ram, rase = mean_with_se(np.abs(vt_col - qa))
    return {
        "lhs": lhs, "lhs_se": lhs_se,
        "rhs": chi * rm, "rhs_se": chi * rse,
        "rhs_a": chi * ram, "rhs_a_se": chi * rase,
    }


def off_characteristic_variance(j_samples, t: float) -> tuple[float, float]:
    """Var(J^(v)(t))/t estimate with SE, for comparison against sigma^2."""
    if t <= 0:
        raise ValidationError("t must be positive")
    var, se = variance_with_se(np.asarray(j_samples, dtype=np.float64))
    return var / t, se / t


def two_point_estimate(q_samples, t: float, rho: float,
                       params: Params) -> TwoPointTable:
    """S(i, t) = rho(1-rho) P(Q(t) = i), tabulated around the characteristic.

    Support is truncated to |i - [V^rho t]| <= 6 t^(2/3) + 20; anything
    outside is accumulated into the boundary bins and reported.
    """
    q = np.asarray(q_samples, dtype=np.int64)
    chi = rho * (1.0 - rho)
    center = observer_column(params.drift * (1.0 - 2.0 * rho), t)
    half = int(math.ceil(6.0 * t ** (2.0 / 3.0) + 20.0))
    offsets = np.arange(-half, half + 1, dtype=np.int64)
    n = q.size
    rel = q - center
    below = float(np.mean(rel < -half))
    above = float(np.mean(rel > half))
    inside = np.clip(rel, -half, half)
    counts = np.bincount((inside + half).astype(np.int64),
                         minlength=2 * half + 1).astype(np.float64)
    phat = counts / n
    se = np.sqrt(phat * (1.0 - phat) / n)
    return TwoPointTable(t=t, offsets=offsets, S=chi * phat, S_se=chi * se,
                         below_mass=below, above_mass=above)


def diffusivity(q_samples, t: float, rho: float, params: Params) -> dict:
    """D(t) both ways: Var(Q)/t and the second moment of the two-point table.

    The table form integrates (i - V^rho t)^2 against S(i, t)/(t rho(1-rho)),
    which matches Var(Q)/t up to the squared (exactly zero-mean) centering
    error; both are returned with SEs and must agree within CIs.
    """
    if t <= 0:
        raise ValidationError("t must be positive")
    q = np.asarray(q_samples, dtype=np.float64)
    if q.std() == 0.0:
        return {"D_var": 0.0, "D_var_se": 0.0, "D_sum": 0.0, "D_sum_se": 0.0}
    var, var_se = variance_with_se(q)
    vt = params.drift * (1.0 - 2.0 * rho) * t
    dev2 = (q - vt) ** 2
    m2, m2_se = mean_with_se(dev2)
    return {
        "D_var": var / t, "D_var_se": var_se / t,
        "D_sum": m2 / t, "D_sum_se": m2_se / t,
    }


def moment_normalized(q_samples, t: float, m: float, rho: float,
                      params: Params) -> tuple[float, float]:
    """E|Q(t) - [V^rho t]|^m / t^(2m/3) with SE; m is restricted to [1, 3)."""
    if not (1.0 <= m < 3.0):
        raise ValidationError(f"moment order m={m} outside [1, 3)")
    q = np.asarray(q_samples, dtype=np.float64)
    col = observer_column(params.drift * (1.0 - 2.0 * rho), t)
    w = np.abs(q - col) ** m
    mean, se = mean_with_se(w)
    norm = t ** (2.0 * m / 3.0)
    return mean / norm, se / norm


def currents_csv(rows) -> str:
    """CSV `t,v,J_mean,J_var,J_var_se` for current summaries."""
    buf = io.StringIO()
    buf.write("t,v,J_mean,J_var,J_var_se\n")
    for r in rows:
        buf.write(f"{r['t']:.17g},{r['v']:.17g},{r['J_mean']:.17g},"
                  f"{r['J_var']:.17g},{r['J_var_se']:.17g}\n")
    return buf.getvalue()


def twopoint_csv(table: TwoPointTable) -> str:
    buf = io.StringIO()
    buf.write("t,offset,S,S_se\n")
    for k in range(table.offsets.size):
        buf.write(f"{table.t:.17g},{int(table.offsets[k])},"
                  f"{table.S[k]:.17g},{table.S_se[k]:.17g}\n")
    return buf.getvalue()


def diffusivity_csv(rows) -> str:
    buf = io.StringIO()
    buf.write("t,D,D_se\n")
    for r in rows:
        buf.write(f"{r['t']:.17g},{r['D']:.17g},{r['D_se']:.17g}\n")
    return buf.getvalue()
