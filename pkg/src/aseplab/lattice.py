"""Finite-window lattice state: particle configurations and height functions.

Sites live on a window [lo, hi] of the integer lattice.  A frozen window
never fires bonds that cross its boundary, so the outside world is inert;
a ring window identifies hi+1 with lo.  Occupations are 0/1 (exclusion).
The height function h assigns a column of bricks to each bond [i, i+1]
with increments h_{i-1} - h_i equal to the occupation at site i; a right
jump over bond (i, i+1) adds one brick on column i and a left jump over
the same bond removes one.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import _rng

FROZEN = "frozen"
RING = "ring"

RIGHT = 1
LEFT = -1

# interarrival resolution degrades past this; reject longer horizons
MAX_HORIZON = float(2**40)


class ValidationError(ValueError):
    """Raised for parameter or precondition violations."""


@dataclass(frozen=True)
class Params:
    """Jump rates and densities.

    q is always 1 - p exactly; the asymmetric regime 0 <= q < p <= 1 is
    enforced (so p > 1/2).  rho and lam are optional densities attached to
    the experiment; when both are given they describe a two-density
    coupling and must satisfy lam < rho.
    """

    p: float
    rho: float | None = None
    lam: float | None = None
    q: float = field(init=False)

    def __post_init__(self):
        if not (0.5 < self.p <= 1.0):
            raise ValidationError(f"need 0 <= q < p <= 1 with p + q = 1, got p={self.p}")
        object.__setattr__(self, "q", 1.0 - self.p)
        for name in ("rho", "lam"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name}={v} outside [0, 1]")
        if self.rho is not None and self.lam is not None and not (self.lam < self.rho):
            raise ValidationError(f"need lam < rho, got lam={self.lam}, rho={self.rho}")

    @property
    def drift(self) -> float:
        return self.p - self.q

    def ratio_pq(self) -> float:
        """p/q; infinite in the totally asymmetric case."""
        return math.inf if self.q == 0.0 else self.p / self.q


def int_toward_zero(x: float) -> int:
    """First integer from x toward the origin: floor for x >= 0, ceil below."""
    if not math.isfinite(x):
        raise ValidationError(f"non-finite input {x!r}")
    return math.floor(x) if x >= 0 else math.ceil(x)


def observer_column(v: float, t: float) -> int:
    """Integer part toward zero of v*t, snapped off float boundaries.

    Rate algebra like (p - q)(1 - 2 rho) lands a hair away from exact
    rationals, and [v t] at an integer boundary would then depend on the
    rounding path; products within 1e-9 of an integer are treated as that
    integer.
    """
    x = v * t
    r = round(x)
    if abs(x - r) <= 1e-9 * max(1.0, abs(r)):
        x = float(r)
    return int_toward_zero(x)


def flux(rho: float, params: Params) -> float:
    """Stationary particle flux (p - q) * rho * (1 - rho)."""
    if not (0.0 <= rho <= 1.0):
        raise ValidationError(f"rho={rho} outside [0, 1]")
    return params.drift * rho * (1.0 - rho)


def char_speed(rho: float, params: Params) -> float:
    """Characteristic speed (p - q)(1 - 2 rho), the derivative of flux."""
    if not (0.0 <= rho <= 1.0):
        raise ValidationError(f"rho={rho} outside [0, 1]")
    return params.drift * (1.0 - 2.0 * rho)


@dataclass(frozen=True)
class Window:
    lo: int
    hi: int
    boundary: str = FROZEN

    def __post_init__(self):
        if self.lo >= self.hi:
            raise ValidationError(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if self.boundary not in (FROZEN, RING):
            raise ValidationError(f"unknown boundary mode {self.boundary!r}")

    @property
    def n_sites(self) -> int:
        return self.hi - self.lo + 1

    def index(self, site: int) -> int:
        if not (self.lo <= site <= self.hi):
            raise ValidationError(f"site {site} outside window [{self.lo}, {self.hi}]")
        return site - self.lo

    def sites(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1, dtype=np.int64)

    def doubled(self) -> "Window":
        """Window with the half-width around the center doubled."""
        half = (self.hi - self.lo + 1) // 2
        return Window(self.lo - half, self.hi + half, self.boundary)


def experiment_window(t: float, v: float = 0.0, extra_left: int = 0,
                      extra_right: int = 0, factor: int = 1) -> Window:
    """Frozen window for a horizon-t run observed near site [v*t].

    Half-width ceil(|v| t) + ceil(3 t) + 50 around the origin: information
    travels through bond events at rate one per bond, so the chance of any
    influence crossing the 3t margin is below exp(-1.29 t), and the +50
    absorbs small t.  factor=2 doubles the half-width for the truncation
    insensitivity checks; extra_left/extra_right widen the window when a
    coupling needs room for labeled particles.
    """
    w = int(math.ceil(abs(v) * t)) + int(math.ceil(3.0 * t)) + 50
    w *= factor
    return Window(-w - factor * extra_left, w + factor * extra_right, FROZEN)


@dataclass
class Configuration:
    """Occupation variables over a window, stored as a compact byte vector."""

    window: Window
    occ: np.ndarray

    def __post_init__(self):
        self.occ = np.ascontiguousarray(self.occ, dtype=np.uint8)
        if self.occ.shape != (self.window.n_sites,):
            raise ValidationError("occupancy length does not match window")
        if self.occ.max(initial=0) > 1:
            raise ValidationError("occupations must be 0 or 1")

    def __getitem__(self, site: int) -> int:
        return int(self.occ[self.window.index(site)])

    def copy(self) -> "Configuration":
        return Configuration(self.window, self.occ.copy())

    def count(self) -> int:
        return int(self.occ.sum())

    def __eq__(self, other) -> bool:
        return (isinstance(other, Configuration)
                and self.window == other.window
                and bool(np.array_equal(self.occ, other.occ)))

    @classmethod
    def empty(cls, window: Window) -> "Configuration":
        return cls(window, np.zeros(window.n_sites, dtype=np.uint8))

    @classmethod
    def from_sites(cls, window: Window, occupied) -> "Configuration":
        occ = np.zeros(window.n_sites, dtype=np.uint8)
        for s in occupied:
            occ[window.index(s)] = 1
        return cls(window, occ)


def sample_bernoulli(window: Window, rho: float, seed: int) -> Configuration:
    """Product-Bernoulli(rho) configuration from the per-site init streams."""
    if not (0.0 <= rho <= 1.0):
        raise ValidationError(f"rho={rho} outside [0, 1]")
    occ = np.zeros(window.n_sites, dtype=np.uint8)
    for k, site in enumerate(range(window.lo, window.hi + 1)):
        state = _rng.py_stream_init(seed, _rng.TAG_INIT, site & _rng._MASK)
        _, u = _rng.py_next_unit(state)
        occ[k] = 1 if u < rho else 0
    return Configuration(window, occ)


def local_jump(config: Configuration, bond: int, direction: int) -> Configuration:
    """Apply one jump attempt over bond (bond, bond+1); suppressed moves no-op.

    A right event moves a particle bond -> bond+1 when the source is
    occupied and the target vacant; a left event moves bond+1 -> bond.
    """
    win = config.window
    if win.boundary == RING:
        i = win.index(win.lo + (bond - win.lo) % win.n_sites)
        j = (i + 1) % win.n_sites
    else:
        if not (win.lo <= bond < win.hi):
            raise ValidationError(f"bond ({bond}, {bond + 1}) crosses window boundary")
        i, j = win.index(bond), win.index(bond) + 1
    out = config.copy()
    if direction == RIGHT:
        if out.occ[i] == 1 and out.occ[j] == 0:
            out.occ[i], out.occ[j] = 0, 1
    elif direction == LEFT:
        if out.occ[j] == 1 and out.occ[i] == 0:
            out.occ[j], out.occ[i] = 0, 1
    else:
        raise ValidationError(f"unknown direction {direction!r}")
    return out


@dataclass
class HeightState:
    """Height function carried as an anchor plus the particle configuration.

    anchor is the current value of h_0; all other columns are reconstructed
    from the occupations via h_{i-1} - h_i = omega_i, so the state stays
    O(1) per event.
    """

    anchor: int
    config: Configuration

    def heights(self) -> np.ndarray:
        """h_i for every column i in [lo-1, hi] (index 0 is column lo-1)."""
        win = self.config.window
        occ = self.config.occ.astype(np.int64)
        # h_{i} = h_{i-1} - omega_i  =>  cumulative sums away from column 0
        cum = np.concatenate(([0], np.cumsum(occ)))
        # cum[k] = number of particles in sites [lo, lo+k-1]
        i0 = win.index(0)
        h = -(cum - cum[i0 + 1])  # h for column i equals -(particles in (0, i])
        return self.anchor + h

    def height(self, column: int) -> int:
        win = self.config.window
        if not (win.lo - 1 <= column <= win.hi):
            raise ValidationError(f"column {column} outside window")
        return int(self.heights()[column - (win.lo - 1)])

    def apply_event(self, site: int, direction: int) -> None:
        """Jump attempt at a site-attached event; keeps height duality."""
        win = self.config.window
        bond = site if direction == RIGHT else site - 1
        if win.boundary == FROZEN and not (win.lo <= bond < win.hi):
            return
        before = self.config
        after = local_jump(before, bond, direction)
        moved = not np.array_equal(before.occ, after.occ)
        self.config = after
        if moved:
            col = bond if win.boundary == FROZEN else win.lo + (bond - win.lo) % win.n_sites
            if col == 0:
                self.anchor += 1 if direction == RIGHT else -1


def init_height(config: Configuration) -> HeightState:
    """Initial heights: h_0 = 0 and increments equal to the occupations."""
    return HeightState(anchor=0, config=config.copy())


def dump_configuration(config: Configuration, anchor: int = 0) -> str:
    win = config.window
    buf = io.StringIO()
    buf.write(f"# window lo={win.lo} hi={win.hi} boundary={win.boundary} anchor={anchor}\n")
    buf.write("site,occ\n")
    for site in range(win.lo, win.hi + 1):
        buf.write(f"{site},{config[site]}\n")
    return buf.getvalue()


def load_configuration(text: str) -> tuple[Configuration, int]:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    head = lines[0]
    if not head.startswith("# window"):
        raise ValidationError("missing window header")
    fields = dict(tok.split("=") for tok in head[2:].split()[1:])
    win = Window(int(fields["lo"]), int(fields["hi"]), fields["boundary"])
    anchor = int(fields["anchor"])
    occ = np.zeros(win.n_sites, dtype=np.uint8)
    for ln in lines[2:]:
        site_s, occ_s = ln.split(",")
        occ[win.index(int(site_s))] = int(occ_s)
    return Configuration(win, occ), anchor
