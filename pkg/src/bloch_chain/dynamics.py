"""Event-driven specular billiard dynamics in the periodic channel.

A unit-speed point particle flies on straight lines between specular
reflections off the two curved walls.  Collisions are located exactly (to
~1e-14) by safe advancement along the ray: with ``F(s)`` the signed vertical
clearance from one wall and ``C2`` a bound on ``|F''|``, the quadratic lower
bound ``F + F' h - C2 h^2 / 2`` gives a step that can never jump over a root,
and near a transverse hit it reduces to a Newton step from the free side.

The longitudinal coordinate ``x`` is kept unwrapped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import LOWER, UPPER, WaveguideProfile, _wall_index

log = logging.getLogger(__name__)

GRAZE_TOL = 1e-10
ROOT_TOL = 1e-14
MAX_FLIGHT_CELLS = 50.0
_NO_WALL = -1


class CollisionError(RuntimeError):
    """No wall was found within the conservative flight horizon."""


@dataclass
class ParticleState:
    x: float
    y: float
    vx: float
    vy: float
    t: float = 0.0

    def reversed(self) -> "ParticleState":
        return ParticleState(self.x, self.y, -self.vx, -self.vy, self.t)

    @property
    def speed(self) -> float:
        return float(np.hypot(self.vx, self.vy))


@dataclass
class InitialConditions:
    """Struct-of-arrays ensemble of particle states (all at ``t = 0``)."""

    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    seed: int | None = None

    def __len__(self):
        return len(self.x)

    def __getitem__(self, i) -> ParticleState:
        return ParticleState(float(self.x[i]), float(self.y[i]), float(self.vx[i]), float(self.vy[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, index) -> "InitialConditions":
        return InitialConditions(self.x[index], self.y[index], self.vx[index], self.vy[index], self.seed)


@dataclass
class Trajectory:
    """One evolved orbit.

    ``events`` is a structured array with fields ``t, x, y, vx, vy, wall``;
    the velocity stored with each event is the post-reflection one.
    """

    initial: ParticleState
    events: np.ndarray
    final: ParticleState
    grazing: int = 0

    @property
    def n_collisions(self) -> int:
        return len(self.events)

    def free_flights(self) -> np.ndarray:
        """Durations of the flights between consecutive events (inner ones only)."""
        return np.diff(self.events["t"])

    def to_csv(self, path) -> None:
        """Debug dump, one row ``t, x, y, vx, vy`` per event (initial and final included)."""
        rows = [(self.initial.t, self.initial.x, self.initial.y, self.initial.vx, self.initial.vy)]
        rows += [tuple(e[k] for k in ("t", "x", "y", "vx", "vy")) for e in self.events]
        rows.append((self.final.t, self.final.x, self.final.y, self.final.vx, self.final.vy))
        np.savetxt(path, np.array(rows), delimiter=",", header="t,x,y,vx,vy", comments="", fmt="%.17g")


_EVENT_DTYPE = np.dtype(
    [("t", "f8"), ("x", "f8"), ("y", "f8"), ("vx", "f8"), ("vy", "f8"), ("wall", "i8")]
)


# ---------------------------------------------------------------------------
# numba kernels; ``c`` is WaveguideProfile.coefficients


@njit(cache=True)
def _height(c, wall, x):
    q = 2.0 * np.pi / c[4]
    return c[2 * wall] + 0.5 * c[2 * wall + 1] * (1.0 + np.cos(q * x))


@njit(cache=True)
def _slope(c, wall, x):
    q = 2.0 * np.pi / c[4]
    return -0.5 * c[2 * wall + 1] * q * np.sin(q * x)


@njit(cache=True)
def _clearance(c, wall, x, y, vx, vy, s):
    """F(s) >= 0 inside the channel, and dF/ds, along the ray."""
    X = x + vx * s
    Y = y + vy * s
    if wall == 0:
        return Y - _height(c, 0, X), vy - vx * _slope(c, 0, X)
    return _height(c, 1, X) - Y, vx * _slope(c, 1, X) - vy


@njit(cache=True)
def _departing_ratio(c, wall, x, vx, vy, s):
    """F(s) / s for a ray starting exactly on ``wall``; free of cancellation."""
    q = 2.0 * np.pi / c[4]
    amp = c[2 * wall + 1]
    d = vx * s
    # h(x + d) - h(x) = -amp sin(q d / 2) sin(q (x + d / 2))
    half = 0.5 * q * d
    if abs(half) < 1e-8:
        sinc = 1.0 - half * half / 6.0
    else:
        sinc = np.sin(half) / half
    mean_slope = -amp * 0.5 * q * sinc * np.sin(q * (x + 0.5 * d))
    dh_over_s = vx * mean_slope
    if wall == 0:
        return vy - dh_over_s
    return dh_over_s - vy


@njit(cache=True)
def _first_root(c, wall, x, y, vx, vy, cap, departing):
    """Smallest s in (0, cap) with F(s) = 0, or inf."""
    q = 2.0 * np.pi / c[4]
    c2 = vx * vx * 0.5 * abs(c[2 * wall + 1]) * q * q
    s = 0.0
    if departing:
        # first-order safe steps on F(s)/s, whose slope is bounded by c2 / 2
        if c2 == 0.0:
            return np.inf
        for _ in range(400):
            g = _departing_ratio(c, wall, x, vx, vy, s)
            if g <= ROOT_TOL:
                return s if s > 0.0 else np.inf
            if s * g > 1e-6:
                break
            s += g / c2
            if s >= cap:
                return np.inf
    for _ in range(10000):
        if s >= cap:
            return np.inf
        f, df = _clearance(c, wall, x, y, vx, vy, s)
        if f <= ROOT_TOL:
            return s
        if c2 > 0.0:
            h = (df + np.sqrt(df * df + 2.0 * c2 * f)) / c2
        elif df < 0.0:
            h = f / (-df)
        else:
            return np.inf
        if h < 1e-16:
            return s
        s += h
    return np.inf


@njit(cache=True)
def _next_collision(c, x, y, vx, vy, last_wall, cap):
    s_lo = _first_root(c, 0, x, y, vx, vy, cap, last_wall == 0)
    s_up = _first_root(c, 1, x, y, vx, vy, min(cap, s_lo), last_wall == 1)
    if s_up < s_lo:
        return s_up, 1
    if s_lo < np.inf:
        return s_lo, 0
    return np.inf, -1


@njit(cache=True)
def _reflect(c, wall, x, vx, vy):
    """Specular reflection; returns (vx', vy', grazing flag)."""
    s = _slope(c, wall, x)
    inv = 1.0 / np.sqrt(1.0 + s * s)
    if wall == 0:
        nx, ny = -s * inv, inv
    else:
        nx, ny = s * inv, -inv
    vn = vx * nx + vy * ny
    grazing = abs(vn) < GRAZE_TOL
    wx = vx - 2.0 * vn * nx
    wy = vy - 2.0 * vn * ny
    if grazing:
        # push off the wall so the next flight starts strictly inward
        wn = wx * nx + wy * ny
        wx += (GRAZE_TOL - wn) * nx
        wy += (GRAZE_TOL - wn) * ny
    norm = np.sqrt(wx * wx + wy * wy)
    return wx / norm, wy / norm, grazing


@njit(cache=True)
def _run_ensemble(c, x0, y0, vx0, vy0, times, max_flight):
    """Sample x(t) and vx(t) at sorted checkpoint ``times`` for every particle."""
    npart = x0.shape[0]
    nt = times.shape[0]
    xs = np.empty((npart, nt))
    vxs = np.empty((npart, nt))
    collisions = np.zeros(npart, dtype=np.int64)
    grazing = np.zeros(npart, dtype=np.int64)
    longest = np.zeros(npart)
    failed = np.zeros(npart, dtype=np.int64)
    t_end = times[nt - 1]
    for p in range(npart):
        x = x0[p]
        y = y0[p]
        vx = vx0[p]
        vy = vy0[p]
        t = 0.0
        wall = -1
        ci = 0
        last_hit = -1.0
        while ci < nt:
            remaining = t_end - t
            cap = min(remaining, max_flight)
            s, w = _next_collision(c, x, y, vx, vy, wall, cap)
            if w < 0:
                if remaining > max_flight:
                    failed[p] = 1
                    break
                s = remaining
            t_next = t + s
            # without a further hit every remaining checkpoint lies on this flight
            while ci < nt and (w < 0 or times[ci] <= t_next):
                dt = times[ci] - t
                xs[p, ci] = x + vx * dt
                vxs[p, ci] = vx
                ci += 1
            if w < 0:
                break
            x += vx * s
            t = t_next
            y = _height(c, w, x)
            vx, vy, g = _reflect(c, w, x, vx, vy)
            grazing[p] += g
            collisions[p] += 1
            if last_hit >= 0.0 and t - last_hit > longest[p]:
                longest[p] = t - last_hit
            last_hit = t
            wall = w
        if failed[p]:
            for j in range(ci, nt):
                xs[p, j] = np.nan
                vxs[p, j] = np.nan
    return xs, vxs, collisions, grazing, longest, failed


# ---------------------------------------------------------------------------
# public API


def sample_initial_conditions(profile: WaveguideProfile, count: int, seed: int) -> InitialConditions:
    """Uniform sample of the unit-speed shell over one cell.

    Positions are uniform over the cell area (rejection against the walls),
    velocity angles uniform on ``[0, 2 pi)``.  Deterministic for a fixed seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    ylo, yhi = profile.y_range
    half = 0.5 * profile.L
    xs, ys = [], []
    need = count
    while need > 0:
        batch = int(need * (yhi - ylo) * profile.L / profile.cell_area * 1.2) + 16
        x = rng.uniform(-half, half, batch)
        y = rng.uniform(ylo, yhi, batch)
        keep = (y > profile.lower(x)) & (y < profile.upper(x))
        xs.append(x[keep][:need])
        ys.append(y[keep][:need])
        need -= len(xs[-1])
    phi = rng.uniform(0.0, 2.0 * np.pi, count)
    return InitialConditions(np.concatenate(xs), np.concatenate(ys), np.cos(phi), np.sin(phi), seed)


def _max_flight(profile: WaveguideProfile) -> float:
    return MAX_FLIGHT_CELLS * profile.L


def next_collision(profile: WaveguideProfile, state: ParticleState, last_wall=None, horizon=None):
    """Time of flight to the next wall hit.

    Returns ``(time_of_flight, wall_name, (x, y))``.  ``last_wall`` names the
    wall the state currently sits on (after a reflection), so that the
    departure point itself is not reported as a hit.

    Raises
    ------
    CollisionError
        If no wall is met within ``horizon`` (default: 50 cell lengths).
    """
    cap = _max_flight(profile) if horizon is None else float(horizon)
    lw = _NO_WALL if last_wall is None else _wall_index(last_wall)
    s, w = _next_collision(profile.coefficients, state.x, state.y, state.vx, state.vy, lw, cap)
    if w < 0:
        raise CollisionError(
            f"no wall within flight horizon {cap:g} from state {state} (degenerate or escaping ray)"
        )
    x = state.x + state.vx * s
    return s, ("lower", "upper")[w], (x, state.y + state.vy * s)


def reflect(profile: WaveguideProfile, state: ParticleState, wall) -> ParticleState:
    """Specular reflection ``v' = v - 2 (v.n) n`` at a wall point (position unchanged)."""
    w = _wall_index(wall)
    vx, vy, grazing = _reflect(profile.coefficients, w, state.x, state.vx, state.vy)
    if grazing:
        log.warning("grazing reflection at x=%.12g on %s wall", state.x, ("lower", "upper")[w])
    return ParticleState(state.x, state.y, vx, vy, state.t)


def evolve(profile: WaveguideProfile, state: ParticleState, horizon_time: float,
           max_events: int = 1_000_000, last_wall=None) -> Trajectory:
    """Chain collisions and reflections until ``t = horizon_time`` exactly."""
    if not horizon_time > 0:
        raise ValueError("horizon_time must be positive")
    lw = _NO_WALL if last_wall is None else _wall_index(last_wall)
    c = profile.coefficients
    ev, x, y, vx, vy, t, grazing, status = _evolve_events_from(
        c, state.x, state.y, state.vx, state.vy, float(horizon_time), max_events, _max_flight(profile), lw
    )
    if status == 1:
        raise CollisionError(f"no wall within flight horizon from state {state}")
    if status == 2:
        raise RuntimeError(f"more than {max_events} collisions before t={horizon_time}")
    if grazing:
        log.warning("%d grazing reflections in trajectory from %s", grazing, state)
    events = np.empty(len(ev), dtype=_EVENT_DTYPE)
    for j, name in enumerate(_EVENT_DTYPE.names):
        events[name] = ev[:, j]
    events["t"] += state.t
    final = ParticleState(x, y, vx, vy, state.t + t)
    return Trajectory(state, events, final, int(grazing))


@njit(cache=True)
def _evolve_events_from(c, x, y, vx, vy, horizon, max_events, max_flight, wall):
    events = np.empty((max_events, 6))
    n = 0
    t = 0.0
    grazing = 0
    status = 0
    while True:
        remaining = horizon - t
        cap = min(remaining, max_flight)
        s, w = _next_collision(c, x, y, vx, vy, wall, cap)
        if w < 0:
            if remaining > max_flight:
                status = 1
                break
            x += vx * remaining
            y += vy * remaining
            t = horizon
            break
        x += vx * s
        t += s
        y = _height(c, w, x)
        vx, vy, g = _reflect(c, w, x, vx, vy)
        grazing += g
        wall = w
        if n == max_events:
            status = 2
            break
        events[n, 0] = t
        events[n, 1] = x
        events[n, 2] = y
        events[n, 3] = vx
        events[n, 4] = vy
        events[n, 5] = w
        n += 1
    return events[:n], x, y, vx, vy, t, grazing, status


@dataclass
class EnsembleRun:
    """Checkpoint samples of an evolved ensemble."""

    times: np.ndarray
    x0: np.ndarray
    vx0: np.ndarray
    x: np.ndarray  # (particles, times)
    vx: np.ndarray
    collisions: np.ndarray
    grazing: np.ndarray
    longest_flight: np.ndarray
    seed: int | None = None

    def __len__(self):
        return self.x.shape[0]

    @property
    def displacement(self) -> np.ndarray:
        return self.x - self.x0[:, None]


def run_ensemble(profile: WaveguideProfile, initial: InitialConditions, times) -> EnsembleRun:
    """Evolve every initial condition and sample ``x`` and ``vx`` at ``times``.

    ``times`` must be sorted and nonnegative; the last one is the horizon.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) == 0 or np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("times must be a nonempty sorted array of nonnegative values")
    xs, vxs, coll, graz, longest, failed = _run_ensemble(
        profile.coefficients, initial.x, initial.y, initial.vx, initial.vy, times, _max_flight(profile)
    )
    if failed.any():
        bad = np.flatnonzero(failed)
        raise CollisionError(f"collision search failed for trajectories {bad[:10].tolist()}")
    if graz.any():
        log.info("%d grazing reflections across %d trajectories", graz.sum(), np.count_nonzero(graz))
    return EnsembleRun(times, initial.x.copy(), initial.vx.copy(), xs, vxs, coll, graz, longest, initial.seed)
