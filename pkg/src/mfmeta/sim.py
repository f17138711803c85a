"""Exact stochastic simulation of the finite-N block model.

Aggregated Gillespie: the state is the integer count of nodes of each
colour in every (block, category) component, and there is one channel per
(component, edge) with propensity ``count[q, z] * rate``.  Replica ``k`` of
an ensemble uses seed ``base_seed + k``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels as K
from .model import ModelError, check_vector

__all__ = [
    "PopulationCounts",
    "TrajectoryRecord",
    "Ball",
    "ExitResult",
    "HittingChain",
    "counts_from_fractions",
    "simulate",
    "simulate_terminal",
    "simulate_pernode",
    "snapshots",
    "occupation_times",
    "exit_time",
    "hitting_chain",
    "hitting_chain_from_path",
    "path_log_likelihood",
    "run_replicas",
]

_CHUNK = 1 << 18


@dataclass
class PopulationCounts:
    """Integer colour counts per component; rows sum to the component sizes."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.array(self.counts, dtype=np.int64)
        if np.any(self.counts < 0) or np.any(self.sizes < 1):
            raise ModelError("counts must be nonnegative with at least one node per component")

    @property
    def sizes(self):
        return self.counts.sum(axis=1)

    @property
    def n_nodes(self):
        return int(self.counts.sum())

    def fractions(self):
        return self.counts / self.sizes[:, None]

    def copy(self):
        return PopulationCounts(self.counts.copy())


def _largest_remainder(target, total):
    base = np.floor(target).astype(np.int64)
    short = total - base.sum()
    order = np.argsort(-(target - base), kind="stable")
    base[order[:short]] += 1
    return base


def counts_from_fractions(m, nu, N):
    """Round a target empirical vector onto a population of ``N`` nodes.

    Component sizes follow ``N * alpha_j * p_j`` and colour counts follow
    ``size * nu``; both use largest-remainder rounding with ties broken by
    the lower index.
    """
    nu = check_vector(nu, *m.shape)
    sizes = _largest_remainder(N * m.weights, int(N))
    if np.any(sizes < 1):
        raise ModelError(f"N={N} leaves a component without nodes")
    counts = np.stack([_largest_remainder(s * row, int(s)) for s, row in zip(sizes, nu)])
    return PopulationCounts(counts)


def _as_counts(m, start, N=None):
    if isinstance(start, PopulationCounts):
        return start.counts.copy()
    arr = np.asarray(start)
    if arr.dtype.kind in "iu":
        return PopulationCounts(arr).counts.copy()
    if N is None:
        raise ModelError("N is required when starting from fractions")
    return counts_from_fractions(m, arr, N).counts.copy()


@dataclass(frozen=True)
class Ball:
    """Closed L-infinity ball around ``center``."""

    center: np.ndarray
    radius: float

    def contains(self, x):
        return float(np.abs(np.asarray(x) - self.center).max()) <= self.radius


_NO_BALLS = (np.zeros((1, 1, 1)), np.zeros(1))


# -- interpreted path for callable rate families -------------------------
def _advance_python(m, counts, t0, t_max, max_events, rng, mode, centers, radii, rec_t, rec_c, record):
    src, dst = m.graph.src, m.graph.dst
    ne = src.size
    sizes = counts.sum(axis=1)
    t, n = t0, 0

    def stop(frac):
        return K._stop_index(frac, mode, centers, radii)

    frac = counts / sizes[:, None]
    k = stop(frac)
    if k >= 0:
        return t, n, K.HIT, k
    while True:
        if n >= max_events:
            return t, n, K.BUDGET, -1
        prop = counts[:, src] * m.edge_rates(frac)
        total = prop.sum()
        if total <= 0:
            return t_max, n, K.ABSORBED, -1
        dt = -np.log(K.u01(rng)) / total
        if t + dt > t_max:
            return t_max, n, K.HORIZON, -1
        t += dt
        cum = np.cumsum(prop.ravel())
        c = int(min(np.searchsorted(cum, K.u01(rng) * total), cum.size - 1))
        q, e = divmod(c, ne)
        counts[q, src[e]] -= 1
        counts[q, dst[e]] += 1
        frac = counts / sizes[:, None]
        if record:
            rec_t[n] = t
            rec_c[n] = c
        n += 1
        k = stop(frac)
        if k >= 0:
            return t, n, K.HIT, k


def _advance(m, counts, t0, t_max, max_events, rng, mode=K.NONE, centers=None, radii=None,
             rec_t=None, rec_c=None):
    if centers is None:
        centers, radii = _NO_BALLS
    record = rec_t is not None
    if not record:
        rec_t, rec_c = np.zeros(1), np.zeros(1, dtype=np.int64)
    centers = np.ascontiguousarray(centers, dtype=float)
    radii = np.ascontiguousarray(radii, dtype=float)
    if m.rates.parametric:
        out = K.advance(counts, float(t0), float(t_max), int(max_events), m.kernel_tables(), rng,
                        int(mode), centers, radii, rec_t, rec_c, record)
    else:
        out = _advance_python(m, counts, float(t0), float(t_max), int(max_events), rng, int(mode),
                              centers, radii, rec_t, rec_c, record)
    t, n, status, k = out
    return float(t), int(n), int(status), int(k)


# -- trajectories --------------------------------------------------------
@dataclass
class TrajectoryRecord:
    """Event log of one aggregated run.

    ``codes[i] = q * E + e`` encodes the component ``q`` (block ``q // 2``,
    category ``q % 2``) and the edge index ``e`` of the i-th event.
    """

    initial: np.ndarray
    times: np.ndarray
    codes: np.ndarray
    horizon: float
    src: np.ndarray
    dst: np.ndarray
    seed: int = 0
    _states: np.ndarray = field(default=None, repr=False)

    @property
    def n_events(self):
        return self.times.size

    @property
    def component(self):
        return self.codes // self.src.size

    @property
    def block(self):
        return self.component // 2

    @property
    def category(self):
        return self.component % 2

    @property
    def color_from(self):
        return self.src[self.codes % self.src.size]

    @property
    def color_to(self):
        return self.dst[self.codes % self.src.size]

    @property
    def sizes(self):
        return self.initial.sum(axis=1)

    def count_states(self):
        """Integer counts after each event, shape ``(n_events + 1, 2r, K)``."""
        if self._states is None:
            n = self.n_events
            delta = np.zeros((n + 1,) + self.initial.shape, dtype=np.int64)
            idx = np.arange(1, n + 1)
            np.add.at(delta, (idx, self.component, self.color_from), -1)
            np.add.at(delta, (idx, self.component, self.color_to), 1)
            delta[0] = self.initial
            self._states = np.cumsum(delta, axis=0)
        return self._states

    def states(self):
        """Empirical vectors after each event (index 0 is the initial state)."""
        return self.count_states() / self.sizes[:, None]

    def empirical_at(self, t):
        """Right-continuous empirical vector at time(s) ``t``."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        return self.states()[idx]

    def final_counts(self):
        return self.count_states()[-1]


def simulate(m, start, T, seed, N=None, max_events=None):
    """Record every event of one aggregated run on ``[0, T]``.

    ``start`` is either integer counts or an empirical vector (then ``N`` is
    required).  ``max_events`` caps the log; the run is truncated there.
    """
    counts = _as_counts(m, start, N)
    initial = counts.copy()
    rng = K.rng_state(seed)
    times, codes = [], []
    t, total = 0.0, 0
    cap = np.inf if max_events is None else int(max_events)
    while True:
        chunk = int(min(_CHUNK, cap - total))
        if chunk <= 0:
            break
        rt, rc = np.empty(chunk), np.empty(chunk, dtype=np.int64)
        t, n, status, _ = _advance(m, counts, t, T, chunk, rng, rec_t=rt, rec_c=rc)
        times.append(rt[:n])
        codes.append(rc[:n])
        total += n
        if status != K.BUDGET:
            break
    return TrajectoryRecord(initial, np.concatenate(times), np.concatenate(codes), float(T),
                            m.graph.src, m.graph.dst, int(seed))


def simulate_terminal(m, start, T, seed, N=None):
    """Counts at time ``T`` without recording the path."""
    counts = _as_counts(m, start, N)
    _advance(m, counts, 0.0, T, 1 << 62, K.rng_state(seed))
    return counts


def simulate_pernode(m, start, T, seed, N=None):
    """Reference per-node simulator (one clock per node and edge).

    Only meant for validating the aggregated sampler at small ``N``.
    """
    counts = _as_counts(m, start, N)
    comp = np.repeat(np.arange(counts.shape[0]), counts.sum(axis=1))
    colors = np.concatenate([np.repeat(np.arange(counts.shape[1]), row) for row in counts])
    K.pernode_advance(colors.astype(np.int64), comp.astype(np.int64), counts, float(T),
                      m.kernel_tables(), K.rng_state(seed))
    return counts


def snapshots(m, start, times, seed, N=None):
    """Empirical vectors at the increasing ``times`` of a single run."""
    counts = _as_counts(m, start, N)
    times = np.asarray(times, dtype=float)
    out = np.empty((times.size,) + counts.shape)
    if m.rates.parametric:
        K.snapshots(counts, times, m.kernel_tables(), K.rng_state(seed), out)
        return out
    rng = K.rng_state(seed)
    t = 0.0
    for i, ti in enumerate(times):
        t, _, _, _ = _advance(m, counts, t, ti, 1 << 62, rng)
        out[i] = counts / counts.sum(axis=1, keepdims=True)
    return out


def occupation_times(m, start, T, centers, radii, seed, N=None):
    """Time spent in each closed ball over ``[0, T]`` by one run.

    Returns ``(occ, n_events)`` where ``occ[k]`` is the time in ball ``k``
    (the first containing ball wins if they overlap) and ``occ[-1]`` the
    time outside every ball.
    """
    counts = _as_counts(m, start, N)
    centers = np.ascontiguousarray(centers, dtype=float)
    radii = np.ascontiguousarray(radii, dtype=float)
    occ = np.zeros(centers.shape[0] + 1)
    rng = K.rng_state(seed)
    if m.rates.parametric:
        n = K.occupation(counts, float(T), m.kernel_tables(), rng, centers, radii, occ)
        return occ, int(n)
    t, n = 0.0, 0
    while t < T:
        frac = counts / counts.sum(axis=1, keepdims=True)
        k = K._stop_index(frac, K.ENTER_ANY, centers, radii)
        t1, k1, _, _ = _advance(m, counts, t, T, 1, rng)
        occ[k if k >= 0 else -1] += t1 - t
        t, n = t1, n + k1
    return occ, n


# -- exit and hitting times ----------------------------------------------
@dataclass(frozen=True)
class ExitResult:
    """Exit time, or ``time=None`` with ``exhausted=True`` if the budget ran out."""

    time: float | None
    n_events: int
    exhausted: bool
    final: np.ndarray


def exit_time(m, start, domain, seed, N=None, t_max=np.inf, max_events=1 << 40):
    """First time the process leaves ``domain``.

    ``domain`` is a :class:`Ball` (compiled path) or a predicate on the
    empirical vector (checked after every event).  A domain that is never
    left returns ``exhausted=True`` once ``t_max`` or ``max_events`` is hit.
    """
    counts = _as_counts(m, start, N)
    rng = K.rng_state(seed)
    if isinstance(domain, Ball):
        t, n, status, _ = _advance(m, counts, 0.0, t_max, max_events, rng, K.EXIT_BALL,
                                   domain.center[None], np.array([domain.radius]))
        done = status == K.HIT
        return ExitResult(t if done else None, n, not done, counts)
    sizes = counts.sum(axis=1, keepdims=True)
    if not domain(counts / sizes):
        return ExitResult(0.0, 0, False, counts)
    t, n = 0.0, 0
    while n < max_events:
        t, k, status, _ = _advance(m, counts, t, t_max, 1, rng)
        n += k
        if status != K.BUDGET:
            break
        if not domain(counts / sizes):
            return ExitResult(t, n, False, counts)
    return ExitResult(None, n, True, counts)


@dataclass
class HittingChain:
    """Successive visits to the small balls around the compacts.

    ``tau[n]`` is the n-th entry time into some small ball, ``index[n]`` its
    compact and ``sigma[n]`` the preceding entry time into the region
    outside every large ball (``sigma[0]`` is nan).
    """

    tau: np.ndarray
    index: np.ndarray
    sigma: np.ndarray
    truncated: bool


def _chain_balls(centers, r0, r1):
    centers = np.asarray(centers, dtype=float)
    n = centers.shape[0]
    return centers, np.full(n, float(r0)), np.full(n, float(r1))


def hitting_chain(m, start, centers, r0, r1, n_steps, seed, N=None, t_max=np.inf, max_events=1 << 40):
    """Simulate the embedded chain of visits to the ``r1``-balls.

    Starts by waiting for the first entry into an ``r1``-ball, then
    alternates: leave every ``r0``-ball, re-enter some ``r1``-ball.
    """
    centers, R0, R1 = _chain_balls(centers, r0, r1)
    counts = _as_counts(m, start, N)
    rng = K.rng_state(seed)
    budget = int(max_events)
    t, n, status, k = _advance(m, counts, 0.0, t_max, budget, rng, K.ENTER_ANY, centers, R1)
    budget -= n
    tau, idx, sig = [], [], []
    if status != K.HIT:
        return HittingChain(np.array(tau), np.array(idx, dtype=int), np.array(sig), True)
    tau.append(t)
    idx.append(k)
    sig.append(np.nan)
    for _ in range(n_steps):
        t, n, status, _ = _advance(m, counts, t, t_max, budget, rng, K.LEAVE_ALL, centers, R0)
        budget -= n
        if status != K.HIT:
            break
        s = t
        t, n, status, k = _advance(m, counts, t, t_max, budget, rng, K.ENTER_ANY, centers, R1)
        budget -= n
        if status != K.HIT:
            break
        tau.append(t)
        idx.append(k)
        sig.append(s)
    truncated = len(tau) < n_steps + 1
    return HittingChain(np.array(tau), np.array(idx, dtype=int), np.array(sig), truncated)


def hitting_chain_from_path(times, states, centers, r0, r1):
    """The same chain computed from a given piecewise-constant path.

    ``states[i]`` holds on ``[times[i], times[i + 1])``.
    """
    centers, R0, R1 = _chain_balls(centers, r0, r1)
    states = np.asarray(states, dtype=float)
    d = np.abs(states[:, None] - centers[None]).max(axis=(-2, -1))
    in_small = d <= R1
    outside = (d >= R0).all(axis=1)
    tau, idx, sig = [], [], []
    phase = 0
    s = np.nan
    for i in range(states.shape[0]):
        if phase == 0:
            hit = np.flatnonzero(in_small[i])
            if hit.size:
                tau.append(times[i])
                idx.append(int(hit[0]))
                sig.append(s)
                phase = 1
        elif outside[i]:
            s = times[i]
            phase = 0
    return HittingChain(np.array(tau), np.array(idx, dtype=int), np.array(sig), phase == 1)


# -- likelihood ----------------------------------------------------------
def path_log_likelihood(rec, m):
    """Log Radon-Nikodym derivative against independent unit-rate nodes.

    Returns ``N * h``: the sum over events of ``log rate`` at the state just
    before the event, minus the time integral of
    ``total propensity - number of active unit clocks``.  The integrand is
    piecewise constant between events, so the integral is exact.
    """
    states = rec.states()
    counts = rec.count_states()
    lam = m.edge_rates(states)                       # (n+1, 2r, E)
    src = m.graph.src
    prop = (counts[:, :, src] * lam).sum(axis=(1, 2))
    clocks = counts[:, :, src].sum(axis=(1, 2))
    t = np.concatenate([[0.0], rec.times, [rec.horizon]])
    integral = np.sum((prop - clocks) * np.diff(t))
    n = rec.n_events
    if n == 0:
        return -integral
    e = rec.codes % src.size
    jump = np.log(lam[np.arange(n), rec.component, e]).sum()
    return jump - integral


def run_replicas(fn: Callable, base_seed, n, threads=1):
    """Evaluate ``fn(seed)`` for seeds ``base_seed + k``, k < n, in order."""
    seeds = [int(base_seed) + k for k in range(n)]
    if threads <= 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, seeds))
