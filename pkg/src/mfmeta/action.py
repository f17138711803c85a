"""Large-deviation action of piecewise-linear paths.

Paths are polylines in the product of simplices.  A rate path is stored as
a constant probability flux ``J[s, q, e]`` per segment ``s``, component
``q`` and edge ``e``; the rate it induces at time ``t`` is
``J / mu_t(src(e))``.  Constant flux makes the velocity consistency
``d mu / dt = div J`` exact along every linear segment, and the action of a
segment can be integrated in closed form in ``mu`` (rates of the model are
frozen at the segment midpoint).
"""
from __future__ import annotations

from dataclasses import dataclass
from collections import deque

import numpy as np

from . import _kernels as K
from .model import ModelError, check_vector, product_metric
from .mvode import vector_field

__all__ = [
    "legendre_tau_star",
    "tau",
    "PathGrid",
    "RatePath",
    "InconsistentRatesError",
    "segment_costs",
    "action",
    "optimal_rates",
    "path_action",
    "dual_action_density",
    "dual_components",
    "velocity_to_rates",
    "constant_velocity_path",
    "rescale_path",
    "transported_mass",
]


def tau(u):
    """``exp(u) - u - 1``."""
    u = np.asarray(u, dtype=float)
    return np.expm1(u) - u


def legendre_tau_star(u):
    """Convex conjugate of ``tau``: ``(u+1)log(u+1) - u`` on ``u > -1``.

    Equals 1 at ``u = -1`` and ``+inf`` below.
    """
    u = np.asarray(u, dtype=float)
    out = np.full(u.shape, np.inf)
    inside = u > -1
    v = u[inside]
    out[inside] = (v + 1.0) * np.log1p(v) - v
    out[u == -1] = 1.0
    return out[()] if out.ndim == 0 else out


@dataclass
class PathGrid:
    """Polyline with knots ``knots[i]`` at ``times[i]``."""

    times: np.ndarray
    knots: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.knots = np.asarray(self.knots, dtype=float)
        if self.knots.shape[0] != self.times.size or self.times.size < 2:
            raise ModelError("a path needs at least two knots, one per time")
        if np.any(np.diff(self.times) <= 0):
            raise ModelError("knot times must increase")

    @property
    def durations(self):
        return np.diff(self.times)

    @property
    def n_segments(self):
        return self.times.size - 1

    @property
    def horizon(self):
        return float(self.times[-1] - self.times[0])

    def midpoints(self):
        return 0.5 * (self.knots[1:] + self.knots[:-1])

    def velocities(self):
        return np.diff(self.knots, axis=0) / self.durations[:, None, None]

    def at(self, t):
        """Linear interpolation at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        i = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.n_segments - 1)
        w = ((t - self.times[i]) / self.durations[i])[:, None, None]
        return (1 - w) * self.knots[i] + w * self.knots[i + 1]

    def refine(self, factor=2):
        """Subdivide every segment into ``factor`` equal pieces."""
        s = np.linspace(0.0, 1.0, factor + 1)[:-1]
        t = (self.times[:-1, None] + s * self.durations[:, None]).ravel()
        k = (self.knots[:-1, None] * (1 - s)[:, None, None] + self.knots[1:, None] * s[:, None, None])
        k = k.reshape((-1,) + self.knots.shape[1:])
        return PathGrid(np.append(t, self.times[-1]), np.concatenate([k, self.knots[-1:]]))


@dataclass
class RatePath:
    """Constant flux per segment: ``flux[s, q, e]`` (mass per unit time)."""

    flux: np.ndarray

    @classmethod
    def from_rates(cls, m, path, rates):
        """Build from midpoint rates ``rates[s, q, e]``."""
        mid = path.midpoints()[..., m.graph.src]
        return cls(np.asarray(rates, dtype=float) * mid)

    def rates(self, m, path):
        """Rates at the segment midpoints (``inf`` where the source is empty)."""
        mid = path.midpoints()[..., m.graph.src]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.flux > 0, self.flux / mid, 0.0)

    def refine(self, factor=2):
        return RatePath(np.repeat(self.flux, factor, axis=0))


class InconsistentRatesError(ModelError):
    """The flux does not reproduce the path velocity."""


def _xlogx_minus_x(u):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(u > 0, u * np.log(np.where(u > 0, u, 1.0)) - u, 0.0)


def meanlog(a, b):
    """Average of ``log`` over the segment ``[a, b]`` (``-inf`` if both are 0)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = b - a
    mid = 0.5 * (a + b)
    near = np.abs(d) <= 1e-6 * np.maximum(mid, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = (_xlogx_minus_x(b) - _xlogx_minus_x(a)) / np.where(near, 1.0, d)
        series = np.log(mid) - d * d / (24.0 * mid * mid)
    out = np.where(near, series, exact)
    return np.where(mid > 0, out, -np.inf)


def _divergence(m, flux):
    K_ = m.n_colors
    div = np.zeros(flux.shape[:-1] + (K_,))
    np.add.at(div, (..., m.graph.dst), flux)
    np.subtract.at(div, (..., m.graph.src), flux)
    return div


def _check_consistency(m, path, flux, tol):
    if flux.shape != (path.n_segments, m.n_components, m.graph.n_edges):
        raise InconsistentRatesError(f"flux shape {flux.shape} does not match the path")
    if np.any(flux < 0):
        raise InconsistentRatesError("negative flux")
    err = np.abs(_divergence(m, flux) - path.velocities())
    scale = 1.0 + np.abs(path.velocities())
    if np.any(err > tol * scale):
        raise InconsistentRatesError(f"velocity mismatch {err.max():.3e}")


def segment_costs(m, path, rates, check=True, tol=1e-8):
    """Weighted action of every segment of ``path`` under the flux ``rates``."""
    flux = rates.flux if isinstance(rates, RatePath) else np.asarray(rates, dtype=float)
    if check:
        _check_consistency(m, path, flux, tol)
    src = m.graph.src
    k0 = path.knots[:-1][..., src]
    k1 = path.knots[1:][..., src]
    mid = path.midpoints()
    lam = m.edge_rates(mid)
    ml = meanlog(k0, k1)
    pos = flux > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        jl = np.where(pos, flux * (np.log(np.where(pos, flux, 1.0)) - ml - np.log(lam)) - flux, 0.0)
    dens = jl + mid[..., src] * lam
    per = (dens.sum(axis=-1) * m.weights).sum(axis=-1)
    return per * path.durations


def action(m, path, rates, check=True, tol=1e-8):
    """Action of ``path`` driven by ``rates``; ``inf`` when a flux leaves an empty colour."""
    return float(segment_costs(m, path, rates, check, tol).sum())


def transported_mass(m, path, rates):
    """Weighted total mass moved along edges, ``sum_q w_q int sum_e J dt``."""
    flux = rates.flux if isinstance(rates, RatePath) else rates
    return float((flux.sum(axis=-1) * m.weights).sum(axis=-1) @ path.durations)


# -- optimal rates and the dual density ------------------------------------
def _solve_dual(m, w, v, tol=1e-10, maxit=100):
    shape = w.shape[:-1]
    w2 = np.ascontiguousarray(w.reshape(-1, w.shape[-1]))
    v2 = np.ascontiguousarray(v.reshape(-1, v.shape[-1]))
    phi = np.zeros_like(v2)
    vals, ok = K.dual_batch(w2, v2, m.graph.src, m.graph.dst, phi, tol, maxit)
    return vals.reshape(shape), phi.reshape(v.shape), ok.reshape(shape)


def _optimal_parts(m, knots, durations):
    """Shared work for the rate-free action of a polyline."""
    src, dst = m.graph.src, m.graph.dst
    k0, k1 = knots[:-1], knots[1:]
    mid = 0.5 * (k0 + k1)
    lam = m.edge_rates(mid)
    G = np.exp(meanlog(k0, k1))[..., src]
    w = G * lam
    v = (k1 - k0) / durations[:, None, None]
    vals, phi, ok = _solve_dual(m, w, v)
    extra = ((mid[..., src] - G) * lam).sum(axis=-1)
    per = ((vals + extra) * m.weights).sum(axis=-1) * durations
    flux = w * np.exp(phi[..., dst] - phi[..., src])
    return per, flux, ok


def optimal_rates(m, path):
    """Flux minimizing the action of ``path`` among all consistent fluxes."""
    _, flux, ok = _optimal_parts(m, path.knots, path.durations)
    if not ok.all():
        raise ModelError("dual solve did not converge on some segments")
    return RatePath(flux)


def path_action(m, path):
    """Rate-free action: minimum of :func:`action` over consistent fluxes."""
    per, _, ok = _optimal_parts(m, path.knots, path.durations)
    if not ok.all():
        raise ModelError("dual solve did not converge on some segments")
    return float(per.sum())


def dual_components(m, xi, theta):
    """Per-component suprema ``sup_phi <theta, phi> - sum xi(z) lam tau(dphi)``."""
    xi = check_vector(xi, *m.shape)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != m.shape or np.any(np.abs(theta.sum(axis=1)) > 1e-9):
        raise ModelError("theta must have the vector shape and zero row sums")
    w = xi[:, m.graph.src] * m.edge_rates(xi)
    v = theta + vector_field(m, xi)
    vals, _, ok = _solve_dual(m, w[None], v[None])
    if not ok.all():
        raise ModelError("dual solve did not converge")
    return vals[0]


def dual_action_density(m, xi, theta):
    """Weighted sum of :func:`dual_components` (the local action density)."""
    return float(dual_components(m, xi, theta) @ m.weights)


# -- explicit constructions --------------------------------------------------
def _bfs_paths(graph):
    """Shortest colour paths between all pairs (ties to the smaller index)."""
    adj = [sorted(b for a, b in graph.edges if a == z) for z in range(graph.n_colors)]
    paths = {}
    for s in range(graph.n_colors):
        prev = {s: None}
        dq = deque([s])
        while dq:
            u = dq.popleft()
            for v in adj[u]:
                if v not in prev:
                    prev[v] = u
                    dq.append(v)
        for t in prev:
            p, u = [], t
            while u is not None:
                p.append(u)
                u = prev[u]
            paths[(s, t)] = p[::-1]
    return paths


def velocity_to_rates(m, nu, xi, dt):
    """Fluxes moving ``nu`` to ``xi`` in time ``dt``.

    In every component the surplus of colour ``z`` is split across the
    deficit colours in proportion to their deficits.  When each surplus to
    deficit pair is an edge the move is a single linear segment.  Otherwise
    every piece follows a shortest colour path, one hop per sub-step, and the
    path has as many equal sub-steps as the longest route.
    """
    nu = check_vector(nu, *m.shape)
    xi = check_vector(xi, *m.shape)
    routes = _bfs_paths(m.graph)
    pieces = []
    for q in range(m.n_components):
        d = xi[q] - nu[q]
        moved = d[d > 0].sum()
        if moved <= 0:
            continue
        for z in np.flatnonzero(d < 0):
            for y in np.flatnonzero(d > 0):
                pieces.append((q, routes[(int(z), int(y))], -d[z] * d[y] / moved))
    hops = max([len(p) - 1 for _, p, _ in pieces], default=1)
    h = dt / hops
    eidx = {e: i for i, e in enumerate(m.graph.edges)}
    flux = np.zeros((hops, m.n_components, m.graph.n_edges))
    knots = np.repeat(nu[None], hops + 1, axis=0)
    for q, p, a in pieces:
        for s in range(len(p) - 1):
            flux[s, q, eidx[(p[s], p[s + 1])]] += a / h
        for s in range(1, hops + 1):
            here = p[min(s, len(p) - 1)]
            knots[s, q, p[0]] -= a
            knots[s, q, here] += a
    knots[-1] = xi
    knots = np.maximum(knots, 0.0)
    return PathGrid(np.linspace(0.0, dt, hops + 1), knots), RatePath(flux)


def constant_velocity_path(m, nu, xi, T, segments=1):
    """Construction of :func:`velocity_to_rates` refined into ``segments`` pieces.

    Also returns ``C1 = B / |nu - xi|`` where ``B`` is an explicit term-by-term
    upper bound on the absolute action built from the moved masses, the
    rate bounds and the step lengths.
    """
    path, rates = velocity_to_rates(m, nu, xi, T)
    if segments > 1:
        path, rates = path.refine(segments), rates.refine(segments)
    dist = float(product_metric(nu, xi))
    src = m.graph.src
    a = rates.flux * path.durations[:, None, None]
    ml = np.abs(meanlog(path.knots[:-1][..., src], path.knots[1:][..., src]))
    with np.errstate(divide="ignore", invalid="ignore"):
        per = np.where(a > 0, a * (np.abs(np.log(np.where(a > 0, a, 1.0)))
                                   + np.abs(np.log(path.durations))[:, None, None]
                                   + np.where(np.isfinite(ml), ml, 0.0)
                                   + abs(np.log(m.floor)) + abs(np.log(m.ceiling)) + 1.0), 0.0)
    B = float((per.sum(axis=-1) * m.weights).sum()) + path.horizon * m.ceiling * m.graph.n_edges
    C1 = B / dist if dist > 0 else 0.0
    return path, rates, C1


def rescale_path(path, rates, beta):
    """Run the same trajectory ``beta`` times faster: knots at ``t / beta``, flux ``beta J``."""
    return PathGrid(path.times / beta, path.knots), RatePath(rates.flux * beta)
