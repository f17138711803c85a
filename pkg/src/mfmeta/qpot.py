"""Quasi-potential: minimum action between two states over paths and horizons.

The path is a polyline with ``M`` segments.  Interior knots are
parametrized by per-component softmax logits and segment durations by
their logarithms, so the only constraints are box bounds on durations.
Each segment costs the rate-free action of a linear move, which depends
only on its two end knots and its duration.  That locality makes the knot
gradient cheap: central differences touch two segments per coordinate
and the whole gradient is one batched evaluation.  The duration gradient
is analytic (envelope theorem).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .action import PathGrid, RatePath, _solve_dual, meanlog
from .model import ModelError, check_vector, product_metric
from .mvode import integrate, vector_field

__all__ = ["QpotProblem", "QpotResult", "minimize_action", "compact_cost_matrix", "segment_batch"]

_EPS = 1e-10


@dataclass
class QpotProblem:
    """Inputs of :func:`minimize_action`.

    ``avoid`` lists ``(center, radius)`` balls the path must not enter.
    ``saddles`` are points used to build flow-splice initial guesses.
    ``seg_bounds`` bounds every segment duration; the horizon is their sum.
    """

    model: object
    source: np.ndarray
    target: np.ndarray
    avoid: list = field(default_factory=list)
    saddles: list = field(default_factory=list)
    n_segments: int = 16
    max_segments: int = 128
    rel_tol: float = 0.01
    seg_bounds: tuple = (1e-3, 50.0)
    n_random: int = 2
    seed: int = 0
    maxiter: int = 3000


@dataclass
class QpotResult:
    value: float
    horizon: float
    path: PathGrid
    rates: RatePath
    converged: bool
    history: list
    starts: list
    message: str = ""


def _floor(x):
    K = x.shape[-1]
    return (1.0 - K * _EPS) * x + _EPS


def segment_batch(m, k0, k1, dur):
    """Rate-free action of straight moves ``k0 -> k1`` taking time ``dur``.

    ``k0, k1`` have shape ``(B, 2r, K)``.  Returns per-segment cost, its
    derivative in the duration and the optimal flux.
    """
    src, dst = m.graph.src, m.graph.dst
    mid = 0.5 * (k0 + k1)
    lam = m.edge_rates(mid)
    G = np.exp(meanlog(k0, k1))[..., src]
    w = G * lam
    v = (k1 - k0) / dur[:, None, None]
    vals, phi, ok = _solve_dual(m, w, v)
    extra = ((mid[..., src] - G) * lam).sum(axis=-1)
    wt = m.weights
    cost = ((vals + extra) @ wt) * dur
    ham = (v * phi).sum(axis=-1) - vals
    dcost = (extra - ham) @ wt
    bad = ~ok.all(axis=-1) | ~np.isfinite(cost)
    cost = np.where(bad, np.inf, cost)
    return cost, dcost, w, phi


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class _Objective:
    def __init__(self, prob, M):
        self.p = prob
        self.m = prob.model
        self.M = M
        self.shape = self.m.shape
        self.n_knot = (M - 1) * self.shape[0] * self.shape[1]
        self.src = _floor(prob.source)
        self.dst = _floor(prob.target)
        self.rho = 0.0

    def split(self, x):
        z = x[: self.n_knot].reshape((self.M - 1,) + self.shape)
        y = x[self.n_knot:]
        return z, y

    def knots(self, z):
        inner = _floor(_softmax(z))
        return np.concatenate([self.src[None], inner, self.dst[None]])

    def penalty(self, knots):
        if not self.p.avoid or self.rho == 0.0:
            return 0.0, np.zeros_like(knots)
        pts = _sample_points(knots)
        pen = 0.0
        grad = np.zeros_like(knots)
        for c, r in self.p.avoid:
            diff = pts - c
            d = np.abs(diff).max(axis=(-2, -1))
            gap = np.maximum(0.0, r - d)
            pen += self.rho * np.sum(gap ** 2)
            # subgradient through the arg-max entry of every sampled point
            flat = diff.reshape(diff.shape[0], -1)
            rows = np.arange(flat.shape[0])
            arg = np.abs(flat).argmax(axis=1)
            g = np.zeros_like(flat)
            g[rows, arg] = -2 * self.rho * gap * np.sign(flat[rows, arg])
            g = g.reshape(pts.shape)
            grad += _spread(g, knots.shape[0])
        return pen, grad

    def __call__(self, x):
        z, y = self.split(x)
        tau = np.exp(y)
        kn = self.knots(z)
        cost, dcost, _, _ = segment_batch(self.m, kn[:-1], kn[1:], tau)
        f = cost.sum()
        if not np.isfinite(f):
            return 1e30, np.zeros_like(x)
        gy = dcost * tau
        # knot gradient by central differences in the logits
        h = 1e-6
        M, (nq, K) = self.M, self.shape
        nc = nq * K
        zz = np.repeat(z[None], 2 * nc, axis=0)
        for c in range(nc):
            zz[2 * c, :, c // K, c % K] += h
            zz[2 * c + 1, :, c // K, c % K] -= h
        inner = _floor(_softmax(zz))                        # (2nc, M-1, nq, K)
        # each perturbed knot is paired with its unperturbed neighbours
        left = np.broadcast_to(kn[:-2], inner.shape)
        right = np.broadcast_to(kn[2:], inner.shape)
        tl = np.broadcast_to(tau[:-1], (2 * nc, M - 1))
        tr = np.broadcast_to(tau[1:], (2 * nc, M - 1))
        k0 = np.concatenate([left, inner], axis=1).reshape((-1, nq, K))
        k1 = np.concatenate([inner, right], axis=1).reshape((-1, nq, K))
        tt = np.concatenate([tl, tr], axis=1).ravel()
        cs, _, _, _ = segment_batch(self.m, k0, k1, tt)
        cs = cs.reshape(2 * nc, 2, M - 1).sum(axis=1)
        with np.errstate(invalid="ignore"):
            gz = ((cs[0::2] - cs[1::2]) / (2 * h)).T.reshape(M - 1, nq, K)
        if not np.all(np.isfinite(gz)):
            return 1e30, np.zeros_like(x)
        pen, gk = self.penalty(kn)
        if pen:
            # chain rule through the softmax for the penalty part
            s = _softmax(z)
            gin = gk[1:-1] * (1.0 - K * _EPS)
            gz = gz + s * (gin - (gin * s).sum(axis=-1, keepdims=True))
        return f + pen, np.concatenate([gz.ravel(), gy])


def _sample_points(knots, n=4):
    s = np.linspace(0.0, 1.0, n, endpoint=False)
    a = knots[:-1, None]
    b = knots[1:, None]
    pts = a * (1 - s)[:, None, None] + b * s[:, None, None]
    return np.concatenate([pts.reshape((-1,) + knots.shape[1:]), knots[-1:]])


def _spread(g, n_knots, n=4):
    s = np.linspace(0.0, 1.0, n, endpoint=False)
    body = g[:-1].reshape((n_knots - 1, n) + g.shape[1:])
    out = np.zeros((n_knots,) + g.shape[1:])
    out[:-1] += (body * (1 - s)[:, None, None]).sum(axis=1)
    out[1:] += (body * s[:, None, None]).sum(axis=1)
    out[-1] += g[-1]
    return out


def _violation(prob, knots):
    if not prob.avoid:
        return 0.0
    pts = _sample_points(knots, 16)
    worst = 0.0
    for c, r in prob.avoid:
        d = np.abs(pts - c).max(axis=(-2, -1))
        worst = max(worst, float(np.max(r - d)))
    return worst


def _logits(knots):
    return np.log(np.maximum(knots, _EPS))


def _resample(points, times, M):
    """Resample a polyline to ``M`` segments equally spaced in arc length."""
    seg = np.abs(np.diff(points, axis=0)).max(axis=(-2, -1))
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0:
        return np.repeat(points[:1], M + 1, 0), np.linspace(times[0], times[-1], M + 1)
    u = np.linspace(0.0, s[-1], M + 1)
    idx = np.clip(np.searchsorted(s, u, side="right") - 1, 0, len(seg) - 1)
    w = np.where(seg[idx] > 0, (u - s[idx]) / np.where(seg[idx] > 0, seg[idx], 1), 0.0)
    pts = points[idx] * (1 - w)[:, None, None] + points[idx + 1] * w[:, None, None]
    tms = times[idx] * (1 - w) + times[idx + 1] * w
    pts[0], pts[-1] = points[0], points[-1]
    return pts, tms


def _flow_leg(m, start, goal, T=200.0, dt=0.05):
    """Forward flow from ``start`` truncated where it comes closest to ``goal``."""
    sol = integrate(m, start, T, dt)
    d = product_metric(sol.states, goal)
    i = int(np.argmin(d))
    return sol.states[: i + 1], sol.times[: i + 1]


def _initial_guesses(prob, M):
    m = prob.model
    a, b = prob.source, prob.target
    lo, hi = prob.seg_bounds
    guesses = []
    s = np.linspace(0.0, 1.0, M + 1)[:, None, None]
    guesses.append(("straight", a * (1 - s) + b * s, None))
    for sd in prob.saddles:
        sd = np.asarray(sd, dtype=float)
        pts, tms = [], []
        up, ut = _flow_leg(m, sd + 0.02 * (a - sd), a)
        pts.append(np.concatenate([a[None], up[::-1], sd[None]]))
        tms.append(np.concatenate([[0.0], ut[-1] - ut[::-1] + 1.0, [ut[-1] + 2.0]]))
        if product_metric(sd, b) > 1e-9:
            dn, dtm = _flow_leg(m, sd + 0.02 * (b - sd), b)
            t0 = tms[0][-1]
            pts.append(np.concatenate([dn, b[None]]))
            tms.append(np.concatenate([t0 + 1.0 + dtm, [t0 + dtm[-1] + 2.0]]))
        P = np.concatenate(pts)
        Tm = np.concatenate(tms)
        kn, tm = _resample(P, Tm, M)
        guesses.append(("flow-splice", kn, np.clip(np.diff(tm), lo, hi)))
    rng = np.random.default_rng(prob.seed)
    for i in range(prob.n_random):
        wp = rng.dirichlet(np.ones(m.n_colors), size=m.n_components)
        wp = 0.5 * (0.5 * (a + b)) + 0.5 * wp
        half = M // 2
        s1 = np.linspace(0.0, 1.0, half + 1)[:, None, None]
        s2 = np.linspace(0.0, 1.0, M - half + 1)[1:, None, None]
        kn = np.concatenate([a * (1 - s1) + wp * s1, wp * (1 - s2) + b * s2])
        guesses.append((f"random-{i}", kn, None))
    return guesses


def _best_common_duration(obj, z):
    lo, hi = obj.p.seg_bounds
    grid = np.exp(np.linspace(np.log(lo * 10), np.log(hi), 25))
    kn = obj.knots(z)
    vals = []
    for t in grid:
        c, _, _, _ = segment_batch(obj.m, kn[:-1], kn[1:], np.full(obj.M, t))
        vals.append(c.sum())
    return grid[int(np.nanargmin(vals))]


def _optimize(prob, M, knots, durations):
    obj = _Objective(prob, M)
    lo, hi = prob.seg_bounds
    z = _logits(knots[1:-1])
    if durations is None:
        durations = np.full(M, _best_common_duration(obj, z))
    y = np.log(np.clip(durations, lo, hi))
    x = np.concatenate([z.ravel(), y])
    bounds = [(None, None)] * obj.n_knot + [(np.log(lo), np.log(hi))] * M
    stages = [1e3, 1e5, 1e7] if prob.avoid else [0.0]
    res = None
    for rho in stages:
        obj.rho = rho
        res = minimize(obj, x, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": prob.maxiter, "maxcor": 30, "ftol": 1e-13, "gtol": 1e-9})
        x = res.x
    z, y = obj.split(x)
    kn = obj.knots(z)
    tau = np.exp(y)
    cost, _, w, phi = segment_batch(prob.model, kn[:-1], kn[1:], tau)
    value = float(cost.sum())
    viol = _violation(prob, kn)
    if viol > 1e-6:
        value = np.inf
    flux = w * np.exp(phi[..., prob.model.graph.dst] - phi[..., prob.model.graph.src])
    path = PathGrid(np.concatenate([[0.0], np.cumsum(tau)]), kn)
    return value, path, RatePath(flux), bool(res.success), str(res.message)


def minimize_action(prob):
    """Minimize the action from ``source`` to ``target`` over paths and horizons.

    Runs every initial guess at the base resolution, keeps the best, then
    doubles the number of segments until the value changes by less than
    ``rel_tol`` (or ``max_segments`` is reached).  A path that cannot avoid
    the forbidden balls gets value ``inf``.
    """
    m = prob.model
    prob.source = check_vector(prob.source, *m.shape)
    prob.target = check_vector(prob.target, *m.shape)
    for c, r in prob.avoid:
        if product_metric(c, prob.source) <= r or product_metric(c, prob.target) <= r:
            raise ModelError("an endpoint lies inside an avoided ball")
    if product_metric(prob.source, prob.target) == 0:
        path = PathGrid([0.0, prob.seg_bounds[0]], np.stack([prob.source, prob.source]))
        return QpotResult(0.0, 0.0, path, RatePath(np.zeros((1, m.n_components, m.graph.n_edges))),
                          True, [(1, 0.0)], [("identical", 0.0)])
    M = prob.n_segments
    starts = []
    best = None
    for name, kn, dur in _initial_guesses(prob, M):
        out = _optimize(prob, M, kn, dur)
        starts.append((name, out[0]))
        if best is None or out[0] < best[0]:
            best = out
    history = [(M, best[0])]
    converged = False
    while 2 * M <= prob.max_segments and np.isfinite(best[0]):
        path = best[1].refine(2)
        M *= 2
        out = _optimize(prob, M, path.knots, path.durations)
        change = abs(out[0] - best[0]) / max(abs(out[0]), 1e-12)
        best = out if out[0] <= best[0] or not np.isfinite(best[0]) else best
        history.append((M, out[0]))
        if change < prob.rel_tol:
            converged = True
            break
    value, path, rates, ok, msg = best
    return QpotResult(value, path.horizon, path, rates, converged, history, starts, msg)


def compact_cost_matrix(m, catalog, avoid_others=True, saddles=None, **opts):
    """Matrix of minimal actions between the catalog points.

    With ``avoid_others`` each transition ``i -> j`` must stay outside the
    ``r0``-balls of all other catalog points.  Unstable catalog points, or
    the explicit ``saddles``, are offered to the optimizer as flow-splice
    seeds.
    """
    P = catalog.points
    n = len(P)
    if saddles is None:
        saddles = [e.point for e in catalog.items if not e.stable]
    C = np.zeros((n, n))
    details = {}
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            avoid = [(P[k], catalog.r0) for k in range(n) if avoid_others and k not in (i, j)]
            sd = [s for s in saddles if all(product_metric(s, c) > r for c, r in avoid)]
            res = minimize_action(QpotProblem(m, P[i], P[j], avoid=avoid, saddles=sd, **opts))
            C[i, j] = res.value
            details[(i, j)] = res
    return C, details
