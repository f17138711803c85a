"""Deterministic mean-field limit: vector field, integration, equilibria."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelError, check_vector, product_metric, renormalize

__all__ = [
    "vector_field",
    "OdeSolution",
    "integrate",
    "Equilibrium",
    "CompactCatalog",
    "find_equilibria",
    "jacobian",
]


def vector_field(m, x):
    """Mean-field drift ``(A(x)^T x_q)_q``; accepts leading batch axes."""
    x = np.asarray(x, dtype=float)
    Q = m.generator(x)
    return np.einsum("...qz,...qzy->...qy", x, Q)


@dataclass
class OdeSolution:
    times: np.ndarray
    states: np.ndarray

    def at(self, t):
        """Linear interpolation between grid points."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        i = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2)
        h = self.times[i + 1] - self.times[i]
        w = ((t - self.times[i]) / h)[:, None, None]
        out = (1 - w) * self.states[i] + w * self.states[i + 1]
        return out

    @property
    def final(self):
        return self.states[-1]


def integrate(m, x0, T, dt=1e-3, reverse=False, tol=1e-6):
    """Classical RK4 with renormalization onto the simplex after each step.

    ``reverse=True`` integrates the time-reversed field.  Entries more
    negative than ``-tol`` after a step raise :class:`ModelError`.
    """
    x = check_vector(x0, *m.shape)
    n = max(1, int(round(T / dt)))
    h = T / n
    sgn = -1.0 if reverse else 1.0
    out = np.empty((n + 1,) + x.shape)
    out[0] = x

    def f(y):
        return sgn * vector_field(m, y)

    for i in range(n):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        y = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if y.min() < -tol:
            raise ModelError(f"integration left the simplex at t={(i + 1) * h:.4g} (min {y.min():.3e})")
        x = renormalize(y, tol=tol)
        out[i + 1] = x
    return OdeSolution(np.linspace(0.0, n * h, n + 1), out)


# -- equilibria ------------------------------------------------------------
def _to_free(x):
    return x[:, 1:].ravel()


def _from_free(y, shape):
    y = y.reshape(shape[0], shape[1] - 1)
    return np.concatenate([1.0 - y.sum(axis=1, keepdims=True), y], axis=1)


def jacobian(m, x, h=1e-6):
    """Central-difference Jacobian of the drift in the free coordinates.

    Free coordinates drop colour 0 of every component; the result is the
    ``(2r(K-1), 2r(K-1))`` Jacobian of the reduced system.
    """
    shape = m.shape
    y0 = _to_free(x)
    J = np.empty((y0.size, y0.size))
    for i in range(y0.size):
        e = np.zeros_like(y0)
        e[i] = h
        fp = _to_free(vector_field(m, _from_free(y0 + e, shape)))
        fm = _to_free(vector_field(m, _from_free(y0 - e, shape)))
        J[:, i] = (fp - fm) / (2 * h)
    return J


def _newton(m, x, tol=1e-12, maxit=60):
    shape = m.shape
    y = _to_free(x)
    for _ in range(maxit):
        F = _to_free(vector_field(m, _from_free(y, shape)))
        if np.abs(F).max() < tol:
            return _from_free(y, shape), True
        J = jacobian(m, _from_free(y, shape))
        try:
            d = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return _from_free(y, shape), False
        step = 1.0
        f0 = np.abs(F).max()
        while step > 1e-8:
            yt = y + step * d
            xt = _from_free(yt, shape)
            if xt.min() >= -1e-12:
                Ft = _to_free(vector_field(m, np.maximum(xt, 0)))
                if np.abs(Ft).max() < f0:
                    break
            step *= 0.5
        y = yt
    x = _from_free(y, shape)
    return x, np.abs(_to_free(vector_field(m, x))).max() < 1e-9


@dataclass
class Equilibrium:
    point: np.ndarray
    stable: bool
    eigenvalues: np.ndarray


@dataclass
class CompactCatalog:
    """Equilibria with the two neighbourhood radii ``r1 < r0``."""

    items: list
    r0: float
    r1: float

    @property
    def points(self):
        return np.array([e.point for e in self.items])

    @property
    def stable_flags(self):
        return np.array([e.stable for e in self.items], dtype=bool)

    def __len__(self):
        return len(self.items)

    def stable(self):
        """Catalog restricted to stable equilibria (same radii)."""
        return CompactCatalog([e for e in self.items if e.stable], self.r0, self.r1)

    def min_separation(self):
        P = self.points
        if len(P) < 2:
            return np.inf
        d = product_metric(P[:, None], P[None])
        return d[~np.eye(len(P), dtype=bool)].min()


def _default_seeds(m):
    K = m.n_colors
    seeds = [np.repeat(np.eye(K)[z][None], m.n_components, axis=0) for z in range(K)]
    seeds.append(m.uniform())
    return seeds


def find_equilibria(m, seeds=None, T=100.0, dt=0.02, r0=None, r1=None, dedup=1e-6):
    """Locate equilibria by long integration followed by damped Newton.

    Every seed is polished twice: directly (this finds unstable points
    sitting near a seed) and after integrating to time ``T``.  Points closer
    than ``dedup`` are merged.  Stability is read off the spectral abscissa
    of the finite-difference Jacobian.  By default ``r0`` is a quarter of
    the minimum separation and ``r1 = r0 / 2``.
    """
    seeds = _default_seeds(m) if seeds is None else [check_vector(s, *m.shape) for s in seeds]
    found = []
    for s in seeds:
        cands = [s, integrate(m, s, T, dt).final]
        for c in cands:
            x, ok = _newton(m, c)
            if not ok or x.min() < -1e-9:
                continue
            x = renormalize(np.maximum(x, 0))
            if any(product_metric(x, y) < dedup for y in found):
                continue
            found.append(x)
    items = []
    for x in found:
        ev = np.linalg.eigvals(jacobian(m, x))
        items.append(Equilibrium(x, bool(ev.real.max() < 0), ev))
    items.sort(key=lambda e: (not e.stable, tuple(-e.point.ravel())))
    cat = CompactCatalog(items, 0.0, 0.0)
    sep = cat.min_separation()
    if r0 is None:
        r0 = 0.25 * sep if np.isfinite(sep) else 0.1
    if r1 is None:
        r1 = 0.5 * r0
    if not r1 < r0 or (np.isfinite(sep) and not 2 * r0 < sep):
        raise ModelError(f"need r1 < r0 < separation/2 (r0={r0}, r1={r1}, separation={sep})")
    cat.r0, cat.r1 = float(r0), float(r1)
    return cat
