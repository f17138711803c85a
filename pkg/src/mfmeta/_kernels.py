"""Hot loops: Gillespie stepping and the batched dual (Legendre) solve.

The kernels are compiled with numba by default.  Setting the environment
variable ``MFMETA_NUMBA=0`` before import selects the fallback: the
stepping loops then run interpreted (same source) and the dual solve uses
a vectorized numpy implementation.  Both paths consume the same random
stream, so trajectories agree between the two modes.

Random numbers come from SplitMix64, a counter-based generator: the i-th
output is a fixed bijective hash of ``seed_state + i * golden``.
"""
from __future__ import annotations

import os

import numpy as np

USE_NUMBA = os.environ.get("MFMETA_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

if USE_NUMBA:
    import numba

    def jit(fn):
        return numba.njit(cache=True, nogil=True)(fn)
else:
    def jit(fn):
        return fn

# run statuses returned by ``advance``
HORIZON, HIT, BUDGET, ABSORBED = 0, 1, 2, 3
# stopping modes
NONE, EXIT_BALL, ENTER_ANY, LEAVE_ALL = 0, 1, 2, 3

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_TWO_M53 = 1.1102230246251565e-16


def _mix_py(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def rng_state(seed):
    """Fresh generator state (a length-one uint64 array) for a 64-bit seed."""
    return np.array([_mix_py(int(seed) & _MASK)], dtype=np.uint64)


def _u01_py(state):
    s = (int(state[0]) + _GOLDEN) & _MASK
    state[0] = s
    return ((_mix_py(s) >> 11) + 0.5) * _TWO_M53


if USE_NUMBA:
    @jit
    def u01(state):
        s = state[0] + np.uint64(0x9E3779B97F4A7C15)
        state[0] = s
        z = (s ^ (s >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
        return (np.float64(z >> np.uint64(11)) + 0.5) * 1.1102230246251565e-16
else:
    u01 = _u01_py


@jit
def fill_rates(frac, tabs, out):
    """Evaluate the parametric rate family for every component and edge."""
    (src, dst, floor, bias, slots, cat, lc, le, ls, lz, lk,
     qc, qe, qsa, qza, qsb, qzb, qk) = tabs
    ncomp = frac.shape[0]
    ne = src.shape[0]
    for q in range(ncomp):
        c = cat[q]
        for e in range(ne):
            out[q, e] = bias[c, e]
        for t in range(lc.shape[0]):
            if lc[t] == c:
                out[q, le[t]] += lk[t] * frac[slots[q, ls[t]], lz[t]]
        for t in range(qc.shape[0]):
            if qc[t] == c:
                out[q, qe[t]] += qk[t] * frac[slots[q, qsa[t]], qza[t]] * frac[slots[q, qsb[t]], qzb[t]]
        for e in range(ne):
            if out[q, e] < floor:
                out[q, e] = floor


@jit
def linf(frac, center):
    d = 0.0
    for q in range(frac.shape[0]):
        for z in range(frac.shape[1]):
            v = abs(frac[q, z] - center[q, z])
            if v > d:
                d = v
    return d


@jit
def _stop_index(frac, mode, centers, radii):
    if mode == 1:
        if linf(frac, centers[0]) > radii[0]:
            return 0
        return -1
    if mode == 2:
        for k in range(centers.shape[0]):
            if linf(frac, centers[k]) <= radii[k]:
                return k
        return -1
    if mode == 3:
        for k in range(centers.shape[0]):
            if linf(frac, centers[k]) < radii[k]:
                return -1
        return 0
    return -1


@jit
def _fractions(counts):
    ncomp, K = counts.shape
    frac = np.empty((ncomp, K))
    inv = np.empty(ncomp)
    for q in range(ncomp):
        s = 0
        for z in range(K):
            s += counts[q, z]
        inv[q] = 1.0 / s
        for z in range(K):
            frac[q, z] = counts[q, z] * inv[q]
    return frac, inv


@jit
def _pick(counts, rates, src, total, target):
    ne = src.shape[0]
    nch = counts.shape[0] * ne
    acc = 0.0
    last = -1
    for c in range(nch):
        q = c // ne
        e = c - q * ne
        p = counts[q, src[e]] * rates[q, e]
        if p > 0.0:
            last = c
            acc += p
            if acc >= target:
                return c
    return last


@jit
def advance(counts, t0, t_max, max_events, tabs, rng, mode, centers, radii, rec_t, rec_c, record):
    """Aggregated Gillespie run from time ``t0`` until a stopping rule fires.

    ``counts`` is updated in place.  Returns ``(time, n_events, status, index)``
    where ``status`` is one of HORIZON, HIT, BUDGET, ABSORBED and ``index``
    identifies the ball that triggered a HIT.
    """
    src = tabs[0]
    dst = tabs[1]
    ne = src.shape[0]
    frac, inv = _fractions(counts)
    rates = np.empty((counts.shape[0], ne))
    t = t0
    n = 0
    k = _stop_index(frac, mode, centers, radii)
    if k >= 0:
        return t, n, 1, k
    while True:
        if n >= max_events:
            return t, n, 2, -1
        fill_rates(frac, tabs, rates)
        total = 0.0
        for q in range(counts.shape[0]):
            for e in range(ne):
                total += counts[q, src[e]] * rates[q, e]
        if total <= 0.0:
            return t_max, n, 3, -1
        dt = -np.log(u01(rng)) / total
        if t + dt > t_max:
            return t_max, n, 0, -1
        t += dt
        c = _pick(counts, rates, src, total, u01(rng) * total)
        q = c // ne
        e = c - q * ne
        a = src[e]
        b = dst[e]
        counts[q, a] -= 1
        counts[q, b] += 1
        frac[q, a] = counts[q, a] * inv[q]
        frac[q, b] = counts[q, b] * inv[q]
        if record:
            rec_t[n] = t
            rec_c[n] = c
        n += 1
        k = _stop_index(frac, mode, centers, radii)
        if k >= 0:
            return t, n, 1, k


@jit
def occupation(counts, t_max, tabs, rng, centers, radii, occ):
    """Accumulate the time spent in each closed ball over ``[0, t_max]``.

    ``occ[k]`` receives the time in ball ``k`` and ``occ[-1]`` the time
    outside every ball.  Returns the number of events.
    """
    src = tabs[0]
    dst = tabs[1]
    ne = src.shape[0]
    nb = centers.shape[0]
    frac, inv = _fractions(counts)
    rates = np.empty((counts.shape[0], ne))
    t = 0.0
    n = 0
    while True:
        where = nb
        for k in range(nb):
            if linf(frac, centers[k]) <= radii[k]:
                where = k
                break
        fill_rates(frac, tabs, rates)
        total = 0.0
        for q in range(counts.shape[0]):
            for e in range(ne):
                total += counts[q, src[e]] * rates[q, e]
        dt = np.inf
        if total > 0.0:
            dt = -np.log(u01(rng)) / total
        if t + dt >= t_max:
            occ[where] += t_max - t
            return n
        occ[where] += dt
        t += dt
        c = _pick(counts, rates, src, total, u01(rng) * total)
        q = c // ne
        e = c - q * ne
        counts[q, src[e]] -= 1
        counts[q, dst[e]] += 1
        frac[q, src[e]] = counts[q, src[e]] * inv[q]
        frac[q, dst[e]] = counts[q, dst[e]] * inv[q]
        n += 1


@jit
def snapshots(counts, times, tabs, rng, out):
    """Record the empirical vector at increasing ``times`` into ``out``."""
    empty_c = np.zeros((1, counts.shape[0], counts.shape[1]))
    empty_r = np.zeros(1)
    rec_t = np.zeros(1)
    rec_c = np.zeros(1, dtype=np.int64)
    t = 0.0
    n = 0
    for i in range(times.shape[0]):
        t, m, status, k = advance(counts, t, times[i], 1 << 62, tabs, rng, 0, empty_c, empty_r,
                                  rec_t, rec_c, False)
        n += m
        for q in range(counts.shape[0]):
            s = 0
            for z in range(counts.shape[1]):
                s += counts[q, z]
            for z in range(counts.shape[1]):
                out[i, q, z] = counts[q, z] / s
    return n


@jit
def pernode_advance(colors, comp, counts, t_max, tabs, rng):
    """Reference simulator: one exponential clock per node and outgoing edge."""
    src = tabs[0]
    dst = tabs[1]
    ne = src.shape[0]
    frac, inv = _fractions(counts)
    rates = np.empty((counts.shape[0], ne))
    t = 0.0
    n = 0
    nn = colors.shape[0]
    while True:
        fill_rates(frac, tabs, rates)
        total = 0.0
        for i in range(nn):
            for e in range(ne):
                if src[e] == colors[i]:
                    total += rates[comp[i], e]
        t += -np.log(u01(rng)) / total
        if t > t_max:
            return n
        target = u01(rng) * total
        acc = 0.0
        hit_i = -1
        hit_e = -1
        for i in range(nn):
            for e in range(ne):
                if src[e] == colors[i]:
                    acc += rates[comp[i], e]
                    hit_i = i
                    hit_e = e
                    if acc >= target:
                        break
            if acc >= target:
                break
        q = comp[hit_i]
        counts[q, colors[hit_i]] -= 1
        counts[q, dst[hit_e]] += 1
        frac[q, colors[hit_i]] = counts[q, colors[hit_i]] * inv[q]
        frac[q, dst[hit_e]] = counts[q, dst[hit_e]] * inv[q]
        colors[hit_i] = dst[hit_e]
        n += 1


# -- dual solve ---------------------------------------------------------
# For each batch row solve   sup_phi  sum_z v_z phi_z - sum_e w_e (exp(phi_dst - phi_src) - 1)
# with phi_0 pinned to zero.  The objective is concave; Newton with
# backtracking converges from phi = 0 whenever the supremum is finite.

@jit
def _dual_objective(phi, w, v, src, dst):
    f = 0.0
    for z in range(v.shape[0]):
        f += v[z] * phi[z]
    for e in range(src.shape[0]):
        f -= w[e] * (np.exp(phi[dst[e]] - phi[src[e]]) - 1.0)
    return f


@jit
def _dual_two(w, v, src):
    # two colours, edges 0->1 and/or 1->0: closed form for y = exp(phi_1)
    w01 = 0.0
    w10 = 0.0
    for e in range(src.shape[0]):
        if src[e] == 0:
            w01 += w[e]
        else:
            w10 += w[e]
    x = v[1]
    if (w01 <= 0.0 and x > 0.0) or (w10 <= 0.0 and x < 0.0):
        return np.inf, np.inf
    if x == 0.0 and (w01 <= 0.0 or w10 <= 0.0):
        return w01 + w10, 0.0
    s = np.sqrt(x * x + 4.0 * w01 * w10)
    if x > 0.0:
        y = (x + s) / (2.0 * w01)
    else:
        y = 2.0 * w10 / (s - x)
    val = x * np.log(y) - w01 * (y - 1.0) - w10 * (1.0 / y - 1.0)
    return val, np.log(y)


@jit
def dual_batch_loop(w, v, src, dst, phi, tol, maxit):
    """Loop version of the batched dual solve; returns (values, ok flags)."""
    B = w.shape[0]
    K = v.shape[1]
    vals = np.empty(B)
    ok = np.ones(B, dtype=np.bool_)
    g = np.empty(K)
    H = np.empty((K, K))
    trial = np.empty(K)
    for b in range(B):
        if K == 2:
            val, p1 = _dual_two(w[b], v[b], src)
            vals[b] = val
            phi[b, 0] = 0.0
            phi[b, 1] = p1
            continue
        for z in range(K):
            phi[b, z] = 0.0
        f = _dual_objective(phi[b], w[b], v[b], src, dst)
        converged = False
        for it in range(maxit):
            for z in range(K):
                g[z] = v[b, z]
                for y in range(K):
                    H[z, y] = 0.0
            scale = 0.0
            for e in range(src.shape[0]):
                a = src[e]
                c = dst[e]
                x = w[b, e] * np.exp(phi[b, c] - phi[b, a])
                g[a] += x
                g[c] -= x
                H[a, a] += x
                H[c, c] += x
                H[a, c] -= x
                H[c, a] -= x
                scale += x
            gmax = 0.0
            for z in range(1, K):
                if abs(g[z]) > gmax:
                    gmax = abs(g[z])
            if gmax <= tol * (1.0 + scale):
                converged = True
                break
            d = np.linalg.solve(H[1:, 1:], g[1:])
            slope = 0.0
            for z in range(1, K):
                slope += g[z] * d[z - 1]
            step = 1.0
            # allowance for roundoff in f so the last Newton steps are not rejected
            slack = 1e-14 * (abs(f) + scale)
            while step > 1e-12:
                trial[0] = 0.0
                for z in range(1, K):
                    trial[z] = phi[b, z] + step * d[z - 1]
                ft = _dual_objective(trial, w[b], v[b], src, dst)
                if ft >= f + 1e-4 * step * slope - slack:
                    break
                step *= 0.5
            for z in range(K):
                phi[b, z] = trial[z]
            f = ft
        vals[b] = f
        ok[b] = converged
    return vals, ok


def dual_batch_numpy(w, v, src, dst, phi, tol, maxit):
    """Vectorized numpy version of :func:`dual_batch_loop`."""
    B, K = v.shape
    phi[...] = 0.0
    if K == 2:
        w01 = w[:, src == 0].sum(axis=1)
        w10 = w[:, src == 1].sum(axis=1)
        x = v[:, 1]
        s = np.sqrt(x * x + 4.0 * w01 * w10)
        with np.errstate(divide="ignore", invalid="ignore"):
            y = np.where(x > 0, (x + s) / (2.0 * w01), 2.0 * w10 / (s - x))
            vals = x * np.log(y) - w01 * (y - 1.0) - w10 * (1.0 / y - 1.0)
            phi[:, 1] = np.log(y)
        bad = ((w01 <= 0) & (x > 0)) | ((w10 <= 0) & (x < 0))
        vals[bad] = np.inf
        phi[bad, 1] = np.inf
        flat = (x == 0) & ((w01 <= 0) | (w10 <= 0))
        vals[flat] = (w01 + w10)[flat]
        phi[flat, 1] = 0.0
        return vals, np.ones(B, dtype=bool)
    D = np.zeros((src.size, K))
    D[np.arange(src.size), dst] += 1.0
    D[np.arange(src.size), src] -= 1.0

    def objective(p, rows=slice(None)):
        return (v[rows] * p).sum(axis=1) - (w[rows] * (np.exp(p @ D.T) - 1.0)).sum(axis=1)

    f = objective(phi)
    ok = np.zeros(B, dtype=bool)
    for _ in range(maxit):
        x = w * np.exp(phi @ D.T)
        g = v - x @ D
        H = np.einsum("be,ei,ej->bij", x, D, D)
        scale = x.sum(axis=1)
        ok = np.abs(g[:, 1:]).max(axis=1) <= tol * (1.0 + scale)
        if ok.all():
            break
        d = np.zeros_like(phi)
        act = ~ok
        d[act, 1:] = np.linalg.solve(H[act][:, 1:, 1:], g[act][:, 1:, None])[..., 0]
        slope = (g * d).sum(axis=1)
        step = np.ones(B)
        slack = 1e-14 * (np.abs(f) + scale)
        trial = phi + d
        ft = objective(trial)
        need = act & (ft < f + 1e-4 * step * slope - slack)
        while need.any() and step[need].min() > 1e-12:
            step[need] *= 0.5
            trial[need] = phi[need] + step[need, None] * d[need]
            ft[need] = objective(trial[need], need)
            need = act & (ft < f + 1e-4 * step * slope - slack)
        phi[act] = trial[act]
        f[act] = ft[act]
    return f, ok


dual_batch = dual_batch_loop if USE_NUMBA else dual_batch_numpy
