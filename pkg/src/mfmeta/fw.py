"""W-graph quantities for a finite set of compacts.

A W-graph on ``L = {0..l-1}`` assigns to every ``i`` outside ``W`` exactly
one arrow ``i -> j`` (``j != i``) such that no cycles occur; following the
arrows from any node therefore ends in ``W``.  Its cost is the sum of
``cost[i, j]`` over its arrows.  Minima over W-graphs are computed by
exhaustive depth-first enumeration with branch-and-bound pruning, which is
exact and fast for the handful of compacts seen in practice (``l <= 9``).
"""
from __future__ import annotations

import numpy as np

from ._kernels import jit
from .model import ModelError

__all__ = [
    "check_cost_matrix",
    "enumerate_w_graphs",
    "graph_cost",
    "min_w_graph",
    "w_values",
    "stationary_exponents",
    "exit_rate",
    "transition_rate",
    "convergence_rate",
    "invariant_rate",
]

MAX_COMPACTS = 9


def check_cost_matrix(cost):
    """Validate a square nonnegative matrix with zero diagonal (``inf`` allowed)."""
    C = np.array(cost, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ModelError("cost matrix must be square")
    if np.any(np.isnan(C)) or np.any(C < 0):
        raise ModelError("cost matrix entries must be nonnegative")
    if np.any(np.diag(C) != 0):
        raise ModelError("cost matrix must have a zero diagonal")
    return C


def _mask(l, W):
    m = np.zeros(l, dtype=np.bool_)
    m[list(W)] = True
    return m


def enumerate_w_graphs(l, W):
    """Yield every W-graph as a tuple ``arrow`` with ``arrow[i] = -1`` for ``i`` in W."""
    inw = _mask(l, W)
    free = [i for i in range(l) if not inw[i]]
    arrow = [-1] * l

    def closes_cycle(i, j):
        k = j
        while True:
            if k == i:
                return True
            if inw[k] or arrow[k] < 0:
                return False
            k = arrow[k]

    def rec(d):
        if d == len(free):
            yield tuple(arrow)
            return
        i = free[d]
        for j in range(l):
            if j != i and not closes_cycle(i, j):
                arrow[i] = j
                yield from rec(d + 1)
                arrow[i] = -1

    yield from rec(0)


def graph_cost(cost, arrow):
    return float(sum(cost[i, j] for i, j in enumerate(arrow) if j >= 0))


def _endpoint(arrow, i):
    while arrow[i] >= 0:
        i = arrow[i]
    return i


@jit
def _min_wgraph(cost, inw, start, goal):
    l = cost.shape[0]
    nf = 0
    for k in range(l):
        if not inw[k]:
            nf += 1
    free = np.empty(nf, dtype=np.int64)
    p = 0
    for k in range(l):
        if not inw[k]:
            free[p] = k
            p += 1
    best = np.inf
    if nf == 0:
        if start < 0 or start == goal:
            return 0.0
        return np.inf
    arrow = np.full(l, -1, dtype=np.int64)
    choice = np.full(nf, -1, dtype=np.int64)
    partial = np.zeros(nf + 1)
    d = 0
    while d >= 0:
        i = free[d]
        arrow[i] = -1
        c = choice[d] + 1
        found = False
        while c < l:
            if c != i and partial[d] + cost[i, c] < best:
                k = c
                cyc = False
                while True:
                    if k == i:
                        cyc = True
                        break
                    if inw[k] or arrow[k] < 0:
                        break
                    k = arrow[k]
                if not cyc:
                    found = True
                    break
            c += 1
        if not found:
            choice[d] = -1
            d -= 1
            continue
        choice[d] = c
        arrow[i] = c
        partial[d + 1] = partial[d] + cost[i, c]
        if d + 1 == nf:
            ok = True
            if start >= 0:
                k = start
                while arrow[k] >= 0:
                    k = arrow[k]
                ok = k == goal
            if ok and partial[nf] < best:
                best = partial[nf]
        else:
            d += 1
            choice[d] = -1
    return best


def min_w_graph(cost, W, start=None, goal=None):
    """Minimum cost over W-graphs; with ``start``/``goal`` only graphs whose
    arrow chain from ``start`` ends at ``goal`` (``goal`` must lie in W)."""
    C = check_cost_matrix(cost)
    l = C.shape[0]
    if l > MAX_COMPACTS:
        raise ModelError(f"exhaustive enumeration supports at most {MAX_COMPACTS} compacts")
    W = set(int(w) for w in W)
    if not W:
        raise ModelError("W must be nonempty")
    if start is not None and goal not in W:
        raise ModelError("goal must belong to W")
    s = -1 if start is None else int(start)
    g = -1 if goal is None else int(goal)
    return float(_min_wgraph(C, _mask(l, W), s, g))


def w_values(cost):
    """``W_i = min`` cost over ``{i}``-graphs, for every ``i``."""
    C = check_cost_matrix(cost)
    return np.array([min_w_graph(C, {i}) for i in range(C.shape[0])])


def stationary_exponents(cost):
    """``s_i = W_i - min_k W_k``: exponential order of the invariant mass near compact ``i``."""
    w = w_values(cost)
    return w - w.min()


def exit_rate(cost, i, W):
    """Exponent of the mean time to reach ``W`` from compact ``i`` (``i`` not in W).

    ``min G(W)`` minus the minimum over ``G(W + {i})`` and over the graphs in
    ``G(W + {j})`` whose chain from ``i`` ends at ``j``, for ``j`` outside W and
    different from ``i``.
    """
    C = check_cost_matrix(cost)
    l = C.shape[0]
    W = set(int(w) for w in W)
    if i in W:
        raise ModelError("i must lie outside W")
    top = min_w_graph(C, W)
    cands = [min_w_graph(C, W | {i})]
    for j in range(l):
        if j not in W and j != i:
            cands.append(min_w_graph(C, W | {j}, start=i, goal=j))
    return top - min(cands)


def transition_rate(cost, i, j, W):
    """Exponent of the probability that the chain from ``i`` first enters W at ``j``.

    ``min G_{i,j}(W) - min G(W)``; always nonnegative.
    """
    C = check_cost_matrix(cost)
    W = set(int(w) for w in W)
    return min_w_graph(C, W, start=i, goal=j) - min_w_graph(C, W)


def convergence_rate(cost):
    """Exponent of the time to converge to the invariant measure.

    ``min_i min G({i}) - min_{i != j} min G({i, j})``.
    """
    C = check_cost_matrix(cost)
    l = C.shape[0]
    if l < 2:
        return 0.0
    a = min(min_w_graph(C, {i}) for i in range(l))
    b = min(min_w_graph(C, {i, j}) for i in range(l) for j in range(i + 1, l))
    return a - b


def invariant_rate(m, cost, points, xi, qpot=None, **opts):
    """Large-deviation rate of the invariant measure at ``xi``.

    ``min_l s_l + V(xi | point_l)`` where ``V`` is the quasi-potential from
    compact ``l`` to ``xi``.  ``qpot(source, target)`` may be supplied;
    otherwise it is computed with :func:`mfmeta.qpot.minimize_action`.
    """
    from .model import product_metric
    from .qpot import QpotProblem, minimize_action

    s = stationary_exponents(cost)
    best = np.inf
    for k, p in enumerate(points):
        if product_metric(p, xi) < 1e-12:
            v = 0.0
        elif qpot is not None:
            v = qpot(p, xi)
        else:
            v = minimize_action(QpotProblem(m, p, xi, **opts)).value
        best = min(best, s[k] + v)
    return best
