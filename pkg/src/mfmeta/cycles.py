"""Hierarchy of cycles built from a matrix of transition costs.

Level 0 consists of the compacts themselves.  At each level every element
points to the element it is cheapest to reach; directed cycles of that
functional graph are merged into the elements of the next level while
elements on no cycle are carried over unchanged.  The recursion

    Vhat(pi)       = max over members k of V(k)
    V(pi1, pi2)    = Vhat(pi1) + min over k in pi1, k' in pi2 of (V(k, k') - V(k))
    V(pi)          = min over pi2 != pi1 of V(pi1, pi2)

propagates the costs.  Since every functional graph on two or more nodes
without self-loops has a cycle, each level is strictly coarser and the
hierarchy ends in a single element.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .fw import check_cost_matrix

__all__ = ["Level", "CycleHierarchy", "base_arrows", "find_cycles", "is_cycle", "build_hierarchy",
           "exit_predictions"]

TIE_TOL = 1e-12


def base_arrows(cost, tol=TIE_TOL):
    """Cheapest successor of every element (smallest index on ties).

    Returns ``(arrows, tied)`` where ``tied[i]`` flags a tie within ``tol``.
    """
    C = np.array(cost, dtype=float)
    np.fill_diagonal(C, np.inf)
    arrows = np.argmin(C, axis=1)
    lo = C[np.arange(len(C)), arrows]
    tied = (np.abs(C - lo[:, None]) <= tol).sum(axis=1) > 1
    return arrows, tied


def find_cycles(arrows):
    """Directed cycles of a functional graph, each sorted, in order of smallest member."""
    n = len(arrows)
    A = csr_matrix((np.ones(n), (np.arange(n), np.asarray(arrows))), shape=(n, n))
    k, lab = connected_components(A, directed=True, connection="strong")
    groups = [sorted(np.flatnonzero(lab == c).tolist()) for c in range(k)]
    return sorted([g for g in groups if len(g) > 1])


def _reach(arrows, i):
    out, k = set(), arrows[i]
    while k not in out:
        out.add(k)
        k = arrows[k]
    return out


def is_cycle(members, arrows):
    """Check the definition directly: closed under arrows and mutually reachable."""
    S = set(members)
    if len(S) < 2:
        return False
    if any(arrows[i] not in S for i in S):
        return False
    return all(S <= _reach(arrows, i) for i in S)


@dataclass
class Level:
    """One level: elements as groups of previous-level indices and their costs."""

    groups: list
    members: list
    vhat: np.ndarray
    exit: np.ndarray
    pair: np.ndarray
    arrows: np.ndarray
    tied: np.ndarray


@dataclass
class CycleHierarchy:
    levels: list

    @property
    def degenerate(self):
        return bool(any(lv.tied.any() for lv in self.levels))

    @property
    def depth(self):
        return len(self.levels) - 1


def _finish(groups, members, vhat, pair):
    n = len(groups)
    P = pair.copy()
    np.fill_diagonal(P, np.inf)
    ex = P.min(axis=1) if n > 1 else np.array([np.inf])
    if n > 1:
        arrows, tied = base_arrows(pair)
    else:
        arrows, tied = np.array([-1]), np.array([False])
    np.fill_diagonal(pair, 0.0)
    return Level(groups, members, vhat, ex, pair, arrows, tied)


def build_hierarchy(cost):
    """Full cycle hierarchy of a cost matrix (``inf`` entries allowed)."""
    C = check_cost_matrix(cost)
    l = C.shape[0]
    lv = _finish([[i] for i in range(l)], [(i,) for i in range(l)], np.zeros(l), C.copy())
    levels = [lv]
    while len(lv.groups) > 1:
        cycles = find_cycles(lv.arrows)
        for cyc in cycles:
            if not is_cycle(cyc, lv.arrows):
                raise AssertionError(f"component {cyc} fails the cycle definition")
        in_cycle = {k for c in cycles for k in c}
        groups = cycles + [[k] for k in range(len(lv.groups)) if k not in in_cycle]
        members = [tuple(sorted(b for k in g for b in lv.members[k])) for g in groups]
        order = np.argsort([mb[0] for mb in members], kind="stable")
        groups = [groups[i] for i in order]
        members = [members[i] for i in order]
        n = len(groups)
        vhat = np.array([lv.exit[g].max() for g in groups])
        pair = np.zeros((n, n))
        for a, ga in enumerate(groups):
            for b, gb in enumerate(groups):
                if a != b:
                    sub = lv.pair[np.ix_(ga, gb)] - lv.exit[ga][:, None]
                    pair[a, b] = vhat[a] + sub.min()
        lv = _finish(groups, members, vhat, pair)
        levels.append(lv)
    return CycleHierarchy(levels)


def exit_predictions(h, N):
    """Predicted exit behaviour of every element at population size ``N``.

    For each element: the exit exponent ``V(pi)``, the predicted mean exit
    time ``exp(N V(pi))`` and, for each other element of the same level, the
    exponent ``V(pi, pi2) - V(pi)`` of the probability of exiting towards it.
    """
    out = []
    for m, lv in enumerate(h.levels):
        for a, mb in enumerate(lv.members):
            ex = float(lv.exit[a])
            targets = {lv.members[b]: float(lv.pair[a, b] - ex)
                       for b in range(len(lv.members)) if b != a}
            out.append({
                "level": m,
                "members": mb,
                "exit_exponent": ex,
                "mean_exit_time": float(np.exp(N * ex)) if np.isfinite(ex) else np.inf,
                "target_exponents": targets,
                "vhat": float(lv.vhat[a]),
            })
    return out
