"""Ready-made models used by the examples, tests and experiments."""
from __future__ import annotations

import numpy as np

from .model import BlockModel, ColorGraph, RateFamily, RateTerm, CENTRAL, PERIPHERAL

__all__ = ["bistable_model", "constant_rate_model", "random_model"]


def bistable_model(a0=0.24, a1=None, b=1.5, n_blocks=1, p_central=0.5, floor=1e-3):
    """Two-colour model with self-reinforcing switching.

    ``lambda_01 = a0 + b * m(1)**2`` and ``lambda_10 = a1 + b * m(0)**2``
    where ``m`` mixes the own central measure (weight ``p_central``) with
    the peripheral measures of all blocks (weights ``alpha_k * p_peripheral``).
    For a single block ``m`` is the block-average measure.  With ``a0 == a1``
    the model is symmetric and bistable whenever ``a0 / b < 1/4``.
    """
    a1 = a0 if a1 is None else a1
    r = n_blocks
    alpha = np.full(r, 1.0 / r)
    pc = np.full(r, p_central)
    g = ColorGraph(2, [(0, 1), (1, 0)])
    mix = {CENTRAL: [("c", p_central), ("p", 1.0 - p_central)],
           PERIPHERAL: [("c", p_central)] + [(f"p{k}", (1.0 - p_central) * alpha[k]) for k in range(r)]}
    bias, terms = {}, []
    for cat in (CENTRAL, PERIPHERAL):
        for edge, a, target in (((0, 1), a0, 1), ((1, 0), a1, 0)):
            bias[(cat, edge)] = a
            for s1, w1 in mix[cat]:
                for s2, w2 in mix[cat]:
                    terms.append(RateTerm(cat, edge, b * w1 * w2, ((s1, target), (s2, target))))
    fam = RateFamily(floor, max(a0, a1) + b, bias, terms)
    return BlockModel(alpha, pc, 1.0 - pc, g, fam)


def constant_rate_model(n_colors=2, rate=1.0, n_blocks=1, p_central=0.5, edges=None):
    """Non-interacting model with every edge rate equal to ``rate``."""
    g = ColorGraph.complete(n_colors) if edges is None else ColorGraph(n_colors, edges)
    bias = {(cat, e): rate for cat in (CENTRAL, PERIPHERAL) for e in g.edges}
    fam = RateFamily(min(rate, 1e-3), rate, bias, [])
    alpha = np.full(n_blocks, 1.0 / n_blocks)
    pc = np.full(n_blocks, p_central)
    return BlockModel(alpha, pc, 1.0 - pc, g, fam)


def random_model(rng, n_colors=3, n_blocks=1, n_terms=4, scale=1.0):
    """Random parametric model on the complete colour graph (for tests)."""
    g = ColorGraph.complete(n_colors)
    r = n_blocks
    bias = {}
    terms = []
    for cat in (CENTRAL, PERIPHERAL):
        slots = ["c", "p"] if cat == CENTRAL else ["c"] + [f"p{k}" for k in range(r)]
        for e in g.edges:
            bias[(cat, e)] = scale * rng.uniform(0.2, 1.0)
            for _ in range(rng.integers(0, n_terms + 1)):
                nf = rng.integers(1, 3)
                factors = tuple((slots[rng.integers(len(slots))], int(rng.integers(n_colors))) for _ in range(nf))
                terms.append(RateTerm(cat, e, scale * rng.uniform(0.0, 1.0), factors))
    ceiling = scale * (1.0 + n_terms)
    fam = RateFamily(1e-3, ceiling, bias, terms)
    alpha = rng.dirichlet(np.ones(r)) if r > 1 else np.ones(1)
    pc = rng.uniform(0.2, 0.8, size=r)
    return BlockModel(alpha, pc, 1.0 - pc, g, fam)
