"""Block-structured mean-field model: colour graph, rate families, metric.

The empirical vector of a model with ``r`` blocks and ``K`` colours is an
array of shape ``(2r, K)``.  Row ``2j`` is the central measure of block ``j``
and row ``2j + 1`` the peripheral one.  Every row is a probability vector.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

__all__ = [
    "ModelError",
    "ColorGraph",
    "RateTerm",
    "RateFamily",
    "CallableRates",
    "BlockModel",
    "validate_model",
    "product_metric",
    "renormalize",
    "check_vector",
    "model_from_dict",
    "model_to_dict",
    "load_model",
    "save_model",
    "CENTRAL",
    "PERIPHERAL",
]

CENTRAL = 0
PERIPHERAL = 1

# Entries below this are treated as rounding noise and clamped to zero.
CLAMP_TOL = 1e-12


class ModelError(ValueError):
    """Raised for malformed models or invalid empirical vectors."""


def product_metric(a, b):
    """L-infinity distance between empirical vectors (maximum over the last two axes)."""
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    return d.max(axis=(-2, -1))


def renormalize(x, tol=CLAMP_TOL):
    """Clamp tiny negative entries to zero and rescale each row to unit mass.

    Entries below ``-tol`` raise :class:`ModelError`.
    """
    x = np.array(x, dtype=float, copy=True)
    if np.any(x < -tol):
        raise ModelError(f"negative mass {x.min():.3e} below tolerance {tol:g}")
    np.maximum(x, 0.0, out=x)
    s = x.sum(axis=-1, keepdims=True)
    if np.any(s <= 0):
        raise ModelError("row with zero total mass")
    return x / s


def check_vector(x, n_components, n_colors, tol=1e-9):
    """Validate shape and simplex constraints of an empirical vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (n_components, n_colors):
        raise ModelError(f"expected shape {(n_components, n_colors)}, got {x.shape}")
    if np.any(x < -tol) or np.any(np.abs(x.sum(axis=1) - 1.0) > tol):
        raise ModelError("rows must be probability vectors")
    return renormalize(np.maximum(x, 0.0))


@dataclass(frozen=True)
class ColorGraph:
    """Directed graph on colours ``0..K-1`` without self-loops."""

    n_colors: int
    edges: tuple

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((int(a), int(b)) for a, b in self.edges))

    @classmethod
    def complete(cls, n_colors):
        return cls(n_colors, [(a, b) for a in range(n_colors) for b in range(n_colors) if a != b])

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def src(self):
        return np.array([a for a, _ in self.edges], dtype=np.int64)

    @property
    def dst(self):
        return np.array([b for _, b in self.edges], dtype=np.int64)

    def edge_index(self, a, b):
        return self.edges.index((int(a), int(b)))

    def adjacency(self):
        A = np.zeros((self.n_colors, self.n_colors), dtype=bool)
        for a, b in self.edges:
            A[a, b] = True
        return A

    def out_degree(self):
        return self.adjacency().sum(axis=1)

    def problems(self):
        out = []
        if self.n_colors < 2:
            out.append("colour graph needs at least two colours")
        for a, b in self.edges:
            if a == b:
                out.append(f"self-loop at colour {a}")
            if not (0 <= a < self.n_colors and 0 <= b < self.n_colors):
                out.append(f"edge {(a, b)} out of range")
        if len(set(self.edges)) != len(self.edges):
            out.append("duplicate edges")
        if not out and not self.is_irreducible():
            out.append("colour graph is not irreducible")
        return out

    def is_irreducible(self):
        A = csr_matrix(self.adjacency().astype(np.int8))
        n, _ = connected_components(A, directed=True, connection="strong")
        return n == 1


@dataclass(frozen=True)
class RateTerm:
    """One additive term ``coef * prod(measure[slot][colour] for factors)``.

    Slots for central rates are ``"c"`` (own central measure) and ``"p"``
    (own peripheral measure).  Peripheral rates see ``"c"`` (own central
    measure) and ``"p0" .. "p{r-1}"`` (peripheral measure of each block,
    absolute indices).  At most two factors are allowed.
    """

    category: int
    edge: tuple
    coef: float
    factors: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "edge", (int(self.edge[0]), int(self.edge[1])))
        object.__setattr__(self, "factors", tuple((str(s), int(z)) for s, z in self.factors))


@dataclass
class RateFamily:
    """Parametric rates ``max(floor, bias + linear + quadratic terms)``.

    ``bias`` maps ``(category, edge)`` to a constant; missing keys are zero.
    ``ceiling`` is the declared upper bound.
    """

    floor: float
    ceiling: float
    bias: dict = field(default_factory=dict)
    terms: list = field(default_factory=list)

    parametric = True

    def slot_index(self, category, slot, n_blocks):
        """Map a slot name onto the internal slot numbering used by the kernels."""
        if slot == "c":
            return 0
        if category == CENTRAL:
            if slot == "p":
                return 1
        elif slot.startswith("p") and slot[1:].isdigit():
            k = int(slot[1:])
            if k < n_blocks:
                return 2 + k
        raise ModelError(f"slot {slot!r} not available for category {category}")


@dataclass
class CallableRates:
    """Rates given by Python callables.

    ``central(mu_c, mu_p)`` and ``peripheral(mu_c, mu_ps)`` return one rate
    per edge, where ``mu_ps`` has shape ``(r, K)``.  Simulation with these
    rates runs through the interpreted fallback.
    """

    central: Callable
    peripheral: Callable
    floor: float
    ceiling: float

    parametric = False


@dataclass
class BlockModel:
    """Mean-field model with ``r`` blocks of central and peripheral nodes."""

    alpha: np.ndarray
    p_central: np.ndarray
    p_peripheral: np.ndarray
    graph: ColorGraph
    rates: object

    def __post_init__(self):
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        self.p_central = np.atleast_1d(np.asarray(self.p_central, dtype=float))
        self.p_peripheral = np.atleast_1d(np.asarray(self.p_peripheral, dtype=float))
        self._tables = None
        self._dense = None

    @property
    def n_blocks(self):
        return self.alpha.size

    @property
    def n_colors(self):
        return self.graph.n_colors

    @property
    def n_components(self):
        return 2 * self.n_blocks

    @property
    def shape(self):
        return (self.n_components, self.n_colors)

    @property
    def weights(self):
        """Population share ``alpha_j * p_j`` of every component."""
        w = np.empty(self.n_components)
        w[0::2] = self.alpha * self.p_central
        w[1::2] = self.alpha * self.p_peripheral
        return w

    @property
    def category(self):
        return np.arange(self.n_components) % 2

    @property
    def floor(self):
        return float(self.rates.floor)

    @property
    def ceiling(self):
        return float(self.rates.ceiling)

    def uniform(self):
        return np.full(self.shape, 1.0 / self.n_colors)

    def from_blocks(self, central, peripheral):
        """Assemble an empirical vector from per-block central/peripheral rows."""
        x = np.empty(self.shape)
        x[0::2] = np.atleast_2d(central)
        x[1::2] = np.atleast_2d(peripheral)
        return x

    # -- rate evaluation ------------------------------------------------
    def slot_components(self):
        """Array ``(2r, 2 + r)`` mapping (component, slot) to a component index."""
        r = self.n_blocks
        out = np.full((2 * r, 2 + r), -1, dtype=np.int64)
        for j in range(r):
            out[2 * j, 0] = 2 * j
            out[2 * j, 1] = 2 * j + 1
            out[2 * j + 1, 0] = 2 * j
            for k in range(r):
                out[2 * j + 1, 2 + k] = 2 * k + 1
        return out

    def kernel_tables(self):
        """Flattened rate family for the compiled kernels."""
        if not self.rates.parametric:
            raise ModelError("compiled kernels need a parametric RateFamily")
        if self._tables is not None:
            return self._tables
        g, fam, r = self.graph, self.rates, self.n_blocks
        bias = np.zeros((2, g.n_edges))
        for (cat, edge), val in fam.bias.items():
            bias[int(cat), g.edge_index(*edge)] = float(val)
        lin, quad = [], []
        for t in fam.terms:
            e = g.edge_index(*t.edge)
            slots = [(fam.slot_index(t.category, s, r), z) for s, z in t.factors]
            if len(slots) == 0:
                bias[t.category, e] += t.coef
            elif len(slots) == 1:
                lin.append((t.category, e, slots[0][0], slots[0][1], t.coef))
            elif len(slots) == 2:
                quad.append((t.category, e, slots[0][0], slots[0][1], slots[1][0], slots[1][1], t.coef))
            else:
                raise ModelError("rate terms support at most two factors")

        def col(rows, i, dtype):
            return np.array([row[i] for row in rows], dtype=dtype)

        self._tables = (
            g.src, g.dst, float(fam.floor), bias, self.slot_components(),
            self.category.astype(np.int64),
            col(lin, 0, np.int64), col(lin, 1, np.int64), col(lin, 2, np.int64),
            col(lin, 3, np.int64), col(lin, 4, np.float64),
            col(quad, 0, np.int64), col(quad, 1, np.int64), col(quad, 2, np.int64),
            col(quad, 3, np.int64), col(quad, 4, np.int64), col(quad, 5, np.int64),
            col(quad, 6, np.float64),
        )
        return self._tables

    def edge_rates(self, x):
        """Rates per component and edge; ``x`` has shape ``(..., 2r, K)``.

        Returns an array of shape ``(..., 2r, E)``.
        """
        x = np.asarray(x, dtype=float)
        if self.rates.parametric:
            return self._parametric_rates(x)
        return self._callable_rates(x)

    def dense_tables(self):
        """Rates as ``bias + L x + x^T Q x`` over the flattened vector ``x``.

        Returns ``(bias, L, Q)`` with shapes ``(2r, E)``, ``(2r, E, n)`` and
        ``(2r, E, n, n)`` where ``n = 2r K``.
        """
        if getattr(self, "_dense", None) is not None:
            return self._dense
        (_, _, _, bias, slots, cat, lc, le, ls, lz, lk,
         qc, qe, qsa, qza, qsb, qzb, qk) = self.kernel_tables()
        nq, K, E = self.n_components, self.n_colors, self.graph.n_edges
        n = nq * K
        B = bias[cat].copy()
        L = np.zeros((nq, E, n))
        Q = np.zeros((nq, E, n, n))
        for q in range(nq):
            for t in range(lc.size):
                if lc[t] == cat[q]:
                    L[q, le[t], slots[q, ls[t]] * K + lz[t]] += lk[t]
            for t in range(qc.size):
                if qc[t] == cat[q]:
                    Q[q, qe[t], slots[q, qsa[t]] * K + qza[t], slots[q, qsb[t]] * K + qzb[t]] += qk[t]
        self._dense = (B, L, Q)
        return self._dense

    def _parametric_rates(self, x):
        B, L, Q = self.dense_tables()
        xf = x.reshape(x.shape[:-2] + (-1,))
        n = xf.shape[-1]
        out = B + (xf @ L.reshape(-1, n).T).reshape(x.shape[:-2] + B.shape)
        if Q.any():
            Qx = (xf @ Q.reshape(-1, n).T).reshape(x.shape[:-2] + B.shape + (n,))
            out = out + (Qx * xf[..., None, None, :]).sum(axis=-1)
        return np.maximum(out, self.rates.floor)

    def _callable_rates(self, x):
        lead = x.shape[:-2]
        flat = x.reshape((-1,) + self.shape)
        out = np.empty((flat.shape[0], self.n_components, self.graph.n_edges))
        for i, v in enumerate(flat):
            for j in range(self.n_blocks):
                out[i, 2 * j] = self.rates.central(v[2 * j], v[2 * j + 1])
                out[i, 2 * j + 1] = self.rates.peripheral(v[2 * j], v[1::2])
        out = np.maximum(out, self.floor)
        return out.reshape(lead + out.shape[1:])

    def generator(self, x):
        """Rate matrices ``(..., 2r, K, K)`` with zero row sums."""
        lam = self.edge_rates(x)
        K = self.n_colors
        Q = np.zeros(lam.shape[:-1] + (K, K))
        Q[..., self.graph.src, self.graph.dst] = lam
        idx = np.arange(K)
        Q[..., idx, idx] = -Q.sum(axis=-1)
        return Q

    def check(self):
        """Raise :class:`ModelError` listing every violated constraint."""
        report = validate_model(self)
        if report:
            raise ModelError("; ".join(report))
        return self


def validate_model(m, n_samples=2000, seed=0):
    """Return a list of human-readable constraint violations (empty if valid).

    The declared rate bounds are checked on random empirical vectors plus
    every vertex of the product of simplices restricted to equal rows.
    """
    report = list(m.graph.problems())
    r = m.n_blocks
    if m.p_central.size != r or m.p_peripheral.size != r:
        report.append("category proportions must have one entry per block")
        return report
    if np.any(m.alpha <= 0) or abs(m.alpha.sum() - 1.0) > 1e-9:
        report.append(f"alpha sum is {m.alpha.sum():.12g}; block proportions must be positive and sum to one")
    pc, pp = m.p_central, m.p_peripheral
    if np.any(pc <= 0) or np.any(pp <= 0) or np.any(np.abs(pc + pp - 1.0) > 1e-9):
        report.append("central/peripheral proportions must be positive and sum to one per block")
    fam = m.rates
    if not (fam.floor > 0 and fam.ceiling >= fam.floor):
        report.append("rate bounds need 0 < floor <= ceiling")
    if report:
        return report
    if fam.parametric:
        try:
            m._tables = None
            m._dense = None
            m.kernel_tables()
        except (ModelError, ValueError) as exc:
            return report + [str(exc)]
    rng = np.random.default_rng(seed)
    K = m.n_colors
    samples = rng.dirichlet(np.ones(K), size=(n_samples, m.n_components))
    corners = np.repeat(np.eye(K)[:, None, :], m.n_components, axis=1)
    lam = m.edge_rates(np.concatenate([samples, corners]))
    if lam.max() > fam.ceiling * (1 + 1e-12):
        report.append(f"rates reach {lam.max():.6g} above declared ceiling {fam.ceiling:g}")
    return report


# -- serialization ------------------------------------------------------
def model_from_dict(d):
    """Build a model from a plain dictionary (the JSON config layout)."""
    g = ColorGraph(int(d["colors"]), [tuple(e) for e in d["edges"]])
    blocks = d["blocks"]
    alpha = [b["alpha"] for b in blocks]
    pc = [b["p_central"] for b in blocks]
    pp = [b.get("p_peripheral", 1.0 - b["p_central"]) for b in blocks]
    rd = d["rates"]
    bias, terms = {}, []
    for cat_name, cat in (("central", CENTRAL), ("peripheral", PERIPHERAL)):
        for item in rd.get(cat_name, []):
            edge = tuple(item["edge"])
            bias[(cat, edge)] = bias.get((cat, edge), 0.0) + float(item.get("bias", 0.0))
            for t in item.get("terms", []):
                terms.append(RateTerm(cat, edge, float(t["coef"]), tuple(tuple(f) for f in t["factors"])))
    fam = RateFamily(float(rd["floor"]), float(rd["ceiling"]), bias, terms)
    return BlockModel(alpha, pc, pp, g, fam)


def model_to_dict(m):
    fam = m.rates
    if not fam.parametric:
        raise ModelError("only parametric rate families can be serialized")
    rates = {"floor": fam.floor, "ceiling": fam.ceiling, "central": [], "peripheral": []}
    for cat_name, cat in (("central", CENTRAL), ("peripheral", PERIPHERAL)):
        for edge in m.graph.edges:
            terms = [{"coef": t.coef, "factors": [list(f) for f in t.factors]}
                     for t in fam.terms if t.category == cat and t.edge == edge]
            rates[cat_name].append({"edge": list(edge), "bias": fam.bias.get((cat, edge), 0.0), "terms": terms})
    return {
        "colors": m.n_colors,
        "edges": [list(e) for e in m.graph.edges],
        "blocks": [{"alpha": float(a), "p_central": float(c), "p_peripheral": float(p)}
                   for a, c, p in zip(m.alpha, m.p_central, m.p_peripheral)],
        "rates": rates,
    }


def load_model(path):
    with open(path) as fh:
        d = json.load(fh)
    return model_from_dict(d.get("model", d))


def save_model(m, path):
    Path(path).write_text(json.dumps(model_to_dict(m), indent=2))
