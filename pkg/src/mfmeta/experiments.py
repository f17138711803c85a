"""Config-driven experiments that tie the simulation, ODE, action and graph layers together.

An experiment config is a dictionary (usually loaded from JSON)::

    {"kind": "exit_scaling", "seed": 1,
     "model": {"fixture": "bistable", "args": {"a0": 0.24}},
     "params": {"N": [100, 200, 400], "replicas": 200}}

``model`` is a fixture reference, ``{"path": "model.json"}`` or an inline
model dictionary.  Every report embeds the config and seed, and its
``results`` section is a deterministic function of them.  Replica ``k`` of
the ``i``-th ensemble uses seed ``seed + i * SEED_STRIDE + k``.
"""
from __future__ import annotations

import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import SCHEMA_VERSION, __version__
from . import _kernels as K
from .cycles import build_hierarchy, exit_predictions
from .fixtures import bistable_model, constant_rate_model
from .fw import check_cost_matrix, convergence_rate, exit_rate, stationary_exponents, w_values
from .model import ModelError, check_vector, load_model, model_from_dict, product_metric
from .mvode import find_equilibria, integrate
from .qpot import compact_cost_matrix
from .sim import _advance, counts_from_fractions, occupation_times, run_replicas, simulate, snapshots

__all__ = [
    "KINDS",
    "ExperimentConfig",
    "resolve_model",
    "load_matrix",
    "run_lln",
    "run_exit_scaling",
    "run_invariant_occupation",
    "run_qpot_matrix",
    "run_cycle_report",
    "run_convergence_probe",
    "run_experiment",
]

KINDS = ("lln", "exit_scaling", "invariant_occupation", "qpot_matrix", "cycle_report", "convergence_probe")
SEED_STRIDE = 1_000_003
FIXTURES = {"bistable": bistable_model, "constant": constant_rate_model}


@dataclass
class ExperimentConfig:
    kind: str
    model: dict = field(default_factory=lambda: {"fixture": "bistable"})
    params: dict = field(default_factory=dict)
    seed: int = 0
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d, base_dir="."):
        unknown = set(d) - {"kind", "model", "params", "seed"}
        if unknown:
            raise ModelError(f"unknown config keys {sorted(unknown)}")
        cfg = cls(d["kind"], d.get("model", {"fixture": "bistable"}), dict(d.get("params", {})),
                  int(d.get("seed", 0)), str(base_dir))
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path):
        import json
        p = Path(path)
        d = json.loads(p.read_text())
        d.pop("schema_version", None)
        return cls.from_dict(d, p.parent)

    def to_dict(self):
        return {"kind": self.kind, "model": self.model, "params": self.params, "seed": self.seed}

    def _path(self, name):
        p = Path(name)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def check(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        refs = [self.model.get("path")] if isinstance(self.model, dict) else []
        refs.append(self.params.get("matrix") if isinstance(self.params.get("matrix"), str) else None)
        for ref in refs:
            if ref is not None and not self._path(ref).exists():
                raise ModelError(f"referenced file {ref} does not exist")


def resolve_model(ref, base_dir="."):
    """Model from a fixture reference, a file reference or an inline dictionary."""
    if "fixture" in ref:
        name = ref["fixture"]
        if name not in FIXTURES:
            raise ModelError(f"unknown fixture {name!r}")
        return FIXTURES[name](**ref.get("args", {}))
    if "path" in ref:
        p = Path(ref["path"])
        return load_model(p if p.is_absolute() else Path(base_dir) / p)
    return model_from_dict(ref)


def load_matrix(ref, base_dir="."):
    """Cost matrix given inline (nested lists) or as a CSV file path.

    The CSV may start with comment lines and one non-numeric header row;
    ``inf`` cells are allowed.
    """
    if isinstance(ref, str):
        p = Path(ref)
        p = p if p.is_absolute() else Path(base_dir) / p
        rows = [ln.split(",") for ln in p.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
        try:
            [float(v) for v in rows[0]]
        except ValueError:
            rows = rows[1:]
        return check_cost_matrix([[float(v) for v in r] for r in rows])
    return check_cost_matrix(ref)


def _versions():
    import numba
    import scipy
    return {"mfmeta": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version(), "numba_enabled": K.USE_NUMBA}


def _report(cfg, results, t0, flags=None):
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": cfg.kind,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "metric": "linf",
        "flags": flags or {},
        "results": results,
        "meta": {"versions": _versions(), "wall_time": time.perf_counter() - t0},
    }


def _catalog(m, p):
    """Full equilibrium catalog and its stable part with the configured radii."""
    full = find_equilibria(m)
    stable = full.stable()
    r0 = p.get("r0")
    r1 = p.get("r1")
    if r0 is None:
        sep = stable.min_separation()
        r0 = 0.25 * sep if np.isfinite(sep) else 0.1
    if r1 is None:
        r1 = 0.5 * r0
    sep = stable.min_separation()
    if not 0 < r1 < r0 or (np.isfinite(sep) and not 2 * r0 < sep):
        raise ModelError(f"need 0 < r1 < r0 < separation/2 (r0={r0}, r1={r1}, separation={sep})")
    stable.r0, stable.r1 = float(r0), float(r1)
    return full, stable


def _start(m, cat, ref):
    if isinstance(ref, (int, np.integer)):
        return cat.points[int(ref)]
    return check_vector(ref, *m.shape)


def _qpot_opts(p):
    return dict(p.get("qpot", {}))


def _cost_matrix(cfg, m, full, stable):
    """Compact cost matrix: given in the params or computed by action minimization."""
    p = cfg.params
    if "matrix" in p:
        C = load_matrix(p["matrix"], cfg.base_dir)
        if C.shape[0] != len(stable):
            raise ModelError("matrix size does not match the number of stable compacts")
        return C, None
    saddles = [e.point for e in full.items if not e.stable]
    C, details = compact_cost_matrix(m, stable, saddles=saddles, **_qpot_opts(p))
    info = {f"{i}->{j}": {"value": r.value, "horizon": r.horizon, "converged": r.converged,
                          "segments": r.path.n_segments}
            for (i, j), r in details.items()}
    return C, info


def _wls_line(x, y, se):
    """Weighted least squares ``y = a + b x``; returns ``(b, se_b, a)``."""
    X = np.stack([np.ones_like(x), x], axis=1)
    w = 1.0 / se ** 2
    cov = np.linalg.inv(X.T @ (X * w[:, None]))
    beta = cov @ (X.T @ (w * y))
    return float(beta[1]), float(np.sqrt(cov[1, 1])), float(beta[0])


# -- law of large numbers -------------------------------------------------
def run_lln(cfg, threads=1):
    """Sup-time distance between simulated paths and the mean-field ODE.

    params: ``N``, ``T``, ``replicas``, ``dt`` (ODE step), ``start``
    (vector or stable-catalog index), ``threshold``.
    """
    t0 = time.perf_counter()
    p = cfg.params
    m = resolve_model(cfg.model, cfg.base_dir)
    N, T, R = int(p.get("N", 10_000)), float(p.get("T", 5.0)), int(p.get("replicas", 100))
    default = [[0.65, 0.35]] * m.n_components if m.n_colors == 2 else m.uniform()
    start = p.get("start", default)
    x0 = check_vector(start, *m.shape) if not isinstance(start, int) else find_equilibria(m).points[start]
    c0 = counts_from_fractions(m, x0, N).counts
    ode = integrate(m, c0 / c0.sum(axis=1, keepdims=True), T, float(p.get("dt", 1e-3)))

    def one(seed):
        rec = simulate(m, c0, T, seed)
        st = rec.states()
        tt = np.concatenate([[0.0], rec.times, [T]])
        ref = ode.at(tt)
        d_left = product_metric(st, ref[:-1])
        d_right = product_metric(st, ref[1:])
        return float(max(d_left.max(), d_right.max())), rec.n_events

    out = run_replicas(one, cfg.seed, R, threads)
    sup = np.array([o[0] for o in out])
    thr = float(p.get("threshold", 0.05))
    res = {"N": N, "T": T, "replicas": R, "sup_distance": sup, "threshold": thr,
           "n_below": int((sup < thr).sum()), "max": float(sup.max()),
           "events": [o[1] for o in out]}
    return _report(cfg, res, t0)


# -- exit scaling ---------------------------------------------------------
def run_exit_scaling(cfg, threads=1):
    """Mean transition time from a stable compact into the other small balls.

    params: ``N`` (list), ``replicas``, ``source`` (stable index), ``r1``,
    ``max_events`` (per replica), ``exponent`` (skip action minimization),
    ``qpot`` (options).  The regression of ``log(mean)`` on ``N`` is
    weighted by the delta-method standard errors.
    """
    t0 = time.perf_counter()
    p = cfg.params
    m = resolve_model(cfg.model, cfg.base_dir)
    full, stable = _catalog(m, p)
    if len(stable) < 2:
        raise ModelError("exit scaling needs at least two stable compacts")
    src = int(p.get("source", 0))
    W = [k for k in range(len(stable)) if k != src]
    centers = stable.points[W]
    radii = np.full(len(W), stable.r1)
    Ns = [int(n) for n in np.atleast_1d(p.get("N", [100, 200, 400]))]
    R = int(p.get("replicas", 200))
    budget = int(p.get("max_events", 1 << 36))
    rows = []
    partial = False
    for i, N in enumerate(Ns):
        c0 = counts_from_fractions(m, stable.points[src], N).counts
        tN = time.perf_counter()

        def one(seed, c0=c0):
            c = c0.copy()
            t, n, status, k = _advance(m, c, 0.0, np.inf, budget, K.rng_state(seed), K.ENTER_ANY, centers, radii)
            return (t if status == K.HIT else np.nan), n, int(W[k]) if status == K.HIT else -1

        out = run_replicas(one, cfg.seed + i * SEED_STRIDE, R, threads)
        times = np.array([o[0] for o in out])
        done = np.isfinite(times)
        row = {"N": N, "replicas": R, "completed": int(done.sum()), "events": int(sum(o[1] for o in out)),
               "targets": [o[2] for o in out], "wall_time": time.perf_counter() - tN}
        if done.all():
            mean = times.mean()
            sd = times.std(ddof=1) if R > 1 else np.nan
            row.update(mean=float(mean), sd=float(sd), log_mean=float(np.log(mean)),
                       se_log=float(sd / (mean * np.sqrt(R))))
        else:
            partial = True
            row.update(mean=None, sd=None, log_mean=None, se_log=None)
        rows.append(row)
    res = {"rows": rows, "source": src, "targets": W, "r1": stable.r1,
           "points": stable.points, "slope": None, "slope_se": None, "intercept": None}
    ok = [r for r in rows if r["mean"] is not None]
    if len(ok) >= 2:
        b, se, a = _wls_line(np.array([r["N"] for r in ok], float), np.array([r["log_mean"] for r in ok]),
                             np.array([r["se_log"] for r in ok]))
        res.update(slope=b, slope_se=se, intercept=a)
    if "exponent" in p:
        expo, info = float(p["exponent"]), None
    else:
        C, info = _cost_matrix(cfg, m, full, stable)
        expo = exit_rate(C, src, set(W))
        res["cost_matrix"] = C
    res["exponent"] = expo
    res["qpot"] = info
    if res["slope"] is not None:
        res["ratio"] = res["slope"] / expo
        res["within_20pct"] = bool(abs(res["ratio"] - 1.0) <= 0.2)
    flags = {"partial": partial, "slope_available": res["slope"] is not None,
             "wall_times": [r["wall_time"] for r in rows]}
    for r in rows:
        del r["wall_time"]
    return _report(cfg, res, t0, flags)


# -- invariant occupation -------------------------------------------------
def run_invariant_occupation(cfg, threads=1):
    """Occupation fractions of the small balls along one long trajectory.

    params: ``N``, ``T``, ``start`` (stable index), ``r1``, ``matrix`` or
    ``qpot`` options for the stationary exponents.
    """
    t0 = time.perf_counter()
    p = cfg.params
    m = resolve_model(cfg.model, cfg.base_dir)
    full, stable = _catalog(m, p)
    N, T = int(p.get("N", 100)), float(p.get("T", 1e4))
    x0 = _start(m, stable, p.get("start", 0))
    radii = np.full(len(stable), stable.r1)
    occ, n = occupation_times(m, x0, T, stable.points, radii, cfg.seed, N)
    frac = occ[:-1] / T
    rate = np.full(frac.size, np.nan)
    seen = frac > 0
    rate[seen] = -np.log(frac[seen]) / N
    C, info = _cost_matrix(cfg, m, full, stable)
    s = stationary_exponents(C)
    order_occ = np.argsort(rate[seen], kind="stable")
    order_s = np.argsort(s[seen], kind="stable")
    dom = int(np.argmax(frac))
    zeros = np.flatnonzero(s == s.min())
    top = np.sort(frac)[::-1]
    res = {
        "N": N, "T": T, "events": n, "r1": stable.r1, "points": stable.points,
        "fractions": frac, "outside": float(occ[-1] / T), "rates": [None if not v else float(r) for v, r in zip(seen, rate)],
        "never_visited": np.flatnonzero(~seen), "s": s, "w": w_values(C), "cost_matrix": C, "qpot": info,
        "dominant": dom, "s_zero": zeros,
        "strictly_dominant": bool(dom in zeros and (top.size < 2 or top[0] > top[1])),
        "ordering_match": bool(seen.all() and np.array_equal(order_occ, order_s)),
    }
    return _report(cfg, res, t0, {"unvisited": bool((~seen).any())})


# -- quasi-potential matrix and cycles ------------------------------------
def run_qpot_matrix(cfg, threads=1):
    """Cost matrix between the stable compacts and the derived exponents."""
    t0 = time.perf_counter()
    p = cfg.params
    m = resolve_model(cfg.model, cfg.base_dir)
    full, stable = _catalog(m, p)
    C, info = _cost_matrix(cfg, m, full, stable)
    res = {"points": stable.points, "r0": stable.r0, "r1": stable.r1,
           "equilibria": [{"point": e.point, "stable": e.stable, "eigenvalues": e.eigenvalues.real}
                          for e in full.items],
           "cost_matrix": C, "qpot": info}
    flags = {}
    if len(stable) >= 2:
        h = build_hierarchy(C)
        res.update(w=w_values(C), s=stationary_exponents(C), convergence_rate=convergence_rate(C))
        flags["tied_arrows"] = h.degenerate
    return _report(cfg, res, t0, flags)


def _hierarchy_dict(h):
    levels = []
    for m, lv in enumerate(h.levels):
        levels.append({
            "level": m, "groups": lv.groups, "members": lv.members, "vhat": lv.vhat,
            "exit": lv.exit, "pair": lv.pair, "arrows": lv.arrows, "tied": lv.tied,
        })
    return levels


def run_cycle_report(cfg, threads=1):
    """Cycle hierarchy and exit predictions for a given or computed cost matrix.

    params: ``matrix`` (inline or CSV path; otherwise computed), ``N``.
    """
    t0 = time.perf_counter()
    p = cfg.params
    if "matrix" in p:
        C, info = load_matrix(p["matrix"], cfg.base_dir), None
    else:
        m = resolve_model(cfg.model, cfg.base_dir)
        full, stable = _catalog(m, p)
        C, info = _cost_matrix(cfg, m, full, stable)
    h = build_hierarchy(C)
    N = int(p.get("N", 100))
    preds = exit_predictions(h, N)
    for d in preds:
        d["target_exponents"] = [{"members": k, "exponent": v} for k, v in d["target_exponents"].items()]
    res = {"cost_matrix": C, "qpot": info, "levels": _hierarchy_dict(h), "N": N, "predictions": preds}
    return _report(cfg, res, t0, {"tied_arrows": h.degenerate})


# -- convergence probe ----------------------------------------------------
def run_convergence_probe(cfg, threads=1):
    """Gap between time-T averages from two initial conditions, for growing T.

    params: ``N``, ``times`` (explicit list) or ``T0``/``factor``/``n_times``,
    ``replicas``, ``starts`` (two stable indices or vectors), ``r1``,
    ``matrix`` or ``qpot`` options for the mixing constant.  Functionals:
    the mass of every colour except 0 in every component and the indicator
    of every small ball.  Replica ``k`` from both starts shares seed ``k``.
    """
    t0 = time.perf_counter()
    p = cfg.params
    m = resolve_model(cfg.model, cfg.base_dir)
    full, stable = _catalog(m, p)
    N, R = int(p.get("N", 50)), int(p.get("replicas", 200))
    if "times" in p:
        times = np.array(p["times"], dtype=float)
    else:
        times = float(p.get("T0", 1.0)) * float(p.get("factor", 2.0)) ** np.arange(int(p.get("n_times", 8)))
    starts = [_start(m, stable, s) for s in p.get("starts", [0, 1])]
    if len(starts) != 2:
        raise ModelError("the probe needs exactly two initial conditions")
    names = [f"mass[{q},{z}]" for q in range(m.n_components) for z in range(1, m.n_colors)]
    names += [f"in_ball[{k}]" for k in range(len(stable))]

    def feats(x):
        mass = x[..., 1:].reshape(x.shape[0], -1)
        d = np.abs(x[:, None] - stable.points[None]).max(axis=(-2, -1))
        return np.concatenate([mass, (d <= stable.r1).astype(float)], axis=1)

    vals = []
    for i, x0 in enumerate(starts):
        c0 = counts_from_fractions(m, x0, N).counts
        out = run_replicas(lambda s, c0=c0: feats(snapshots(m, c0, times, s)), cfg.seed, R, threads)
        vals.append(np.stack(out))                     # (R, n_times, n_feats)
    mean = [v.mean(axis=0) for v in vals]
    var = [v.var(axis=0, ddof=1) / R for v in vals]
    gap = np.abs(mean[0] - mean[1])
    se = np.sqrt(var[0] + var[1])
    res = {"N": N, "replicas": R, "times": times, "functionals": names, "starts": starts,
           "mean_a": mean[0], "mean_b": mean[1], "gap": gap, "gap_se": se,
           "initial_gap": np.abs(feats(starts[0][None]) - feats(starts[1][None]))[0]}
    flags = {"qualitative": True}
    if len(stable) >= 2:
        C, info = _cost_matrix(cfg, m, full, stable)
        lam = convergence_rate(C)
        res.update(cost_matrix=C, qpot=info, convergence_rate=lam, timescale=float(np.exp(N * lam)))
    return _report(cfg, res, t0, flags)


RUNNERS = {
    "lln": run_lln,
    "exit_scaling": run_exit_scaling,
    "invariant_occupation": run_invariant_occupation,
    "qpot_matrix": run_qpot_matrix,
    "cycle_report": run_cycle_report,
    "convergence_probe": run_convergence_probe,
}


def run_experiment(cfg, threads=1):
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    return RUNNERS[cfg.kind](cfg, threads)
