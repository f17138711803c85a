"""Command line interface.

Every output file is either a CSV whose first line is a schema comment or
a JSON object whose first key is ``schema_version``.  Relative output
paths are resolved against ``--out-dir``.  Compact indices are 0-based.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .action import PathGrid, RatePath, action, optimal_rates, path_action, segment_costs
from .cycles import build_hierarchy
from .experiments import (ExperimentConfig, _hierarchy_dict, load_matrix, run_experiment)
from .fw import (convergence_rate, exit_rate, stationary_exponents, transition_rate, w_values)
from .io import read_csv, read_json, write_csv, write_json
from .model import ModelError, check_vector, load_model
from .mvode import CompactCatalog, Equilibrium, find_equilibria, integrate
from .qpot import QpotProblem, compact_cost_matrix, minimize_action
from .sim import run_replicas, simulate, simulate_terminal


def _out(args, name):
    p = Path(name)
    if not p.is_absolute():
        p = Path(args.out_dir) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _vector(m, spec):
    """``uniform``, a JSON literal, or a JSON file holding the empirical vector."""
    if spec == "uniform":
        return m.uniform()
    p = Path(spec)
    text = p.read_text() if p.exists() else spec
    val = json.loads(text)
    if isinstance(val, dict):
        val = val["vector"]
    return check_vector(np.array(val, dtype=float).reshape(m.shape), *m.shape)


def _state_columns(m):
    return [f"x[{q},{z}]" for q in range(m.n_components) for z in range(m.n_colors)]


def _read_path(m, path):
    header, rows = read_csv(path) if open(path).readline().startswith("#") else _plain_csv(path)
    arr = np.array(rows, dtype=float)
    return PathGrid(arr[:, 0], arr[:, 1:].reshape(-1, *m.shape))


def _plain_csv(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    return lines[0].split(","), [[float(v) for v in ln.split(",")] for ln in lines[1:]]


# -- subcommands ----------------------------------------------------------
def cmd_simulate(args):
    m = load_model(args.model)
    x0 = _vector(m, args.init)
    cols = _state_columns(m)
    rec = simulate(m, x0, args.horizon, args.seed, N=args.n)
    if args.trajectory:
        rows = zip(rec.times, rec.block, rec.category, rec.color_from, rec.color_to)
        write_csv(_out(args, args.trajectory), ["time", "block", "category", "from", "to"], rows)
    finals = run_replicas(lambda s: simulate_terminal(m, x0, args.horizon, s, N=args.n),
                          args.seed, args.replicas, args.threads)
    rows = [[k] + list((c / c.sum(axis=1, keepdims=True)).ravel()) for k, c in enumerate(finals)]
    write_csv(_out(args, args.out), ["replica"] + cols, rows)


def cmd_ode(args):
    m = load_model(args.model)
    sol = integrate(m, _vector(m, args.init), args.horizon, args.dt)
    rows = [[t] + list(x.ravel()) for t, x in zip(sol.times, sol.states)]
    write_csv(_out(args, args.out), ["time"] + _state_columns(m), rows)


def _catalog_dict(cat):
    return {"r0": cat.r0, "r1": cat.r1,
            "items": [{"point": e.point, "stable": e.stable, "eigenvalues_real": e.eigenvalues.real,
                       "eigenvalues_imag": e.eigenvalues.imag} for e in cat.items]}


def _catalog_from_dict(d):
    items = [Equilibrium(np.array(it["point"]), bool(it["stable"]),
                         np.array(it["eigenvalues_real"]) + 1j * np.array(it["eigenvalues_imag"]))
             for it in d["items"]]
    return CompactCatalog(items, float(d["r0"]), float(d["r1"]))


def cmd_equilibria(args):
    m = load_model(args.model)
    cat = find_equilibria(m, r0=args.r0, r1=args.r1)
    write_json(_out(args, args.out), _catalog_dict(cat))


def cmd_action(args):
    m = load_model(args.model)
    path = _read_path(m, args.path)
    if args.rates:
        _, rows = read_csv(args.rates)
        lam = np.array(rows, dtype=float)[:, 1:].reshape(path.n_segments, m.n_components, m.graph.n_edges)
        rates = RatePath.from_rates(m, path, lam)
        costs = segment_costs(m, path, rates)
        out = {"action": float(costs.sum()), "segment_costs": costs, "mode": "given-rates"}
    else:
        rates = optimal_rates(m, path)
        out = {"action": path_action(m, path), "segment_costs": segment_costs(m, path, rates),
               "mode": "optimal-rates"}
    out["horizon"] = path.horizon
    write_json(_out(args, args.out), out)


def cmd_qpot(args):
    m = load_model(args.model)
    full = _catalog_from_dict(read_json(args.catalog))
    stable = full.stable()
    saddles = [e.point for e in full.items if not e.stable]
    C, details = compact_cost_matrix(m, stable, avoid_others=args.avoiding, saddles=saddles,
                                     n_segments=args.segments, max_segments=args.max_segments)
    write_csv(_out(args, args.out), [f"to{j}" for j in range(len(stable))], C)


def cmd_qpot_path(args):
    m = load_model(args.model)
    res = minimize_action(QpotProblem(m, _vector(m, getattr(args, "from")), _vector(m, args.to),
                                      n_segments=args.segments, max_segments=args.max_segments,
                                      seed=args.seed))
    rows = [[t] + list(x.ravel()) for t, x in zip(res.path.times, res.path.knots)]
    write_csv(_out(args, args.out), ["time"] + _state_columns(m), rows)
    print(json.dumps({"value": res.value, "horizon": res.horizon, "converged": res.converged}))


def _matrix(args):
    return load_matrix(str(Path(args.matrix).resolve()))


def cmd_fw(args):
    C = _matrix(args)
    W = {int(v) for v in args.W.split(",")} if args.W else None
    if args.op == "w":
        out = {"w": w_values(C), "s": stationary_exponents(C)}
    elif args.op == "I":
        if W is None or args.i is None:
            raise ModelError("--op I needs --i and --W")
        out = {"i": args.i, "W": sorted(W), "I": exit_rate(C, args.i, W)}
        if args.j is not None:
            out["j"] = args.j
            out["I_ij"] = transition_rate(C, args.i, args.j, W)
    else:
        out = {"lambda": convergence_rate(C)}
    write_json(_out(args, args.out), out)


def cmd_cycles(args):
    h = build_hierarchy(_matrix(args))
    out = {"levels": _hierarchy_dict(h), "degenerate": h.degenerate}
    if args.n is not None:
        for lv in out["levels"]:
            lv["mean_exit_time"] = np.exp(args.n * np.asarray(lv["exit"], dtype=float))
    write_json(_out(args, args.out), out)


def _experiment(kind):
    def run(args):
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig(kind)
        if cfg.kind != kind and kind != "any":
            raise ModelError(f"config kind {cfg.kind!r} does not match subcommand")
        if args.seed_given:
            cfg.seed = args.seed
        report = run_experiment(cfg, args.threads)
        write_json(_out(args, args.out), report)
    return run


# -- parser ---------------------------------------------------------------
def build_parser():
    ap = argparse.ArgumentParser(prog="mfmeta", description="Mean-field metastability toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out-dir", default=".")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate the finite population")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--replicas", type=int, default=1)
    p.add_argument("--init", default="uniform")
    p.add_argument("--trajectory", help="event log of replica 0")
    p.add_argument("--out", default="simulate.csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ode", help="integrate the mean-field ODE")
    p.add_argument("--model", required=True)
    p.add_argument("--init", default="uniform")
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--out", default="ode.csv")
    p.set_defaults(func=cmd_ode)

    p = sub.add_parser("equilibria", help="catalog the equilibria with radii")
    p.add_argument("--model", required=True)
    p.add_argument("--r0", type=float)
    p.add_argument("--r1", type=float)
    p.add_argument("--out", default="equilibria.json")
    p.set_defaults(func=cmd_equilibria)

    p = sub.add_parser("action", help="action of a polyline path")
    p.add_argument("--model", required=True)
    p.add_argument("--path", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--rates")
    g.add_argument("--auto-rates", action="store_true")
    p.add_argument("--out", default="action.json")
    p.set_defaults(func=cmd_action)

    for name, fn in (("qpot", cmd_qpot), ("qpot-path", cmd_qpot_path)):
        p = sub.add_parser(name, help="minimal action between compacts" if name == "qpot" else
                           "optimal path between two states")
        p.add_argument("--model", required=True)
        p.add_argument("--segments", type=int, default=16)
        p.add_argument("--max-segments", type=int, default=128)
        if name == "qpot":
            p.add_argument("--catalog", required=True)
            p.add_argument("--avoiding", action="store_true")
            p.add_argument("--out", default="qpot.csv")
        else:
            p.add_argument("--from", required=True)
            p.add_argument("--to", required=True)
            p.add_argument("--out", default="qpot_path.csv")
        p.set_defaults(func=fn)

    p = sub.add_parser("fw", help="W-graph exponents of a cost matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--op", choices=["w", "I", "lambda"], default="w")
    p.add_argument("--i", type=int)
    p.add_argument("--j", type=int)
    p.add_argument("--W")
    p.add_argument("--out", default="fw.json")
    p.set_defaults(func=cmd_fw)

    p = sub.add_parser("cycles", help="cycle hierarchy of a cost matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--out", default="cycles.json")
    p.set_defaults(func=cmd_cycles)

    for name, kind in (("exit-scaling", "exit_scaling"), ("occupation", "invariant_occupation"),
                       ("convergence-probe", "convergence_probe"), ("lln", "lln"),
                       ("qpot-matrix", "qpot_matrix"), ("run", "any")):
        p = sub.add_parser(name, help=f"run an experiment config of kind {kind}" if kind != "any" else
                           "run any experiment config")
        p.add_argument("--config", required=kind == "any")
        p.add_argument("--out", default=f"{name}.json")
        p.set_defaults(func=_experiment(kind))
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    try:
        args.func(args)
    except (ModelError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
