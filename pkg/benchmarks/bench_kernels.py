"""Compare the compiled kernels against the pure-numpy fallback.

Each mode runs in a fresh interpreter with ``MFMETA_NUMBA`` set, first on a
small warm-up (this absorbs compilation or cache loading), then on the timed
workloads.  Outputs of the two modes must agree.

    python benchmarks/bench_kernels.py [--repeat 3] [--json out.json]
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from mfmeta import _kernels as K
from mfmeta.fixtures import bistable_model
from mfmeta.sim import Ball, exit_time, simulate_terminal
from mfmeta.action import path_action, PathGrid
from mfmeta.mvode import integrate

repeat = int(sys.argv[1])
m = bistable_model()
x0 = m.uniform()


def gillespie():
    return [simulate_terminal(m, x0, 20.0, s, N=2000).tolist() for s in range(4)]


def exits():
    return [exit_time(m, x0, Ball(x0, 0.2), s, N=400).time for s in range(20)]


rng = np.random.default_rng(0)
src = np.array([0, 1, 1, 2, 0, 2]); dst = np.array([1, 0, 2, 1, 2, 0])
w = rng.uniform(0.05, 2.0, size=(20000, 6))
v = rng.normal(scale=0.5, size=(20000, 3)); v -= v.mean(axis=1, keepdims=True)


def dual():
    phi = np.zeros((20000, 3))
    vals, ok = K.dual_batch(w, v, src, dst, phi, 1e-10, 100)
    return [float(vals.sum()), int(ok.sum())]


sol = integrate(m, [[0.45, 0.55], [0.3, 0.7]], 5.0, 1e-3)
path = PathGrid(sol.times, sol.states)


def action():
    return path_action(m, path)


t = time.perf_counter()
simulate_terminal(m, x0, 0.1, 0, N=20); exit_time(m, x0, Ball(x0, 0.2), 0, N=20)
K.dual_batch(w[:2], v[:2], src, dst, np.zeros((2, 3)), 1e-10, 100)
warm = time.perf_counter() - t
out = {"numba": K.USE_NUMBA, "warmup": warm, "timings": {}, "outputs": {}}
for name, fn in (("gillespie N=2000 T=20 x4", gillespie), ("exit_time N=400 x20", exits),
                 ("dual solve 20000 x K=3", dual), ("path_action 5000 segments", action)):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        res = fn()
        best = min(best, time.perf_counter() - t)
    out["timings"][name] = best
    out["outputs"][name] = res
print(json.dumps(out))
"""


def run(flag, repeat):
    env = dict(os.environ, MFMETA_NUMBA=flag)
    proc = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, capture_output=True,
                          text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def same(a, b, rtol=1e-9):
    if isinstance(a, list):
        return len(a) == len(b) and all(same(x, y, rtol) for x, y in zip(a, b))
    if isinstance(a, float) or isinstance(b, float):
        return abs(a - b) <= rtol * max(1.0, abs(a), abs(b))
    return a == b


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json")
    args = ap.parse_args()
    fast, slow = run("1", args.repeat), run("0", args.repeat)
    print(f"{'workload':32s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speedup':>8s}  outputs")
    rows = {}
    for name in fast["timings"]:
        a, b = fast["timings"][name], slow["timings"][name]
        agree = same(fast["outputs"][name], slow["outputs"][name])
        rows[name] = {"numba": a, "numpy": b, "speedup": b / a, "outputs_agree": agree}
        print(f"{name:32s} {a:10.4f} {b:10.4f} {b / a:8.1f}  {'equal' if agree else 'DIFFER'}")
    print(f"warm-up (compile or cache load): numba {fast['warmup']:.2f}s, numpy {slow['warmup']:.2f}s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"rows": rows, "warmup": {"numba": fast["warmup"], "numpy": slow["warmup"]}}, fh, indent=2)
    return 0 if all(r["outputs_agree"] for r in rows.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
