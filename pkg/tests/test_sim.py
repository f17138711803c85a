import numpy as np
import pytest

from mfmeta import _kernels as K
from mfmeta.fixtures import bistable_model, constant_rate_model
from mfmeta.model import BlockModel, CallableRates, ColorGraph, ModelError, RateFamily
from mfmeta.mvode import find_equilibria
from mfmeta.sim import (Ball, PopulationCounts, TrajectoryRecord, counts_from_fractions, exit_time,
                        hitting_chain, hitting_chain_from_path, occupation_times, path_log_likelihood,
                        run_replicas, simulate, simulate_pernode, simulate_terminal, snapshots)


def test_counts_from_fractions_examples():
    m = constant_rate_model(2)
    assert np.array_equal(counts_from_fractions(m, m.uniform(), 100).counts, [[25, 25], [25, 25]])
    c = counts_from_fractions(m, [[0.99, 0.01], [0.5, 0.5]], 10).counts
    assert c[0].sum() == 5 and np.array_equal(c[0], [5, 0])


def test_counts_conservation_and_accuracy(rng):
    for _ in range(200):
        r = int(rng.integers(1, 4))
        m = bistable_model(n_blocks=r, p_central=float(rng.uniform(0.2, 0.8)))
        N = int(rng.integers(20 * r, 500))
        nu = rng.dirichlet(np.ones(2), size=2 * r)
        pc = counts_from_fractions(m, nu, N)
        assert pc.n_nodes == N
        assert np.abs(pc.fractions() - nu).max() <= 1.0 / pc.sizes.min() + 1e-12


def test_counts_too_small():
    with pytest.raises(ModelError):
        counts_from_fractions(bistable_model(n_blocks=3), bistable_model(n_blocks=3).uniform(), 4)


def test_poisson_event_count():
    m = constant_rate_model(2, 1.0)
    N, T = 200, 2.0
    n = np.array([simulate(m, m.uniform(), T, s, N=N).n_events for s in range(100)])
    assert abs(n.mean() - N * T) < 3 * np.sqrt(N * T / 100)
    assert abs(n.var(ddof=1) / (N * T) - 1) < 0.4


def test_zero_horizon_and_zero_propensity():
    m = constant_rate_model(2, 1.0)
    assert simulate(m, m.uniform(), 0.0, 1, N=50).n_events == 0
    one_way = constant_rate_model(2, 1.0, edges=[(0, 1)])
    rec = simulate(one_way, [[0.0, 1.0], [0.0, 1.0]], 10.0, 1, N=50)
    assert rec.n_events == 0


def test_determinism_and_mass_conservation(bistable):
    a = simulate(bistable, bistable.uniform(), 5.0, 7, N=300)
    b = simulate(bistable, bistable.uniform(), 5.0, 7, N=300)
    assert np.array_equal(a.times, b.times) and np.array_equal(a.codes, b.codes)
    assert np.all(np.diff(a.times) > 0)
    cs = a.count_states()
    assert np.all(cs.sum(axis=2) == cs[0].sum(axis=1))
    assert cs.min() >= 0
    assert np.all(np.abs(np.diff(cs, axis=0)).sum(axis=(1, 2)) == 2)


def test_empirical_at(bistable):
    rec = simulate(bistable, bistable.uniform(), 2.0, 3, N=20)
    st = rec.states()
    assert np.array_equal(rec.empirical_at(0.0), st[0])
    t0, t1 = rec.times[4], rec.times[5]
    assert np.array_equal(rec.empirical_at(0.5 * (t0 + t1)), rec.empirical_at(t0))
    q, z0, z1 = rec.component[0], rec.color_from[0], rec.color_to[0]
    d = st[1] - st[0]
    size = rec.sizes[q]
    assert np.isclose(d[q, z0], -1 / size) and np.isclose(d[q, z1], 1 / size)
    assert np.count_nonzero(d) == 2


def test_terminal_and_snapshots_match_recording(bistable):
    rec = simulate(bistable, bistable.uniform(), 3.0, 11, N=100)
    fin = simulate_terminal(bistable, bistable.uniform(), 3.0, 11, N=100)
    assert np.array_equal(fin, rec.final_counts())
    # the clock restarts at every snapshot time, so only the first one replays the recording
    snap = snapshots(bistable, bistable.uniform(), [0.5], 11, N=100)
    assert np.array_equal(snap[0], rec.empirical_at(0.5))
    snap = snapshots(bistable, bistable.uniform(), [0.5, 1.0, 3.0], 11, N=100)
    assert np.allclose(snap.sum(axis=2), 1.0) and snap.shape == (3, 2, 2)


def test_run_replicas_threads_match_sequential(bistable):
    f = lambda s: simulate_terminal(bistable, bistable.uniform(), 1.0, s, N=60)
    a = run_replicas(f, 5, 8, threads=1)
    b = run_replicas(f, 5, 8, threads=4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_pernode_conserves_counts(bistable):
    c = simulate_pernode(bistable, bistable.uniform(), 2.0, 3, N=40)
    assert np.array_equal(c.sum(axis=1), [20, 20])


def test_exit_time_examples():
    m = constant_rate_model(2, 1.0)
    x0 = m.uniform()
    res = exit_time(m, x0, lambda x: True, 1, N=10, max_events=1000)
    assert res.time is None and res.exhausted
    N = 40
    R = 10_000
    ts = np.array([exit_time(m, x0, Ball(x0, 0.5 / 20), s, N=N).time for s in range(R)])
    assert abs(ts.mean() * N - 1.0) < 0.1


def test_exit_time_monotone_in_radius(bistable):
    x0 = find_equilibria(bistable).stable().points[0]
    for s in range(30):
        prev = np.inf
        for r in (0.2, 0.1, 0.05, 0.02):
            t = exit_time(bistable, x0, Ball(x0, r), s, N=200).time
            assert t <= prev
            prev = t


def test_exit_time_predicate_matches_ball(bistable):
    x0 = bistable.uniform()
    b = Ball(x0, 0.1)
    for s in range(20):
        r1 = exit_time(bistable, x0, b, s, N=100)
        r2 = exit_time(bistable, x0, b.contains, s, N=100)
        assert r1.time == r2.time and r1.n_events == r2.n_events


def test_hitting_chain_single_compact_budget():
    m = constant_rate_model(2, 1.0)
    x0 = m.uniform()
    ch = hitting_chain(m, x0, [x0], 0.3, 0.1, 5, 1, N=200, max_events=5000)
    assert ch.truncated and len(ch.tau) - 1 == 0


def test_hitting_chain_from_injected_path():
    c1 = np.array([[0.8, 0.2], [0.8, 0.2]])
    c2 = c1[:, ::-1]
    mid = np.full((2, 2), 0.5)
    states = np.stack([c1, 0.5 * (c1 + mid), mid, c2])
    times = np.array([0.0, 1.0, 2.0, 3.0])
    ch = hitting_chain_from_path(times, states, [c1, c2], 0.2, 0.1)
    assert list(ch.index) == [0, 1] and ch.tau[1] == 3.0 and ch.sigma[1] == 2.0


def test_hitting_chain_matches_path_replay(bistable):
    cat = find_equilibria(bistable).stable()
    rec = simulate(bistable, cat.points[0], 400.0, 2, N=60)
    ch = hitting_chain(bistable, cat.points[0], cat.points, 0.15, 0.075, 10_000, 2, N=60, t_max=400.0)
    ref = hitting_chain_from_path(np.concatenate([[0.0], rec.times]), rec.states(), cat.points, 0.15, 0.075)
    assert np.array_equal(ch.index, ref.index)
    assert np.allclose(ch.tau, ref.tau)
    assert len(ch.tau) > 3


@pytest.mark.slow
def test_chain_transition_frequencies_order_of_magnitude(bistable):
    cat = find_equilibria(bistable).stable()
    V = 0.0213994
    rates = []
    for N in (100, 200):
        ch = hitting_chain(bistable, cat.points[0], cat.points, 0.15, 0.075, 300, 1, N=N)
        assert not ch.truncated
        switch = np.mean(ch.index[1:] != ch.index[:-1])
        assert 0 < switch < 1
        rates.append(-np.log(switch) / N)
    # exponent of the switching probability stays of the order of the barrier
    assert all(0 < r < 2 * V for r in rates)


def test_occupation_times_sum(bistable):
    cat = find_equilibria(bistable).stable()
    occ, n = occupation_times(bistable, cat.points[0], 50.0, cat.points, np.full(2, 0.075), 3, N=100)
    assert np.isclose(occ.sum(), 50.0) and n > 0


def test_log_likelihood_unit_rates_vanish():
    m = constant_rate_model(2, 1.0)
    rec = simulate(m, m.uniform(), 1.0, 4, N=30)
    assert rec.n_events > 0
    assert abs(path_log_likelihood(rec, m)) < 1e-12


def test_log_likelihood_no_events_closed_form():
    m = constant_rate_model(2, 2.0)
    N, T = 10, 1.0
    init = counts_from_fractions(m, m.uniform(), N).counts
    rec = TrajectoryRecord(init, np.zeros(0), np.zeros(0, dtype=np.int64), T, m.graph.src, m.graph.dst)
    # every node has one outgoing edge at rate 2 instead of 1
    assert np.isclose(path_log_likelihood(rec, m), -N * (2.0 - 1.0) * T)


@pytest.mark.slow
def test_importance_sampling_identity():
    target = bistable_model()
    base = constant_rate_model(2, 1.0)
    N, T, R = 2, 0.5, 100_000
    start = PopulationCounts([[1, 0], [1, 0]]).counts

    def indicator(rec):
        return rec.n_events == 1

    w = np.empty(R)
    for s in range(R):
        rec = simulate(base, start, T, s)
        w[s] = np.exp(path_log_likelihood(rec, target)) if indicator(rec) else 0.0
    direct = np.array([indicator(simulate(target, start, T, R + s)) for s in range(R)], dtype=float)
    se = np.sqrt(w.var() / R + direct.var() / R)
    assert abs(w.mean() - direct.mean()) < 3 * se


def test_callable_rates_simulate():
    g = ColorGraph.complete(2)
    rates = CallableRates(lambda c, p: [1.0, 1.0], lambda c, ps: [1.0, 1.0], 0.5, 1.0)
    m = BlockModel([1.0], [0.5], [0.5], g, rates)
    rec = simulate(m, m.uniform(), 1.0, 3, N=40)
    assert rec.n_events > 0
    ref = constant_rate_model(2, 1.0)
    rec2 = simulate(ref, ref.uniform(), 1.0, 3, N=40)
    assert np.array_equal(rec.times, rec2.times) and np.array_equal(rec.codes, rec2.codes)
