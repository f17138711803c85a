from pathlib import Path

import numpy as np

from mfmeta.cycles import base_arrows, build_hierarchy, exit_predictions, find_cycles, is_cycle
from mfmeta.experiments import load_matrix

EXAMPLE = Path(__file__).parents[1] / "configs" / "cycles_example.csv"


def _example():
    return load_matrix(str(EXAMPLE))


def test_example_base_arrows():
    arrows, tied = base_arrows(_example())
    # 0-based form of 1->2, 2->3, 3->1, 4->5, 5->4, 6->8, 7->6, 8->7
    assert list(arrows) == [1, 2, 0, 4, 3, 7, 5, 6]
    assert not tied.any()


def test_two_compacts():
    h = build_hierarchy(np.array([[0, 2.0], [3.0, 0]]))
    assert list(h.levels[0].arrows) == [1, 0]
    assert h.depth == 1 and h.levels[1].members == [(0, 1)]


def test_example_first_two_levels():
    h = build_hierarchy(_example())
    l1 = h.levels[1]
    assert l1.members == [(0, 1, 2), (3, 4), (5, 6, 7)]
    assert list(l1.vhat) == [5, 7, 6]
    assert l1.pair[0, 1] == 9 and l1.pair[0, 2] == 8
    assert l1.pair[2, 0] == 7 and l1.pair[2, 1] == 8
    assert l1.pair[1, 0] == 9 and l1.pair[1, 2] == 8
    assert list(l1.arrows) == [2, 2, 0]
    l2 = h.levels[2]
    assert l2.members == [(0, 1, 2, 5, 6, 7), (3, 4)]
    assert h.depth == 3 and h.levels[3].members == [tuple(range(8))]


def test_example_second_level_by_hand_expansion():
    # Vhat(pi_1^2) = max(8, 7); pair = 8 + min(9 - 8, 8 - 7)
    # Vhat(pi_2^2) = 8 (the exit of the carried-over singleton); pair = 8 + min(9 - 8, 8 - 8)
    l2 = build_hierarchy(_example()).levels[2]
    assert list(l2.vhat) == [8, 8]
    assert l2.pair[0, 1] == 9 and l2.pair[1, 0] == 8


def test_exit_predictions_example():
    h = build_hierarchy(_example())
    preds = {(p["level"], p["members"]): p for p in exit_predictions(h, 10)}
    p = preds[(1, (3, 4))]
    assert p["exit_exponent"] == 8.0
    assert np.isclose(p["mean_exit_time"], np.exp(80.0))
    # the arrow target has zero exponent
    assert p["target_exponents"][(5, 6, 7)] == 0.0
    assert p["target_exponents"][(0, 1, 2)] == 1.0


def _oracle(C):
    """Independent hierarchy: cycles found by explicit mutual reachability."""
    l = len(C)
    groups = [(i,) for i in range(l)]
    pair = C.astype(float).copy()
    exit_ = np.array([min(pair[i, j] for j in range(l) if j != i) for i in range(l)])
    out = [groups]
    while len(groups) > 1:
        n = len(groups)
        arrow = [min((j for j in range(n) if j != i), key=lambda j: (pair[i, j], j)) for i in range(n)]

        def reach(i):
            seen, k = [], arrow[i]
            while k not in seen:
                seen.append(k)
                k = arrow[k]
            return set(seen)

        R = [reach(i) for i in range(n)]
        cls = []
        for i in range(n):
            if i in R[i]:
                c = frozenset(j for j in range(n) if j in R[i] and i in R[j])
                if c not in cls:
                    cls.append(c)
        used = set().union(*cls) if cls else set()
        new = [sorted(c) for c in cls] + [[i] for i in range(n) if i not in used]
        new.sort(key=lambda g: min(b for k in g for b in groups[k]))
        vhat = np.array([max(exit_[k] for k in g) for g in new])
        m = len(new)
        P = np.zeros((m, m))
        for a in range(m):
            for b in range(m):
                if a != b:
                    P[a, b] = vhat[a] + min(pair[k, k2] - exit_[k] for k in new[a] for k2 in new[b])
        groups = [tuple(sorted(b for k in g for b in groups[k])) for g in new]
        pair = P
        exit_ = np.array([min(P[a, b] for b in range(m) if b != a) for a in range(m)]) if m > 1 else np.array([np.inf])
        out.append(groups)
        out.append(vhat)
        out.append(P)
    return out


def test_hierarchy_matches_oracle(rng):
    for _ in range(200):
        l = int(rng.integers(2, 6))
        C = rng.uniform(0.1, 10.0, size=(l, l))
        np.fill_diagonal(C, 0.0)
        h = build_hierarchy(C)
        ref = _oracle(C)
        assert h.levels[0].members == ref[0]
        for m, lv in enumerate(h.levels[1:]):
            g, vhat, P = ref[1 + 3 * m: 4 + 3 * m]
            assert lv.members == g
            assert np.allclose(lv.vhat, vhat)
            assert np.allclose(lv.pair, P)


def test_levels_partition_and_coarsen(rng):
    for _ in range(100):
        l = int(rng.integers(2, 8))
        C = rng.uniform(0.1, 10.0, size=(l, l))
        np.fill_diagonal(C, 0.0)
        h = build_hierarchy(C)
        for a, b in zip(h.levels[:-1], h.levels[1:]):
            assert len(b.members) < len(a.members)
            assert sorted(x for mb in b.members for x in mb) == list(range(l))
            for cyc in find_cycles(a.arrows):
                assert is_cycle(cyc, a.arrows)
        assert len(h.levels[-1].members) == 1


def test_permutation_covariance(rng):
    for _ in range(50):
        l = int(rng.integers(2, 7))
        C = rng.uniform(0.1, 10.0, size=(l, l))
        np.fill_diagonal(C, 0.0)
        perm = rng.permutation(l)
        Cp = C[np.ix_(perm, perm)]  # new index k is old perm[k]
        a, _ = base_arrows(C)
        ap, _ = base_arrows(Cp)
        assert all(perm[ap[k]] == a[perm[k]] for k in range(l))
        h, hp = build_hierarchy(C), build_hierarchy(Cp)
        assert len(h.levels) == len(hp.levels)
        for lv, lvp in zip(h.levels, hp.levels):
            assert sorted(lv.members) == sorted(tuple(sorted(perm[list(mb)])) for mb in lvp.members)
            assert np.allclose(sorted(lv.vhat), sorted(lvp.vhat))


def test_ties_flagged():
    C = np.array([[0, 1.0, 1.0], [2.0, 0, 3.0], [2.0, 3.0, 0]])
    h = build_hierarchy(C)
    assert h.degenerate
    assert h.levels[0].arrows[0] == 1
