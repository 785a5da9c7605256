import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tabletop_lifelong.metrics import (
    EvalMatrix,
    MetricReport,
    MissingEntry,
    aggregate_seeds,
    best_checkpoint,
    compute_metrics,
    table_csv,
)


def oracle(K, epochs, diag, off):
    """Dense-array computation of the metric definitions, written independently.

    ``diag[k]`` is the epoch row of task k, ``off[tau][k]`` the backward rate.
    """
    n_e = len(epochs)
    c = np.full((K, K, n_e), np.nan)
    for k in range(K):
        c[k, k, :] = diag[k]
    best = np.zeros(K)
    for k in range(K):
        best[k] = np.max(c[k, k])
        e_idx = int(np.flatnonzero(c[k, k] == best[k])[0])
        c[k, k, e_idx:] = best[k]
    fwt = np.array([np.sum(c[k, k]) / n_e for k in range(K)])
    nbt = np.zeros(K)
    auc = np.zeros(K)
    for k in range(K):
        if k < K - 1:
            nbt[k] = sum(best[k] - off[t][k] for t in range(k + 1, K)) / (K - 1 - k)
        auc[k] = (fwt[k] + sum(off[t][k] for t in range(k + 1, K))) / (K - k)
    return fwt.mean(), nbt.mean(), auc.mean()


def build(K, epochs, diag, off):
    m = EvalMatrix(K, epochs)
    for k in range(K):
        for e, r in zip(epochs, diag[k]):
            m.set(k, k, e, r)
    for tau in range(K):
        es = best_checkpoint(diag[tau], epochs)[1]
        for k in range(tau):
            m.set(tau, k, es, off[tau][k])
    return m


def random_instance(rng):
    K = int(rng.integers(1, 8))
    n_e = int(rng.integers(1, 12))
    epochs = tuple(int(e) for e in np.sort(rng.choice(100, n_e, replace=False)))
    rollouts = int(rng.integers(1, 21))
    q = lambda size: rng.integers(0, rollouts + 1, size=size) / rollouts
    diag = [list(q(n_e)) for _ in range(K)]
    off = [list(q(K)) for _ in range(K)]
    return K, epochs, diag, off


def max_oracle_gap(n=200, seed=0):
    rng = np.random.default_rng(seed)
    gap = 0.0
    for _ in range(n):
        K, epochs, diag, off = random_instance(rng)
        rep = compute_metrics(build(K, epochs, diag, off))
        ref = oracle(K, epochs, diag, off)
        gap = max(gap, abs(rep.FWT - ref[0]), abs(rep.NBT - ref[1]), abs(rep.AUC - ref[2]))
    return gap


def test_matches_oracle_on_random_instances():
    assert max_oracle_gap(200) <= 1e-12


def k2_example():
    return build(2, (0, 5, 10), [[0.0, 0.5, 0.5], [0.2, 0.2, 0.6]], [[None, None], [0.4, None]])


def test_tagged_examples():
    perfect = build(2, tuple(range(0, 51, 5)), [[1.0] * 11] * 2, [[1.0] * 2] * 2)
    r = compute_metrics(perfect)
    assert (r.FWT, r.NBT, r.AUC) == (1.0, 0.0, 1.0)
    zero = build(3, tuple(range(0, 51, 5)), [[0.0] * 11] * 3, [[0.0] * 3] * 3)
    r = compute_metrics(zero)
    assert (r.FWT, r.NBT, r.AUC) == (0.0, 0.0, 0.0)
    r = compute_metrics(k2_example())
    assert r.FWT == pytest.approx(1 / 3, abs=1e-15)
    assert r.NBT == pytest.approx(0.05, abs=1e-15)
    assert r.AUC == pytest.approx(0.35, abs=1e-15)
    assert r.e_star == [5, 10]


def test_nbt_exclude_last_mode():
    r = compute_metrics(k2_example(), nbt_mode="exclude_last")
    assert r.NBT == pytest.approx(0.1)
    with pytest.raises(ValueError):
        compute_metrics(k2_example(), nbt_mode="bogus")


def test_best_checkpoint():
    assert best_checkpoint([0.0, 0.5, 0.5], [0, 5, 10]) == (0.5, 5)
    assert best_checkpoint([0.0] * 11) == (0.0, 0)
    rng = np.random.default_rng(1)
    for _ in range(1000):
        v = list(rng.integers(0, 5, 11) / 4)
        b, e = best_checkpoint(v)
        idx = 0
        for i in range(11):
            if v[i] > v[idx]:
                idx = i
        assert (b, e) == (v[idx], 5 * idx)


def test_missing_entry_names_location():
    m = k2_example()
    del m.entries[(1, 1, 5)]
    with pytest.raises(MissingEntry) as info:
        compute_metrics(m)
    assert (info.value.i, info.value.j, info.value.e) == (1, 1, 5)


def test_json_round_trip():
    m = k2_example()
    again = EvalMatrix.from_json(m.to_json())
    assert again.entries == m.entries and again.to_json() == m.to_json()
    r = compute_metrics(m)
    assert MetricReport.from_dict(r.to_dict()) == r


def test_set_rejects_unseen_tasks():
    m = EvalMatrix(2, (0, 5))
    with pytest.raises(ValueError):
        m.set(0, 1, 0, 0.5)
    with pytest.raises(ValueError):
        m.set(1, 0, 3, 0.5)


@given(st.data())
def test_bounds_and_monotone_response(data):
    seed = data.draw(st.integers(0, 10**6))
    K, epochs, diag, off = random_instance(np.random.default_rng(seed))
    r = compute_metrics(build(K, epochs, diag, off))
    assert 0 <= r.FWT <= 1 and 0 <= r.AUC <= 1 and -1 <= r.NBT <= 1
    if K > 1:
        tau = data.draw(st.integers(1, K - 1))
        k = data.draw(st.integers(0, tau - 1))
        off2 = [row[:] for row in off]
        off2[tau][k] = min(1.0, off2[tau][k] + data.draw(st.floats(0, 1)))
        r2 = compute_metrics(build(K, epochs, diag, off2))
        assert r2.NBT <= r.NBT + 1e-15 and r2.AUC >= r.AUC - 1e-15


def rep(x):
    return MetricReport(x, x, x, {}, [])


def test_aggregate_seeds():
    agg = aggregate_seeds([rep(0.2), rep(0.4), rep(0.6)])
    assert agg["FWT"].mean == pytest.approx(0.4)
    assert agg["FWT"].se == pytest.approx(0.2 / math.sqrt(3))
    assert round(agg["AUC"].se, 4) == 0.1155
    assert aggregate_seeds([rep(0.3)])["NBT"].se == 0.0
    assert aggregate_seeds([rep(0.6), rep(0.2), rep(0.4)]) == agg


def test_table_csv_shape():
    text = table_csv([("seql", "interference", aggregate_seeds([rep(0.5)]))])
    lines = text.strip().split("\n")
    assert len(lines) == 2
    cells = lines[1].split(",")
    assert len(cells) == 8 and all(float(c) >= 0 for c in cells[2:])
