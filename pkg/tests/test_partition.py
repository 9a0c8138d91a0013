import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oocnmf.partition import (CNMF, RNMF, InfeasibleBudget, PlanError, choose_strategy, make_plan,
                              memory_estimate, plan_for_budget, split)


def test_choose_strategy():
    assert choose_strategy(100, 200) == CNMF
    assert choose_strategy(200, 100) == RNMF
    assert choose_strategy(100, 100) == RNMF


def test_cnmf_example():
    p = make_plan(8, 4, 2, 2, 2, "cnmf")
    assert (p.J, p.I) == (2, 4)
    w0 = p.worker(0)
    assert w0.a_window == (0, 8, 0, 2) and w0.h_cols == (0, 2)
    assert w0.w_role == "replicated" and w0.h_role == "slab"
    assert p.batch_windows(1) == [(0, 4, 2, 4), (4, 8, 2, 4)]


def test_single_window():
    p = make_plan(5, 7, 3, 1, 1)
    assert p.batch_windows(0) == [(0, 5, 0, 7)]


def test_remainder_widths():
    p = make_plan(10, 7, 2, 3, 1, "cnmf")
    widths = [s.h_cols[1] - s.h_cols[0] for s in p.slabs]
    assert widths == [3, 2, 2]
    assert split(10, 4) == [(0, 3), (3, 6), (6, 8), (8, 10)]


def test_too_many_workers():
    with pytest.raises(PlanError):
        make_plan(10, 4, 2, 5, 1, "cnmf")
    with pytest.raises(PlanError):
        make_plan(4, 10, 2, 5, 1, "rnmf")


def tiles_exactly(plan):
    cover = np.zeros((plan.m, plan.n), dtype=int)
    for r in range(plan.n_workers):
        for r0, r1, c0, c1 in plan.batch_windows(r):
            cover[r0:r1, c0:c1] += 1
        r0, r1, c0, c1 = plan.worker(r).a_window
        assert all(r0 <= w[0] and w[1] <= r1 and c0 <= w[2] and w[3] <= c1
                   for w in plan.batch_windows(r))
    return np.all(cover == 1)


def test_exhaustive_tiling():
    for m, n in itertools.product(range(1, 33, 3), range(1, 33, 5)):
        for strat in ("cnmf", "rnmf"):
            part = n if strat == "cnmf" else m
            batch = m if strat == "cnmf" else n
            for nw in range(1, min(8, part) + 1):
                for nb in range(1, min(4, batch) + 1):
                    assert tiles_exactly(make_plan(m, n, 2, nw, nb, strat))


@given(st.integers(1, 32), st.integers(1, 32), st.integers(1, 8), st.integers(1, 4),
       st.sampled_from(["auto", "cnmf", "rnmf"]))
def test_tiling_property(m, n, nw, nb, strat):
    try:
        plan = make_plan(m, n, 3, nw, nb, strat)
    except PlanError:
        return
    assert tiles_exactly(plan)
    assert plan == make_plan(m, n, 3, nw, nb, strat)


def test_plan_json_roundtrip():
    import json
    p = make_plan(12, 30, 4, 3, 2)
    d = json.loads(p.to_json())
    assert d["strategy"] == CNMF and d["J"] == 10 and d["I"] == 6 and len(d["slabs"]) == 3


def test_memory_model_examples():
    plan = make_plan(1024, 1024, 8, 1, 1)
    s_a = 1024 * 1024 * 8
    rep, nb = memory_estimate(plan, budget=int(3.5 * s_a))
    assert nb == 1 and rep.feasible
    _, nb = memory_estimate(plan, budget=s_a)
    assert nb > 1
    with pytest.raises(InfeasibleBudget):
        memory_estimate(make_plan(1024, 1024, 600, 1, 1), budget=s_a)


def test_peak_nonincreasing_in_batches():
    base = make_plan(300, 200, 5, 2, 1)
    peaks = [memory_estimate(make_plan(300, 200, 5, 2, nb))[0].peak for nb in range(1, 60)]
    assert all(b <= a for a, b in zip(peaks, peaks[1:]))
    assert base.n_batches == 1


def test_plan_for_budget_fits():
    plan, rep = plan_for_budget(400, 300, 6, 2, 200_000)
    assert rep.peak <= 200_000 and plan.n_batches >= 1
    if plan.n_batches > 1:
        smaller = make_plan(400, 300, 6, 2, plan.n_batches - 1, plan.strategy)
        assert memory_estimate(smaller)[0].peak > 200_000
