import networkx as nx
import numpy as np
import pytest
from hypothesis import given, strategies as st

from pipelearn.cost import LayerProfiles, NetworkProfile, random_profile
from pipelearn.stages import (BC, BS, D, FC, FS, U, MissingStageTime, Stage, StageKind,
                              build_iteration_graph, completion_times, compose, estimate_makespan,
                              kind_times, schedule, schedule_csv, stage_prev, stage_times)

# Dependency table of one iteration: (kind, position) -> (previous, next), each a list of
# (kind, offset) with offset "N" meaning the last micro-batch.  position: first, middle, last.
TABLE = {
    (FC, "first"): ([], [(FC, +1), (U, 0)]),
    (FC, "middle"): ([(FC, -1)], [(FC, +1), (U, 0)]),
    (FC, "last"): ([(FC, -1)], [(BC, "1"), (U, 0)]),
    (U, "first"): ([(FC, 0)], [(U, +1), (FS, 0)]),
    (U, "middle"): ([(U, -1), (FC, 0)], [(U, +1), (FS, 0)]),
    (U, "last"): ([(U, -1), (FC, 0)], [(FS, 0)]),
    (FS, "first"): ([(U, 0)], [(BS, 0)]),
    (FS, "middle"): ([(U, 0), (BS, -1)], [(BS, 0)]),  # bs_n: its own row lists fs_n as previous
    (FS, "last"): ([(U, 0), (BS, -1)], [(BS, 0)]),
    (BS, "first"): ([(FS, 0)], [(FS, +1), (D, 0)]),
    (BS, "middle"): ([(FS, 0)], [(FS, +1), (D, 0)]),
    (BS, "last"): ([(FS, 0)], [(D, 0)]),
    (D, "first"): ([(BS, 0)], [(D, +1), (BC, 0)]),
    (D, "middle"): ([(D, -1), (BS, 0)], [(D, +1), (BC, 0)]),
    (D, "last"): ([(D, -1), (BS, 0)], [(BC, 0)]),
    (BC, "first"): ([(FC, "N"), (D, 0)], [(BC, +1)]),
    (BC, "middle"): ([(BC, -1), (D, 0)], [(BC, +1)]),
    (BC, "last"): ([(BC, -1), (D, 0)], []),
}


def _resolve(entries, n, N):
    out = set()
    for kind, off in entries:
        i = N if off == "N" else 1 if off == "1" else n + off
        if 1 <= i <= N:
            out.add(Stage(kind, i, 0))
    return out


def _positions(n, N):
    pos = []
    if n == 1:
        pos.append("first")
    if n == N:
        pos.append("last")
    if 1 < n < N:
        pos.append("middle")
    return pos


def test_table_has_eighteen_rows():
    assert len(TABLE) == 18


@pytest.mark.parametrize("N", [1, 2, 3, 5])
@pytest.mark.parametrize("row", list(TABLE), ids=lambda r: f"{r[0].symbol}-{r[1]}" if isinstance(r, tuple) else str(r))
def test_dependency_table_row(row, N):
    g = build_iteration_graph(N)
    nxt = g.successors()
    kind, position = row
    for n in range(1, N + 1):
        pos = _positions(n, N)
        if position not in pos:
            continue
        # a stage that is both first and last takes the union of both rows
        prev, after = set(), set()
        for p in pos:
            prev |= _resolve(TABLE[(kind, p)][0], n, N)
            after |= _resolve(TABLE[(kind, p)][1], n, N)
        stage = Stage(kind, n, 0)
        assert set(g.prev[stage]) == prev, stage
        assert set(nxt[stage]) == after, stage


def test_graph_shape():
    g = build_iteration_graph(4, k=2)
    assert len(g) == 24
    assert g.sources == [Stage(FC, 1, 2)] and g.sinks == [Stage(BC, 4, 2)]
    assert all(s.k == 2 for s in g.stages)
    with pytest.raises(ValueError):
        build_iteration_graph(0)
    with pytest.raises(ValueError):
        stage_prev(FC, 3, 2)


def _nx_makespan(g, times):
    """Longest path through a node-weighted DAG via edge weights on a split-node graph."""
    G = nx.DiGraph()
    for r in g.stages:
        G.add_edge(("in", r), ("out", r), weight=times[r])
        for p in g.prev[r]:
            G.add_edge(("out", p), ("in", r), weight=0.0)
    return nx.dag_longest_path_length(G, weight="weight")


@given(N=st.integers(1, 12), seed=st.integers(0, 10**6))
def test_dp_matches_longest_path_oracle(N, seed):
    rng = np.random.default_rng(seed)
    g = build_iteration_graph(N)
    times = {r: float(rng.exponential()) for r in g.stages}
    assert estimate_makespan(g, times) == pytest.approx(_nx_makespan(g, times), rel=1e-12, abs=1e-12)


def test_hand_computed_makespan():
    # N=2, every stage 1s: fc1 fc2 | u1 u2 | fs1 bs1 fs2 bs2 | d1 d2 | bc1 bc2
    g = build_iteration_graph(2)
    T = completion_times(g, {r: 1.0 for r in g.stages})
    assert T[Stage(U, 2, 0)] == 3.0
    assert T[Stage(FS, 2, 0)] == 5.0
    assert T[Stage(D, 1, 0)] == 5.0 and T[Stage(BC, 1, 0)] == 6.0
    assert estimate_makespan(g, {r: 1.0 for r in g.stages}) == 8.0


def test_missing_and_negative_times():
    g = build_iteration_graph(1)
    with pytest.raises(MissingStageTime):
        completion_times(g, {})
    with pytest.raises(ValueError):
        completion_times(g, {r: -1.0 for r in g.stages})


def test_compose_chains_graphs():
    a, b = build_iteration_graph(2, k=0), build_iteration_graph(2, k=1)
    g = compose([a, b], [(Stage(BC, 2, 0), Stage(FC, 1, 1))])
    times = {r: 1.0 for r in g.stages}
    assert estimate_makespan(g, times) == 16.0
    with pytest.raises(ValueError):
        compose([a, a])


def test_kind_times_from_profile():
    prof = LayerProfiles([1, 2], [2, 4], [0.5, 0.5], [1, 1], [10, 4], [10, 4])
    net = NetworkProfile(5.0, 10.0)
    t = kind_times(1, 2, prof, net)
    assert t == {FC: 0.5, U: 1.0, FS: 0.25, BS: 0.5, D: 0.5, BC: 1.0}
    assert len(stage_times(1, 2, prof, net)) == 12
    full = kind_times(2, 1, prof, net)
    assert full[FS] == 0.0 and full[U] == 4 / 5.0
    with pytest.raises(ValueError):
        kind_times(3, 1, prof, net)


def test_schedule_export():
    g = build_iteration_graph(2)
    rows = schedule(g, {r: 1.0 for r in g.stages})
    assert rows[0].stage == Stage(FC, 1, 0) and rows[0].start == 0.0
    text = schedule_csv(rows)
    lines = text.splitlines()
    assert lines[0] == "lane,stage,kind,device,batch,start,end"
    assert len(lines) == 13


@given(seed=st.integers(0, 10**6), N=st.integers(1, 10))
def test_makespan_monotone_in_stage_times(seed, N):
    prof = random_profile(seed)
    net = NetworkProfile(10.0, 20.0)
    P = 1 + seed % prof.Q
    g = build_iteration_graph(N)
    base = stage_times(P, N, prof, net)
    slower = {r: t * 1.5 for r, t in base.items()}
    assert estimate_makespan(g, slower) >= estimate_makespan(g, base)
