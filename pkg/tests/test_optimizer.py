import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pipelearn.cost import EpochShape, LayerProfiles, NetworkProfile, network, random_profile, uniform_profile
from pipelearn.optimizer import (DegenerateProfileError, PipelineParams, candidate_N, idle_gap, score,
                                 select_params, shortlist)
from pipelearn.sim import exhaustive_search


def test_candidate_n_by_hand():
    # fc=1, bc=2; gap = up 10/5 + fs 0.5 + bs 1 + down 10/10 = 4.5; N = 1 + ceil(4.5 / 1) = 6
    p = LayerProfiles([1, 9], [2, 9], [9, .5], [9, 1], [10, 1], [10, 1])
    net = NetworkProfile(5.0, 10.0)
    assert idle_gap(1, p, net) == (4.5, 1.0)
    assert candidate_N(1, p, net) == 6
    assert candidate_N(1, p, net, batch_size=4) == 4


def test_candidate_n_without_server_work():
    p = LayerProfiles([1, 1], [1, 1], [1, 1], [1, 1], [2, 2], [2, 2])
    net = NetworkProfile(1.0, 1.0)
    assert idle_gap(2, p, net)[0] == 4.0
    assert candidate_N(2, p, net) == 1 + math.ceil(4.0 / 2)


def test_degenerate_profile():
    p = LayerProfiles([0, 1], [0, 1], [1, 1], [1, 1], [1, 1], [1, 1])
    with pytest.raises(DegenerateProfileError):
        candidate_N(1, p, NetworkProfile(1, 1))
    assert [c.P for c in shortlist(p, NetworkProfile(1, 1))] == [2]
    zero = LayerProfiles([0], [0], [1], [1], [1], [1])
    with pytest.raises(DegenerateProfileError):
        select_params(zero, NetworkProfile(1, 1), EpochShape(100, 10))


def test_invalid_params():
    with pytest.raises(ValueError):
        PipelineParams(0, 1)
    with pytest.raises(ValueError):
        idle_gap(5, uniform_profile(2), network("4g"))


def test_selection_per_device_and_report():
    fast, slow = uniform_profile(3, device_time=0.1), uniform_profile(3, device_time=1.0)
    sel = select_params([fast, slow], network("4g"), EpochShape(1000, 100))
    assert len(sel.params) == 2
    assert sel.global_estimate == max(sel.estimates)
    assert sel.params[0].N >= sel.params[1].N
    text = sel.report()
    assert text.startswith("# pipeline parameter selection") and "device 1:" in text
    with pytest.raises(ValueError):
        select_params([fast], [network("4g")] * 2, EpochShape(1000, 100))
    with pytest.raises(ValueError):
        select_params(fast, network("4g"), EpochShape(1000, 100), mode="greedy")


def test_selection_is_best_estimated_shortlisted_candidate():
    prof = random_profile(11)
    net, shape = network("4g+"), EpochShape(5000, 100)
    sel = select_params(prof, net, shape)
    best = min(sel.candidates[0], key=lambda ct: (ct[1], ct[0].P, ct[0].N))
    assert sel.params[0] == best[0]


def test_score_definition():
    assert score(10.0, 8.0) == 0.8
    assert score(PipelineParams(1, 2), PipelineParams(1, 3), lambda p: float(p.N)) == 1.5
    with pytest.raises(ValueError):
        score(0.0, 1.0)


@given(seed=st.integers(0, 10**6))
def test_oracle_never_slower_than_selection(seed):
    prof = random_profile(seed, Q=3)
    net, shape = network("wifi"), EpochShape(400, 20)
    sel = select_params(prof, net, shape).params[0]
    best, t_best, table = exhaustive_search(prof, net, shape)
    assert t_best <= table[(sel.P, sel.N)]
    assert 0 < score(table[(sel.P, sel.N)], t_best) <= 1
