import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prsroute.errors import ConfigError, InvalidInputError, ParseError
from prsroute.router import RouterConfig, random_checkpoint
from prsroute.strategy import (CLOUD, EDGE, Budget, RoutingPolicy, _max_count, budget_to_rate,
                               calibrate_threshold, destination, route, route_many)


def test_budget_fee_bound():
    # 0.95 per request with cloud at 2.0 each
    assert budget_to_rate(Budget(cloud_cost=2.0, fee_budget=0.95)) == pytest.approx(0.475)


def test_budget_latency_bound():
    # (5 - 2 - 0.5) / (10 - 2) = 0.3125
    b = Budget(cloud_cost=1.0, fee_budget=1.0, time_budget=5.0, cloud_latency=10.0,
               edge_latency=2.0, router_latency=0.5)
    assert budget_to_rate(b) == pytest.approx(0.3125)


def test_budget_takes_tighter_bound_and_clamps():
    b = Budget(cloud_cost=1.0, fee_budget=0.2, time_budget=5.0, cloud_latency=10.0,
               edge_latency=2.0)
    assert budget_to_rate(b) == pytest.approx(0.2)
    assert budget_to_rate(Budget(cloud_cost=1.0, fee_budget=5.0)) == 1.0
    assert budget_to_rate(Budget(cloud_cost=0.0, fee_budget=0.0)) == 1.0
    tight = Budget(cloud_cost=1.0, fee_budget=1.0, time_budget=1.0, cloud_latency=10.0,
                   edge_latency=2.0)
    assert budget_to_rate(tight) == 0.0


def test_budget_latency_nonsense_rejected():
    with pytest.raises(ConfigError):
        budget_to_rate(Budget(cloud_cost=1.0, fee_budget=1.0, time_budget=1.0,
                              cloud_latency=2.0, edge_latency=3.0))
    with pytest.raises(ConfigError):
        Budget(cloud_cost=-1.0, fee_budget=1.0)


def test_max_count_resists_rounding():
    assert _max_count(0.29, 100) == 29
    assert _max_count(0.7, 10) == 7
    assert _max_count(0.0, 5) == 0
    assert _max_count(1.0, 5) == 5


def test_calibration_examples():
    preds = [0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9]
    # two of eight allowed below alpha -> third smallest
    assert calibrate_threshold(preds, 0.25) == 0.3
    assert calibrate_threshold(preds, 0.0) == 0.1
    # cap applies
    assert calibrate_threshold(preds, 0.75) == 0.5
    assert calibrate_threshold(preds, 1.0) == 0.5


def test_calibration_with_ties_stays_within_bound():
    preds = [0.3] * 5 + [0.4] * 5
    a = calibrate_threshold(preds, 0.2)
    assert np.mean(np.array(preds) < a) <= 0.2


def test_calibration_errors():
    with pytest.raises(InvalidInputError):
        calibrate_threshold([], 0.5)
    with pytest.raises(ConfigError):
        calibrate_threshold([0.1], 1.5)


@settings(max_examples=300)
@given(st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=1, max_size=60),
       st.floats(0.0, 1.0, allow_nan=False))
def test_calibration_guarantee(preds, rho):
    a = calibrate_threshold(preds, rho)
    assert a <= 0.5
    assert np.mean(np.array(preds) < a) <= rho


@settings(max_examples=200)
@given(st.lists(st.floats(0.0, 0.49, allow_nan=False), min_size=1, max_size=40),
       st.floats(0.0, 1.0, allow_nan=False))
def test_calibration_is_tight_below_cap(preds, rho):
    # any larger threshold would break the bound
    a = calibrate_threshold(preds, rho)
    if a < 0.5:
        assert np.mean(np.array(preds) < np.nextafter(a, 1.0)) > rho


def test_destination_tie_goes_to_edge():
    assert destination(0.3, 0.3) == EDGE
    assert destination(0.2999, 0.3) == CLOUD


def test_policy_validation_and_round_trip(tmp_path):
    with pytest.raises(ConfigError):
        RoutingPolicy(0.6, 0.5)
    with pytest.raises(ConfigError):
        RoutingPolicy(0.3, 1.5)
    p = RoutingPolicy(0.42, 0.5, "ck.bin", "ab" * 32)
    p.save(tmp_path / "p.json")
    assert RoutingPolicy.load(tmp_path / "p.json") == p
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(ParseError):
        RoutingPolicy.load(tmp_path / "bad.json")


def test_route_decision_fields():
    ck = random_checkpoint(RouterConfig(vocab_size=10, d=8, n_metrics=3, K=2, l=2, attn_heads=2))
    policy = RoutingPolicy(0.5, 0.5)
    d = route("a", [1, 2, 3], ck, policy)
    assert d.destination == (CLOUD if d.predicted_prs < 0.5 else EDGE)
    assert d.to_dict()["alpha"] == 0.5
    many = route_many(["a", "b"], [[1, 2, 3], [4]], ck, policy)
    assert many[0] == d
    assert math.isfinite(many[1].predicted_prs)
