#!/usr/bin/env python3
"""
Tests for the synthetic plan datasets, the news stream and possible-state derivation
"""

import random

import numpy as np
import pytest
import requests

import data_generators
from data_generators import (
    HttpNewsClient,
    NewsStreamSpec,
    PlanDatasetSpec,
    SyntheticNewsStream,
    clock_possible_states,
    derive_possible_states,
    generate_agent_plans,
    generate_plans,
    load_plan_dir,
    stream_news,
)
from peerbed_errors import ServiceError


def test_full_day_dataset_shape(tmp_path):
    paths = generate_plans(PlanDatasetSpec(50, 4, "D1", seed=1), tmp_path)
    assert len(paths) == 50
    plan_sets = load_plan_dir(tmp_path, 50)
    assert all(len(plans) == 4 for plans in plan_sets)
    assert {plan.dimension for plans in plan_sets for plan in plans} == {1440}


def test_same_seed_writes_identical_files(tmp_path):
    spec = PlanDatasetSpec(3, 4, "D1", seed=9, dimension=96)
    first = generate_plans(spec, tmp_path / "a")
    second = generate_plans(spec, tmp_path / "b")
    assert [p.read_bytes() for p in first] == [p.read_bytes() for p in second]


def test_plans_are_sparse_and_costs_bounded():
    spec = PlanDatasetSpec(10, 4, "D3", seed=2)
    for agent in range(spec.num_agents):
        plans = generate_agent_plans(spec, agent)
        energies = [plan.values.sum() for plan in plans]
        assert np.allclose(energies, energies[0])
        for plan in plans:
            assert plan.dimension == 4320
            assert 0.0 <= plan.local_cost <= 1.0
            assert np.count_nonzero(plan.values) < plan.dimension


def test_unknown_horizon_rejected():
    with pytest.raises(ServiceError):
        PlanDatasetSpec(5, 4, "D2")


def test_dataset_spec_parses_horizon_and_validates_sizes():
    spec = PlanDatasetSpec(2, horizon="d3")
    assert spec.d == 4320
    assert spec.days == 3
    assert PlanDatasetSpec(2, horizon="D7", dimension=168).d == 168
    with pytest.raises(ServiceError):
        PlanDatasetSpec(0)
    with pytest.raises(ServiceError):
        PlanDatasetSpec(2, dimension=0)
    with pytest.raises(ServiceError):
        NewsStreamSpec(num_sources=0)
    with pytest.raises(ServiceError):
        NewsStreamSpec(tick_period_ms=0)


def test_missing_plan_file_named(tmp_path):
    generate_plans(PlanDatasetSpec(2, 2, "D1", dimension=8), tmp_path)
    with pytest.raises(ServiceError, match="agent_0002.plans"):
        load_plan_dir(tmp_path, 3)


def test_synthetic_stream_has_one_count_per_source():
    stream = SyntheticNewsStream(NewsStreamSpec(seed=4))
    tick = stream.tick()
    assert len(tick) == 28
    assert all(isinstance(c, int) and c >= 0 for c in tick)


def test_synthetic_stream_is_reproducible():
    assert list(stream_news(NewsStreamSpec(seed=3), 5)) == SyntheticNewsStream(NewsStreamSpec(seed=3)).ticks(5)


class FakeResponse:
    def __init__(self, status, text=""):
        self.status_code = status
        self.text = text

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.exceptions.HTTPError(f"{self.status_code} error")


def _serve(monkeypatch, responses):
    replies = iter(responses)

    def fake_get(url, timeout):
        reply = next(replies)
        if isinstance(reply, Exception):
            raise reply
        return reply

    monkeypatch.setattr(data_generators.requests, "get", fake_get)


def test_http_client_reuses_last_values_after_failure(monkeypatch):
    _serve(monkeypatch, [FakeResponse(200, "0,5\n1,7\n"), FakeResponse(500)])
    client = HttpNewsClient("http://feed.local/counts", num_sources=2)
    assert client.fetch() == [5, 7]
    assert client.fetch() == [5, 7]
    assert client.fallbacks == 1


def test_http_client_skips_tick_without_prior_values(monkeypatch):
    _serve(monkeypatch, [requests.exceptions.ConnectionError("refused")])
    client = HttpNewsClient("http://feed.local/counts", num_sources=2)
    assert client.fetch() is None
    assert client.skipped == 1


def test_http_client_rejects_incomplete_response(monkeypatch):
    _serve(monkeypatch, [FakeResponse(200, "0,5\n")])
    assert HttpNewsClient("http://feed.local/counts", num_sources=2).fetch() is None


def test_endpoint_stream_drops_skipped_ticks(monkeypatch):
    _serve(monkeypatch, [requests.exceptions.Timeout("slow"), FakeResponse(200, "0,1\n"),
                         FakeResponse(200, "0,2\n")])
    spec = NewsStreamSpec(num_sources=1, endpoint="http://feed.local/counts")
    assert list(stream_news(spec, 3)) == [[1], [2]]


def test_possible_states_from_distinct_window():
    window = [float(v) for v in range(100, 127)]
    states = derive_possible_states(window, seed=1)
    assert states.k == 9
    assert list(states.states) == sorted(set(states.states))
    assert set(states.states) <= set(window)
    assert derive_possible_states(window, seed=1) == states


def test_possible_states_from_constant_window_are_padded():
    states = derive_possible_states([50.0] * 27)
    assert states.k == 9
    assert 50.0 in states.states
    assert min(states.states) == 46.0
    assert max(states.states) == 54.0


def test_only_last_window_observations_are_sampled():
    window = [1000.0] * 10 + [float(v) for v in range(27)]
    assert max(derive_possible_states(window).states) < 27


def test_empty_window_rejected():
    with pytest.raises(ServiceError):
        derive_possible_states([])


def test_clock_states_fall_inside_the_hour():
    states = clock_possible_states(14, random.Random(0))
    assert states.k == 9
    assert all(1400 <= s <= 1500 for s in states.states)


@pytest.mark.parametrize("body", ["-1,5\n0,4\n1,7\n", "0,4\n1,7\n2,9\n"])
def test_http_client_rejects_unknown_source_ids(monkeypatch, body):
    _serve(monkeypatch, [FakeResponse(200, "0,5\n1,7\n"), FakeResponse(200, body)])
    client = HttpNewsClient("http://feed.local/counts", num_sources=2)
    assert client.fetch() == [5, 7]
    assert client.fetch() == [5, 7]
    assert client.fallbacks == 1
