#!/usr/bin/env python3
"""
Synthetic datasets for the reference services:
- EV-style charging plans for EPOS (per-agent plan files)
- a GDELT-like news-count stream for DIAS, plus an HTTP ingestion client
- possible-state derivation for DIAS suppliers
"""

import logging
import math
import random
from enum import Enum
from pathlib import Path

import numpy as np
import requests

from peerbed_errors import ServiceError
from services.dias import PossibleStates
from services.epos import Plan, read_plan_file, write_plan_file

logger = logging.getLogger(__name__)

DEFAULT_K = 9
STATE_WINDOW = 27
NEWS_TICK_MINUTES = 15
DEFAULT_NEWS_SOURCES = 28


class Horizon(Enum):
    D1 = 1440
    D3 = 4320
    D7 = 10080

    @classmethod
    def parse(cls, value):
        if isinstance(value, Horizon):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ServiceError(f"unknown planning horizon {value!r}; expected one of D1, D3, D7") from None


class PlanDatasetSpec:
    def __init__(self, num_agents, plans_per_agent=4, horizon=Horizon.D1, seed=0, dimension=None):
        if num_agents < 1 or plans_per_agent < 1:
            raise ServiceError("a dataset needs at least one agent and one plan per agent")
        if dimension is not None and dimension < 1:
            raise ServiceError(f"dimension must be positive, got {dimension}")
        self.num_agents = num_agents
        self.plans_per_agent = plans_per_agent
        self.horizon = Horizon.parse(horizon)
        self.seed = seed
        self.dimension = dimension

    @property
    def d(self):
        """Plan dimension; a reduced dimension keeps the horizon's day structure at coarser slots"""
        return self.dimension or self.horizon.value

    @property
    def days(self):
        return self.horizon.value // 1440


def _daytime_share(start, length, d, days):
    slots_per_day = d / days
    hours = ((np.arange(start, start + length) % slots_per_day) * 24.0 / slots_per_day)
    return float(np.mean((hours >= 8) & (hours < 20)))


def generate_agent_plans(spec, agent_index, seed=None):
    """
    Alternative charging plans of one EV: the same energy need spread over
    randomized charging windows. Local cost is the discomfort of charging
    while the car is likely in use, higher for day-time windows.
    """
    rng = np.random.default_rng([spec.seed if seed is None else seed, agent_index])
    d = spec.d
    energy = rng.uniform(5.0, 30.0)
    shortest = max(1, d // (24 * spec.days))
    longest = max(shortest, d // (6 * spec.days))
    plans = []
    for _ in range(spec.plans_per_agent):
        length = int(rng.integers(shortest, longest + 1))
        start = int(rng.integers(0, d - length + 1))
        values = np.zeros(d)
        values[start:start + length] = energy / length
        discomfort = 0.8 * _daytime_share(start, length, d, spec.days) + 0.2 * rng.uniform()
        plans.append(Plan(values, float(min(1.0, discomfort))))
    return plans


def plan_file_name(agent_index):
    return f"agent_{agent_index:04d}.plans"


def generate_plans(spec, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for agent in range(spec.num_agents):
        path = out / plan_file_name(agent)
        write_plan_file(path, generate_agent_plans(spec, agent))
        paths.append(path)
    logger.info(f"wrote {len(paths)} plan files of dimension {spec.d} to {out}")
    return paths


def load_plan_dir(plan_dir, num_agents):
    plan_dir = Path(plan_dir)
    plan_sets = []
    for agent in range(num_agents):
        path = plan_dir / plan_file_name(agent)
        if not path.exists():
            raise ServiceError(f"missing plan file {path}")
        plan_sets.append(read_plan_file(path))
    return plan_sets


class NewsStreamSpec:
    def __init__(self, num_sources=DEFAULT_NEWS_SOURCES, tick_period_ms=NEWS_TICK_MINUTES * 60 * 1000,
                 seed=0, endpoint=None):
        if num_sources < 1:
            raise ServiceError("a news stream needs at least one source")
        if tick_period_ms <= 0:
            raise ServiceError("tick period must be positive")
        self.num_sources = num_sources
        self.tick_period_ms = tick_period_ms
        self.seed = seed
        self.endpoint = endpoint


class SyntheticNewsStream:
    """Seeded bursty counts: log-normal base rate per source, hour-of-day modulation, rare bursts"""

    def __init__(self, spec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.base = self.rng.lognormal(mean=4.0, sigma=0.8, size=spec.num_sources)
        self.tick_index = 0

    def tick(self):
        hour = (self.tick_index * NEWS_TICK_MINUTES / 60.0) % 24.0
        modulation = 1.0 + 0.5 * math.sin(2 * math.pi * (hour - 6.0) / 24.0)
        bursts = np.where(self.rng.uniform(size=self.spec.num_sources) < 0.05,
                          self.rng.uniform(2.0, 5.0, size=self.spec.num_sources), 1.0)
        counts = self.rng.poisson(self.base * modulation * bursts)
        self.tick_index += 1
        return [int(c) for c in counts]

    def ticks(self, n):
        return [self.tick() for _ in range(n)]


class HttpNewsClient:
    """Polls an endpoint answering `source_id,count` lines; falls back to the previous values on failure"""

    def __init__(self, endpoint, num_sources=DEFAULT_NEWS_SOURCES, timeout=5):
        self.endpoint = endpoint
        self.num_sources = num_sources
        self.timeout = timeout
        self.last = None
        self.fallbacks = 0
        self.skipped = 0

    def _parse(self, text):
        counts = [None] * self.num_sources
        for line in text.splitlines():
            if not line.strip():
                continue
            source, count = line.split(",")
            index = int(source)
            if not 0 <= index < self.num_sources:
                raise ValueError(f"source {index} outside 0..{self.num_sources - 1}")
            counts[index] = int(count)
        if any(c is None for c in counts):
            raise ValueError(f"response covers {sum(c is not None for c in counts)} of {self.num_sources} sources")
        return counts

    def fetch(self):
        try:
            response = requests.get(self.endpoint, timeout=self.timeout)
            response.raise_for_status()
            counts = self._parse(response.text)
        except (requests.exceptions.RequestException, ValueError, IndexError) as e:
            if self.last is None:
                self.skipped += 1
                logger.warning(f"news endpoint {self.endpoint} unavailable and no prior values, tick skipped: {e}")
                return None
            self.fallbacks += 1
            logger.warning(f"event news_fallback: {self.endpoint} failed ({e}), reusing previous counts")
            return list(self.last)
        self.last = counts
        return counts


def stream_news(spec, ticks=None):
    """Per-tick counts per source; ingestion ticks without any value are skipped"""
    source = HttpNewsClient(spec.endpoint, spec.num_sources) if spec.endpoint else SyntheticNewsStream(spec)
    produced = 0
    while ticks is None or produced < ticks:
        produced += 1
        counts = source.fetch() if isinstance(source, HttpNewsClient) else source.tick()
        if counts is not None:
            yield counts


def derive_possible_states(window, k=DEFAULT_K, seed=0):
    """Uniform sample of k values from the last 27 observations, padded by nearest offsets when too few are distinct"""
    if not window:
        raise ServiceError("cannot derive possible states from an empty window")
    recent = list(window)[-STATE_WINDOW:]
    rng = random.Random(seed)
    sampled = sorted(set(rng.sample(recent, min(k, len(recent)))))
    if len(sampled) < k:
        logger.info(f"only {len(sampled)} distinct values in window, padding to {k} states")
        present = set(sampled)
        offset = 1
        while len(present) < k:
            for value in sampled:
                for candidate in (value + offset, value - offset):
                    if len(present) < k and candidate not in present:
                        present.add(candidate)
            offset += 1
        sampled = sorted(present)
    return PossibleStates(tuple(sampled))


def clock_possible_states(hour, rng, k=DEFAULT_K):
    """k distinct integers between the hour mark and the next one, e.g. 14 -> [1400, 1500]"""
    low = (hour % 24) * 100
    return PossibleStates(tuple(sorted(rng.sample(range(low, low + 101), k))))
