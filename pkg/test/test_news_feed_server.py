#!/usr/bin/env python3
"""
Tests for the HTTP news-count feed
"""

from data_generators import NewsStreamSpec, SyntheticNewsStream
from news_feed_server import create_app


def _client(seed=0):
    app = create_app(SyntheticNewsStream(NewsStreamSpec(seed=seed)))
    app.config['TESTING'] = True
    return app.test_client()


def test_counts_answers_one_line_per_source():
    response = _client().get('/counts')
    assert response.status_code == 200
    assert response.mimetype == 'text/plain'
    lines = response.get_data(as_text=True).splitlines()
    assert len(lines) == 28
    assert [int(line.split(",")[0]) for line in lines] == list(range(28))


def test_counts_follow_the_seeded_stream():
    expected = SyntheticNewsStream(NewsStreamSpec(seed=6)).ticks(2)
    client = _client(seed=6)
    for tick in expected:
        body = client.get('/counts').get_data(as_text=True)
        assert [int(line.split(",")[1]) for line in body.splitlines()] == tick


def test_status_reports_served_ticks():
    client = _client()
    status = client.get('/status').get_json()
    assert status['status'] == 'OPERATIONAL'
    assert status['ticks_served'] == 0
    assert status['last_total'] is None
    client.get('/counts')
    status = client.get('/status').get_json()
    assert status['ticks_served'] == 1
    assert status['sources'] == 28
