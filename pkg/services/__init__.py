"""
Reference services hosted by peerbed service agents.

- epos.py: iterative collective learning over a balanced binary tree (plan selection)
- dias.py: gossip-based decentralized aggregation with Bloom-filter memory
- bloom_filter.py: the Bloom filter shared by DIAS consumers

Both services run unchanged in SIM and LIVE mode; they only talk through
peer messaging and timers.
"""
