"""
Bloom filter memory used by DIAS consumers to recognize suppliers and
the states they already contributed.
"""

import math

import mmh3
from bitarray import bitarray

DEFAULT_BITS = 2048
DEFAULT_HASHES = 4


class BloomFilter:
    """m-bit filter with h seeded murmur3 hashes; no false negatives"""

    def __init__(self, m: int = DEFAULT_BITS, h: int = DEFAULT_HASHES):
        if m <= 0 or h <= 0:
            raise ValueError(f"bloom filter needs positive m and h, got m={m} h={h}")
        self.m = m
        self.h = h
        self.bits = bitarray(m)
        self.bits.setall(0)
        self.inserted = 0

    def _positions(self, item):
        key = str(item)
        return [mmh3.hash(key, seed, signed=False) % self.m for seed in range(self.h)]

    def add(self, item) -> "BloomFilter":
        for position in self._positions(item):
            self.bits[position] = 1
        self.inserted += 1
        return self

    def __contains__(self, item) -> bool:
        return all(self.bits[position] for position in self._positions(item))

    def expected_fpr(self, n: int = None) -> float:
        n = self.inserted if n is None else n
        return (1.0 - math.exp(-self.h * n / self.m)) ** self.h

    def fill_ratio(self) -> float:
        return self.bits.count(1) / self.m


def bloom_insert(bloom: BloomFilter, item) -> BloomFilter:
    return bloom.add(item)


def bloom_contains(bloom: BloomFilter, item) -> bool:
    return item in bloom
