"""Lightweight runtime counters for flagged-but-tolerated events.

Counters are incremented from query paths (clamped encoder points,
re-normalized directions). Increments are GIL-atomic per key; a single
writer per counter is assumed during parallel sections.
"""

from collections import Counter

STATS = Counter()


def reset_stats():
    STATS.clear()
