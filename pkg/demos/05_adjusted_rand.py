"""Adjusted Rand index: agreement of two partitions, ignoring label names."""

from diversify.analysis import adjusted_rand_index

truth = [0, 0, 0, 1, 1, 1, 2, 2, 2]
for name, guess in (("renamed", [2, 2, 2, 0, 0, 0, 1, 1, 1]),
                    ("one error", [0, 0, 1, 1, 1, 1, 2, 2, 2]),
                    ("merged", [0, 0, 0, 0, 0, 0, 1, 1, 1]),
                    ("striped", [0, 1, 2, 0, 1, 2, 0, 1, 2])):
    print(f"{name:10s} {adjusted_rand_index(truth, guess):+.3f}")
