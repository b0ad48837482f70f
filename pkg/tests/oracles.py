"""Brute-force reference implementations of the retrieval and rank metrics."""

import math

def oracle_ap(rel):
    hits, total = 0, 0.0
    for k, r in enumerate(rel, start=1):
        if r:
            hits += 1
            total += hits / k
    return total / hits


def oracle_rankings(sims, q_labels, g_labels, loo):
    # every query: gallery items sorted by (-similarity, index) with a plain sort
    out = []
    for i in range(len(q_labels)):
        items = [(-sims[i][j], j) for j in range(len(g_labels)) if not (loo and j == i)]
        items.sort()
        out.append([g_labels[j] == q_labels[i] for _, j in items])
    return out


def oracle_map(sims, q_labels, g_labels, loo):
    aps = [oracle_ap(r) for r in oracle_rankings(sims, q_labels, g_labels, loo) if any(r)]
    return sum(aps) / len(aps)


def oracle_recall(sims, q_labels, g_labels, loo, k):
    rows = [r for r in oracle_rankings(sims, q_labels, g_labels, loo) if any(r)]
    return sum(1.0 for r in rows if any(r[:k])) / len(rows)


def oracle_ranks(v):
    return [sum(1 for y in v if y < x) + (sum(1 for y in v if y == x) + 1) / 2 for x in v]


def oracle_spearman(a, b):
    ra, rb = oracle_ranks(a), oracle_ranks(b)
    ma, mb = sum(ra) / len(ra), sum(rb) / len(rb)
    num = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    den = math.sqrt(sum((x - ma) ** 2 for x in ra) * sum((y - mb) ** 2 for y in rb))
    return num / den
