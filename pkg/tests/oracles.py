"""Independent brute-force metric oracles used to verify the streaming code.

These recompute everything naively from the definitions (precision at each
rank is recounted from scratch); they deliberately share no code with
moerec.metrics.
"""

import math
from itertools import combinations, permutations


def oracle_precision(relevant, ranking, k):
    top = list(ranking)[:k]
    return sum(1 for x in top if x in relevant) / k


def oracle_recall(relevant, ranking, k):
    top = list(ranking)[:k]
    return sum(1 for x in top if x in relevant) / len(relevant)


def oracle_ndcg(relevant, ranking, k):
    dcg = 0.0
    for i in range(1, min(k, len(ranking)) + 1):
        if ranking[i - 1] in relevant:
            dcg += 1.0 / math.log2(i + 1)
    idcg = 0.0
    for i in range(1, min(len(relevant), k) + 1):
        idcg += 1.0 / math.log2(i + 1)
    return dcg / idcg


def oracle_map(relevant, ranking, k):
    total = 0.0
    for i in range(1, min(k, len(ranking)) + 1):
        if ranking[i - 1] in relevant:
            hits_at_i = sum(1 for x in ranking[:i] if x in relevant)
            total += hits_at_i / i
    return total / min(len(relevant), k)


ORACLES = {
    "precision": oracle_precision,
    "recall": oracle_recall,
    "ndcg": oracle_ndcg,
    "map": oracle_map,
}


def exhaustive_cases(max_items=6):
    """Yield (relevant, ranking, k) over every ranking of <= max_items items.

    Small universes include every partial permutation and K in 1..6; the
    larger ones (5, 6 items) cover full permutations at K=5.
    """
    for n in range(1, max_items + 1):
        items = tuple(range(n))
        subsets = [set(c) for r in range(1, n + 1) for c in combinations(items, r)]
        if n <= 4:
            rankings = [p for length in range(0, n + 1) for p in permutations(items, length)]
            ks = range(1, 7)
        else:
            rankings = list(permutations(items))
            ks = (5,)
        for relevant in subsets:
            for ranking in rankings:
                for k in ks:
                    yield relevant, ranking, k
