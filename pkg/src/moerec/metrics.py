"""Top-K ranking metrics: Precision@K, Recall@K, NDCG@K, MAP@K.

Relevance is binary. Users whose ground-truth set is empty are excluded from
every average; a user with ground truth but no ranking scores zero. Per-user
values are accumulated in sorted user_id order so results are reproducible
bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ValidationError


@dataclass
class MetricReport:
    precision_at_k: float
    recall_at_k: float
    ndcg_at_k: float
    map_at_k: float
    k: int
    n_users_evaluated: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _check_k(k: int) -> None:
    if k < 1:
        raise ValidationError(f"K must be >= 1, got {k}")


def _check_ranking(ranking: Sequence[int]) -> None:
    if len(set(ranking)) != len(ranking):
        raise ValidationError(f"ranking contains duplicate labels: {list(ranking)}")


def precision_user(relevant: set, ranking: Sequence[int], k: int) -> float:
    """|hits in top-K| / K; the denominator stays K for short lists."""
    hits = 0
    for label in ranking[:k]:
        if label in relevant:
            hits += 1
    return hits / k


def recall_user(relevant: set, ranking: Sequence[int], k: int) -> float:
    hits = 0
    for label in ranking[:k]:
        if label in relevant:
            hits += 1
    return hits / len(relevant)


def ndcg_user(relevant: set, ranking: Sequence[int], k: int) -> float:
    """Binary-gain DCG@K over the ideal DCG of min(|R|, K) leading ones."""
    dcg = 0.0
    for i, label in enumerate(ranking[:k], start=1):
        if label in relevant:
            dcg += 1.0 / math.log2(i + 1)
    idcg = 0.0
    for i in range(1, min(len(relevant), k) + 1):
        idcg += 1.0 / math.log2(i + 1)
    return dcg / idcg


def ap_user(relevant: set, ranking: Sequence[int], k: int) -> float:
    """AP@K with the min(|R|, K) normalizer."""
    hits = 0
    total = 0.0
    for i, label in enumerate(ranking[:k], start=1):
        if label in relevant:
            hits += 1
            total += hits / i
    return total / min(len(relevant), k)


_PER_USER = {
    "precision": precision_user,
    "recall": recall_user,
    "ndcg": ndcg_user,
    "map": ap_user,
}


def _mean_over_users(metric: str, truth: Mapping[str, set], rankings: Mapping[str, Sequence[int]],
                     k: int) -> float:
    _check_k(k)
    fn = _PER_USER[metric]
    total = 0.0
    n = 0
    for user_id in sorted(truth):
        relevant = truth[user_id]
        if not relevant:
            continue
        ranking = rankings.get(user_id, ())
        _check_ranking(ranking)
        total += fn(set(relevant), ranking, k)
        n += 1
    return total / n if n else 0.0


def precision_at_k(truth, rankings, k: int) -> float:
    return _mean_over_users("precision", truth, rankings, k)


def recall_at_k(truth, rankings, k: int) -> float:
    return _mean_over_users("recall", truth, rankings, k)


def ndcg_at_k(truth, rankings, k: int) -> float:
    return _mean_over_users("ndcg", truth, rankings, k)


def map_at_k(truth, rankings, k: int) -> float:
    return _mean_over_users("map", truth, rankings, k)


def evaluate(truth: Mapping[str, set], rankings: Mapping[str, Sequence[int]], k: int) -> MetricReport:
    """All four metrics over the users with nonempty ground truth."""
    _check_k(k)
    n = sum(1 for u in truth if truth[u])
    return MetricReport(
        precision_at_k=precision_at_k(truth, rankings, k),
        recall_at_k=recall_at_k(truth, rankings, k),
        ndcg_at_k=ndcg_at_k(truth, rankings, k),
        map_at_k=map_at_k(truth, rankings, k),
        k=k,
        n_users_evaluated=n,
    )


# ---------------------------------------------------------------------------
# file interfaces


def load_truth(path: str | Path) -> dict[str, set]:
    """Read truth.jsonl: {"user_id": ..., "relevant": [labels]} per line."""
    truth: dict[str, set] = {}
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            truth[row["user_id"]] = set(int(x) for x in row["relevant"])
        except (KeyError, ValueError) as e:
            raise ValidationError(f"{path}:{i}: bad truth record: {e}") from e
    return truth


def load_rankings(path: str | Path) -> dict[str, list[int]]:
    """Read rankings.jsonl: {"user_id": ..., "ranking": [labels]} per line."""
    rankings: dict[str, list[int]] = {}
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            rankings[row["user_id"]] = [int(x) for x in row["ranking"]]
        except (KeyError, ValueError) as e:
            raise ValidationError(f"{path}:{i}: bad ranking record: {e}") from e
    return rankings


def save_truth(truth: Mapping[str, Iterable[int]], path: str | Path) -> None:
    with open(path, "w") as f:
        for user_id in sorted(truth):
            f.write(json.dumps({"user_id": user_id, "relevant": sorted(truth[user_id])}) + "\n")


def save_rankings(rankings: Mapping[str, Sequence[int]], path: str | Path) -> None:
    with open(path, "w") as f:
        for user_id in sorted(rankings):
            f.write(json.dumps({"user_id": user_id, "ranking": list(rankings[user_id])}) + "\n")
