"""Multiclass gradient-boosted regression trees (softmax objective).

One shallow regression tree per class per round is fit to the softmax
negative-gradient residuals with greedy variance-reduction splits. Leaf
values are mean residuals, applied with shrinkage on top of per-class
log-prior margins. Fitting is fully deterministic: columns are scanned in
index order and ties break toward the lower feature index and threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ValidationError

_MIN_GAIN = 1e-12


def _sorted_index(x: np.ndarray) -> np.ndarray:
    """Per-column row indices sorting x ascending; computed once per fit."""
    return np.argsort(x, axis=0, kind="stable")


def _best_split_sorted(x: np.ndarray, r: np.ndarray,
                       sorted_idx: np.ndarray) -> Optional[tuple[int, float]]:
    """Greedy SSE-reduction split over the node's pre-sorted rows."""
    n = sorted_idx.shape[0]
    if n < 2:
        return None
    xs = np.take_along_axis(x, sorted_idx, axis=0)
    rs = r[sorted_idx]
    csum = np.cumsum(rs, axis=0)
    total = csum[-1]
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    s_left = csum[:-1]
    s_right = total[None, :] - s_left
    gain = s_left ** 2 / n_left + s_right ** 2 / (n - n_left) - (total ** 2 / n)[None, :]
    gain[xs[:-1] == xs[1:]] = -np.inf
    flat = np.argmax(gain.T)  # feature-major: ties pick the lower feature, then lower position
    feature, pos = divmod(int(flat), n - 1)
    if gain[pos, feature] <= _MIN_GAIN:
        return None
    threshold = 0.5 * (xs[pos, feature] + xs[pos + 1, feature])
    return feature, float(threshold)


def _child_orders(x: np.ndarray, sorted_idx: np.ndarray, feature: int,
                  threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Split a node's sorted-index matrix without re-sorting (stable filter)."""
    d = sorted_idx.shape[1]
    go_left = np.zeros(x.shape[0], dtype=bool)
    node_rows = sorted_idx[:, 0]
    go_left[node_rows[x[node_rows, feature] <= threshold]] = True
    sel = go_left[sorted_idx]
    n_left = int(sel[:, 0].sum())
    left = sorted_idx.T[sel.T].reshape(d, n_left).T
    right = sorted_idx.T[~sel.T].reshape(d, sorted_idx.shape[0] - n_left).T
    return left, right


def _fit_tree_sorted(x: np.ndarray, r: np.ndarray, depth: int,
                     sorted_idx: np.ndarray) -> dict:
    rows = sorted_idx[:, 0]
    if depth == 0 or rows.size < 2:
        return {"value": float(r[rows].mean())}
    found = _best_split_sorted(x, r, sorted_idx)
    if found is None:
        return {"value": float(r[rows].mean())}
    feature, threshold = found
    left_idx, right_idx = _child_orders(x, sorted_idx, feature, threshold)
    if left_idx.shape[0] == 0 or right_idx.shape[0] == 0:
        # midpoint rounded onto a sample value; treat as unsplittable
        return {"value": float(r[rows].mean())}
    return {
        "feature": feature,
        "threshold": threshold,
        "left": _fit_tree_sorted(x, r, depth - 1, left_idx),
        "right": _fit_tree_sorted(x, r, depth - 1, right_idx),
    }


def _fit_tree(x: np.ndarray, r: np.ndarray, depth: int) -> dict:
    return _fit_tree_sorted(x, r, depth, _sorted_index(x))


def _tree_predict(tree: dict, x: np.ndarray) -> np.ndarray:
    out = np.empty(x.shape[0], dtype=np.float64)
    idx = np.arange(x.shape[0])

    def walk(node, rows):
        if "value" in node:
            out[rows] = node["value"]
            return
        mask = x[rows, node["feature"]] <= node["threshold"]
        walk(node["left"], rows[mask])
        walk(node["right"], rows[~mask])

    walk(tree, idx)
    return out


def _flatten_depth2(tree: dict):
    """Pad any depth<=2 tree into perfect-depth-2 arrays for batch prediction."""

    def as_internal(node):
        if "value" in node:
            # threshold +inf routes every sample left into a leaf copy
            return 0, np.inf, node, node
        return node["feature"], node["threshold"], node["left"], node["right"]

    def leaf_value(node):
        return node["value"] if "value" in node else None

    f0, t0, left, right = as_internal(tree)
    f1l, t1l, ll, lr = as_internal(left)
    f1r, t1r, rl, rr = as_internal(right)
    for child in (ll, lr, rl, rr):
        if "value" not in child:
            raise ValidationError("tree deeper than 2 cannot be flattened")
    return (
        f0, t0, (f1l, f1r), (t1l, t1r),
        (ll["value"], lr["value"], rl["value"], rr["value"]),
    )


@dataclass
class BoostConfig:
    rounds: int = 50
    max_depth: int = 2
    shrinkage: float = 0.1


@dataclass
class BoostedEnsemble:
    """Per-class prior log-odds plus shrinkage-weighted trees, round-major."""

    n_classes: int
    config: BoostConfig
    priors: np.ndarray = field(default=None)
    trees: list = field(default_factory=list)  # trees[round][class] -> tree dict
    _compiled: Optional[tuple] = field(default=None, repr=False)

    def predict_margins(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        f = np.tile(self.priors, (x.shape[0], 1))
        if not self.trees:
            return f
        if self._compiled is None:
            self._compile()
        feat0, thr0, feat1, thr1, leaves = self._compiled
        v0 = x[:, feat0]
        right0 = v0 > thr0
        f_sel = np.where(right0, feat1[:, 1], feat1[:, 0])
        t_sel = np.where(right0, thr1[:, 1], thr1[:, 0])
        v1 = x[np.arange(x.shape[0])[:, None], f_sel]
        leaf_idx = 2 * right0.astype(np.int64) + (v1 > t_sel)
        vals = leaves[np.arange(leaves.shape[0])[None, :], leaf_idx]
        per_round = vals.reshape(x.shape[0], len(self.trees), self.n_classes)
        return f + self.config.shrinkage * per_round.sum(axis=1)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        f = self.predict_margins(x)
        z = f - f.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_margins(x), axis=1)

    def _compile(self) -> None:
        flat = [_flatten_depth2(t) for per_round in self.trees for t in per_round]
        self._compiled = (
            np.array([f[0] for f in flat], dtype=np.int64),
            np.array([f[1] for f in flat], dtype=np.float64),
            np.array([f[2] for f in flat], dtype=np.int64),
            np.array([f[3] for f in flat], dtype=np.float64),
            np.array([f[4] for f in flat], dtype=np.float64),
        )

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "rounds": self.config.rounds,
            "max_depth": self.config.max_depth,
            "shrinkage": self.config.shrinkage,
            "priors": [float(p) for p in self.priors],
            "trees": self.trees,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BoostedEnsemble":
        cfg = BoostConfig(rounds=data["rounds"], max_depth=data["max_depth"],
                          shrinkage=data["shrinkage"])
        return cls(n_classes=data["n_classes"], config=cfg,
                   priors=np.asarray(data["priors"], dtype=np.float64),
                   trees=data["trees"])


def log_loss(ensemble: BoostedEnsemble, x: np.ndarray, y: np.ndarray) -> float:
    p = ensemble.predict_proba(x)
    return float(-np.mean(np.log(np.clip(p[np.arange(len(y)), y], 1e-300, None))))


def boosted_fit(features: np.ndarray, labels: np.ndarray, n_classes: int,
                config: BoostConfig | None = None) -> BoostedEnsemble:
    """Stagewise multiclass boosting on (detached) feature rows.

    Needs at least two distinct classes present in ``labels``.
    """
    config = config or BoostConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    present = np.unique(y)
    if present.size < 2:
        raise ValidationError(f"boosting needs >= 2 classes present, got {present.size}")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValidationError(f"labels out of range [0, {n_classes})")

    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    priors = np.log(np.clip(counts / len(y), 1e-12, None))
    ensemble = BoostedEnsemble(n_classes=n_classes, config=config, priors=priors)

    onehot = np.zeros((len(y), n_classes), dtype=np.float64)
    onehot[np.arange(len(y)), y] = 1.0
    f = np.tile(priors, (len(y), 1))
    root_order = _sorted_index(x)  # features never change during the fit
    for _ in range(config.rounds):
        z = f - f.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        residual = onehot - p
        per_round = []
        for k in range(n_classes):
            tree = _fit_tree_sorted(x, residual[:, k], config.max_depth, root_order)
            per_round.append(tree)
            f[:, k] += config.shrinkage * _tree_predict(tree, x)
        ensemble.trees.append(per_round)
    ensemble._compiled = None
    return ensemble


def save_ensemble(ensemble: Optional[BoostedEnsemble], path) -> None:
    with open(path, "w") as fh:
        json.dump(None if ensemble is None else ensemble.to_dict(), fh)


def load_ensemble(path) -> Optional[BoostedEnsemble]:
    data = json.loads(open(path).read())
    return None if data is None else BoostedEnsemble.from_dict(data)
