"""Multi-task training loop: Adam over minibatches, two-phase stacking schedule,
per-epoch evaluation hooks and end-of-run checkpointing."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boosting import BoostConfig, boosted_fit
from .data import CATEGORIES, PreparedData
from .encoders import FusionContext
from .errors import ConfigError, TrainingError
from .metrics import MetricReport, evaluate
from .model import MoeModel, TASKS, save_checkpoint
from .optim import Adam


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 10
    phase_a_epochs: int = 10
    k: int = 5


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)   # {"epoch", "total", "rec", "aux"}
    evals: list = field(default_factory=list)    # {"epoch", **MetricReport}
    wall_clock_s: float = 0.0
    checkpoint_path: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @property
    def initial_loss(self) -> float:
        return self.epochs[0]["total"]

    @property
    def final_loss(self) -> float:
        return self.epochs[-1]["total"]


def total_loss(rec_logits: Tensor, aux_logits: Tensor, rec_labels, aux_labels,
               aux_weight: float) -> Tensor:
    """CE(recommendation) + weight * CE(auxiliary); exactly the former at weight 0."""
    rec = ad.cross_entropy(rec_logits, rec_labels)
    if aux_weight == 0.0:
        return rec
    return ad.add(rec, ad.scale(ad.cross_entropy(aux_logits, aux_labels), aux_weight))


@dataclass
class TrainingRows:
    """Row-aligned training arrays: user row index, product label, category."""

    user_rows: np.ndarray
    rec_labels: np.ndarray
    aux_labels: np.ndarray

    def __len__(self) -> int:
        return len(self.user_rows)


def assemble_rows(prepared: PreparedData, fusion: FusionContext) -> TrainingRows:
    """Positive train interactions become (user features -> product, category)."""
    products = prepared.products_by_id
    user_rows, rec_labels, aux_labels = [], [], []
    for row in prepared.train:
        if row.relevance != 1:
            continue
        product = products[row.product_id]
        user_rows.append(fusion.row_of[row.user_id])
        rec_labels.append(product.label)
        aux_labels.append(CATEGORIES.index(product.category))
    return TrainingRows(
        np.asarray(user_rows, dtype=np.int64),
        np.asarray(rec_labels, dtype=np.int64),
        np.asarray(aux_labels, dtype=np.int64),
    )


def predict_topk(model: MoeModel, fusion: FusionContext, user_ids: Sequence[str],
                 k: int = 5, batch_size: int = 64, warmup: bool = False) -> dict[str, list[int]]:
    """Per-user ranked product labels, best first, exactly min(K, n_products) long.

    Ties in the logits break toward the lower label.
    """
    rankings: dict[str, list[int]] = {}
    for start in range(0, len(user_ids), batch_size):
        chunk = list(user_ids[start : start + batch_size])
        fused = fusion.fused_for_users(chunk)
        logits = model.forward(fused, warmup=warmup)["recommendation"].data
        order = np.argsort(-logits, axis=1, kind="stable")
        for uid, row in zip(chunk, order):
            rankings[uid] = [int(x) for x in row[:k]]
    return rankings


def evaluate_model(model: MoeModel, fusion: FusionContext, prepared: PreparedData,
                   k: int = 5, warmup: bool = False) -> MetricReport:
    """Rank for every test-active user and score against full ground truth."""
    eval_users = prepared.eval_users()
    truth = {u: r for u, r in prepared.ground_truth().items() if u in set(eval_users)}
    rankings = predict_topk(model, fusion, eval_users, k=k, warmup=warmup)
    return evaluate(truth, rankings, k)


def fit_gate_ensemble(model: MoeModel, fusion: FusionContext, rows: TrainingRows,
                      batch_size: int = 256) -> None:
    """Phase B: boost on detached shared representations vs product labels."""
    feats = []
    for start in range(0, len(rows), batch_size):
        idx = rows.user_rows[start : start + batch_size]
        feats.append(model.shared(fusion.fused_batch(idx)).data)
    features = np.concatenate(feats, axis=0)
    model.ensemble = boosted_fit(features, rows.rec_labels, model.config.n_products,
                                 BoostConfig())


def train(model: MoeModel, fusion: FusionContext, prepared: PreparedData,
          config: TrainConfig, out_dir: Optional[str | Path] = None) -> TrainReport:
    """Run the full schedule; deterministic given (seed, config, dataset)."""
    stacking = model.config.gate_kind == "stacking"
    if stacking and config.epochs > 0 and config.epochs < config.phase_a_epochs:
        raise ConfigError(
            f"stacking gates need epochs >= phase_a_epochs "
            f"({config.epochs} < {config.phase_a_epochs})"
        )
    rows = assemble_rows(prepared, fusion)
    if len(rows) == 0:
        raise ConfigError("no positive training interactions")

    params = [t for _, t in model.params()] + [t for _, t in fusion.params()]
    optimizer = Adam(params, lr=config.lr)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    report = TrainReport()
    started = time.perf_counter()

    for epoch in range(1, config.epochs + 1):
        if stacking and model.ensemble is None and epoch == config.phase_a_epochs + 1:
            fit_gate_ensemble(model, fusion, rows)
        warmup = stacking and model.ensemble is None

        perm = rng.permutation(len(rows))
        sums = {"total": 0.0, "rec": 0.0, "aux": 0.0}
        n_batches = 0
        for start in range(0, len(rows), config.batch_size):
            batch = perm[start : start + config.batch_size]
            with ad.Tape() as tape:
                fused = fusion.fused_batch(rows.user_rows[batch])
                logits = model.forward(fused, warmup=warmup)
                rec_ce = ad.cross_entropy(logits["recommendation"], rows.rec_labels[batch])
                aux_ce = ad.cross_entropy(logits["auxiliary"], rows.aux_labels[batch])
                if model.config.aux_loss_weight == 0.0:
                    loss = rec_ce
                else:
                    loss = ad.add(rec_ce, ad.scale(aux_ce, model.config.aux_loss_weight))
                if not np.isfinite(loss.data):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {n_batches}"
                    )
                optimizer.zero_grad()
                ad.backward(loss, tape)
            optimizer.step()
            sums["total"] += loss.item()
            sums["rec"] += rec_ce.item()
            sums["aux"] += aux_ce.item()
            n_batches += 1
        report.epochs.append({
            "epoch": epoch,
            "total": sums["total"] / n_batches,
            "rec": sums["rec"] / n_batches,
            "aux": sums["aux"] / n_batches,
        })
        if config.eval_every and epoch % config.eval_every == 0:
            metrics = evaluate_model(model, fusion, prepared, k=config.k, warmup=warmup)
            report.evals.append({"epoch": epoch, **asdict(metrics)})

    report.wall_clock_s = time.perf_counter() - started
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        checkpoint = out / "checkpoint"
        save_checkpoint(checkpoint, model, fusion.projections)
        report.checkpoint_path = str(checkpoint)
        (out / "report.json").write_text(report.to_json())
    return report
