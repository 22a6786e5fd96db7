"""The two ablation grids (modality, MOE structure) and table emission.

Each (cell, seed) job trains one model on the shared dataset and writes its
MetricReport to disk; the table aggregates mean +/- stddev per cell. Jobs are
independent and may run in parallel processes; every job pins its BLAS
threading so results do not depend on the worker count.
"""

from __future__ import annotations

import json
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import PreparedData, SynthSpec, load_prepared, synth_to_dir
from .encoders import (
    IMAGE_EMBEDDINGS_FILE,
    TEXT_EMBEDDINGS_FILE,
    build_fusion_context,
    load_embeddings,
    stub_embed_dataset,
)
from .errors import ConfigError, ValidationError
from .metrics import MetricReport
from .model import ModelConfig, MoeModel
from .training import TrainConfig, evaluate_model, train

METRIC_COLUMNS = (("Precision@K", "precision_at_k"), ("Recall@K", "recall_at_k"),
                  ("NDCG", "ndcg_at_k"), ("MAP@5", "map_at_k"))


@dataclass
class AblationCell:
    name: str
    modalities: tuple
    overrides: dict = field(default_factory=dict)


MODALITY_GRID = (
    AblationCell("text_only", ("text",),
                 {"n_experts": 1, "expert_kind": "dnn", "gate_kind": "dnn", "top_k_experts": 1}),
    AblationCell("image_only", ("image",),
                 {"n_experts": 1, "expert_kind": "dnn", "gate_kind": "dnn", "top_k_experts": 1}),
    AblationCell("multimodal", ("text", "image"),
                 {"n_experts": 1, "expert_kind": "dnn", "gate_kind": "dnn", "top_k_experts": 1}),
    AblationCell("moe_multimodal", ("text", "image"),
                 {"n_experts": 3, "expert_kind": "transformer", "gate_kind": "stacking",
                  "top_k_experts": 2}),
)

MOE_GRID = tuple(
    AblationCell(f"moe_{expert}_{gate}", ("text", "image"),
                 {"n_experts": 3, "expert_kind": expert, "gate_kind": gate,
                  "top_k_experts": 2})
    for expert in ("transformer", "dnn", "cnn")
    for gate in ("stacking", "dnn")
)

GRIDS = {"modality": MODALITY_GRID, "moe": MOE_GRID}


@dataclass
class AblationSpec:
    grid: str
    seeds: list
    dataset: dict         # {"synth": {...SynthSpec fields}} or {"dir": path}
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    k: int = 5
    cells: Optional[list] = None
    phase_a_epochs: Optional[int] = None  # stacking warmup override for short runs

    @classmethod
    def from_json(cls, path: str | Path) -> "AblationSpec":
        raw = json.loads(Path(path).read_text())
        try:
            return cls(**raw)
        except TypeError as e:
            raise ConfigError(f"bad ablation spec {path}: {e}") from e

    def resolve_cells(self) -> list[AblationCell]:
        if self.grid not in GRIDS:
            raise ConfigError(f"unknown grid {self.grid!r}; expected one of {sorted(GRIDS)}")
        grid = GRIDS[self.grid]
        if self.cells is None:
            return list(grid)
        by_name = {c.name: c for c in grid}
        unknown = [c for c in self.cells if c not in by_name]
        if unknown:
            raise ConfigError(f"unknown cells for grid {self.grid}: {unknown}")
        return [by_name[c] for c in self.cells]


@dataclass
class ReportRow:
    name: str
    means: dict
    stds: dict


@dataclass
class ReportTable:
    rows: list

    def cell(self, name: str) -> ReportRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)


def _ensure_dataset(spec: AblationSpec, out_dir: Path) -> Path:
    if "synth" in spec.dataset:
        data_dir = out_dir / "dataset"
        if not (data_dir / "manifest.json").exists():
            synth_to_dir(SynthSpec(**spec.dataset["synth"]), data_dir)
        return data_dir
    if "dir" in spec.dataset:
        data_dir = Path(spec.dataset["dir"])
        if not (data_dir / "manifest.json").exists():
            raise ConfigError(f"dataset dir {data_dir} is not a prepared dataset")
        return data_dir
    raise ConfigError('ablation spec dataset must carry "synth" or "dir"')


def _ensure_embeddings(data_dir: Path) -> dict:
    text_path = data_dir / TEXT_EMBEDDINGS_FILE
    image_path = data_dir / IMAGE_EMBEDDINGS_FILE
    if not text_path.exists() or not image_path.exists():
        stub_embed_dataset(data_dir)
    return {"text": load_embeddings(text_path), "image": load_embeddings(image_path)}


def run_single(prepared: PreparedData, embeddings: dict, cell: AblationCell,
               seed: int, spec: AblationSpec,
               out_dir: Optional[Path] = None) -> tuple[MetricReport, dict]:
    """Train and evaluate one (cell, seed); returns metrics and the loss curve."""
    for modality in cell.modalities:
        if modality not in embeddings:
            raise ConfigError(f"cell {cell.name} needs {modality} embeddings")
    model_cfg = ModelConfig(
        n_products=len(prepared.label_map),
        modalities=cell.modalities,
        seed=seed,
        **cell.overrides,
    )
    fusion = build_fusion_context(
        prepared.users, prepared.manifest["norm_stats"], embeddings,
        cell.modalities, seed=seed,
    )
    model = MoeModel(model_cfg)
    train_kw = {}
    if spec.phase_a_epochs is not None:
        train_kw["phase_a_epochs"] = spec.phase_a_epochs
    train_cfg = TrainConfig(epochs=spec.epochs, batch_size=spec.batch_size,
                            lr=spec.lr, seed=seed, k=spec.k, **train_kw)
    report = train(model, fusion, prepared, train_cfg, out_dir=out_dir)
    metrics = evaluate_model(model, fusion, prepared, k=spec.k)
    return metrics, {"epochs": report.epochs, "wall_clock_s": report.wall_clock_s}


def _job(args) -> tuple[str, int, dict]:
    spec_dict, cell_name, seed, data_dir, run_dir = args
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        import contextlib

        threadpool_limits = lambda *_a, **_k: contextlib.nullcontext()
    with threadpool_limits(limits=1):
        spec = AblationSpec(**spec_dict)
        cell = next(c for c in spec.resolve_cells() if c.name == cell_name)
        prepared = load_prepared(data_dir)
        embeddings = _ensure_embeddings(Path(data_dir))
        metrics, curve = run_single(prepared, embeddings, cell, seed, spec)
        run_path = Path(run_dir)
        run_path.mkdir(parents=True, exist_ok=True)
        (run_path / "report.json").write_text(metrics.to_json())
        (run_path / "train_curve.json").write_text(json.dumps(curve))
        return cell_name, seed, asdict(metrics)


def run_ablation(spec: AblationSpec, out_dir: str | Path,
                 workers: Optional[int] = None) -> ReportTable:
    """Run the grid end to end and emit table.csv / table.md plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = spec.resolve_cells()
    data_dir = _ensure_dataset(spec, out)
    _ensure_embeddings(data_dir)

    jobs = []
    manifest = {"grid": spec.grid, "dataset": str(data_dir), "seeds": list(spec.seeds),
                "runs": {}}
    for cell in cells:
        for seed in spec.seeds:
            run_dir = out / "runs" / cell.name / f"seed_{seed}"
            manifest["runs"][f"{cell.name}/seed_{seed}"] = str(run_dir / "report.json")
            jobs.append((asdict(spec), cell.name, seed, str(data_dir), str(run_dir)))

    if workers is None:
        workers = min(len(jobs), os.cpu_count() or 1)
    results: dict[tuple[str, int], dict] = {}
    if workers <= 1:
        for job in jobs:
            name, seed, metrics = _job(job)
            results[(name, seed)] = metrics
    else:
        # spawn: fork is unsafe once the fused optimizer kernel (OpenMP) has run
        context = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=context) as pool:
            for name, seed, metrics in pool.map(_job, jobs):
                results[(name, seed)] = metrics

    rows = []
    for cell in cells:
        values = {key: [results[(cell.name, s)][key] for s in spec.seeds]
                  for _, key in METRIC_COLUMNS}
        rows.append(ReportRow(
            name=cell.name,
            means={k: float(np.mean(v)) for k, v in values.items()},
            stds={k: float(np.std(v)) for k, v in values.items()},
        ))
    table = ReportTable(rows)
    emit_report(table, "csv", out / "table.csv")
    emit_report(table, "markdown", out / "table.md")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return table


def emit_report(table: ReportTable, fmt: str, path: str | Path) -> Path:
    """Write the table as RFC-4180 CSV (full precision) or aligned markdown
    (two decimals, matching the published tables)."""
    if not table.rows:
        raise ValidationError("empty table: nothing to report")
    path = Path(path)
    if fmt == "csv":
        header = ["Model"]
        for title, _ in METRIC_COLUMNS:
            header += [title, f"{title}_std"]
        lines = [",".join(header)]
        for row in table.rows:
            cells = [row.name]
            for _, key in METRIC_COLUMNS:
                cells += [repr(row.means[key]), repr(row.stds[key])]
            lines.append(",".join(cells))
        path.write_text("\r\n".join(lines) + "\r\n")
    elif fmt == "markdown":
        titles = ["Model"] + [title for title, _ in METRIC_COLUMNS]
        body = []
        for row in table.rows:
            body.append([row.name] + [
                f"{row.means[key]:.2f} ± {row.stds[key]:.2f}"
                for _, key in METRIC_COLUMNS
            ])
        widths = [max(len(str(r[i])) for r in [titles] + body) for i in range(len(titles))]
        def fmt_row(cells):
            return "| " + " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)) + " |"
        lines = [fmt_row(titles), fmt_row(["-" * w for w in widths])]
        lines += [fmt_row(r) for r in body]
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    return path
