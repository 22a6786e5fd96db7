"""moerec command line: prep, synth, embed-stub, train, eval, ablate.

Exit codes: 0 ok, 2 validation/configuration error, 3 I/O error. The
MOEREC_SEED environment variable overrides config-file seeds for the
single-run commands.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import data as dp
from .ablation import AblationSpec, run_ablation
from .encoders import (
    IMAGE_EMBEDDINGS_FILE,
    TEXT_EMBEDDINGS_FILE,
    build_fusion_context,
    load_embeddings,
    stub_embed_dataset,
)
from .errors import ConfigError, ContractError, ShapeError, TrainingError, ValidationError
from .metrics import save_rankings, save_truth
from .model import ModelConfig, MoeModel, load_checkpoint
from .training import TrainConfig, predict_topk, train
from .metrics import evaluate


def _seed_override(seed: int) -> int:
    env = os.environ.get("MOEREC_SEED")
    return int(env) if env else seed


def _cmd_prep(args) -> int:
    users = dp.load_users(args.users)
    products = dp.load_products(args.products)
    interactions = dp.load_interactions(args.interactions)
    image_index = dp.load_image_index(args.images) if args.images else {}
    prepared = dp.prepare(users, products, interactions, image_index,
                          seed=_seed_override(args.seed))
    dp.save_prepared(prepared, args.out)
    report = prepared.manifest["drop_report"]
    print(f"prepared {report['users_kept']} users, {report['products_kept']} products, "
          f"{report['interactions_kept']} interactions -> {args.out}")
    return 0


def _cmd_synth(args) -> int:
    raw = json.loads(Path(args.spec).read_text())
    raw["seed"] = _seed_override(raw.get("seed", 0))
    spec = dp.SynthSpec(**raw)
    dp.synth_to_dir(spec, args.out)
    print(f"synthesized {spec.n_users} users x {spec.n_products} products "
          f"({spec.modality_signal} signal) -> {args.out}")
    return 0


def _cmd_embed_stub(args) -> int:
    text_path, image_path = stub_embed_dataset(args.in_dir, args.out)
    print(f"wrote {text_path} and {image_path}")
    return 0


def _load_run_config(path: Path, prepared) -> tuple[ModelConfig, TrainConfig]:
    raw = json.loads(path.read_text())
    model_raw = dict(raw.get("model", {}))
    model_raw.setdefault("n_products", len(prepared.label_map))
    model_raw.setdefault("modalities", raw.get("modalities", ["text", "image"]))
    train_raw = dict(raw.get("train", {}))
    train_raw["seed"] = _seed_override(train_raw.get("seed", 0))
    model_raw["seed"] = _seed_override(model_raw.get("seed", train_raw["seed"]))
    return ModelConfig(**model_raw), TrainConfig(**train_raw)


def _load_dataset_embeddings(data_dir: Path, modalities) -> dict:
    files = {"text": data_dir / TEXT_EMBEDDINGS_FILE, "image": data_dir / IMAGE_EMBEDDINGS_FILE}
    out = {}
    for modality in modalities:
        path = files[modality]
        if not path.exists():
            raise ConfigError(f"missing {modality} embeddings: {path} "
                              f"(run `moerec embed-stub` or the extractor first)")
        out[modality] = load_embeddings(path)
    return out


def _cmd_train(args) -> int:
    data_dir = Path(args.data)
    prepared = dp.load_prepared(data_dir)
    model_cfg, train_cfg = _load_run_config(Path(args.config), prepared)
    embeddings = _load_dataset_embeddings(data_dir, model_cfg.modalities)
    fusion = build_fusion_context(prepared.users, prepared.manifest["norm_stats"],
                                  embeddings, model_cfg.modalities, seed=model_cfg.seed)
    model = MoeModel(model_cfg)
    report = train(model, fusion, prepared, train_cfg, out_dir=args.out)
    final = report.epochs[-1]["total"] if report.epochs else float("nan")
    print(f"trained {train_cfg.epochs} epochs, final loss {final:.4f}, "
          f"checkpoint at {report.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    model, projections = load_checkpoint(args.checkpoint)
    data_dir = Path(args.data)
    prepared = dp.load_prepared(data_dir)
    embeddings = _load_dataset_embeddings(data_dir, model.config.modalities)
    fusion = build_fusion_context(prepared.users, prepared.manifest["norm_stats"],
                                  embeddings, model.config.modalities,
                                  seed=model.config.seed)
    fusion.projections.update(projections)
    eval_users = prepared.eval_users()
    truth = {u: r for u, r in prepared.ground_truth().items() if u in set(eval_users)}
    rankings = predict_topk(model, fusion, eval_users, k=args.k)
    report = evaluate(truth, rankings, args.k)
    print(report.to_json())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(report.to_json())
        save_truth(truth, out / "truth.jsonl")
        save_rankings(rankings, out / "rankings.jsonl")
    return 0


def _cmd_ablate(args) -> int:
    spec = AblationSpec.from_json(args.spec)
    if args.grid and spec.grid != args.grid:
        raise ConfigError(f"--grid {args.grid} conflicts with spec grid {spec.grid!r}")
    table = run_ablation(spec, args.out, workers=args.workers)
    print(f"wrote {Path(args.out) / 'table.csv'} ({len(table.rows)} cells)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moerec",
                                     description="multimodal MOE recommender toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="merge, fill, label and split raw dataset files")
    p.add_argument("--users", required=True)
    p.add_argument("--products", required=True)
    p.add_argument("--interactions", required=True)
    p.add_argument("--images", default=None, help="image_index.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_prep)

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON file with SynthSpec fields")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("embed-stub", help="write stub embeddings for a prepared dataset")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_embed_stub)

    p = sub.add_parser("train", help="train a model on a prepared dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a prepared dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid end to end")
    p.add_argument("--grid", choices=("modality", "moe"), default=None)
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ConfigError, ContractError, ShapeError, TrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
