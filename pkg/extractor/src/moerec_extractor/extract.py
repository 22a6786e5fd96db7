"""Run pretrained text/vision encoders over dataset records and write
moerec embedding files (CLS vector per entity, native hidden size).

The output format matches the consumer exactly: a JSON header line
{"format": "moerec-embeddings", "version": 1, "modality": ..., "dim": ...}
followed by one {"entity_id", "values"} record per line. Dimension adaptation
happens downstream via the consumer's learned projection, so any checkpoint
with any hidden size can be swapped in here.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

FILE_FORMAT = "moerec-embeddings"
FILE_VERSION = 1

DEFAULT_TEXT_MODEL = "bert-base-uncased"
DEFAULT_VISION_MODEL = "google/vit-base-patch16-224-in21k"


@dataclass
class ExtractorConfig:
    text_model: str = DEFAULT_TEXT_MODEL
    vision_model: str = DEFAULT_VISION_MODEL
    batch_size: int = 16
    device: str = "cpu"
    max_length: int = 128


@dataclass
class Entity:
    entity_id: str
    text: str = ""
    image_ref: Optional[str] = None


def read_entities(path: str | Path) -> list[Entity]:
    """Read dataset JSONL rows (users, products, or generic entities).

    The entity id comes from entity_id / user_id / product_id, the text from
    text / self_description / description.
    """
    entities = []
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        row = json.loads(line)
        entity_id = row.get("entity_id") or row.get("user_id") or row.get("product_id")
        if not entity_id:
            raise ValueError(f"{path}:{i}: row has no entity_id/user_id/product_id")
        text = row.get("text") or row.get("self_description") or row.get("description") or ""
        entities.append(Entity(entity_id, text, row.get("image_ref")))
    return entities


def _write_embeddings(path: Path, modality: str, dim: int, rows: Iterable[tuple[str, np.ndarray]]) -> int:
    n = 0
    with open(path, "w") as f:
        f.write(json.dumps({"format": FILE_FORMAT, "version": FILE_VERSION,
                            "modality": modality, "dim": dim}) + "\n")
        for entity_id, vector in rows:
            f.write(json.dumps({"entity_id": entity_id,
                                "values": [float(v) for v in vector]}) + "\n")
            n += 1
    return n


def extract_text(entities: list[Entity], config: ExtractorConfig, out_path: str | Path) -> int:
    """CLS (first token, final hidden state) vectors for each entity's text."""
    import torch
    from transformers import AutoModel, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(config.text_model)
    model = AutoModel.from_pretrained(config.text_model).to(config.device)
    model.eval()
    dim = model.config.hidden_size

    def rows():
        for start in range(0, len(entities), config.batch_size):
            chunk = entities[start : start + config.batch_size]
            encoded = tokenizer([e.text for e in chunk], return_tensors="pt",
                                padding=True, truncation=True,
                                max_length=config.max_length).to(config.device)
            with torch.no_grad():
                hidden = model(**encoded).last_hidden_state
            cls = hidden[:, 0, :].cpu().numpy()
            for entity, vector in zip(chunk, cls):
                yield entity.entity_id, vector

    return _write_embeddings(Path(out_path), "text", dim, rows())


def extract_image(entities: list[Entity], config: ExtractorConfig, out_path: str | Path,
                  base_dir: str | Path = ".") -> tuple[int, list[dict]]:
    """ViT CLS vectors per entity image; undecodable files are skipped and
    listed in <out>.skiplist.json."""
    import torch
    from PIL import Image
    from transformers import AutoImageProcessor, AutoModel

    processor = AutoImageProcessor.from_pretrained(config.vision_model)
    model = AutoModel.from_pretrained(config.vision_model).to(config.device)
    model.eval()
    dim = model.config.hidden_size
    base = Path(base_dir)

    images = []
    skipped: list[dict] = []
    for entity in entities:
        if not entity.image_ref:
            skipped.append({"entity_id": entity.entity_id, "reason": "no image_ref"})
            continue
        ref = Path(entity.image_ref)
        path = ref if ref.is_absolute() else base / ref
        try:
            with Image.open(path) as img:
                images.append((entity.entity_id, img.convert("RGB")))
        except Exception as e:  # undecodable or missing file
            skipped.append({"entity_id": entity.entity_id, "path": str(path),
                            "reason": str(e)})

    if not images:
        raise RuntimeError("no decodable images in input")

    def rows():
        for start in range(0, len(images), config.batch_size):
            chunk = images[start : start + config.batch_size]
            inputs = processor(images=[img for _, img in chunk],
                               return_tensors="pt").to(config.device)
            with torch.no_grad():
                hidden = model(**inputs).last_hidden_state
            cls = hidden[:, 0, :].cpu().numpy()
            for (entity_id, _), vector in zip(chunk, cls):
                yield entity_id, vector

    written = _write_embeddings(Path(out_path), "image", dim, rows())
    skip_path = Path(str(out_path) + ".skiplist.json")
    skip_path.write_text(json.dumps(skipped, indent=2))
    return written, skipped


def validate_output(path: str | Path) -> list[str]:
    """Schema/dimension/finiteness checks; returns violations ([] when ok).

    Mirrors the consumer's embedding-file validation rules.
    """
    path = Path(path)
    violations: list[str] = []
    lines = path.read_text().splitlines()
    if not lines:
        return [f"{path}:1: empty file, missing header"]
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        return [f"{path}:1: invalid header JSON: {e}"]
    if header.get("format") != FILE_FORMAT:
        violations.append(f"{path}:1: format is not {FILE_FORMAT!r}")
    if header.get("version") != FILE_VERSION:
        violations.append(f"{path}:1: unsupported version {header.get('version')!r}")
    if header.get("modality") not in ("text", "image"):
        violations.append(f"{path}:1: unknown modality {header.get('modality')!r}")
    dim = header.get("dim")
    if not isinstance(dim, int) or dim < 1:
        violations.append(f"{path}:1: bad dim {dim!r}")
        dim = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            entity_id = row["entity_id"]
            values = row["values"]
        except (json.JSONDecodeError, KeyError) as e:
            violations.append(f"{path}:{lineno}: bad record: {e}")
            continue
        if dim is not None and len(values) != dim:
            violations.append(
                f"{path}:{lineno}: record {entity_id!r} has {len(values)} values, "
                f"header says {dim}"
            )
        if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in values):
            violations.append(f"{path}:{lineno}: non-finite value in record {entity_id!r}")
    return violations


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="extract", description="extract CLS embeddings into a moerec embedding file")
    parser.add_argument("--modality", choices=("text", "image"), required=True)
    parser.add_argument("--input", required=True, help="dataset JSONL (users or products)")
    parser.add_argument("--model", required=True, help="model id or local checkpoint path")
    parser.add_argument("--out", required=True, help="output embedding file")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--image-base", default=None,
                        help="directory image_refs resolve against (default: input's dir)")
    args = parser.parse_args(argv)

    entities = read_entities(args.input)
    config = ExtractorConfig(text_model=args.model, vision_model=args.model,
                             batch_size=args.batch_size, device=args.device)
    try:
        if args.modality == "text":
            written = extract_text(entities, config, args.out)
            print(f"wrote {written} text records to {args.out}")
        else:
            base = args.image_base or Path(args.input).parent
            written, skipped = extract_image(entities, config, args.out, base_dir=base)
            print(f"wrote {written} image records to {args.out} "
                  f"({len(skipped)} skipped)")
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    violations = validate_output(args.out)
    if violations:
        for violation in violations:
            print(f"error: {violation}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
