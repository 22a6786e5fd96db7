"""Modality stub encoders, embedding file I/O, structured features and fusion.

Stub encoders are deterministic hashed bag-of-features stand-ins for the real
text/image encoders: tokens (or 64-byte chunks) are FNV-1a hashed into
``dim`` buckets, counted, and L2-normalized. Real embeddings arrive through
the JSONL embedding-file interface and are adapted to the model dimension by
a learned linear projection when their source dimension differs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import UserRecord, GENDERS
from .errors import ConfigError, ShapeError, ValidationError

MODEL_DIM = 648
STRUCTURED_DIM = 16

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_CHUNK = 64


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


@dataclass
class EmbeddingRecord:
    entity_id: str
    modality: str  # text | image
    dim: int
    values: np.ndarray  # float32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != (self.dim,):
            raise ValidationError(
                f"embedding for {self.entity_id!r} has {self.values.shape[0] if self.values.ndim == 1 else self.values.shape} values, expected dim {self.dim}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValidationError(f"embedding for {self.entity_id!r} contains non-finite values")


def _bucket_counts(items, dim: int) -> np.ndarray:
    counts = np.zeros(dim, dtype=np.float64)
    for item in items:
        counts[fnv1a_64(item) % dim] += 1.0
    return counts


def _normalized(entity_id: str, modality: str, counts: np.ndarray) -> EmbeddingRecord:
    norm = math.sqrt(float(np.dot(counts, counts)))
    values = counts / norm if norm > 0 else counts
    return EmbeddingRecord(entity_id, modality, counts.shape[0], values.astype(np.float32))


def stub_encode_text(text: str, dim: int = MODEL_DIM, entity_id: str = "") -> EmbeddingRecord:
    """Lowercase, whitespace-split, hash tokens to buckets, L2-normalize."""
    tokens = (t.encode("utf-8") for t in text.lower().split())
    return _normalized(entity_id, "text", _bucket_counts(tokens, dim))


def stub_encode_image(data: bytes, dim: int = MODEL_DIM, entity_id: str = "") -> EmbeddingRecord:
    """Hash successive 64-byte chunks (trailing partial chunk included)."""
    chunks = (data[i : i + _CHUNK] for i in range(0, len(data), _CHUNK))
    return _normalized(entity_id, "image", _bucket_counts(chunks, dim))


# ---------------------------------------------------------------------------
# embedding files

FILE_FORMAT = "moerec-embeddings"
FILE_VERSION = 1


@dataclass
class LoadResult:
    records: dict[str, EmbeddingRecord]
    modality: str
    dim: int
    duplicates: int = 0


def save_embeddings(records: Sequence[EmbeddingRecord], modality: str, dim: int,
                    path: str | Path) -> None:
    with open(path, "w") as f:
        f.write(json.dumps({
            "format": FILE_FORMAT, "version": FILE_VERSION,
            "modality": modality, "dim": dim,
        }) + "\n")
        for rec in records:
            f.write(json.dumps({
                "entity_id": rec.entity_id,
                "values": [float(v) for v in rec.values],
            }) + "\n")


def load_embeddings(path: str | Path) -> LoadResult:
    """Parse and validate an embedding file; duplicates are last-wins."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ValidationError(f"{path}: empty embedding file (missing header)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}:1: invalid header: {e}") from e
    if header.get("format") != FILE_FORMAT:
        raise ValidationError(f"{path}:1: not a {FILE_FORMAT} file")
    if header.get("version") != FILE_VERSION:
        raise ValidationError(f"{path}:1: unsupported version {header.get('version')}")
    modality = header.get("modality")
    if modality not in ("text", "image"):
        raise ValidationError(f"{path}:1: unknown modality {modality!r}")
    dim = header.get("dim")
    if not isinstance(dim, int) or dim < 1:
        raise ValidationError(f"{path}:1: bad dim {dim!r}")

    records: dict[str, EmbeddingRecord] = {}
    duplicates = 0
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            entity_id = row["entity_id"]
            values = np.asarray(row["values"], dtype=np.float32)
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            raise ValidationError(f"{path}:{lineno}: bad record: {e}") from e
        if values.shape != (dim,):
            raise ValidationError(
                f"{path}:{lineno}: record has {values.shape[0]} values, header says dim {dim}"
            )
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"{path}:{lineno}: non-finite value in record {entity_id!r}")
        if entity_id in records:
            duplicates += 1
        records[entity_id] = EmbeddingRecord(entity_id, modality, dim, values)
    return LoadResult(records, modality, dim, duplicates)


# ---------------------------------------------------------------------------
# structured user features

_GENDER_INDEX = {g: i for i, g in enumerate(GENDERS)}


def _minmax(value: float, stats: Optional[dict]) -> float:
    if stats is None:
        return 0.0
    lo, hi = stats["min"], stats["max"]
    if hi <= lo:
        return 0.0
    return min(max((value - lo) / (hi - lo), 0.0), 1.0)


def encode_structured(user: UserRecord, norm_stats: dict) -> np.ndarray:
    """16-dim vector: gender(4) | age | weight | education(6) | month sin,cos | missing flags(2)."""
    out = np.zeros(STRUCTURED_DIM, dtype=np.float64)
    out[_GENDER_INDEX[user.gender]] = 1.0
    age_missing = user.age is None
    weight_missing = user.weight is None
    if not age_missing:
        out[4] = _minmax(float(user.age), norm_stats.get("age"))
    if not weight_missing:
        out[5] = _minmax(float(user.weight), norm_stats.get("weight"))
    out[6 + user.education] = 1.0
    month = int(user.query_date[5:7])
    out[12] = math.sin(2.0 * math.pi * month / 12.0)
    out[13] = math.cos(2.0 * math.pi * month / 12.0)
    out[14] = 1.0 if age_missing else 0.0
    out[15] = 1.0 if weight_missing else 0.0
    return out


# ---------------------------------------------------------------------------
# fusion


@dataclass
class FusedVector:
    """Concatenated modality vectors followed by the structured segment."""

    values: np.ndarray
    layout: list  # [(name, offset, size), ...] in concatenation order

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def modality_prefix_dim(self) -> int:
        return sum(size for name, _, size in self.layout if name != "structured")

    def segment(self, name: str) -> np.ndarray:
        for seg_name, offset, size in self.layout:
            if seg_name == name:
                return self.values[offset : offset + size]
        raise KeyError(name)


def fuse_concat(modalities: Sequence[EmbeddingRecord], structured: np.ndarray,
                model_dim: int = MODEL_DIM) -> FusedVector:
    """Exact concatenation in [text, image, structured] order.

    Every modality vector must already be at ``model_dim`` (projection
    applied beforehand for file embeddings of a different source dim).
    """
    if structured.shape != (STRUCTURED_DIM,):
        raise ShapeError(f"structured segment must be {STRUCTURED_DIM}-dim, got {structured.shape}")
    layout = []
    parts = []
    offset = 0
    for rec in modalities:
        if rec.dim != model_dim:
            raise ShapeError(
                f"{rec.modality} vector for {rec.entity_id!r} has dim {rec.dim}, "
                f"expected {model_dim}; apply a projection first"
            )
        layout.append((rec.modality, offset, rec.dim))
        parts.append(np.asarray(rec.values, dtype=np.float64))
        offset += rec.dim
    layout.append(("structured", offset, STRUCTURED_DIM))
    parts.append(np.asarray(structured, dtype=np.float64))
    return FusedVector(np.concatenate(parts), layout)


class ProjectionLayer:
    """Learned linear map source_dim -> model_dim for file embeddings."""

    def __init__(self, source_dim: int, model_dim: int, rng: np.random.Generator,
                 name: str = "projection"):
        bound = math.sqrt(1.0 / source_dim)
        self.weight = ad.Tensor(rng.uniform(-bound, bound, size=(source_dim, model_dim)),
                                requires_grad=True)
        self.source_dim = source_dim
        self.model_dim = model_dim
        self.name = name

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        if x.shape[-1] != self.source_dim:
            raise ShapeError(
                f"{self.name}: input dim {x.shape[-1]} does not match source_dim {self.source_dim}"
            )
        return ad.matmul(x, self.weight)

    def params(self) -> list[tuple[str, ad.Tensor]]:
        return [(f"{self.name}.weight", self.weight)]


class FusionContext:
    """Per-dataset feature store: raw modality matrices, structured features
    and the projections (if any) that adapt file embeddings to the model dim.

    ``fused_batch`` returns the concatenated input for a set of user rows; when
    a projection is present it runs on the tape so its weights train with the
    model.
    """

    def __init__(self, user_ids: Sequence[str], raw: dict, structured: np.ndarray,
                 projections: dict, model_dim: int = MODEL_DIM):
        self.user_ids = list(user_ids)
        self.row_of = {uid: i for i, uid in enumerate(self.user_ids)}
        self.modalities = tuple(raw.keys())
        self.raw = raw
        self.structured = structured
        self.projections = projections
        self.model_dim = model_dim

    @property
    def input_dim(self) -> int:
        return self.model_dim * len(self.modalities) + STRUCTURED_DIM

    def params(self) -> list:
        out = []
        for modality in self.modalities:
            proj = self.projections.get(modality)
            if proj is not None:
                out.extend(proj.params())
        return out

    def fused_batch(self, rows: Sequence[int]) -> ad.Tensor:
        rows = np.asarray(rows, dtype=np.int64)
        parts = []
        any_proj = any(self.projections.get(m) is not None for m in self.modalities)
        for modality in self.modalities:
            seg = self.raw[modality][rows]
            proj = self.projections.get(modality)
            if proj is not None:
                parts.append(proj(ad.Tensor(seg)))
            else:
                parts.append(ad.Tensor(seg))
        parts.append(ad.Tensor(self.structured[rows]))
        if any_proj:
            return ad.concat(parts, axis=-1)
        return ad.Tensor(np.concatenate([p.data for p in parts], axis=-1))

    def fused_for_users(self, user_ids: Sequence[str]) -> ad.Tensor:
        return self.fused_batch([self.row_of[u] for u in user_ids])


TEXT_EMBEDDINGS_FILE = "text_embeddings.jsonl"
IMAGE_EMBEDDINGS_FILE = "image_embeddings.jsonl"


def stub_embed_dataset(data_dir: str | Path, out_dir: str | Path | None = None,
                       dim: int = MODEL_DIM) -> tuple[Path, Path]:
    """Run the stub encoders over a prepared dataset directory.

    Every user and product gets one record per modality; entities without an
    image file encode empty bytes (zero vector). Image refs resolve relative
    to the dataset directory.
    """
    from .data import load_users, load_products

    data_dir = Path(data_dir)
    out = Path(out_dir) if out_dir is not None else data_dir
    out.mkdir(parents=True, exist_ok=True)
    users = load_users(data_dir / "users.jsonl")
    products = load_products(data_dir / "products.jsonl")

    text_records = []
    image_records = []
    for entity_id, text, image_ref in sorted(
        [(u.user_id, u.self_description, u.image_ref) for u in users]
        + [(p.product_id, p.description or "", p.image_ref) for p in products]
    ):
        text_records.append(stub_encode_text(text, dim=dim, entity_id=entity_id))
        blob = b""
        if image_ref:
            ref = Path(image_ref)
            path = ref if ref.is_absolute() else data_dir / ref
            blob = path.read_bytes()
        image_records.append(stub_encode_image(blob, dim=dim, entity_id=entity_id))

    text_path = out / TEXT_EMBEDDINGS_FILE
    image_path = out / IMAGE_EMBEDDINGS_FILE
    save_embeddings(text_records, "text", dim, text_path)
    save_embeddings(image_records, "image", dim, image_path)
    return text_path, image_path


def build_fusion_context(users, norm_stats: dict, embeddings: dict,
                         modalities: Sequence[str], model_dim: int = MODEL_DIM,
                         seed: int = 0) -> FusionContext:
    """Assemble raw per-user matrices from loaded embedding files.

    Embeddings are widened to float64 here. A modality whose source dim
    differs from ``model_dim`` gets a fresh learned projection. Users missing
    from an embedding file are a configuration error.
    """
    from .data import UserRecord  # noqa: F401  (type only)

    user_ids = [u.user_id for u in users]
    rng = np.random.Generator(np.random.PCG64(seed))
    raw = {}
    projections: dict[str, Optional[ProjectionLayer]] = {}
    for modality in modalities:
        if modality not in embeddings:
            raise ConfigError(f"no embeddings supplied for modality {modality!r}")
        result = embeddings[modality]
        missing = [uid for uid in user_ids if uid not in result.records]
        if missing:
            raise ConfigError(
                f"{modality} embeddings missing for {len(missing)} users, e.g. {missing[:3]}"
            )
        raw[modality] = np.stack(
            [result.records[uid].values.astype(np.float64) for uid in user_ids]
        )
        if result.dim != model_dim:
            projections[modality] = ProjectionLayer(
                result.dim, model_dim, rng, name=f"fusion.{modality}_projection"
            )
        else:
            projections[modality] = None
    structured = np.stack([encode_structured(u, norm_stats) for u in users])
    return FusionContext(user_ids, raw, structured, projections, model_dim)
