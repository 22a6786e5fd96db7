"""Dataset schema, preprocessing (merge, fill, label map, split) and synthetic data.

The on-disk format is JSON Lines with snake_case field names. Processing is
deterministic: records are sorted by id after merging, the split shuffle is
a seeded Fisher-Yates, and every derived quantity (fill medians, label map,
split seed) is recorded in a pipeline manifest.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ValidationError

GENDERS = ("female", "male", "other", "unknown")
CATEGORIES = ("food", "fruit", "recommendation")
DEFAULT_DESCRIPTION = "unknown product"


@dataclass
class UserRecord:
    user_id: str
    query_date: str
    gender: str
    age: Optional[int]
    education: int
    weight: Optional[float]
    self_description: str
    image_ref: Optional[str] = None


@dataclass
class ProductRecord:
    product_id: str
    description: Optional[str]
    category: str
    image_ref: Optional[str] = None
    label: Optional[int] = None


@dataclass
class Interaction:
    user_id: str
    product_id: str
    relevance: int


@dataclass
class DropReport:
    """Per-kind counts; kept + dropped always equals the input row count."""

    users_kept: int = 0
    users_dropped: int = 0
    products_kept: int = 0
    products_dropped: int = 0
    interactions_kept: int = 0
    interactions_dropped: int = 0
    dropped_user_ids: list = field(default_factory=list)
    dropped_product_ids: list = field(default_factory=list)


@dataclass
class MergedDataset:
    users: list
    products: list
    interactions: list
    report: DropReport


@dataclass
class SplitDataset:
    train: list
    test: list
    seed: int
    train_fraction: float = 0.8


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


def validate_users(users: Sequence[UserRecord]) -> None:
    seen = set()
    for u in users:
        _require(bool(u.user_id), "user_id must be nonempty")
        _require(u.user_id not in seen, f"duplicate user_id {u.user_id!r}")
        seen.add(u.user_id)
        _require(u.gender in GENDERS, f"user {u.user_id}: unknown gender {u.gender!r}")
        if u.age is not None:
            _require(0 <= u.age <= 150, f"user {u.user_id}: age {u.age} out of range")
        if u.weight is not None:
            _require(0 < u.weight < 500, f"user {u.user_id}: weight {u.weight} out of range")
        _require(0 <= u.education <= 5, f"user {u.user_id}: education {u.education} out of range")


def validate_products(products: Sequence[ProductRecord]) -> None:
    seen = set()
    for p in products:
        _require(bool(p.product_id), "product_id must be nonempty")
        _require(p.product_id not in seen, f"duplicate product_id {p.product_id!r}")
        seen.add(p.product_id)
        _require(p.category in CATEGORIES, f"product {p.product_id}: unknown category {p.category!r}")


def merge_datasets(users: Sequence[UserRecord], products: Sequence[ProductRecord],
                   interactions: Sequence[Interaction], image_index: dict) -> MergedDataset:
    """Join records with the image catalog and resolve interactions.

    A record that claims an image (image_ref set) but has no entry in
    ``image_index`` is dropped and counted; its interactions are dropped with
    it. Interactions naming ids absent from the input files are a validation
    error. Outputs are sorted by id.
    """
    validate_users(users)
    validate_products(products)
    report = DropReport()

    kept_users = []
    for u in sorted(users, key=lambda r: r.user_id):
        if u.image_ref is not None and u.user_id not in image_index:
            report.users_dropped += 1
            report.dropped_user_ids.append(u.user_id)
            continue
        resolved = image_index.get(u.user_id)
        kept_users.append(
            UserRecord(u.user_id, u.query_date, u.gender, u.age, u.education,
                       u.weight, u.self_description, resolved)
        )
    report.users_kept = len(kept_users)

    kept_products = []
    for p in sorted(products, key=lambda r: r.product_id):
        if p.image_ref is not None and p.product_id not in image_index:
            report.products_dropped += 1
            report.dropped_product_ids.append(p.product_id)
            continue
        resolved = image_index.get(p.product_id)
        kept_products.append(ProductRecord(p.product_id, p.description, p.category, resolved, p.label))
    report.products_kept = len(kept_products)

    all_user_ids = {u.user_id for u in users}
    all_product_ids = {p.product_id for p in products}
    kept_user_ids = {u.user_id for u in kept_users}
    kept_product_ids = {p.product_id for p in kept_products}

    unknown = [
        f"{i.user_id}/{i.product_id}"
        for i in interactions
        if i.user_id not in all_user_ids or i.product_id not in all_product_ids
    ]
    _require(not unknown, f"interactions reference unknown ids: {unknown}")

    seen_pairs = set()
    kept_interactions = []
    for i in sorted(interactions, key=lambda r: (r.user_id, r.product_id)):
        pair = (i.user_id, i.product_id)
        _require(pair not in seen_pairs, f"duplicate interaction for pair {pair}")
        seen_pairs.add(pair)
        _require(i.relevance in (0, 1), f"relevance must be 0/1, got {i.relevance} for {pair}")
        if i.user_id in kept_user_ids and i.product_id in kept_product_ids:
            kept_interactions.append(i)
        else:
            report.interactions_dropped += 1
    report.interactions_kept = len(kept_interactions)

    return MergedDataset(kept_users, kept_products, kept_interactions, report)


def numeric_medians(users: Sequence[UserRecord], user_ids: Optional[set] = None) -> dict:
    """Median age and weight over the given users (train side), ignoring missing."""
    pool = [u for u in users if user_ids is None or u.user_id in user_ids]
    medians = {}
    ages = [u.age for u in pool if u.age is not None]
    weights = [u.weight for u in pool if u.weight is not None]
    medians["age"] = float(statistics.median(ages)) if ages else None
    medians["weight"] = float(statistics.median(weights)) if weights else None
    return medians


def fill_missing(users: Sequence[UserRecord], products: Sequence[ProductRecord],
                 medians: dict) -> tuple[list, list]:
    """Apply fill defaults: text -> "unknown product", numerics -> train median.

    Fields whose median is unavailable stay missing; the structured encoder
    flags them downstream.
    """
    filled_products = []
    for p in products:
        desc = p.description
        if desc is None or not desc.strip():
            desc = DEFAULT_DESCRIPTION
        filled_products.append(ProductRecord(p.product_id, desc, p.category, p.image_ref, p.label))
    filled_users = []
    for u in users:
        age = u.age
        if age is None and medians.get("age") is not None:
            age = int(round(medians["age"]))
        weight = u.weight
        if weight is None and medians.get("weight") is not None:
            weight = medians["weight"]
        filled_users.append(
            UserRecord(u.user_id, u.query_date, u.gender, age, u.education,
                       weight, u.self_description, u.image_ref)
        )
    return filled_users, filled_products


def map_labels(products: Sequence[ProductRecord]) -> tuple[list, dict]:
    """Assign labels 0..n-1 by lexicographic product_id order."""
    ids = [p.product_id for p in products]
    _require(len(set(ids)) == len(ids), "duplicate product_id in label mapping")
    order = {pid: i for i, pid in enumerate(sorted(ids))}
    labeled = [
        ProductRecord(p.product_id, p.description, p.category, p.image_ref, order[p.product_id])
        for p in products
    ]
    return labeled, order


def split(interactions: Sequence[Interaction], seed: int,
          fraction: float = 0.8) -> SplitDataset:
    """Seeded Fisher-Yates shuffle followed by a prefix split.

    The train size is round(fraction * N), clamped so both partitions are
    nonempty.
    """
    n = len(interactions)
    _require(n >= 2, f"need at least 2 interactions to split, got {n}")
    rows = list(interactions)
    rng = np.random.Generator(np.random.PCG64(seed))
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        rows[i], rows[j] = rows[j], rows[i]
    n_train = min(max(int(round(fraction * n)), 1), n - 1)
    return SplitDataset(rows[:n_train], rows[n_train:], seed, fraction)


# ---------------------------------------------------------------------------
# JSON Lines I/O


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}:{i}: invalid JSON: {e}") from e
    return rows


def load_users(path: str | Path) -> list[UserRecord]:
    out = []
    for row in _read_jsonl(Path(path)):
        out.append(UserRecord(
            user_id=row["user_id"],
            query_date=row["query_date"],
            gender=row["gender"],
            age=row.get("age"),
            education=row["education"],
            weight=row.get("weight"),
            self_description=row.get("self_description", ""),
            image_ref=row.get("image_ref"),
        ))
    return out


def load_products(path: str | Path) -> list[ProductRecord]:
    out = []
    for row in _read_jsonl(Path(path)):
        out.append(ProductRecord(
            product_id=row["product_id"],
            description=row.get("description"),
            category=row["category"],
            image_ref=row.get("image_ref"),
            label=row.get("label"),
        ))
    return out


def load_interactions(path: str | Path) -> list[Interaction]:
    return [
        Interaction(row["user_id"], row["product_id"], int(row["relevance"]))
        for row in _read_jsonl(Path(path))
    ]


def load_image_index(path: str | Path) -> dict:
    """image_index.jsonl rows carry either a product_id or a user_id key."""
    index = {}
    for i, row in enumerate(_read_jsonl(Path(path)), start=1):
        entity = row.get("product_id") or row.get("user_id")
        _require(entity is not None, f"{path}:{i}: image index row lacks an entity id")
        index[entity] = row["image_ref"]
    return index


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps({k: v for k, v in row.items() if v is not None}) + "\n")


def save_users(users: Sequence[UserRecord], path: str | Path) -> None:
    _write_jsonl(Path(path), (asdict(u) for u in users))


def save_products(products: Sequence[ProductRecord], path: str | Path) -> None:
    _write_jsonl(Path(path), (asdict(p) for p in products))


def save_interactions(interactions: Sequence[Interaction], path: str | Path) -> None:
    _write_jsonl(Path(path), (asdict(i) for i in interactions))


# ---------------------------------------------------------------------------
# end-to-end preparation


@dataclass
class PreparedData:
    """Fully preprocessed dataset plus the manifest that reproduces it."""

    users: list
    products: list
    train: list
    test: list
    label_map: dict
    manifest: dict

    @property
    def users_by_id(self) -> dict:
        return {u.user_id: u for u in self.users}

    @property
    def products_by_id(self) -> dict:
        return {p.product_id: p for p in self.products}

    def ground_truth(self) -> dict[str, set]:
        """user_id -> set of relevant product labels over the whole dataset."""
        products = self.products_by_id
        truth: dict[str, set] = {}
        for row in self.train + self.test:
            if row.relevance == 1:
                truth.setdefault(row.user_id, set()).add(products[row.product_id].label)
        return truth

    def eval_users(self) -> list[str]:
        """Users with at least one relevant interaction in the test partition."""
        return sorted({r.user_id for r in self.test if r.relevance == 1})


def prepare(users, products, interactions, image_index, seed: int,
            fraction: float = 0.8) -> PreparedData:
    """merge -> split -> fill (train medians) -> map labels, with manifest."""
    merged = merge_datasets(users, products, interactions, image_index)
    parts = split(merged.interactions, seed=seed, fraction=fraction)
    train_user_ids = {r.user_id for r in parts.train}
    medians = numeric_medians(merged.users, train_user_ids)
    filled_users, filled_products = fill_missing(merged.users, merged.products, medians)
    labeled_products, label_map = map_labels(filled_products)

    train_users = [u for u in filled_users if u.user_id in train_user_ids]
    ages = [u.age for u in train_users if u.age is not None]
    weights = [u.weight for u in train_users if u.weight is not None]
    norm_stats = {
        "age": {"min": float(min(ages)), "max": float(max(ages))} if ages else None,
        "weight": {"min": float(min(weights)), "max": float(max(weights))} if weights else None,
    }

    manifest = {
        "fill_defaults": {"description": DEFAULT_DESCRIPTION},
        "medians": medians,
        "label_map": label_map,
        "split_seed": seed,
        "train_fraction": fraction,
        "norm_stats": norm_stats,
        "drop_report": asdict(merged.report),
    }
    return PreparedData(filled_users, labeled_products, parts.train, parts.test,
                        label_map, manifest)


def save_prepared(prepared: PreparedData, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_users(prepared.users, out / "users.jsonl")
    save_products(prepared.products, out / "products.jsonl")
    save_interactions(prepared.train, out / "interactions_train.jsonl")
    save_interactions(prepared.test, out / "interactions_test.jsonl")
    (out / "manifest.json").write_text(json.dumps(prepared.manifest, indent=2, sort_keys=True))


def load_prepared(data_dir: str | Path) -> PreparedData:
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    return PreparedData(
        users=load_users(d / "users.jsonl"),
        products=load_products(d / "products.jsonl"),
        train=load_interactions(d / "interactions_train.jsonl"),
        test=load_interactions(d / "interactions_test.jsonl"),
        label_map=manifest["label_map"],
        manifest=manifest,
    )


# ---------------------------------------------------------------------------
# synthetic datasets


@dataclass
class SynthSpec:
    n_users: int
    n_products: int
    modality_signal: str  # text | image | both
    seed: int
    n_groups: int = 4
    negatives_per_user: int = 2
    filler_words: int = 3
    image_noise_blocks: int = 5
    # how many of the user's relevant products appear as interactions; None
    # records the whole group. A subset is chosen deterministically from the
    # user's topics, so everyone with the same topic pair shares the same
    # label set: the per-input label distribution stays low-entropy (training
    # loss can fall well below the uniform baseline) and the selection is
    # still a pure function of the planted signal.
    positives_per_user: Optional[int] = None
    # False freezes demographics/query dates to one value for every user,
    # removing the fingerprint channel that lets over-parameterized models
    # memorize users instead of reading the planted signal
    demographic_noise: bool = True


_FILLERS = (
    "crunchy", "fresh", "morning", "snack", "hearty", "light", "daily",
    "roasted", "steamed", "baked", "chilled", "spiced", "plain", "mixed",
)
_NOUNS = ("oat", "berry", "lentil", "salmon", "tofu", "barley", "kale",
          "almond", "yogurt", "citrus", "bean", "rice")

_BLOCK = 64  # matches the image stub encoder chunk size


def _topic_block(topic: int) -> bytes:
    pattern = f"imgtopic{topic}:".encode()
    return (pattern * (_BLOCK // len(pattern) + 1))[:_BLOCK]


def synth_generate(spec: SynthSpec) -> tuple[list, list, list, dict, dict]:
    """Deterministic synthetic dataset with relevance planted in user features.

    Returns (users, products, interactions, image_index, image_blobs). Text
    datasets are solvable from the self-description alone, image datasets
    from the image bytes alone, and "both" only from their combination
    (relevant group = text topic + image topic mod n_groups).
    """
    if spec.n_users < 2 or spec.n_products < 2:
        raise ValidationError(
            f"need n_users >= 2 and n_products >= 2, got {spec.n_users}/{spec.n_products}"
        )
    if spec.modality_signal not in ("text", "image", "both"):
        raise ValidationError(f"unknown modality_signal {spec.modality_signal!r}")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    g = spec.n_groups

    products = []
    image_index: dict[str, str] = {}
    blobs: dict[str, bytes] = {}
    for i in range(spec.n_products):
        pid = f"p{i:04d}"
        noun = _NOUNS[int(rng.integers(0, len(_NOUNS)))]
        adj = _FILLERS[int(rng.integers(0, len(_FILLERS)))]
        products.append(ProductRecord(
            product_id=pid,
            description=f"{adj} {noun} pack {i}",
            category=CATEGORIES[i % len(CATEGORIES)],
            image_ref=f"images/{pid}.bin",
        ))
        image_index[pid] = f"images/{pid}.bin"
        blobs[f"images/{pid}.bin"] = rng.bytes(_BLOCK * 4)

    # balanced (text, image) topic grid: within any single-modality cluster the
    # relevant groups are exactly uniform, so one modality alone carries no
    # population-level signal about the fused assignment
    combos = [(i % g, (i // g) % g) for i in range(spec.n_users)]
    combo_order = rng.permutation(spec.n_users)

    users = []
    text_topic = {}
    image_topic = {}
    for i in range(spec.n_users):
        uid = f"u{i:04d}"
        a, b = combos[int(combo_order[i])]
        text_topic[uid] = a
        image_topic[uid] = b

        fillers = [_FILLERS[int(rng.integers(0, len(_FILLERS)))] for _ in range(spec.filler_words)]
        if spec.modality_signal in ("text", "both"):
            words = [f"flavor{a}"] * 3 + fillers
        else:
            words = fillers if fillers else ["plain"]
        if spec.modality_signal in ("image", "both"):
            parts = [_topic_block(b)] * 3 + [rng.bytes(_BLOCK) for _ in range(spec.image_noise_blocks)]
        else:
            parts = [rng.bytes(_BLOCK) for _ in range(3 + spec.image_noise_blocks)]
        order = list(rng.permutation(len(parts)))
        blob = b"".join(parts[j] for j in order)

        if spec.demographic_noise:
            query_date = f"2024-{int(rng.integers(1, 13)):02d}-{int(rng.integers(1, 28)):02d}"
            gender = GENDERS[int(rng.integers(0, len(GENDERS)))]
            age = int(rng.integers(18, 80))
            education = int(rng.integers(0, 6))
            weight = None if rng.random() < 0.1 else float(np.round(rng.uniform(45, 110), 1))
        else:
            query_date, gender, age, education, weight = "2024-06-15", "female", 40, 3, 70.0
        users.append(UserRecord(
            user_id=uid,
            query_date=query_date,
            gender=gender,
            age=age,
            education=education,
            weight=weight,
            self_description=" ".join(words),
            image_ref=f"images/{uid}.bin",
        ))
        image_index[uid] = f"images/{uid}.bin"
        blobs[f"images/{uid}.bin"] = blob

    def relevant_group(uid: str) -> int:
        if spec.modality_signal == "text":
            return text_topic[uid]
        if spec.modality_signal == "image":
            return image_topic[uid]
        return (text_topic[uid] + image_topic[uid]) % g

    product_group = {p.product_id: i % g for i, p in enumerate(products)}
    interactions = []
    for u in users:
        uid = u.user_id
        target = relevant_group(uid)
        relevant = [p.product_id for p in products if product_group[p.product_id] == target]
        others = [p.product_id for p in products if product_group[p.product_id] != target]
        if spec.positives_per_user is not None:
            if spec.modality_signal == "text":
                base = text_topic[uid]
            elif spec.modality_signal == "image":
                base = image_topic[uid]
            else:
                base = text_topic[uid] + 2 * image_topic[uid]
            relevant = sorted(
                relevant[(base + j) % len(relevant)]
                for j in range(min(spec.positives_per_user, len(relevant)))
            )
        for pid in relevant:
            interactions.append(Interaction(u.user_id, pid, 1))
        picks = rng.permutation(len(others))[: spec.negatives_per_user]
        for j in sorted(int(x) for x in picks):
            interactions.append(Interaction(u.user_id, others[j], 0))

    return users, products, interactions, image_index, blobs


def synth_to_dir(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Generate, write raw files plus image blobs, and run the full pipeline."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    users, products, interactions, image_index, blobs = synth_generate(spec)
    for rel_path, blob in blobs.items():
        (out / rel_path).write_bytes(blob)
    save_users(users, out / "raw_users.jsonl")
    save_products(products, out / "raw_products.jsonl")
    save_interactions(interactions, out / "raw_interactions.jsonl")
    with open(out / "image_index.jsonl", "w") as f:
        for entity, ref in sorted(image_index.items()):
            key = "user_id" if entity.startswith("u") else "product_id"
            f.write(json.dumps({key: entity, "image_ref": ref}) + "\n")
    prepared = prepare(users, products, interactions, image_index, seed=spec.seed)
    save_prepared(prepared, out)
    return out
