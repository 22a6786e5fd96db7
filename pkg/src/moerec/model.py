"""The mixture-of-experts stack: shared compression layer, experts, gates, heads.

The shared (NCF) layer compresses the fused input to 648 dims; three
shape-preserving experts process it independently; a per-task gate mixes the
top-k experts; per-task linear heads emit logits. Stacking gates additionally
consume class scores from a boosted-tree base learner fit on detached shared
representations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boosting import BoostedEnsemble, load_ensemble, save_ensemble
from .encoders import MODEL_DIM, STRUCTURED_DIM
from .errors import ConfigError, ContractError, ShapeError

N_TOKENS = 8
N_HEADS = 3
FFN_MULT = 4
NCF_HIDDEN = 1024
GATE_HIDDEN = 64
EXPERT_KINDS = ("transformer", "dnn", "cnn")
GATE_KINDS = ("stacking", "dnn")
TASKS = ("recommendation", "auxiliary")


@dataclass
class ModelConfig:
    n_products: int
    n_categories: int = 3
    model_dim: int = MODEL_DIM
    n_experts: int = 3
    expert_kind: str = "transformer"
    expert_depth: int = 3
    gate_kind: str = "stacking"
    top_k_experts: int = 2
    aux_loss_weight: float = 0.3
    seed: int = 0
    modalities: tuple = ("text", "image")

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        if self.expert_kind not in EXPERT_KINDS:
            raise ConfigError(f"unknown expert_kind {self.expert_kind!r}")
        if self.gate_kind not in GATE_KINDS:
            raise ConfigError(f"unknown gate_kind {self.gate_kind!r}")
        if not 1 <= self.top_k_experts <= self.n_experts:
            raise ConfigError(
                f"top_k_experts must be in [1, {self.n_experts}], got {self.top_k_experts}"
            )
        if self.expert_depth < 1:
            raise ConfigError(f"expert_depth must be >= 1, got {self.expert_depth}")
        if self.expert_kind == "transformer":
            if self.model_dim % N_TOKENS != 0:
                raise ConfigError(f"model_dim {self.model_dim} not divisible into {N_TOKENS} tokens")
            if (self.model_dim // N_TOKENS) % N_HEADS != 0:
                raise ConfigError("token dim not divisible across attention heads")

    @property
    def input_dim(self) -> int:
        return self.model_dim * len(self.modalities) + STRUCTURED_DIM


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, name: str):
        self.w = _uniform(rng, d_in, (d_in, d_out))
        self.b = _uniform(rng, d_in, (d_out,))
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]


class NcfLayer:
    """Shared two-layer compressor: input_dim -> 1024 -> 648, ReLU between."""

    def __init__(self, rng, input_dim: int, model_dim: int, name: str = "ncf"):
        self.input_dim = input_dim
        self.fc1 = Linear(rng, input_dim, NCF_HIDDEN, f"{name}.fc1")
        self.fc2 = Linear(rng, NCF_HIDDEN, model_dim, f"{name}.fc2")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.input_dim:
            raise ShapeError(
                f"ncf expects input dim {self.input_dim}, got {x.shape[-1]}"
            )
        return self.fc2(ad.relu(self.fc1(x)))

    def params(self):
        return self.fc1.params() + self.fc2.params()


class TransformerExpertBank:
    """Independent pre-norm transformer experts evaluated jointly.

    Each expert reshapes the 648 vector into 8 tokens x 81 dims and applies
    ``depth`` layers of multi-head self-attention plus a GELU FFN. Weights are
    stacked on a leading expert axis so one broadcast matmul serves every
    expert; expert i only ever touches slice i, so experts share no
    parameters.
    """

    def __init__(self, rng, n_experts: int, model_dim: int, depth: int,
                 name: str = "experts"):
        self.n_experts = n_experts
        self.model_dim = model_dim
        self.d_tok = model_dim // N_TOKENS
        self.d_head = self.d_tok // N_HEADS
        self.name = name
        e, dt, dff = n_experts, self.d_tok, self.d_tok * FFN_MULT
        self.layers = []
        for _ in range(depth):
            self.layers.append({
                "ln1_g": Tensor(np.ones((e, 1, dt)), requires_grad=True),
                "ln1_b": Tensor(np.zeros((e, 1, dt)), requires_grad=True),
                "wq": _uniform(rng, dt, (e, dt, dt)),
                "bq": _uniform(rng, dt, (e, 1, dt)),
                "wk": _uniform(rng, dt, (e, dt, dt)),
                "bk": _uniform(rng, dt, (e, 1, dt)),
                "wv": _uniform(rng, dt, (e, dt, dt)),
                "bv": _uniform(rng, dt, (e, 1, dt)),
                "wo": _uniform(rng, dt, (e, dt, dt)),
                "bo": _uniform(rng, dt, (e, 1, dt)),
                "ln2_g": Tensor(np.ones((e, 1, dt)), requires_grad=True),
                "ln2_b": Tensor(np.zeros((e, 1, dt)), requires_grad=True),
                "w1": _uniform(rng, dt, (e, dt, dff)),
                "b1": _uniform(rng, dt, (e, 1, dff)),
                "w2": _uniform(rng, dff, (e, dff, dt)),
                "b2": _uniform(rng, dff, (e, 1, dt)),
            })

    def __call__(self, x: Tensor, select: Optional[int] = None) -> Tensor:
        """(batch, model_dim) -> (batch, n_experts, model_dim).

        ``select`` runs a single expert (inference only) and returns
        (batch, 1, model_dim). Tokens stay flattened as (experts, batch*tokens,
        token_dim) between attention blocks so each expert's projection is one
        full-size matrix product.
        """
        pick = _make_param_picker(select)
        b = x.shape[0]
        dt, hd = self.d_tok, self.d_head
        t = ad.reshape(x, (1, b * N_TOKENS, dt))
        for layer in self.layers:
            h = ad.layer_norm(t, pick(layer["ln1_g"]), pick(layer["ln1_b"]))
            q = ad.add(ad.matmul(h, pick(layer["wq"])), pick(layer["bq"]))
            k = ad.add(ad.matmul(h, pick(layer["wk"])), pick(layer["bk"]))
            v = ad.add(ad.matmul(h, pick(layer["wv"])), pick(layer["bv"]))
            e_now = q.shape[0]
            heads = (e_now, b, N_TOKENS, N_HEADS, hd)
            qh = ad.transpose(ad.reshape(q, heads), (0, 1, 3, 2, 4))
            kh = ad.transpose(ad.reshape(k, heads), (0, 1, 3, 2, 4))
            vh = ad.transpose(ad.reshape(v, heads), (0, 1, 3, 2, 4))
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 2, 4, 3))),
                              1.0 / math.sqrt(hd))
            attn = ad.matmul(ad.softmax(scores, axis=-1), vh)
            merged = ad.reshape(ad.transpose(attn, (0, 1, 3, 2, 4)),
                                (e_now, b * N_TOKENS, dt))
            t = ad.add(t, ad.add(ad.matmul(merged, pick(layer["wo"])), pick(layer["bo"])))
            h2 = ad.layer_norm(t, pick(layer["ln2_g"]), pick(layer["ln2_b"]))
            f = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(h2, pick(layer["w1"])),
                                                pick(layer["b1"]))),
                                 pick(layer["w2"])), pick(layer["b2"]))
            t = ad.add(t, f)
        out = ad.reshape(t, (t.shape[0], b, self.model_dim))
        return ad.transpose(out, (1, 0, 2))

    def params(self):
        out = []
        for i, layer in enumerate(self.layers):
            for key in ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                        "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"):
                out.append((f"{self.name}.layer{i}.{key}", layer[key]))
        return out


class DnnExpertBank:
    """Independent ReLU MLP experts (depth x linear 648->648), stacked."""

    def __init__(self, rng, n_experts: int, model_dim: int, depth: int,
                 name: str = "experts"):
        self.n_experts = n_experts
        self.model_dim = model_dim
        self.name = name
        self.blocks = [
            {"w": _uniform(rng, model_dim, (n_experts, model_dim, model_dim)),
             "b": _uniform(rng, model_dim, (n_experts, 1, model_dim))}
            for _ in range(depth)
        ]

    def __call__(self, x: Tensor, select: Optional[int] = None) -> Tensor:
        pick = _make_param_picker(select)
        t = ad.reshape(x, (1, x.shape[0], self.model_dim))
        for block in self.blocks:
            t = ad.relu(ad.add(ad.matmul(t, pick(block["w"])), pick(block["b"])))
        return ad.transpose(t, (1, 0, 2))

    def params(self):
        out = []
        for i, block in enumerate(self.blocks):
            out.append((f"{self.name}.fc{i}.w", block["w"]))
            out.append((f"{self.name}.fc{i}.b", block["b"]))
        return out


class CnnExpertBank:
    """Independent 1-d conv experts: channels 1->8->1 (kernel 5, same length),
    ReLU after each conv, then a linear mix. Cheap enough to loop per expert."""

    CHANNELS = 8
    KERNEL = 5

    def __init__(self, rng, n_experts: int, model_dim: int, name: str = "experts"):
        self.n_experts = n_experts
        self.model_dim = model_dim
        self.name = name
        k, c = self.KERNEL, self.CHANNELS
        self.experts = [
            {"w1": _uniform(rng, k, (c, 1, k)), "b1": _uniform(rng, k, (c,)),
             "w2": _uniform(rng, k * c, (1, c, k)), "b2": _uniform(rng, k * c, (1,)),
             "fc_w": _uniform(rng, model_dim, (model_dim, model_dim)),
             "fc_b": _uniform(rng, model_dim, (model_dim,))}
            for _ in range(n_experts)
        ]

    def _one(self, x: Tensor, p: dict) -> Tensor:
        b = x.shape[0]
        t = ad.reshape(x, (b, 1, self.model_dim))
        t = ad.relu(ad.conv1d(t, p["w1"], p["b1"], padding=self.KERNEL // 2))
        t = ad.relu(ad.conv1d(t, p["w2"], p["b2"], padding=self.KERNEL // 2))
        flat = ad.reshape(t, (b, self.model_dim))
        return ad.add(ad.matmul(flat, p["fc_w"]), p["fc_b"])

    def __call__(self, x: Tensor, select: Optional[int] = None) -> Tensor:
        if select is not None:
            return ad.stack([self._one(x, self.experts[select])], axis=1)
        return ad.stack([self._one(x, p) for p in self.experts], axis=1)

    def params(self):
        out = []
        for i, p in enumerate(self.experts):
            for key in ("w1", "b1", "w2", "b2", "fc_w", "fc_b"):
                out.append((f"{self.name}.e{i}.{key}", p[key]))
        return out


def _make_param_picker(select: Optional[int]):
    """Identity, or an inference-only slice of the expert axis."""
    if select is None:
        return lambda t: t
    if ad._ACTIVE_TAPE is not None:
        raise ContractError("single-expert slicing is an inference-only path")
    return lambda t: Tensor(t.data[select : select + 1])


def make_expert_bank(rng, kind: str, n_experts: int, model_dim: int, depth: int,
                     name: str = "experts"):
    if kind == "transformer":
        return TransformerExpertBank(rng, n_experts, model_dim, depth, name)
    if kind == "dnn":
        return DnnExpertBank(rng, n_experts, model_dim, depth, name)
    if kind == "cnn":
        return CnnExpertBank(rng, n_experts, model_dim, name)
    raise ConfigError(f"unknown expert kind {kind!r}")


# ---------------------------------------------------------------------------
# gating


def topk_softmax(logits: np.ndarray, top_k: int) -> np.ndarray:
    """Sparse gate weights: softmax, keep the k largest, renormalize to sum 1.

    Ties break toward the lower expert index. Works on (..., n_experts).
    """
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[-1]
    if not 1 <= top_k <= n:
        raise ContractError(f"top_k must be in [1, {n}], got {top_k}")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    if top_k == n:
        return probs
    order = np.argsort(-logits, axis=-1, kind="stable")
    keep = order[..., :top_k]
    mask = np.zeros_like(probs)
    np.put_along_axis(mask, keep, 1.0, axis=-1)
    kept = probs * mask
    return kept / kept.sum(axis=-1, keepdims=True)


def topk_mask(logits: np.ndarray, top_k: int) -> np.ndarray:
    order = np.argsort(-logits, axis=-1, kind="stable")
    mask = np.zeros_like(logits, dtype=np.float64)
    np.put_along_axis(mask, order[..., :top_k], 1.0, axis=-1)
    return mask


class GateNetwork:
    """Per-task gate: MLP over the shared representation (plus boost scores
    for stacking gates) emitting a sparse probability vector over experts."""

    def __init__(self, rng, model_dim: int, n_experts: int, top_k: int,
                 kind: str, boost_dim: int, name: str):
        self.kind = kind
        self.top_k = top_k
        self.n_experts = n_experts
        self.boost_dim = boost_dim if kind == "stacking" else 0
        in_dim = model_dim + self.boost_dim
        self.fc1 = Linear(rng, in_dim, GATE_HIDDEN, f"{name}.fc1")
        self.fc2 = Linear(rng, GATE_HIDDEN, n_experts, f"{name}.fc2")

    def weights(self, x: Tensor, boost_scores: Optional[np.ndarray] = None) -> Tensor:
        """Sparse mixing weights; selection mask is constant wrt the tape."""
        if self.kind == "stacking":
            if boost_scores is None:
                raise ContractError("stacking gate requires boost_scores")
            x = ad.concat([x, Tensor(np.asarray(boost_scores, dtype=np.float64))], axis=-1)
        logits = self.fc2(ad.relu(self.fc1(x)))
        probs = ad.softmax(logits, axis=-1)
        if self.top_k == self.n_experts:
            return probs
        mask = topk_mask(logits.data, self.top_k)
        kept = ad.mul(probs, Tensor(mask))
        denom = ad.tsum(kept, axis=-1, keepdims=True)
        return ad.div(kept, denom)

    def params(self):
        return self.fc1.params() + self.fc2.params()


def combine_experts(expert_outputs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum over the expert axis: (..., E, D) x (..., E) -> (..., D)."""
    outputs = np.asarray(expert_outputs, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    return (outputs * w[..., None]).sum(axis=-2)


# ---------------------------------------------------------------------------
# the full model


class MoeModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.Generator(np.random.PCG64(config.seed))
        self.ncf = NcfLayer(rng, config.input_dim, config.model_dim)
        self.experts = make_expert_bank(rng, config.expert_kind, config.n_experts,
                                        config.model_dim, config.expert_depth)
        boost_dim = config.n_products
        self.gates = {
            task: GateNetwork(rng, config.model_dim, config.n_experts,
                              config.top_k_experts, config.gate_kind, boost_dim,
                              f"gate.{task}")
            for task in TASKS
        }
        self.heads = {
            "recommendation": Linear(rng, config.model_dim, config.n_products,
                                     "head.recommendation"),
            "auxiliary": Linear(rng, config.model_dim, config.n_categories, "head.auxiliary"),
        }
        self.ensemble: Optional[BoostedEnsemble] = None

    def params(self) -> list[tuple[str, Tensor]]:
        out = self.ncf.params()
        out.extend(self.experts.params())
        for task in TASKS:
            out.extend(self.gates[task].params())
        for task in TASKS:
            out.extend(self.heads[task].params())
        return out

    def shared(self, fused: Tensor) -> Tensor:
        return self.ncf(fused)

    def boost_scores(self, shared_data: np.ndarray, warmup: bool) -> Optional[np.ndarray]:
        if self.config.gate_kind != "stacking":
            return None
        if self.ensemble is not None:
            return self.ensemble.predict_proba(shared_data)
        if warmup:
            return np.zeros((shared_data.shape[0], self.config.n_products))
        raise ContractError(
            "stacking gates need a fitted boosted ensemble (or warmup=True)"
        )

    def forward(self, fused: Tensor, warmup: bool = False) -> dict[str, Tensor]:
        """Full forward pass; returns logits per task.

        Boost scores are computed from the detached shared representation, so
        they are constants with respect to the tape. Zero-weight experts are
        cancelled exactly by the weighted sum.
        """
        shared = self.shared(fused)
        scores = self.boost_scores(shared.data, warmup)

        weight_t = {task: self.gates[task].weights(shared, scores) for task in TASKS}
        stacked = self.experts(shared)  # (b, E, model_dim)

        logits = {}
        for task in TASKS:
            w = ad.reshape(weight_t[task], (fused.shape[0], self.config.n_experts, 1))
            mixed = ad.tsum(ad.mul(stacked, w), axis=1)
            logits[task] = self.heads[task](mixed)
        return logits

    def expert_forward(self, x: np.ndarray, expert_index: int) -> np.ndarray:
        """Run one expert on a (batch, model_dim) array (inference only)."""
        if not 0 <= expert_index < self.config.n_experts:
            raise IndexError(
                f"expert index {expert_index} out of range [0, {self.config.n_experts})"
            )
        out = self.experts(Tensor(np.asarray(x, dtype=np.float64)), select=expert_index)
        return out.data[:, 0, :]

    def predict_logits(self, fused_np: np.ndarray) -> np.ndarray:
        """Recommendation logits for a constant input batch (no tape)."""
        out = self.forward(Tensor(np.asarray(fused_np, dtype=np.float64)))
        return out["recommendation"].data


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path: str | Path, model: MoeModel, projections: dict | None = None) -> None:
    """Write config.json, params.bin (+ JSON index) and boost.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    projections = projections or {}
    config = {
        "model": asdict(model.config),
        "projections": {m: p.source_dim for m, p in projections.items() if p is not None},
    }
    config["model"]["modalities"] = list(model.config.modalities)
    (path / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))

    named = list(model.params())
    for modality in sorted(projections):
        proj = projections[modality]
        if proj is not None:
            named.extend(proj.params())
    index = []
    offset = 0
    with open(path / "params.bin", "wb") as f:
        for name, tensor in named:
            blob = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
            index.append({"name": name, "shape": list(tensor.data.shape),
                          "offset": offset, "bytes": len(blob)})
            f.write(blob)
            offset += len(blob)
    (path / "params.index.json").write_text(json.dumps(index, indent=2))
    save_ensemble(model.ensemble, path / "boost.json")


def load_checkpoint(path: str | Path) -> tuple[MoeModel, dict]:
    """Rebuild the model (and any fusion projections) from a checkpoint dir."""
    from .encoders import ProjectionLayer  # local import to avoid a cycle

    path = Path(path)
    config = json.loads((path / "config.json").read_text())
    model_cfg = ModelConfig(**config["model"])
    model = MoeModel(model_cfg)
    rng = np.random.Generator(np.random.PCG64(model_cfg.seed))
    projections = {
        modality: ProjectionLayer(source_dim, model_cfg.model_dim, rng,
                                  name=f"fusion.{modality}_projection")
        for modality, source_dim in config.get("projections", {}).items()
    }

    named = dict(model.params())
    for proj in projections.values():
        named.update(dict(proj.params()))
    blob = (path / "params.bin").read_bytes()
    for entry in json.loads((path / "params.index.json").read_text()):
        tensor = named[entry["name"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count,
                            offset=entry["offset"]).reshape(entry["shape"])
        tensor.data = arr.astype(np.float64).copy()
        tensor.grad = np.zeros_like(tensor.data)
    model.ensemble = load_ensemble(path / "boost.json")
    return model, projections
