"""moerec: a multimodal mixture-of-experts recommender with an ablation harness."""

from .autodiff import Tape, Tensor, backward
from .boosting import BoostConfig, BoostedEnsemble, boosted_fit
from .data import Interaction, ProductRecord, SynthSpec, UserRecord, prepare, synth_generate
from .encoders import (
    EmbeddingRecord,
    FusedVector,
    encode_structured,
    fuse_concat,
    load_embeddings,
    stub_encode_image,
    stub_encode_text,
)
from .metrics import MetricReport, evaluate, map_at_k, ndcg_at_k, precision_at_k, recall_at_k
from .model import ModelConfig, MoeModel, combine_experts, topk_softmax
from .optim import Adam, AdamState, adam_step, init_adam
from .training import TrainConfig, predict_topk, total_loss, train

__version__ = "0.1.0"
