"""Session fixtures: tiny local encoder checkpoints built deterministically.

The text model is hand-wired (uniform attention, identity value path, designed
embedding clusters) so CLS similarity reflects token content; weights come
from explicit arrays and a seeded numpy generator, never torch RNG. The
vision model is a small seeded ViT.
"""

from pathlib import Path

import numpy as np
import pytest
import torch
from tokenizers import Tokenizer, models, normalizers, pre_tokenizers, processors
from transformers import (
    BertConfig,
    BertModel,
    PreTrainedTokenizerFast,
    ViTConfig,
    ViTImageProcessor,
    ViTModel,
)

VOCAB = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "apple", "fresh", "fruit",
         "steel", "pipe", "oat", "pack", "barley", "kale", "the", "a", "crunchy",
         "salmon", "tofu", "snack"]
FOOD = {"apple", "fresh", "fruit", "oat", "pack", "barley", "kale", "crunchy",
        "salmon", "tofu", "snack"}
INDUSTRIAL = {"steel", "pipe"}
HIDDEN = 32


def _save_tokenizer(path: Path) -> None:
    vocab = {w: i for i, w in enumerate(VOCAB)}
    tk = Tokenizer(models.WordPiece(vocab=vocab, unk_token="[UNK]"))
    tk.normalizer = normalizers.BertNormalizer(lowercase=True)
    tk.pre_tokenizer = pre_tokenizers.BertPreTokenizer()
    tk.post_processor = processors.TemplateProcessing(
        single="[CLS] $A [SEP]", pair="[CLS] $A [SEP] $B [SEP]",
        special_tokens=[("[CLS]", vocab["[CLS]"]), ("[SEP]", vocab["[SEP]"])])
    PreTrainedTokenizerFast(
        tokenizer_object=tk, unk_token="[UNK]", pad_token="[PAD]",
        cls_token="[CLS]", sep_token="[SEP]", mask_token="[MASK]",
    ).save_pretrained(path)


def _embedding_table() -> np.ndarray:
    rng = np.random.default_rng(20240810)
    half = np.ones(HIDDEN // 2)
    food_axis = np.concatenate([half, -half])
    alt = np.tile([1.0, -1.0], HIDDEN // 4)
    steel_axis = np.concatenate([alt, alt])
    table = np.zeros((len(VOCAB), HIDDEN))
    for i, word in enumerate(VOCAB):
        noise = rng.normal(0, 0.25, HIDDEN)
        if word in FOOD:
            table[i] = food_axis + noise
        elif word in INDUSTRIAL:
            table[i] = steel_axis + noise
        elif word.startswith("["):
            table[i] = 0.02 * rng.normal(0, 1, HIDDEN)
        else:
            table[i] = 0.3 * rng.normal(0, 1, HIDDEN)
    return table


def build_tiny_bert(path: Path) -> None:
    _save_tokenizer(path)
    config = BertConfig(vocab_size=len(VOCAB), hidden_size=HIDDEN,
                        num_hidden_layers=2, num_attention_heads=2,
                        intermediate_size=64, max_position_embeddings=64)
    model = BertModel(config)
    eye = torch.eye(HIDDEN)
    with torch.no_grad():
        model.embeddings.word_embeddings.weight.copy_(torch.tensor(_embedding_table()))
        model.embeddings.position_embeddings.weight.zero_()
        model.embeddings.token_type_embeddings.weight.zero_()
        for layer in model.encoder.layer:
            # uniform attention gathering the identity-mapped token contents
            layer.attention.self.query.weight.zero_()
            layer.attention.self.query.bias.zero_()
            layer.attention.self.key.weight.zero_()
            layer.attention.self.key.bias.zero_()
            layer.attention.self.value.weight.copy_(eye)
            layer.attention.self.value.bias.zero_()
            layer.attention.output.dense.weight.copy_(eye)
            layer.attention.output.dense.bias.zero_()
            layer.intermediate.dense.weight.zero_()
            layer.intermediate.dense.bias.zero_()
            layer.output.dense.weight.zero_()
            layer.output.dense.bias.zero_()
    model.eval()
    model.save_pretrained(path)


def build_tiny_vit(path: Path) -> None:
    torch.manual_seed(20240810)
    config = ViTConfig(image_size=32, patch_size=8, hidden_size=HIDDEN,
                       num_hidden_layers=2, num_attention_heads=2,
                       intermediate_size=64, num_channels=3)
    model = ViTModel(config)
    model.eval()
    model.save_pretrained(path)
    ViTImageProcessor(size={"height": 32, "width": 32}).save_pretrained(path)


@pytest.fixture(scope="session")
def tiny_bert(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("tiny-bert")
    build_tiny_bert(path)
    return path


@pytest.fixture(scope="session")
def tiny_vit(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("tiny-vit")
    build_tiny_vit(path)
    return path
