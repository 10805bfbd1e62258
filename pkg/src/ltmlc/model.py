"""Label-query classifier.

Scores are ``sigmoid(query(encode(x), E))`` where ``E`` holds one frozen
embedding per class.  Each class embedding is a query token that attends
over the flattened image feature map through a stack of pre-norm decoder
blocks, and a per-class (or shared) affine head turns the final token into
a logit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    ClassVocabulary,
    LabeledDataset,
    PredictionMatrix,
    ValidationError,
    read_checkpoint,
    write_checkpoint,
)
from .rng import SplitMix64, fnv1a_64

HEAD_MODES = ("separate", "shared")


@dataclass
class ModelConfig:
    d: int = 64
    num_decoder_layers: int = 4
    num_heads: int = 4
    ffn_mult: int = 4
    head_mode: str = "separate"
    encoder_widths: list = field(default_factory=lambda: [16, 32, 64])
    height: int = 64
    width: int = 64
    position_encoding: bool = True
    init_seed: int = 0

    def validate(self) -> None:
        if self.d < 1 or self.num_heads < 1 or self.d % self.num_heads:
            raise ValidationError(f"d={self.d} must be divisible by num_heads={self.num_heads}")
        if self.num_decoder_layers < 1:
            raise ValidationError("num_decoder_layers must be >= 1")
        if self.head_mode not in HEAD_MODES:
            raise ValidationError(f"head_mode must be one of {HEAD_MODES}")
        if len(self.encoder_widths) != 3 or min(self.encoder_widths) < 1:
            raise ValidationError("encoder_widths must list three positive widths")
        if self.height % 8 or self.width % 8:
            raise ValidationError("image height and width must be divisible by 8")
        if self.position_encoding and self.d % 4:
            raise ValidationError("position encoding needs d divisible by 4")


# -- class embeddings ---------------------------------------------------------


def synthetic_class_embedding(name: str, d: int) -> np.ndarray:
    """Deterministic unit vector for a class name (FNV-1a seed, SplitMix64, Box-Muller)."""
    if d < 1:
        raise ValidationError("embedding dimension must be >= 1")
    if not name:
        raise ValidationError("class name must be non-empty")
    z = SplitMix64(fnv1a_64(name.encode("utf-8"))).normal(d)
    return z / np.linalg.norm(z)


def synthetic_embedding_table(vocab: ClassVocabulary, d: int) -> np.ndarray:
    return np.stack([synthetic_class_embedding(n, d) for n in vocab.names])


def read_embedding_csv(path, vocab: ClassVocabulary) -> np.ndarray:
    """Rows ``class,v0,...`` reordered to vocabulary order; used as-is."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "class":
        raise ValidationError(f"{path}: header must start with 'class'")
    d = len(rows[0]) - 1
    expected = [f"v{i}" for i in range(d)]
    if rows[0][1:] != expected or d < 1:
        raise ValidationError(f"{path}: header must be class,v0..v{d - 1}")
    table = {}
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != d + 1:
            raise ValidationError(f"{path}: row {r} has {len(row)} fields, expected {d + 1}")
        table[row[0]] = [float(v) for v in row[1:]]
    missing = [n for n in vocab.names if n not in table]
    if missing:
        raise ValidationError(f"{path}: missing embedding for class(es) {', '.join(missing)}")
    return np.array([table[n] for n in vocab.names], dtype=np.float64)


# -- layers -------------------------------------------------------------------


def sine_position_encoding(h: int, w: int, d: int) -> torch.Tensor:
    """Fixed 2-D sinusoidal code, ``(h*w, d)``: first half encodes rows, second half columns."""
    quarter = d // 4
    freqs = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys = torch.arange(h, dtype=torch.float64)[:, None] * freqs
    xs = torch.arange(w, dtype=torch.float64)[:, None] * freqs
    row_code = torch.cat([ys.sin(), ys.cos()], dim=1)[:, None, :].expand(h, w, 2 * quarter)
    col_code = torch.cat([xs.sin(), xs.cos()], dim=1)[None, :, :].expand(h, w, 2 * quarter)
    return torch.cat([row_code, col_code], dim=2).reshape(h * w, 4 * quarter)


class ImageEncoder(nn.Module):
    """Three 3x3 stride-2 convolutions with ReLU, then a 1x1 projection to ``d``."""

    def __init__(self, widths, d):
        super().__init__()
        chans = [3] + list(widths)
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1)
            for cin, cout in zip(chans[:-1], chans[1:])
        )
        self.proj = nn.Conv2d(chans[-1], d, kernel_size=1)

    def forward(self, images):
        # (N, H, W, 3) -> (N, H/8, W/8, d)
        x = images.permute(0, 3, 1, 2)
        for conv in self.convs:
            x = F.relu(conv(x))
        return self.proj(x).permute(0, 2, 3, 1)


class MultiHeadAttention(nn.Module):
    def __init__(self, d, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, query, key, value):
        n, lq, d = query.shape
        lk = key.shape[1]
        dh = d // self.num_heads
        q = self.q(query).view(n, lq, self.num_heads, dh).transpose(1, 2)
        k = self.k(key).view(n, lk, self.num_heads, dh).transpose(1, 2)
        v = self.v(value).view(n, lk, self.num_heads, dh).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(n, lq, d)
        return self.out(mixed)


class DecoderLayer(nn.Module):
    """Pre-norm block: query self-attention, cross-attention to image tokens, FFN."""

    def __init__(self, d, num_heads, ffn_hidden):
        super().__init__()
        self.norm_self = nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, num_heads)
        self.norm_cross = nn.LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, num_heads)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn_in = nn.Linear(d, ffn_hidden)
        self.ffn_out = nn.Linear(ffn_hidden, d)

    def forward(self, queries, memory, memory_pos):
        h = self.norm_self(queries)
        queries = queries + self.self_attn(h, h, h)
        h = self.norm_cross(queries)
        queries = queries + self.cross_attn(h, memory + memory_pos, memory)
        h = self.norm_ffn(queries)
        return queries + self.ffn_out(F.relu(self.ffn_in(h)))


class SeparateHeads(nn.Module):
    """One independent ``d -> 1`` affine map per class."""

    def __init__(self, num_classes, d):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(num_classes, d))
        self.bias = nn.Parameter(torch.zeros(num_classes))

    def forward(self, tokens):
        return (tokens * self.weight).sum(-1) + self.bias


class SharedHead(nn.Module):
    def __init__(self, d):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(d))
        self.bias = nn.Parameter(torch.zeros(()))

    def forward(self, tokens):
        return tokens @ self.weight + self.bias


class LabelQueryModel(nn.Module):
    def __init__(self, config: ModelConfig, vocab: ClassVocabulary, embeddings=None):
        super().__init__()
        config.validate()
        self.config = config
        self.vocab = vocab
        d = config.d
        if embeddings is None:
            embeddings = synthetic_embedding_table(vocab, d)
        embeddings = torch.as_tensor(np.asarray(embeddings), dtype=torch.float32)
        if embeddings.shape != (len(vocab), d):
            raise ValidationError(
                f"embedding table shape {tuple(embeddings.shape)} does not match ({len(vocab)}, {d})"
            )
        # buffer, not parameter: the optimizer never sees it
        self.register_buffer("class_embeddings", embeddings)
        self.encoder = ImageEncoder(config.encoder_widths, d)
        self.memory_norm = nn.LayerNorm(d)
        self.layers = nn.ModuleList(
            DecoderLayer(d, config.num_heads, config.ffn_mult * d)
            for _ in range(config.num_decoder_layers)
        )
        self.final_norm = nn.LayerNorm(d)
        if config.head_mode == "separate":
            self.heads = SeparateHeads(len(vocab), d)
        else:
            self.heads = SharedHead(d)
        h, w = config.height // 8, config.width // 8
        pos = sine_position_encoding(h, w, d) if config.position_encoding else torch.zeros(h * w, d)
        self.register_buffer("memory_pos", pos.float(), persistent=False)
        self.reset_parameters(config.init_seed)

    def reset_parameters(self, seed: int) -> None:
        """Xavier-normal weights, zero biases, unit norm gains, N(0, 1/d) heads.

        Draws come from one SplitMix64 stream in parameter registration order.
        """
        rng = SplitMix64(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("heads.") and name.endswith("weight"):
                    std = math.sqrt(1.0 / self.config.d)
                elif p.dim() >= 2:
                    receptive = int(np.prod(p.shape[2:])) if p.dim() > 2 else 1
                    fan_out, fan_in = p.shape[0] * receptive, p.shape[1] * receptive
                    std = math.sqrt(2.0 / (fan_in + fan_out))
                elif "norm" in name and name.endswith("weight"):
                    p.fill_(1.0)
                    continue
                else:
                    p.zero_()
                    continue
                p.copy_(torch.as_tensor(std * rng.normal(p.numel())).view_as(p))

    def encode_image(self, images):
        if images.shape[1:] != (self.config.height, self.config.width, 3):
            raise ValidationError(
                f"image shape {tuple(images.shape[1:])} does not match "
                f"({self.config.height}, {self.config.width}, 3)"
            )
        return self.encoder(images)

    def query_forward(self, feature_map, embeddings=None):
        """Logits ``(N, C)`` from a feature map ``(N, h, w, d)``."""
        emb = self.class_embeddings if embeddings is None else embeddings
        n, h, w, d = feature_map.shape
        if emb.shape[1] != d:
            raise ValidationError(f"embedding dim {emb.shape[1]} does not match feature dim {d}")
        if h * w != self.memory_pos.shape[0]:
            raise ValidationError("feature map size does not match the configured input size")
        memory = self.memory_norm(feature_map.reshape(n, h * w, d))
        pos = self.memory_pos.to(memory.dtype)
        queries = emb.to(memory.dtype).unsqueeze(0).expand(n, -1, -1)
        for layer in self.layers:
            queries = layer(queries, memory, pos)
        return self.heads(self.final_norm(queries))

    def forward(self, images):
        return self.query_forward(self.encode_image(images))


# -- prediction ---------------------------------------------------------------


def _as_batch(images, model: LabelQueryModel) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(np.asarray(images), dtype=dtype)


def predict_scores(model: LabelQueryModel, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Sigmoid scores ``(N, C)`` in float64 for an ``(N, H, W, 3)`` image array."""
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            logits = model(_as_batch(images[start:start + batch_size], model))
            out.append(torch.sigmoid(logits.double()).numpy())
    if not out:
        return np.zeros((0, len(model.vocab)))
    return np.concatenate(out, axis=0)


def predict(model: LabelQueryModel, data: LabeledDataset, batch_size: int = 128) -> PredictionMatrix:
    if data.vocabulary.names != model.vocab.names:
        raise ValidationError("model and dataset vocabularies differ")
    return PredictionMatrix(data.image_ids, predict_scores(model, data.images, batch_size), model.vocab)


# -- persistence --------------------------------------------------------------


def model_state(model: LabelQueryModel) -> dict:
    return {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}


def save_model(model: LabelQueryModel, path, extra_config: dict | None = None) -> None:
    config = {"model": asdict(model.config)}
    if extra_config:
        config.update(extra_config)
    write_checkpoint(model_state(model), config, model.vocab, path)


def model_from_checkpoint(state: dict, config: dict, vocab: ClassVocabulary) -> LabelQueryModel:
    model = LabelQueryModel(ModelConfig(**config["model"]), vocab,
                            embeddings=state["class_embeddings"])
    expected = set(model.state_dict())
    if set(state) != expected:
        raise ValidationError(
            f"checkpoint tensors differ from model: missing {sorted(expected - set(state))}, "
            f"extra {sorted(set(state) - expected)}"
        )
    model.load_state_dict({k: torch.from_numpy(v) for k, v in state.items()})
    return model


def load_model(path) -> LabelQueryModel:
    state, config, vocab = read_checkpoint(path)
    return model_from_checkpoint(state, config, vocab)

