"""
BERT-style bidirectional encoder (post layer norm, learned positions).

Parameters live in a flat name -> Tensor dict. ``forward`` takes a
parallel context: the serial context is the identity, a tensor-parallel one
all-reduces after the attention-output and FFN-output projections (forward)
and before the column-parallel projections (backward). The same code runs
the serial model and every shard.
"""
import logging
import math
from typing import Dict, NamedTuple, Optional

import numpy as np
from scipy.stats import truncnorm

from clinical_lm.constants import INIT_STD
from clinical_lm.errors import ShapeError, VocabularyError
from clinical_lm.model.config import ModelConfig
from clinical_lm.tensor import (
    Tensor,
    dropout,
    embedding_lookup,
    gelu,
    get_default_dtype,
    layer_norm,
    matmul,
    reshape,
    softmax,
    tanh,
    transpose,
)

logger = logging.getLogger(__name__)

Params = Dict[str, Tensor]


class EncoderOutput(NamedTuple):
    hidden: Tensor
    pooled: Tensor


class SerialContext:
    """Single-worker context: every collective hook is the identity."""

    rank = 0
    world_size = 1

    def __init__(self):
        self.layer = -1

    def set_layer(self, layer: int) -> None:
        self.layer = layer

    def copy_in(self, x: Tensor) -> Tensor:
        return x

    def reduce_out(self, x: Tensor) -> Tensor:
        return x

    def embed(self, table: Tensor, ids: np.ndarray) -> Tensor:
        return embedding_lookup(table, ids)

    def vocab_logits(self, hidden: Tensor, table: Tensor) -> Tensor:
        return matmul(hidden, transpose(table))


def layer_prefix(i: int) -> str:
    return f"layers.{i}."


def param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Every encoder parameter name and shape, in initialization order."""
    h, i = cfg.hidden_size, cfg.intermediate_size
    shapes = {
        "embeddings.word": (cfg.vocab_size, h),
        "embeddings.position": (cfg.max_seq_len, h),
        "embeddings.segment": (cfg.type_vocab, h),
        "embeddings.ln.gamma": (h,),
        "embeddings.ln.beta": (h,),
    }
    for n in range(cfg.num_layers):
        p = layer_prefix(n)
        for proj in ("q", "k", "v", "o"):
            shapes[f"{p}attn.{proj}.weight"] = (h, h)
            shapes[f"{p}attn.{proj}.bias"] = (h,)
        shapes[f"{p}attn.ln.gamma"] = (h,)
        shapes[f"{p}attn.ln.beta"] = (h,)
        shapes[f"{p}ffn.in.weight"] = (h, i)
        shapes[f"{p}ffn.in.bias"] = (i,)
        shapes[f"{p}ffn.out.weight"] = (i, h)
        shapes[f"{p}ffn.out.bias"] = (h,)
        shapes[f"{p}ffn.ln.gamma"] = (h,)
        shapes[f"{p}ffn.ln.beta"] = (h,)
    shapes["pooler.weight"] = (h, h)
    shapes["pooler.bias"] = (h,)
    return shapes


def init_param(name: str, shape: tuple, rng: np.random.Generator, dtype) -> np.ndarray:
    """Truncated N(0, std^2) for weights and tables, zeros for biases/betas,
    ones for layer-norm gains."""
    if name.endswith(".gamma"):
        return np.ones(shape, dtype=dtype)
    if name.endswith((".bias", ".beta")):
        return np.zeros(shape, dtype=dtype)
    values = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=INIT_STD, size=shape,
                           random_state=rng)
    return np.asarray(values, dtype=dtype).reshape(shape)


def build_encoder(cfg: ModelConfig, seed: int = 0, dtype=None) -> Params:
    """Freshly initialized encoder parameters; deterministic per seed."""
    cfg.validate()
    dtype = dtype or get_default_dtype()
    rng = np.random.default_rng(seed)
    return {
        name: Tensor(init_param(name, shape, rng, dtype), requires_grad=True,
                     name=name)
        for name, shape in param_shapes(cfg).items()
    }


def _validate_inputs(cfg: ModelConfig, ids, segment_ids, attn_mask):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ShapeError("ids must be a non-empty [batch, seq] array", ids.shape)
    batch, seq = ids.shape
    if seq > cfg.max_seq_len:
        raise ShapeError(
            f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}"
        )
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise VocabularyError(
            f"token id out of range [0, {cfg.vocab_size}): "
            f"min={int(ids.min())} max={int(ids.max())}"
        )
    if segment_ids is None:
        segment_ids = np.zeros_like(ids)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if segment_ids.shape != ids.shape:
        raise ShapeError("segment_ids shape", segment_ids.shape, ids.shape)
    if segment_ids.min() < 0 or segment_ids.max() >= cfg.type_vocab:
        raise VocabularyError(f"segment id out of range [0, {cfg.type_vocab})")
    if attn_mask is None:
        attn_mask = np.ones_like(ids)
    attn_mask = np.asarray(attn_mask)
    if attn_mask.shape != ids.shape:
        raise ShapeError("attn_mask shape", attn_mask.shape, ids.shape)
    if np.any(attn_mask.sum(axis=1) == 0):
        raise ShapeError("attention mask row has no unmasked position", attn_mask.shape)
    return ids, segment_ids, attn_mask


def _split_heads(x: Tensor, batch: int, seq: int, heads: int, head_dim: int) -> Tensor:
    return transpose(reshape(x, (batch, seq, heads, head_dim)), (0, 2, 1, 3))


def _attention(params, prefix, x, mask_bias, cfg, ctx, training, rng) -> Tensor:
    batch, seq, _ = x.shape
    head_dim = cfg.head_dim
    xin = ctx.copy_in(x)
    projections = {}
    for proj in ("q", "k", "v"):
        w = params[f"{prefix}attn.{proj}.weight"]
        b = params[f"{prefix}attn.{proj}.bias"]
        projections[proj] = matmul(xin, w) + b
    local_heads = projections["q"].shape[-1] // head_dim
    q = _split_heads(projections["q"], batch, seq, local_heads, head_dim)
    k = _split_heads(projections["k"], batch, seq, local_heads, head_dim)
    v = _split_heads(projections["v"], batch, seq, local_heads, head_dim)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(head_dim))
    probs = softmax(scores + mask_bias, axis=-1)
    probs = dropout(probs, cfg.dropout, rng, training)
    context = transpose(matmul(probs, v), (0, 2, 1, 3))
    context = reshape(context, (batch, seq, local_heads * head_dim))
    out = ctx.reduce_out(matmul(context, params[f"{prefix}attn.o.weight"]))
    return out + params[f"{prefix}attn.o.bias"]


def _feed_forward(params, prefix, x, ctx) -> Tensor:
    xin = ctx.copy_in(x)
    h = gelu(matmul(xin, params[f"{prefix}ffn.in.weight"]) + params[f"{prefix}ffn.in.bias"])
    out = ctx.reduce_out(matmul(h, params[f"{prefix}ffn.out.weight"]))
    return out + params[f"{prefix}ffn.out.bias"]


def forward(
    params: Params,
    cfg: ModelConfig,
    ids,
    segment_ids=None,
    attn_mask=None,
    ctx=None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> EncoderOutput:
    """
    Hidden states [B, T, H] and the pooled [CLS] vector [B, H]. Padding
    positions (attn_mask == 0) get -inf attention logits as keys.
    """
    ctx = ctx or SerialContext()
    ids, segment_ids, attn_mask = _validate_inputs(cfg, ids, segment_ids, attn_mask)
    batch, seq = ids.shape
    dtype = params["embeddings.position"].dtype

    x = ctx.embed(params["embeddings.word"], ids)
    x = x + embedding_lookup(params["embeddings.position"], np.arange(seq))
    x = x + embedding_lookup(params["embeddings.segment"], segment_ids)
    x = layer_norm(x, params["embeddings.ln.gamma"], params["embeddings.ln.beta"])
    x = dropout(x, cfg.dropout, rng, training)

    mask_bias = Tensor(
        np.where(attn_mask[:, None, None, :] > 0, 0.0, -np.inf).astype(dtype)
    )
    for n in range(cfg.num_layers):
        ctx.set_layer(n)
        p = layer_prefix(n)
        attn = dropout(
            _attention(params, p, x, mask_bias, cfg, ctx, training, rng),
            cfg.dropout, rng, training,
        )
        x = layer_norm(x + attn, params[f"{p}attn.ln.gamma"], params[f"{p}attn.ln.beta"])
        ffn = dropout(_feed_forward(params, p, x, ctx), cfg.dropout, rng, training)
        x = layer_norm(x + ffn, params[f"{p}ffn.ln.gamma"], params[f"{p}ffn.ln.beta"])
    ctx.set_layer(-1)

    cls = x[:, 0, :]
    pooled = tanh(matmul(cls, params["pooler.weight"]) + params["pooler.bias"])
    return EncoderOutput(x, pooled)


def encoder_param_names(params: Params):
    """Names that belong to the encoder (not pretraining or task heads)."""
    return [n for n in params if n.startswith(("embeddings.", "layers.", "pooler."))]
