"""
Pretraining heads and the joint loss.

The MLM head is dense + GELU + layer norm followed by logits against the
word-embedding table (tied output, no output bias). The SOP head is a
linear layer on the pooled [CLS] vector.
"""
from typing import Dict, NamedTuple, Optional

import numpy as np

from clinical_lm.constants import IGNORE_INDEX
from clinical_lm.model.config import ModelConfig
from clinical_lm.model.encoder import SerialContext, forward, init_param
from clinical_lm.tensor import (
    Tensor,
    gelu,
    get_default_dtype,
    layer_norm,
    matmul,
    softmax_cross_entropy,
)

Params = Dict[str, Tensor]
SOP_CLASSES = 2


class PretrainBatch(NamedTuple):
    ids: np.ndarray
    segment_ids: np.ndarray
    attn_mask: np.ndarray
    mlm_labels: np.ndarray
    sop_labels: np.ndarray


class PretrainLoss(NamedTuple):
    total: Tensor
    mlm: Tensor
    sop: Tensor
    masked_correct: int
    masked_total: int


def head_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    h = cfg.hidden_size
    return {
        "mlm.transform.weight": (h, h),
        "mlm.transform.bias": (h,),
        "mlm.ln.gamma": (h,),
        "mlm.ln.beta": (h,),
        "sop.weight": (h, SOP_CLASSES),
        "sop.bias": (SOP_CLASSES,),
    }


def build_pretraining_heads(cfg: ModelConfig, seed: int = 0, dtype=None) -> Params:
    dtype = dtype or get_default_dtype()
    # Separate stream so head init never shifts encoder init for a seed.
    rng = np.random.default_rng([seed, 1])
    return {
        name: Tensor(init_param(name, shape, rng, dtype), requires_grad=True, name=name)
        for name, shape in head_shapes(cfg).items()
    }


def mlm_logits(params: Params, hidden: Tensor, ctx=None) -> Tensor:
    ctx = ctx or SerialContext()
    h = gelu(matmul(hidden, params["mlm.transform.weight"]) + params["mlm.transform.bias"])
    h = layer_norm(h, params["mlm.ln.gamma"], params["mlm.ln.beta"])
    return ctx.vocab_logits(h, params["embeddings.word"])


def sop_logits(params: Params, pooled: Tensor) -> Tensor:
    return matmul(pooled, params["sop.weight"]) + params["sop.bias"]


def pretraining_loss(
    params: Params,
    cfg: ModelConfig,
    batch: PretrainBatch,
    ctx=None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    mlm_normalizer: Optional[float] = None,
) -> PretrainLoss:
    """
    MLM cross-entropy over masked positions plus SOP cross-entropy, equal
    weights.

    The MLM term is a mean over this batch's masked positions unless
    ``mlm_normalizer`` is given, in which case it is the summed loss divided
    by it. A data-parallel replica passes the global masked count over the
    replica count so that averaging replica gradients reproduces the
    gradient of the whole batch.
    """
    out = forward(
        params, cfg, batch.ids, batch.segment_ids, batch.attn_mask,
        ctx=ctx, training=training, rng=rng,
    )
    rows, cols = np.nonzero(batch.mlm_labels != IGNORE_INDEX)
    targets = batch.mlm_labels[rows, cols]
    masked_hidden = out.hidden[rows, cols]
    logits = mlm_logits(params, masked_hidden, ctx)
    if mlm_normalizer is None:
        mlm = softmax_cross_entropy(logits, targets)
    else:
        mlm = softmax_cross_entropy(logits, targets, reduction="sum") / max(mlm_normalizer, 1e-12)
    sop = softmax_cross_entropy(sop_logits(params, out.pooled), batch.sop_labels)
    correct = int((logits.data.argmax(axis=-1) == targets).sum()) if len(targets) else 0
    return PretrainLoss(mlm + sop, mlm, sop, correct, len(targets))
