"""Semantic textual similarity: linear regression on the pooled [CLS] vector."""
import logging
from typing import List, Optional, Sequence

import numpy as np

from clinical_lm.conf import FinetuneConfig
from clinical_lm.constants import STS_MAX_SCORE, STS_MIN_SCORE
from clinical_lm.model.checkpoint import Checkpoint
from clinical_lm.model.config import ModelConfig
from clinical_lm.model.inputs import Packed
from clinical_lm.tasks.common import (
    TaskModel,
    encode_text_pair,
    encoder_from_checkpoint,
    finetune_loop,
    init_linear,
    pooled_output,
)
from clinical_lm.tasks.datasets import StsExample
from clinical_lm.tensor import Tensor, matmul, mse, no_grad, reshape
from clinical_lm.tokenizer import Vocabulary

logger = logging.getLogger(__name__)

HEAD = "sts.regressor"


def sts_scores(params, cfg: ModelConfig, packed: Sequence[Packed], training=False, rng=None) -> Tensor:
    """One unclipped score per pair, shape [B]."""
    pooled = pooled_output(params, cfg, packed, training=training, rng=rng)
    out = matmul(pooled, params[f"{HEAD}.weight"]) + params[f"{HEAD}.bias"]
    return reshape(out, (len(packed),))


class SimilarityScorer:
    def __init__(self, model: TaskModel):
        self.model = model

    def predict(self, vocab: Vocabulary, examples: Sequence[StsExample]) -> List[float]:
        cfg = self.model.config
        packed = [encode_text_pair(vocab, ex.a, ex.b, cfg.max_seq_len) for ex in examples]
        with no_grad():
            raw = sts_scores(self.model.params, cfg, packed).data
        return [float(s) for s in np.clip(raw, STS_MIN_SCORE, STS_MAX_SCORE)]


def finetune_sts(
    checkpoint: Optional[Checkpoint],
    vocab: Vocabulary,
    examples: Sequence[StsExample],
    cfg: FinetuneConfig,
    model_cfg: Optional[ModelConfig] = None,
    progress: bool = False,
) -> SimilarityScorer:
    model_cfg, params = encoder_from_checkpoint(checkpoint, model_cfg, seed=cfg.seed)
    params.update(init_linear(HEAD, model_cfg.hidden_size, 1, cfg.seed))
    encoded = [
        (encode_text_pair(vocab, ex.a, ex.b, model_cfg.max_seq_len), ex.score)
        for ex in examples
    ]

    def loss_fn(p, batch, rng):
        pred = sts_scores(p, model_cfg, [packed for packed, _ in batch], training=True, rng=rng)
        return mse(pred, np.array([score for _, score in batch], dtype=pred.dtype))

    finetune_loop(params, encoded, loss_fn, cfg, task="sts", progress=progress)
    return SimilarityScorer(TaskModel("sts", model_cfg, params))
