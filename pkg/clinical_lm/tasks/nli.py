"""
Natural language inference: premise and hypothesis packed as one pair,
three-way softmax on the pooled [CLS] vector.
"""
import logging
from typing import List, Optional, Sequence

import numpy as np

from clinical_lm.conf import FinetuneConfig
from clinical_lm.constants import NLI_LABELS
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
from clinical_lm.tasks.datasets import NliExample
from clinical_lm.tensor import Tensor, matmul, no_grad, softmax, softmax_cross_entropy
from clinical_lm.tokenizer import Vocabulary

logger = logging.getLogger(__name__)

HEAD = "nli.classifier"


def encode_nli(vocab: Vocabulary, ex: NliExample, max_seq_len: int) -> Packed:
    return encode_text_pair(vocab, ex.premise, ex.hypothesis, max_seq_len)


def nli_logits(params, cfg: ModelConfig, packed: Sequence[Packed], training=False, rng=None) -> Tensor:
    pooled = pooled_output(params, cfg, packed, training=training, rng=rng)
    return matmul(pooled, params[f"{HEAD}.weight"]) + params[f"{HEAD}.bias"]


class InferenceClassifier:
    def __init__(self, model: TaskModel):
        self.model = model

    @property
    def labels(self) -> List[str]:
        return self.model.labels

    def predict_proba(self, vocab: Vocabulary, examples: Sequence[NliExample]) -> np.ndarray:
        cfg = self.model.config
        packed = [encode_nli(vocab, ex, cfg.max_seq_len) for ex in examples]
        with no_grad():
            return softmax(nli_logits(self.model.params, cfg, packed)).data

    def predict(self, vocab: Vocabulary, examples: Sequence[NliExample]) -> List[str]:
        probs = self.predict_proba(vocab, examples)
        return [self.labels[int(k)] for k in probs.argmax(axis=-1)]


def finetune_nli(
    checkpoint: Optional[Checkpoint],
    vocab: Vocabulary,
    examples: Sequence[NliExample],
    cfg: FinetuneConfig,
    model_cfg: Optional[ModelConfig] = None,
    progress: bool = False,
) -> InferenceClassifier:
    model_cfg, params = encoder_from_checkpoint(checkpoint, model_cfg, seed=cfg.seed)
    labels = list(NLI_LABELS)
    params.update(init_linear(HEAD, model_cfg.hidden_size, len(labels), cfg.seed))
    encoded = [(encode_nli(vocab, ex, model_cfg.max_seq_len), labels.index(ex.label)) for ex in examples]

    def loss_fn(p, batch, rng):
        logits = nli_logits(p, model_cfg, [packed for packed, _ in batch], training=True, rng=rng)
        return softmax_cross_entropy(logits, np.array([label for _, label in batch]))

    finetune_loop(params, encoded, loss_fn, cfg, task="nli", progress=progress)
    return InferenceClassifier(TaskModel("nli", model_cfg, params, labels))
