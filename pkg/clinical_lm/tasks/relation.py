"""
Relation extraction between two marked concepts.

Candidates come from a type-pair allowlist and a sentence-gap limit.
Concept 1 is wrapped in [S1] ... [E1] inside sentence 1 and concept 2 in
[S2] ... [E2] inside sentence 2; a same-sentence pair yields two copies
of the sentence, each with its own markers. The classifier reads the
concatenated final hidden states of [CLS] and the four markers.
"""
import logging
import re
from dataclasses import dataclass
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from clinical_lm.conf import FinetuneConfig
from clinical_lm.constants import (
    E1_TOKEN,
    E2_TOKEN,
    ENTITY_MARKERS,
    NO_RELATION,
    S1_TOKEN,
    S2_TOKEN,
    SPECIAL_TOKENS,
)
from clinical_lm.errors import SchemaError
from clinical_lm.model.checkpoint import Checkpoint
from clinical_lm.model.config import ModelConfig
from clinical_lm.model.encoder import forward
from clinical_lm.model.inputs import pack_pair, pad_batch
from clinical_lm.static.load import get_relation_allowlist
from clinical_lm.tasks.common import TaskModel, encoder_from_checkpoint, finetune_loop, init_linear
from clinical_lm.tasks.datasets import ReExample
from clinical_lm.tensor import Tensor, concat, matmul, no_grad, softmax, softmax_cross_entropy
from clinical_lm.tokenizer import Vocabulary

logger = logging.getLogger(__name__)

HEAD = "re.classifier"
FEATURE_SLOTS = 5
MARKER_IDS = tuple(SPECIAL_TOKENS.index(t) for t in ENTITY_MARKERS)
_WORD_CHAR = re.compile(r"\w")


@dataclass(frozen=True)
class Concept:
    """A typed character span ``start`` .. ``end`` inside sentence ``sentence``."""

    sentence: int
    start: int
    end: int
    type: str
    text: str = ""


def generate_candidates(
    concepts: Sequence[Concept],
    allowed_pairs: Optional[FrozenSet[Tuple[str, str]]] = None,
    max_sentence_gap: Optional[int] = None,
) -> List[Tuple[Concept, Concept]]:
    """
    Every pair (earlier, later) in document order whose type pair is
    allowed and whose sentence distance is at most ``max_sentence_gap``.
    """
    default_pairs, default_gap = get_relation_allowlist()
    allowed = default_pairs if allowed_pairs is None else allowed_pairs
    gap = default_gap if max_sentence_gap is None else max_sentence_gap
    ordered = sorted(concepts, key=lambda c: (c.sentence, c.start, c.end, c.type))
    pairs = []
    for i, first in enumerate(ordered):
        for second in ordered[i + 1:]:
            if second.sentence - first.sentence > gap:
                break
            if (first.type, second.type) in allowed:
                pairs.append((first, second))
    return pairs


def align_to_tokens(text: str, start: int, end: int) -> Tuple[int, int]:
    """Widen a character span so it neither starts nor ends inside a word."""
    while start > 0 and _WORD_CHAR.match(text[start - 1]) and _WORD_CHAR.match(text[start]):
        start -= 1
    while end < len(text) and _WORD_CHAR.match(text[end - 1]) and _WORD_CHAR.match(text[end]):
        end += 1
    while start < end and text[start].isspace():
        start += 1
    while end > start and text[end - 1].isspace():
        end -= 1
    return start, end


def _wrap(text: str, span: Tuple[int, int], open_tag: str, close_tag: str) -> str:
    start, end = align_to_tokens(text, *span)
    if start >= end:
        raise SchemaError(f"concept span {span} is empty in {text!r}")
    before, inner, after = text[:start], text[start:end], text[end:]
    left = "" if not before or before[-1].isspace() else " "
    right = "" if not after or after[0].isspace() else " "
    return f"{before}{left}{open_tag} {inner} {close_tag}{right}{after}"


def mark_entities(s1: str, c1: Tuple[int, int], s2: str, c2: Tuple[int, int]) -> Tuple[str, str]:
    return _wrap(s1, c1, S1_TOKEN, E1_TOKEN), _wrap(s2, c2, S2_TOKEN, E2_TOKEN)


def markers_balanced(text: str) -> bool:
    """Each [Sx] is closed by its own [Ex] before any other marker opens."""
    expected = {S1_TOKEN: E1_TOKEN, S2_TOKEN: E2_TOKEN}
    closers = set(expected.values())
    open_tag = None
    for token in re.findall(r"\[(?:S|E)[12]\]", text):
        if token in expected:
            if open_tag is not None:
                return False
            open_tag = token
        elif token in closers:
            if open_tag is None or expected[open_tag] != token:
                return False
            open_tag = None
    return open_tag is None


@dataclass
class EncodedPair:
    ids: List[int]
    segment_ids: List[int]
    marker_positions: List[int]
    label: int = -1


def encode_relation(vocab: Vocabulary, ex: ReExample, max_seq_len: int, label: int = -1) -> EncodedPair:
    m1, m2 = mark_entities(ex.s1, ex.c1, ex.s2, ex.c2)
    a = vocab.encode(m1, skip_whitespace=True).ids
    b = vocab.encode(m2, skip_whitespace=True).ids
    packed = pack_pair(a, b, max_seq_len)
    positions = [0]
    for marker in MARKER_IDS:
        if marker not in packed.ids:
            raise SchemaError(
                f"entity marker {SPECIAL_TOKENS[marker]} lost when packing to {max_seq_len} tokens"
            )
        positions.append(packed.ids.index(marker))
    return EncodedPair(packed.ids, packed.segment_ids, positions, label)


def relation_logits(params, cfg: ModelConfig, batch: Sequence[EncodedPair], training=False, rng=None) -> Tensor:
    padded = pad_batch([e.ids for e in batch], [e.segment_ids for e in batch])
    out = forward(params, cfg, padded.ids, padded.segment_ids, padded.attn_mask,
                  training=training, rng=rng)
    rows = np.arange(len(batch))
    slots = [out.hidden[rows, np.array([e.marker_positions[k] for e in batch])]
             for k in range(FEATURE_SLOTS)]
    features = concat(slots, axis=-1)
    return matmul(features, params[f"{HEAD}.weight"]) + params[f"{HEAD}.bias"]


class RelationClassifier:
    def __init__(self, model: TaskModel):
        self.model = model

    @property
    def labels(self) -> List[str]:
        return self.model.labels

    def predict_proba(self, vocab: Vocabulary, examples: Sequence[ReExample]) -> np.ndarray:
        encoded = [encode_relation(vocab, ex, self.model.config.max_seq_len) for ex in examples]
        with no_grad():
            return softmax(relation_logits(self.model.params, self.model.config, encoded)).data

    def predict(self, vocab: Vocabulary, examples: Sequence[ReExample]) -> List[str]:
        probs = self.predict_proba(vocab, examples)
        return [self.labels[int(k)] for k in probs.argmax(axis=-1)]


def finetune_re(
    checkpoint: Optional[Checkpoint],
    vocab: Vocabulary,
    examples: Sequence[ReExample],
    cfg: FinetuneConfig,
    model_cfg: Optional[ModelConfig] = None,
    progress: bool = False,
) -> RelationClassifier:
    model_cfg, params = encoder_from_checkpoint(checkpoint, model_cfg, seed=cfg.seed)
    labels = sorted({ex.label for ex in examples} | {NO_RELATION})
    params.update(init_linear(HEAD, FEATURE_SLOTS * model_cfg.hidden_size, len(labels), cfg.seed))
    index = {lab: i for i, lab in enumerate(labels)}
    encoded = [encode_relation(vocab, ex, model_cfg.max_seq_len, index[ex.label]) for ex in examples]

    def loss_fn(p, batch, rng):
        logits = relation_logits(p, model_cfg, batch, training=True, rng=rng)
        return softmax_cross_entropy(logits, np.array([e.label for e in batch]))

    finetune_loop(params, encoded, loss_fn, cfg, task="re", progress=progress)
    return RelationClassifier(TaskModel("re", model_cfg, params, labels))
