"""
Concept extraction as BIO token tagging.

A linear layer over final hidden states predicts one BIO label per word
(read at the word's first subword; later subwords are ignored by the
loss). ``unified`` mode trains one tagger over all categories;
``per-category`` mode trains one O/B/I tagger per category and unions
their spans, which allows spans of different categories to overlap.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from clinical_lm.conf import FinetuneConfig
from clinical_lm.constants import IGNORE_INDEX
from clinical_lm.errors import ConfigError
from clinical_lm.model.checkpoint import Checkpoint
from clinical_lm.model.config import ModelConfig
from clinical_lm.model.encoder import forward
from clinical_lm.model.inputs import pack_single, pad_batch, pad_labels
from clinical_lm.tasks.common import (
    TaskModel,
    encode_words,
    encoder_from_checkpoint,
    finetune_loop,
    init_linear,
)
from clinical_lm.tasks.datasets import NerExample
from clinical_lm.tensor import matmul, no_grad, softmax, softmax_cross_entropy
from clinical_lm.tokenizer import Vocabulary

logger = logging.getLogger(__name__)

OUTSIDE = "O"
UNIFIED = "unified"
PER_CATEGORY = "per-category"
HEAD = "ner.classifier"
_ALL = "*"
_SCOPE_SEP = "/"


@dataclass(frozen=True, order=True)
class Span:
    """Tokens ``start`` .. ``end - 1`` labeled ``category``."""

    start: int
    end: int
    category: str

    def as_tuple(self) -> Tuple[int, int, str]:
        return (self.start, self.end, self.category)


def bio_labels(categories: Iterable[str]) -> List[str]:
    labels = [OUTSIDE]
    for cat in sorted(set(categories)):
        labels += [f"B-{cat}", f"I-{cat}"]
    return labels


def bio_encode(n_tokens: int, spans: Iterable[Span]) -> List[str]:
    labels = [OUTSIDE] * n_tokens
    owner: List[Optional[Span]] = [None] * n_tokens
    for span in sorted(spans):
        if not 0 <= span.start < span.end <= n_tokens:
            raise ConfigError(f"span {span.as_tuple()} outside {n_tokens} tokens")
        for i in range(span.start, span.end):
            if owner[i] is not None:
                raise ConfigError(
                    f"overlapping spans {owner[i].as_tuple()} and {span.as_tuple()} "
                    f"cannot share one tagger; use ner_mode={PER_CATEGORY}"
                )
            owner[i] = span
        labels[span.start] = f"B-{span.category}"
        for i in range(span.start + 1, span.end):
            labels[i] = f"I-{span.category}"
    return labels


def bio_decode(labels: Sequence[str]) -> List[Span]:
    """
    Spans from BIO labels. A dangling I- (after O or after another
    category) opens a new span as if it were B-.
    """
    spans: List[Span] = []
    start, category = None, None
    for i, label in enumerate(list(labels) + [OUTSIDE]):
        prefix, _, cat = label.partition("-")
        continues = prefix == "I" and category == cat
        if start is not None and not continues:
            spans.append(Span(start, i, category))
            start, category = None, None
        if prefix in ("B", "I") and not continues:
            start, category = i, cat
    return spans


@dataclass
class EncodedNer:
    ids: List[int]
    first_subwords: List[int]
    label_ids: List[int]


def encode_ner(
    vocab: Vocabulary,
    words: Sequence[str],
    max_seq_len: int,
    labels: Optional[Sequence[str]] = None,
    label_index: Optional[Dict[str, int]] = None,
) -> EncodedNer:
    """[CLS] subwords [SEP]; words whose first subword does not fit are dropped."""
    ids, firsts = encode_words(vocab, words)
    budget = max_seq_len - 2
    firsts = [f + 1 for f in firsts if f < budget]
    packed = pack_single(ids[:budget], max_seq_len)
    label_ids = [IGNORE_INDEX] * len(packed.ids)
    if labels is not None:
        for w, pos in enumerate(firsts):
            label_ids[pos] = label_index[labels[w]]
    return EncodedNer(packed.ids, firsts, label_ids)


def token_loss(params, cfg: ModelConfig, batch: Sequence[EncodedNer], training: bool = False, rng=None):
    """Cross-entropy summed over labelled tokens; pads and subword tails add nothing."""
    padded = pad_batch([e.ids for e in batch])
    targets = pad_labels([e.label_ids for e in batch], padded.ids.shape[1], IGNORE_INDEX)
    out = forward(params, cfg, padded.ids, padded.segment_ids, padded.attn_mask,
                  training=training, rng=rng)
    logits = matmul(out.hidden, params[f"{HEAD}.weight"]) + params[f"{HEAD}.bias"]
    return softmax_cross_entropy(logits, targets, reduction="sum")


def _batch_loss(cfg: ModelConfig):
    def loss_fn(params, batch: Sequence[EncodedNer], rng):
        return token_loss(params, cfg, batch, training=True, rng=rng)

    return loss_fn


def _restrict(labels: Sequence[str], category: str) -> List[str]:
    """BIO labels of one category, other categories as O."""
    return [lab if lab.partition("-")[2] == category else OUTSIDE for lab in labels]


def _train_one(
    checkpoint: Optional[Checkpoint],
    model_cfg: Optional[ModelConfig],
    vocab: Vocabulary,
    examples: Sequence[NerExample],
    labels: List[str],
    cfg: FinetuneConfig,
    restrict_to: Optional[str],
    progress: bool,
) -> TaskModel:
    model_cfg, params = encoder_from_checkpoint(checkpoint, model_cfg, seed=cfg.seed)
    params.update(init_linear(HEAD, model_cfg.hidden_size, len(labels), cfg.seed))
    index = {lab: i for i, lab in enumerate(labels)}
    encoded = []
    for ex in examples:
        gold = _restrict(ex.labels, restrict_to) if restrict_to else ex.labels
        # round trip through spans repairs any dangling I- in gold data
        gold = bio_encode(len(gold), bio_decode(gold))
        encoded.append(encode_ner(vocab, ex.tokens, model_cfg.max_seq_len, gold, index))
    finetune_loop(params, encoded, _batch_loss(model_cfg), cfg,
                  task=f"ner:{restrict_to or UNIFIED}", progress=progress)
    return TaskModel("ner", model_cfg, params, labels)


class NerTagger:
    def __init__(self, mode: str, models: Dict[str, TaskModel]):
        self.mode = mode
        self.models = models

    @property
    def categories(self) -> List[str]:
        cats = set()
        for model in self.models.values():
            cats.update(lab[2:] for lab in model.labels if lab != OUTSIDE)
        return sorted(cats)

    def _tag(self, model: TaskModel, vocab: Vocabulary, words: Sequence[str]) -> Tuple[List[str], List[float]]:
        enc = encode_ner(vocab, words, model.config.max_seq_len)
        padded = pad_batch([enc.ids])
        with no_grad():
            out = forward(model.params, model.config, padded.ids, padded.segment_ids, padded.attn_mask)
            logits = matmul(out.hidden, model.params[f"{HEAD}.weight"]) + model.params[f"{HEAD}.bias"]
            probs = softmax(logits).data[0]
        labels, scores = [OUTSIDE] * len(words), [1.0] * len(words)
        for w, pos in enumerate(enc.first_subwords):
            k = int(probs[pos].argmax())
            labels[w] = model.labels[k]
            scores[w] = float(probs[pos, k])
        return labels, scores

    def predict(self, vocab: Vocabulary, words: Sequence[str]) -> Tuple[List[Span], List[float]]:
        """Predicted spans and, per word, the probability of the winning label."""
        spans: List[Span] = []
        tagged: List[List[float]] = [[] for _ in words]
        outside: List[List[float]] = [[] for _ in words]
        for model in self.models.values():
            labels, probs = self._tag(model, vocab, words)
            spans.extend(bio_decode(labels))
            for w, (lab, p) in enumerate(zip(labels, probs)):
                (outside if lab == OUTSIDE else tagged)[w].append(p)
        # a word tagged by any model scores its best tag; otherwise its least confident O
        scores = [max(t) if t else min(o) for t, o in zip(tagged, outside)]
        return sorted(set(spans)), scores

    def to_task_model(self) -> TaskModel:
        if self.mode == UNIFIED:
            model = self.models[_ALL]
            return TaskModel("ner", model.config, model.params, model.labels, {"ner_mode": UNIFIED})
        params = {}
        for cat, model in self.models.items():
            params.update({f"{cat}{_SCOPE_SEP}{name}": t for name, t in model.params.items()})
        first = next(iter(self.models.values()))
        return TaskModel(
            "ner", first.config, params, bio_labels(self.models),
            {"ner_mode": PER_CATEGORY, "categories": sorted(self.models)},
        )

    @classmethod
    def from_task_model(cls, model: TaskModel) -> "NerTagger":
        mode = model.meta.get("ner_mode", UNIFIED)
        if mode == UNIFIED:
            return cls(UNIFIED, {_ALL: model})
        models = {}
        for cat in model.meta.get("categories") or []:
            prefix = f"{cat}{_SCOPE_SEP}"
            params = {name[len(prefix):]: t for name, t in model.params.items() if name.startswith(prefix)}
            models[cat] = TaskModel("ner", model.config, params, bio_labels([cat]))
        return cls(PER_CATEGORY, models)


def finetune_ner(
    checkpoint: Optional[Checkpoint],
    vocab: Vocabulary,
    examples: Sequence[NerExample],
    cfg: FinetuneConfig,
    model_cfg: Optional[ModelConfig] = None,
    progress: bool = False,
) -> NerTagger:
    categories = sorted({lab[2:] for ex in examples for lab in ex.labels if lab != OUTSIDE})
    if not categories:
        raise ConfigError("NER data has no labeled spans")
    if cfg.ner_mode == UNIFIED:
        model = _train_one(checkpoint, model_cfg, vocab, examples, bio_labels(categories),
                           cfg, None, progress)
        return NerTagger(UNIFIED, {_ALL: model})
    models = {
        cat: _train_one(checkpoint, model_cfg, vocab, examples, bio_labels([cat]), cfg, cat, progress)
        for cat in categories
    }
    return NerTagger(PER_CATEGORY, models)
