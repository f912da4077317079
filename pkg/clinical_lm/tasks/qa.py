"""
Extractive question answering over long contexts.

The context is scanned with overlapping token windows, each packed as
[CLS] question [SEP] window [SEP]. Two linear layers score every position
as an answer start or end; the best span across all windows (start score
plus end score, at most ``max_answer`` tokens long) is mapped back to
character offsets in the context.
"""
import dataclasses
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from clinical_lm.conf import FinetuneConfig, QaWindowing
from clinical_lm.model.checkpoint import Checkpoint
from clinical_lm.model.config import ModelConfig
from clinical_lm.model.encoder import forward
from clinical_lm.model.inputs import CLS_ID, SEP_ID, Packed, pad_batch
from clinical_lm.tasks.common import TaskModel, encoder_from_checkpoint, finetune_loop, init_linear
from clinical_lm.tasks.datasets import QaExample
from clinical_lm.tensor import Tensor, matmul, no_grad, reshape, softmax_cross_entropy
from clinical_lm.tokenizer import Encoding, Vocabulary

logger = logging.getLogger(__name__)

START_HEAD = "qa.start"
END_HEAD = "qa.end"
_MASKED = -1e9


@dataclass
class QaWindow:
    """Context tokens ``start`` .. ``start + length - 1`` packed after the question."""

    start: int
    length: int
    packed: Packed
    context_offset: int

    def covers(self, first: int, last: int) -> bool:
        return self.start <= first and last < self.start + self.length


@dataclass
class QaPrediction:
    text: str
    start: int
    end: int
    score: Optional[float]

    @property
    def is_empty(self) -> bool:
        return self.score is None


EMPTY_ANSWER = QaPrediction("", 0, 0, None)


def window_starts(n_tokens: int, window: int, stride: int) -> List[int]:
    starts = [0]
    while starts[-1] + window < n_tokens:
        starts.append(starts[-1] + stride)
    return starts


def qa_windows(question_ids: Sequence[int], context_ids: Sequence[int], w: QaWindowing) -> List[QaWindow]:
    w.validate()
    question = list(question_ids)[: w.max_question]
    head = [CLS_ID] + question + [SEP_ID]
    windows = []
    for start in window_starts(len(context_ids), w.window, w.stride):
        chunk = list(context_ids[start:start + w.window])
        ids = head + chunk + [SEP_ID]
        segments = [0] * len(head) + [1] * (len(chunk) + 1)
        windows.append(QaWindow(start, len(chunk), Packed(ids, segments), len(head)))
    return windows


def answer_token_span(offsets: Sequence[Tuple[int, int]], start: int, end: int) -> Optional[Tuple[int, int]]:
    """First and last context token overlapping characters ``start`` .. ``end - 1``."""
    hits = [k for k, (lo, hi) in enumerate(offsets) if lo < end and hi > start]
    if not hits:
        return None
    return hits[0], hits[-1]


def best_span(start_logits: np.ndarray, end_logits: np.ndarray, max_answer: int) -> Optional[Tuple[int, int, float]]:
    """
    argmax of start[i] + end[j] over 0 <= j - i < max_answer, as
    (i, j, score); None when there are no positions.
    """
    n = len(start_logits)
    if n == 0:
        return None
    scores = start_logits[:, None] + end_logits[None, :]
    gap = np.arange(n)[None, :] - np.arange(n)[:, None]
    scores = np.where((gap >= 0) & (gap < max_answer), scores, -np.inf)
    i, j = np.unravel_index(int(np.argmax(scores)), scores.shape)
    if not np.isfinite(scores[i, j]):
        return None
    return int(i), int(j), float(scores[i, j])


def span_logits(params, cfg: ModelConfig, packed: Sequence[Packed], training=False, rng=None) -> Tuple[Tensor, Tensor]:
    """Start and end logits [B, T]; padding positions are pushed to -1e9."""
    batch = pad_batch([p.ids for p in packed], [p.segment_ids for p in packed])
    out = forward(params, cfg, batch.ids, batch.segment_ids, batch.attn_mask, training=training, rng=rng)
    shape = batch.ids.shape
    bias = np.where(batch.attn_mask > 0, 0.0, _MASKED).astype(out.hidden.dtype)
    start = reshape(matmul(out.hidden, params[f"{START_HEAD}.weight"]) + params[f"{START_HEAD}.bias"], shape)
    end = reshape(matmul(out.hidden, params[f"{END_HEAD}.weight"]) + params[f"{END_HEAD}.bias"], shape)
    return start + bias, end + bias


@dataclass
class _Target:
    packed: Packed
    start: int
    end: int


def _encode_context(vocab: Vocabulary, ex: QaExample) -> Tuple[List[int], Encoding]:
    question = vocab.encode(ex.question, skip_whitespace=True).ids
    return question, vocab.encode(ex.context, skip_whitespace=True)


def training_targets(vocab: Vocabulary, ex: QaExample, w: QaWindowing) -> List[_Target]:
    """
    One target per window: the first gold answer lying wholly inside the
    window, or [CLS] at position 0 when none does.
    """
    question, context = _encode_context(vocab, ex)
    gold = [answer_token_span(context.offsets, a.start, a.end) for a in ex.answers]
    gold = [g for g in gold if g is not None]
    targets = []
    for win in qa_windows(question, context.ids, w):
        inside = [g for g in gold if win.covers(*g)]
        if inside:
            first, last = inside[0]
            base = win.context_offset - win.start
            targets.append(_Target(win.packed, base + first, base + last))
        else:
            targets.append(_Target(win.packed, 0, 0))
    return targets


class QaReader:
    def __init__(self, model: TaskModel):
        self.model = model
        self.windowing = QaWindowing(**model.meta.get("qa_windowing", {})).fit(model.config.max_seq_len)

    def predict(self, vocab: Vocabulary, question: str, context: str) -> QaPrediction:
        ex = QaExample(question, context)
        question_ids, encoding = _encode_context(vocab, ex)
        windows = qa_windows(question_ids, encoding.ids, self.windowing)
        with no_grad():
            start, end = span_logits(self.model.params, self.model.config, [win.packed for win in windows])
        best = EMPTY_ANSWER
        for row, win in enumerate(windows):
            lo = win.context_offset
            found = best_span(start.data[row, lo:lo + win.length], end.data[row, lo:lo + win.length],
                              self.windowing.max_answer)
            if found is None:
                continue
            i, j, score = found
            if best.score is None or score > best.score:
                char_start = encoding.offsets[win.start + i][0]
                char_end = encoding.offsets[win.start + j][1]
                best = QaPrediction(context[char_start:char_end], char_start, char_end, score)
        return best


def finetune_qa(
    checkpoint: Optional[Checkpoint],
    vocab: Vocabulary,
    examples: Sequence[QaExample],
    cfg: FinetuneConfig,
    windowing: Optional[QaWindowing] = None,
    model_cfg: Optional[ModelConfig] = None,
    progress: bool = False,
) -> QaReader:
    model_cfg, params = encoder_from_checkpoint(checkpoint, model_cfg, seed=cfg.seed)
    windowing = (windowing or QaWindowing()).fit(model_cfg.max_seq_len)
    params.update(init_linear(START_HEAD, model_cfg.hidden_size, 1, cfg.seed))
    params.update(init_linear(END_HEAD, model_cfg.hidden_size, 1, cfg.seed + 1))
    targets = [t for ex in examples for t in training_targets(vocab, ex, windowing)]
    logger.info(f"Built qa training windows examples={len(examples)} windows={len(targets)}")

    def loss_fn(p, batch, rng):
        start, end = span_logits(p, model_cfg, [t.packed for t in batch], training=True, rng=rng)
        start_loss = softmax_cross_entropy(start, np.array([t.start for t in batch]))
        end_loss = softmax_cross_entropy(end, np.array([t.end for t in batch]))
        return (start_loss + end_loss) * 0.5

    finetune_loop(params, targets, loss_fn, cfg, task="qa", progress=progress)
    meta = {"qa_windowing": dataclasses.asdict(windowing)}
    return QaReader(TaskModel("qa", model_cfg, params, meta=meta))
