"""
Pretraining data: validation split, tokenized documents, seeded batch
streams and a background prefetcher.
"""
import logging
import queue
import threading
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from clinical_lm.constants import IGNORE_INDEX
from clinical_lm.corpus.documents import CleanDocument
from clinical_lm.errors import EmptyCorpusError
from clinical_lm.model.inputs import pad_batch, pad_labels
from clinical_lm.pretraining.examples import make_mlm_example, make_sop_example
from clinical_lm.pretraining.heads import PretrainBatch
from clinical_lm.tokenizer import Vocabulary
from clinical_lm.utils import stable_fraction

logger = logging.getLogger(__name__)

VAL_SPLIT_SALT = "val"


@dataclass
class TokenizedDocument:
    id: str
    sentences: List[List[int]]


def is_validation(doc_id: str, val_fraction: float) -> bool:
    return stable_fraction(f"{VAL_SPLIT_SALT}:{doc_id}") < val_fraction


def split_documents(docs: Iterable, val_fraction: float) -> Tuple[list, list]:
    """(train, val) by a stable hash of each document id."""
    train, val = [], []
    for doc in docs:
        (val if is_validation(doc.id, val_fraction) else train).append(doc)
    return train, val


def tokenize_documents(docs: Iterable[CleanDocument], vocab: Vocabulary) -> List[TokenizedDocument]:
    out = []
    for doc in docs:
        sentences = [vocab.encode(text, skip_whitespace=True).ids for text in doc.sentence_texts()]
        out.append(TokenizedDocument(doc.id, [s for s in sentences if s]))
    return out


def sop_positions(docs: Sequence[TokenizedDocument], sentences_per_segment: int = 1) -> List[Tuple[int, int]]:
    """Every (document index, sentence index) that starts a segment pair."""
    k = max(sentences_per_segment, 1)
    return [
        (d, i)
        for d, doc in enumerate(docs)
        for i in range(len(doc.sentences) - k)
    ]


class BatchBuilder:
    """Builds padded PretrainBatch objects from (document, sentence) positions."""

    def __init__(
        self,
        docs: Sequence[TokenizedDocument],
        max_seq_len: int,
        vocab_size: int,
        mask_rate: float,
        mask_mode: str = "mask",
        sentences_per_segment: int = 1,
    ):
        self.docs = docs
        self.max_seq_len = max_seq_len
        self.vocab_size = vocab_size
        self.mask_rate = mask_rate
        self.mask_mode = mask_mode
        self.sentences_per_segment = sentences_per_segment
        self.positions = sop_positions(docs, sentences_per_segment)

    def build(self, positions: Sequence[Tuple[int, int]], rng: np.random.Generator) -> PretrainBatch:
        ids, segments, labels, sop = [], [], [], []
        for d, i in positions:
            pair = make_sop_example(
                self.docs[d].sentences, i, rng, self.max_seq_len, self.sentences_per_segment
            )
            mlm = make_mlm_example(
                pair.input_ids, self.mask_rate, rng, mode=self.mask_mode, vocab_size=self.vocab_size
            )
            ids.append(mlm.input_ids.tolist())
            segments.append(pair.segment_ids)
            labels.append(mlm.label_ids.tolist())
            sop.append(pair.label)
        padded = pad_batch(ids, segments)
        return PretrainBatch(
            padded.ids,
            padded.segment_ids,
            padded.attn_mask,
            pad_labels(labels, padded.ids.shape[1], IGNORE_INDEX),
            np.asarray(sop, dtype=np.int64),
        )


def train_batches(builder: BatchBuilder, batch_size: int, seed: int) -> Iterator[PretrainBatch]:
    """
    Endless stream: each epoch draws a permutation of all segment-pair
    positions from a generator seeded by (seed, epoch).
    """
    if not builder.positions:
        raise EmptyCorpusError("no document has two sentences to pair")
    epoch = 0
    while True:
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(builder.positions))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            chunk = [builder.positions[j] for j in order[start:start + batch_size]]
            yield builder.build(chunk, rng)
        if len(order) < batch_size:
            yield builder.build([builder.positions[j] for j in order], rng)
        epoch += 1


def validation_batches(builder: BatchBuilder, batch_size: int, seed: int) -> List[PretrainBatch]:
    """Fixed validation set: every position once, masks drawn once."""
    rng = np.random.default_rng([seed, 1 << 20])
    positions = builder.positions
    return [
        builder.build(positions[start:start + batch_size], rng)
        for start in range(0, len(positions), batch_size)
    ]


_DONE = object()


class BatchPrefetcher:
    """
    Runs a batch iterator on a background thread feeding a bounded queue.
    The produced sequence is the iterator's own; ``depth`` only bounds how
    far the producer runs ahead. ``depth`` 0 iterates inline.
    """

    def __init__(self, source: Iterator, depth: int = 2):
        self.source = source
        self.depth = max(int(depth), 0)
        self._stop = threading.Event()
        self._queue: Optional[queue.Queue] = None
        self._thread: Optional[threading.Thread] = None
        self._finished = False
        if self.depth:
            self._queue = queue.Queue(maxsize=self.depth)
            self._thread = threading.Thread(target=self._produce, name="batch-prefetch", daemon=True)
            self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self) -> None:
        try:
            for item in self.source:
                if not self._put(item):
                    return
            self._put(_DONE)
        except BaseException as exc:
            self._put(exc)

    def __iter__(self):
        return self

    def __next__(self):
        if self._queue is None:
            return next(self.source)
        if self._finished:
            raise StopIteration
        item = self._queue.get()
        if item is _DONE:
            self._finished = True
            raise StopIteration
        if isinstance(item, BaseException):
            raise item
        return item

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
