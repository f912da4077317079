"""Masked-LM and sentence-order examples."""
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from clinical_lm.constants import (
    IGNORE_INDEX,
    MASK_TOKEN,
    SOP_IN_ORDER,
    SOP_SWAPPED,
    SPECIAL_TOKENS,
    UNK_TOKEN,
)
from clinical_lm.errors import ConfigError
from clinical_lm.model.inputs import pack_pair

MASK_ID = SPECIAL_TOKENS.index(MASK_TOKEN)
NUM_SPECIAL = len(SPECIAL_TOKENS)
# [UNK] stands for real text and may be masked like any other token.
UNMASKABLE_IDS = frozenset(range(NUM_SPECIAL)) - {SPECIAL_TOKENS.index(UNK_TOKEN)}

BERT_MASK_SHARE = 0.8
BERT_RANDOM_SHARE = 0.1


@dataclass
class MlmExample:
    input_ids: np.ndarray
    label_ids: np.ndarray
    mask_positions: np.ndarray


@dataclass
class SopExample:
    input_ids: List[int]
    segment_ids: List[int]
    label: int

    @property
    def swapped(self) -> bool:
        return self.label == SOP_SWAPPED


def mask_count(rate: float, n: int) -> int:
    """round(rate * n), halves rounding up."""
    return int(math.floor(rate * n + 0.5))


def make_mlm_example(
    ids: Sequence[int],
    rate: float,
    rng: np.random.Generator,
    mode: str = "mask",
    vocab_size: Optional[int] = None,
) -> MlmExample:
    """
    Choose round(rate * n_maskable) positions uniformly without replacement.
    In ``mask`` mode each becomes [MASK]; in ``bert`` mode 80% become
    [MASK], 10% a random non-special token and 10% stay unchanged.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"mask rate must be in [0, 1], got {rate}")
    input_ids = np.asarray(ids, dtype=np.int64).copy()
    labels = np.full(input_ids.shape, IGNORE_INDEX, dtype=np.int64)
    maskable = np.array(
        [i for i, t in enumerate(input_ids) if int(t) not in UNMASKABLE_IDS],
        dtype=np.int64,
    )
    count = mask_count(rate, len(maskable))
    if count == 0:
        return MlmExample(input_ids, labels, np.zeros(0, dtype=np.int64))
    positions = np.sort(rng.choice(maskable, size=count, replace=False))
    labels[positions] = input_ids[positions]
    if mode == "mask":
        input_ids[positions] = MASK_ID
    elif mode == "bert":
        if vocab_size is None or vocab_size <= NUM_SPECIAL:
            raise ConfigError("bert masking needs a vocab_size above the special tokens")
        draws = rng.random(count)
        random_ids = rng.integers(NUM_SPECIAL, vocab_size, size=count)
        for pos, u, rid in zip(positions, draws, random_ids):
            if u < BERT_MASK_SHARE:
                input_ids[pos] = MASK_ID
            elif u < BERT_MASK_SHARE + BERT_RANDOM_SHARE:
                input_ids[pos] = rid
    else:
        raise ConfigError(f"unknown mask mode {mode!r}")
    return MlmExample(input_ids, labels, positions)


def make_sop_example(
    sentences: Sequence[Sequence[int]],
    index: int,
    rng: np.random.Generator,
    max_seq_len: int,
    sentences_per_segment: int = 1,
) -> Optional[SopExample]:
    """
    Two consecutive segments starting at sentence ``index``, swapped with
    probability 0.5 and packed as [CLS] a [SEP] b [SEP]. Returns None when
    the document has no second segment at ``index``.
    """
    k = max(int(sentences_per_segment), 1)
    if len(sentences) < 2 or index < 0 or index + k >= len(sentences):
        return None
    first = [t for s in sentences[index:index + k] for t in s]
    second = [t for s in sentences[index + k:index + 2 * k] for t in s]
    if rng.random() < 0.5:
        first, second, label = second, first, SOP_SWAPPED
    else:
        label = SOP_IN_ORDER
    packed = pack_pair(first, second, max_seq_len)
    return SopExample(packed.ids, packed.segment_ids, label)
