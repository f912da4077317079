"""Packing token sequences into encoder inputs."""
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from clinical_lm.constants import CLS_TOKEN, PAD_TOKEN, SEP_TOKEN, SPECIAL_TOKENS

PAD_ID = SPECIAL_TOKENS.index(PAD_TOKEN)
CLS_ID = SPECIAL_TOKENS.index(CLS_TOKEN)
SEP_ID = SPECIAL_TOKENS.index(SEP_TOKEN)


class Packed(NamedTuple):
    ids: List[int]
    segment_ids: List[int]


class Batch(NamedTuple):
    ids: np.ndarray
    segment_ids: np.ndarray
    attn_mask: np.ndarray


def truncate_pair(a: Sequence[int], b: Sequence[int], budget: int) -> Tuple[List[int], List[int]]:
    """Drop tokens from the end of the longer side until both fit in ``budget``."""
    a, b = list(a), list(b)
    budget = max(budget, 0)
    while len(a) + len(b) > budget:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    return a, b


def pack_single(a: Sequence[int], max_len: int) -> Packed:
    """[CLS] a [SEP], truncating ``a`` to fit."""
    a = list(a)[: max(max_len - 2, 0)]
    ids = [CLS_ID] + a + [SEP_ID]
    return Packed(ids, [0] * len(ids))


def pack_pair(a: Sequence[int], b: Sequence[int], max_len: int) -> Packed:
    """[CLS] a [SEP] b [SEP] with segment ids 0 then 1, truncated symmetrically."""
    a, b = truncate_pair(a, b, max_len - 3)
    ids = [CLS_ID] + a + [SEP_ID] + b + [SEP_ID]
    segments = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    return Packed(ids, segments)


def pad_batch(
    sequences: Sequence[Sequence[int]],
    segment_ids: Optional[Sequence[Sequence[int]]] = None,
    length: Optional[int] = None,
) -> Batch:
    """Right-pad to the longest sequence (or ``length``) with [PAD]."""
    width = length or max((len(s) for s in sequences), default=1)
    n = len(sequences)
    ids = np.full((n, width), PAD_ID, dtype=np.int64)
    segs = np.zeros((n, width), dtype=np.int64)
    mask = np.zeros((n, width), dtype=np.int64)
    for row, seq in enumerate(sequences):
        k = len(seq)
        ids[row, :k] = seq
        mask[row, :k] = 1
        if segment_ids is not None:
            segs[row, :k] = segment_ids[row]
    return Batch(ids, segs, mask)


def pad_labels(labels: Sequence[Sequence[int]], width: int, fill: int) -> np.ndarray:
    out = np.full((len(labels), width), fill, dtype=np.int64)
    for row, seq in enumerate(labels):
        out[row, : len(seq)] = seq
    return out
