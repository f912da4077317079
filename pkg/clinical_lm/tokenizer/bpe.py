"""
Byte-pair-encoding vocabulary: training, encode/decode and the text file
format.

Text is pre-split on whitespace into words. The last symbol of every word
carries the END_OF_WORD suffix, so merges stay inside a word and a token
ending in the suffix closes one. A single space between two non-whitespace
runs is implied by that boundary; any other whitespace run (leading,
trailing, repeated, tabs, newlines) is kept as a token of its own so decode
reproduces the text exactly. Ids are assigned specials first, then the base
alphabet in sorted order, then merged symbols in merge order.
"""
import heapq
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple

from tqdm import tqdm

from clinical_lm.constants import (
    END_OF_WORD,
    PAD_TOKEN,
    SPECIAL_TOKENS,
    UNK_TOKEN,
    VOCAB_FORMAT_HEADER,
)
from clinical_lm.errors import VocabularyError
from clinical_lm.utils import atomic_write_text

logger = logging.getLogger(__name__)

TASK_TRAIN_BPE = "train_bpe"

_PRETOKEN_RE = re.compile(r"\S+|\s+")
_ALPHABET_MARK = "#alphabet"
_MERGES_MARK = "#merges"
_NAMED_ESCAPES = {"\\": "\\\\", " ": "\\s", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_NAMED_UNESCAPES = {"\\": "\\", "s": " ", "t": "\t", "n": "\n", "r": "\r"}

Pair = Tuple[str, str]
Symbols = Tuple[str, ...]

PIECE_WORD = "word"
PIECE_SPACE = "space"
PIECE_SPECIAL = "special"


@dataclass
class Encoding:
    ids: List[int] = field(default_factory=list)
    offsets: List[Tuple[int, int]] = field(default_factory=list)
    tokens: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


class Vocabulary:
    """Merge table plus the token <-> id bijection."""

    def __init__(
        self,
        alphabet: Iterable[str],
        merges: Sequence[Pair],
        specials: Sequence[str] = SPECIAL_TOKENS,
    ):
        self.specials: Tuple[str, ...] = tuple(specials)
        self.alphabet: Tuple[str, ...] = tuple(sorted(set(alphabet)))
        self.merges: List[Pair] = [(str(a), str(b)) for a, b in merges]
        self.id_to_token: List[str] = (
            list(self.specials)
            + list(self.alphabet)
            + [a + b for a, b in self.merges]
        )
        self.token_to_id: Dict[str, int] = {}
        for i, token in enumerate(self.id_to_token):
            if token in self.token_to_id:
                raise VocabularyError(f"duplicate token {token!r} at id {i}")
            self.token_to_id[token] = i
        self.merge_ranks: Dict[Pair, int] = {
            pair: rank for rank, pair in enumerate(self.merges)
        }
        self._special_set = frozenset(self.specials)
        self._cache: Dict[Tuple[str, bool], List[str]] = {}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return (
            self.specials == other.specials
            and self.alphabet == other.alphabet
            and self.merges == other.merges
        )

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def special_id(self, token: str) -> int:
        try:
            return self.token_to_id[token]
        except KeyError:
            raise VocabularyError(f"special token {token!r} not in vocabulary")

    def is_special(self, token_id: int) -> bool:
        return 0 <= token_id < len(self.specials)

    @property
    def special_ids(self) -> frozenset:
        return frozenset(range(len(self.specials)))

    def truncate(self, num_merges: int) -> "Vocabulary":
        """The vocabulary made of the first ``num_merges`` merges."""
        return Vocabulary(self.alphabet, self.merges[:num_merges], self.specials)

    def segment(self, piece: str, end_of_word: bool = False) -> List[str]:
        """Apply merges to one pre-token in rank order."""
        key = (piece, end_of_word)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        symbols = list(initial_symbols(piece, end_of_word))
        ranks = self.merge_ranks
        while len(symbols) > 1:
            best_rank = None
            best_pair = None
            for pair in zip(symbols, symbols[1:]):
                rank = ranks.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank, best_pair = rank, pair
            if best_pair is None:
                break
            merged: List[str] = []
            i = 0
            while i < len(symbols):
                if (
                    i + 1 < len(symbols)
                    and symbols[i] == best_pair[0]
                    and symbols[i + 1] == best_pair[1]
                ):
                    merged.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        self._cache[key] = symbols
        return symbols

    def encode(self, text: str, skip_whitespace: bool = False) -> Encoding:
        return encode(self, text, skip_whitespace=skip_whitespace)

    def decode(self, ids: Iterable[int]) -> str:
        return decode(self, ids)

    def save(self, path: str) -> None:
        save_vocabulary(self, path)


def initial_symbols(piece: str, end_of_word: bool = False) -> Symbols:
    """Characters of ``piece``, the last one suffixed when it ends a word."""
    symbols = list(piece)
    if end_of_word and symbols:
        symbols[-1] += END_OF_WORD
    return tuple(symbols)


def pretokenize(text: str, specials: frozenset) -> Iterator[Tuple[str, str, int, int]]:
    """
    Yield ``(kind, piece, start, end)`` for words, specials and whitespace
    runs. A lone space between two non-whitespace runs yields nothing.
    """
    runs = [(m.group(), m.start(), m.end()) for m in _PRETOKEN_RE.finditer(text)]
    for i, (piece, start, end) in enumerate(runs):
        if piece[0].isspace():
            if piece == " " and 0 < i < len(runs) - 1:
                continue
            yield PIECE_SPACE, piece, start, end
        elif piece in specials:
            yield PIECE_SPECIAL, piece, start, end
        else:
            yield PIECE_WORD, piece, start, end


def _count_words(corpus: Iterable[str], specials: frozenset) -> Counter:
    counts: Counter = Counter()
    for text in corpus:
        for kind, piece, _, _ in pretokenize(text, specials):
            if kind != PIECE_SPECIAL:
                counts[initial_symbols(piece, kind == PIECE_WORD)] += 1
    return counts


def train_bpe(
    corpus: Iterable[str],
    vocab_size: int,
    specials: Sequence[str] = SPECIAL_TOKENS,
    progress: bool = False,
) -> Vocabulary:
    """
    Greedy BPE: repeatedly merge the most frequent adjacent symbol pair,
    ties broken by the smaller (left, right) pair. Stops at ``vocab_size``
    or when no pair is left; pre-tokens equal to a special are not counted.
    """
    special_set = frozenset(specials)
    counts = _count_words(corpus, special_set)
    alphabet = sorted({symbol for symbols in counts for symbol in symbols})
    minimum = len(alphabet) + len(specials)
    if vocab_size < minimum:
        raise VocabularyError(
            f"vocab_size {vocab_size} is below the required minimum {minimum} "
            f"({len(alphabet)} base symbols + {len(specials)} specials)"
        )
    target_merges = vocab_size - minimum
    logger.info(
        f"Starting {TASK_TRAIN_BPE} words={len(counts)} "
        f"alphabet={len(alphabet)} target_merges={target_merges}"
    )

    words: List[List[str]] = []
    freqs: List[int] = []
    for symbols in sorted(counts):
        words.append(list(symbols))
        freqs.append(counts[symbols])

    pair_counts: Dict[Pair, int] = defaultdict(int)
    pair_words: Dict[Pair, Set[int]] = defaultdict(set)
    for idx, symbols in enumerate(words):
        for pair in zip(symbols, symbols[1:]):
            pair_counts[pair] += freqs[idx]
            pair_words[pair].add(idx)
    heap = [(-c, a, b) for (a, b), c in pair_counts.items()]
    heapq.heapify(heap)

    existing = set(specials) | set(alphabet)
    merges: List[Pair] = []
    blocked: Set[Pair] = set()
    bar = tqdm(total=target_merges, desc="bpe merges", disable=not progress)
    while len(merges) < target_merges:
        if not heap:
            break
        neg, a, b = heapq.heappop(heap)
        pair = (a, b)
        if pair in blocked or pair_counts.get(pair, 0) != -neg or neg == 0:
            continue
        if a + b in existing:
            blocked.add(pair)
            continue
        merges.append(pair)
        existing.add(a + b)
        bar.update(1)
        changed = _apply_merge(pair, words, freqs, pair_counts, pair_words)
        for p in sorted(changed):
            c = pair_counts.get(p, 0)
            if c > 0:
                heapq.heappush(heap, (-c, p[0], p[1]))
    bar.close()

    if len(merges) < target_merges:
        logger.warning(
            f"{TASK_TRAIN_BPE}: pairs exhausted after {len(merges)} merges; "
            f"vocabulary size is {minimum + len(merges)} not {vocab_size}"
        )
    vocab = Vocabulary(alphabet, merges, specials)
    logger.info(f"Finished {TASK_TRAIN_BPE} vocab_size={len(vocab)}")
    return vocab


def _apply_merge(
    pair: Pair,
    words: List[List[str]],
    freqs: List[int],
    pair_counts: Dict[Pair, int],
    pair_words: Dict[Pair, Set[int]],
) -> Set[Pair]:
    """Merge ``pair`` in every word containing it; return touched pairs."""
    a, b = pair
    merged_symbol = a + b
    changed: Set[Pair] = set()
    for idx in sorted(pair_words.pop(pair, ())):
        symbols = words[idx]
        freq = freqs[idx]
        for old in zip(symbols, symbols[1:]):
            pair_counts[old] -= freq
            changed.add(old)
        new_symbols: List[str] = []
        i = 0
        while i < len(symbols):
            if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
                new_symbols.append(merged_symbol)
                i += 2
            else:
                new_symbols.append(symbols[i])
                i += 1
        old_pairs = set(zip(symbols, symbols[1:]))
        new_pairs = set(zip(new_symbols, new_symbols[1:]))
        for gone in old_pairs - new_pairs:
            if gone != pair:
                pair_words[gone].discard(idx)
        for p in zip(new_symbols, new_symbols[1:]):
            pair_counts[p] += freq
            pair_words[p].add(idx)
            changed.add(p)
        words[idx] = new_symbols
    pair_counts.pop(pair, None)
    changed.discard(pair)
    for p in list(changed):
        if pair_counts.get(p, 0) <= 0:
            pair_counts.pop(p, None)
    return changed


def encode(vocab: Vocabulary, text: str, skip_whitespace: bool = False) -> Encoding:
    """
    Ids and character offsets for ``text``. A pre-token equal to a special
    maps to that special; symbols outside the vocabulary map to [UNK].
    With ``skip_whitespace`` whitespace runs produce no tokens.
    """
    out = Encoding()
    unk_id = vocab.token_to_id.get(UNK_TOKEN)
    for kind, piece, start, end in pretokenize(text, vocab._special_set):
        if kind == PIECE_SPECIAL:
            out.ids.append(vocab.token_to_id[piece])
            out.offsets.append((start, end))
            out.tokens.append(piece)
            continue
        if kind == PIECE_SPACE and skip_whitespace:
            continue
        symbols = vocab.segment(piece, end_of_word=kind == PIECE_WORD)
        pos = start
        for i, symbol in enumerate(symbols):
            width = len(symbol)
            if kind == PIECE_WORD and i == len(symbols) - 1:
                width -= len(END_OF_WORD)
            token_id = vocab.token_to_id.get(symbol)
            if token_id is None:
                if unk_id is None:
                    raise VocabularyError(
                        f"symbol {symbol!r} not in vocabulary and no {UNK_TOKEN}"
                    )
                token_id = unk_id
            out.ids.append(token_id)
            out.offsets.append((pos, pos + width))
            out.tokens.append(vocab.id_to_token[token_id])
            pos += width
    return out


def decode(vocab: Vocabulary, ids: Iterable[int]) -> str:
    """
    Concatenate token strings, turning each END_OF_WORD suffix into a space
    when another word follows. [PAD] is dropped; other specials render
    literally with a separating space where no whitespace is adjacent.
    """
    size = len(vocab.id_to_token)
    parts: List[str] = []
    prev_text: Optional[str] = None
    prev_closes = prev_special = False
    for raw in ids:
        token_id = int(raw)
        if token_id < 0 or token_id >= size:
            raise VocabularyError(f"token id {token_id} out of range [0, {size})")
        token = vocab.id_to_token[token_id]
        if token == PAD_TOKEN:
            continue
        special = vocab.is_special(token_id)
        closes = not special and token.endswith(END_OF_WORD)
        text = token[:-len(END_OF_WORD)] if closes else token
        if prev_text is not None and not text[:1].isspace():
            if (special or prev_special) and not prev_text[-1:].isspace():
                parts.append(" ")
            elif prev_closes and not special:
                parts.append(" ")
        parts.append(text)
        prev_text, prev_closes, prev_special = text, closes, special
    return "".join(parts)


def _escape(symbol: str) -> str:
    out = []
    for ch in symbol:
        named = _NAMED_ESCAPES.get(ch)
        if named is not None:
            out.append(named)
        elif ch.isspace() or not ch.isprintable():
            code = ord(ch)
            out.append(f"\\u{code:04x}" if code <= 0xFFFF else f"\\U{code:08x}")
        else:
            out.append(ch)
    return "".join(out)


def _unescape(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch != "\\":
            out.append(ch)
            i += 1
            continue
        if i + 1 >= len(text):
            raise VocabularyError(f"dangling escape in {text!r}")
        code = text[i + 1]
        if code in _NAMED_UNESCAPES:
            out.append(_NAMED_UNESCAPES[code])
            i += 2
        elif code in ("u", "U"):
            width = 4 if code == "u" else 8
            digits = text[i + 2:i + 2 + width]
            try:
                out.append(chr(int(digits, 16)))
            except ValueError:
                raise VocabularyError(f"bad escape in {text!r}")
            i += 2 + width
        else:
            raise VocabularyError(f"unknown escape \\{code} in {text!r}")
    return "".join(out)


def dumps_vocabulary(vocab: Vocabulary) -> str:
    lines = [f"{VOCAB_FORMAT_HEADER} {len(vocab)}"]
    lines.extend(vocab.specials)
    lines.append(_ALPHABET_MARK)
    lines.extend(_escape(s) for s in vocab.alphabet)
    lines.append(_MERGES_MARK)
    lines.extend(f"{_escape(a)} {_escape(b)}" for a, b in vocab.merges)
    return "\n".join(lines) + "\n"


def save_vocabulary(vocab: Vocabulary, path: str) -> None:
    atomic_write_text(path, dumps_vocabulary(vocab))


def loads_vocabulary(text: str) -> Vocabulary:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise VocabularyError("empty vocabulary file")
    header = lines[0].split(" ")
    if len(header) != 2 or header[0] != VOCAB_FORMAT_HEADER:
        raise VocabularyError(f"bad vocabulary header {lines[0]!r}")
    try:
        declared = int(header[1])
    except ValueError:
        raise VocabularyError(f"bad vocabulary size in header {lines[0]!r}")
    try:
        a_mark = lines.index(_ALPHABET_MARK)
        m_mark = lines.index(_MERGES_MARK, a_mark + 1)
    except ValueError:
        raise VocabularyError("vocabulary file missing #alphabet or #merges")
    specials = lines[1:a_mark]
    alphabet = [_unescape(s) for s in lines[a_mark + 1:m_mark]]
    merges = []
    for line in lines[m_mark + 1:]:
        parts = line.split(" ")
        if len(parts) != 2:
            raise VocabularyError(f"bad merge line {line!r}")
        merges.append((_unescape(parts[0]), _unescape(parts[1])))
    vocab = Vocabulary(alphabet, merges, specials)
    if len(vocab) != declared:
        raise VocabularyError(
            f"vocabulary header declares {declared} tokens, found {len(vocab)}"
        )
    return vocab


def load_vocabulary(path: str) -> Vocabulary:
    with open(path, encoding="utf-8", newline="") as f:
        return loads_vocabulary(f.read())
