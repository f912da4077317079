"""
Rule-based sentence boundary detection and word tokenization.

A sentence ends at . ! or ? followed by whitespace and an uppercase letter
(or a de-identification dummy token), unless the word before a period is a
known abbreviation or a single-letter initial. Blank lines always end a
sentence.
"""
import re
from typing import FrozenSet, List, Optional

from clinical_lm.static.load import load_abbreviations

_PARAGRAPH_RE = re.compile(r"\n[ \t\r\f\v]*\n\s*")
_BOUNDARY_RE = re.compile(r"([.!?])\s+(?=[A-Z]|\[\*\*)")
_WORD_RE = re.compile(r"\[\*\*[A-Z_]+\*\*\]|\w+|[^\w\s]")
_LEADING_PUNCT = "([{\"'"


def _previous_word(text: str, end: int) -> str:
    start = end
    while start > 0 and not text[start - 1].isspace():
        start -= 1
    return text[start:end].lstrip(_LEADING_PUNCT)


def _split_paragraph(
    text: str, abbreviations: FrozenSet[str], out: List[str]
) -> None:
    start = 0
    for m in _BOUNDARY_RE.finditer(text):
        if m.group(1) == ".":
            word = _previous_word(text, m.start(1))
            if word in abbreviations or (len(word) == 1 and word.isupper()):
                continue
        sentence = text[start:m.end(1)].strip()
        if sentence:
            out.append(sentence)
        start = m.end()
    tail = text[start:].strip()
    if tail:
        out.append(tail)


def split_sentences(
    text: str, abbreviations: Optional[FrozenSet[str]] = None
) -> List[str]:
    """Sentences of ``text`` in order; empty text gives []."""
    if abbreviations is None:
        abbreviations = load_abbreviations()
    sentences: List[str] = []
    for paragraph in _PARAGRAPH_RE.split(text):
        _split_paragraph(paragraph, abbreviations, sentences)
    return sentences


def tokenize_words(sentence: str) -> List[str]:
    """Dummy tokens stay whole; otherwise word runs and single punctuation."""
    return _WORD_RE.findall(sentence)
