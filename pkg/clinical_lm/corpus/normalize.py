"""
Character normalization and exact-duplicate removal.

normalize_text decodes HTML entities (repeatedly, so double-escaped text
settles), repairs mojibake with ftfy, maps non-breaking spaces to plain
spaces and drops bytes that are not valid UTF-8. It is iterated to a fixed
point, so normalizing twice changes nothing.
"""
import dataclasses
import html
import logging
from typing import Dict, Iterable, Iterator, Optional, Union

import ftfy

from clinical_lm.corpus.documents import RawDocument
from clinical_lm.utils import sha256_bytes

logger = logging.getLogger(__name__)

_SPACE_LIKE = str.maketrans({"\xa0": " ", "\u202f": " ", "\u2007": " "})
_MAX_PASSES = 8


def _to_text(raw: Union[str, bytes]) -> str:
    if isinstance(raw, bytes):
        return raw.decode("utf-8", errors="ignore")
    # Lone surrogates cannot be encoded; drop them the same way.
    return raw.encode("utf-8", errors="ignore").decode("utf-8")


def _normalize_once(text: str) -> str:
    previous = None
    while text != previous:
        previous = text
        text = html.unescape(text)
    text = ftfy.fix_text(text, unescape_html=False)
    return text.translate(_SPACE_LIKE)


def normalize_text(raw: Union[str, bytes]) -> str:
    text = _to_text(raw)
    for _ in range(_MAX_PASSES):
        fixed = _normalize_once(text)
        if fixed == text:
            break
        text = fixed
    return text


def dedup_corpus(
    docs: Iterable[RawDocument],
    stats: Optional[Dict[str, int]] = None,
) -> Iterator[RawDocument]:
    """
    Yield documents with normalized text, dropping empty ones and any whose
    normalized text was already seen. Ids play no part in what is dropped;
    a repeated id with new text is kept and counted. ``stats`` receives the
    counters ``empty``, ``duplicates`` and ``repeated_ids``.
    """
    counters = stats if stats is not None else {}
    for key in ("empty", "duplicates", "repeated_ids"):
        counters.setdefault(key, 0)
    seen_text = set()
    seen_ids = set()
    for doc in docs:
        text = normalize_text(doc.text)
        if not text.strip():
            counters["empty"] += 1
            continue
        digest = sha256_bytes(text.encode("utf-8"))
        if digest in seen_text:
            counters["duplicates"] += 1
            logger.debug(f"dedup dropped duplicate text id={doc.id}")
            continue
        if doc.id in seen_ids:
            counters["repeated_ids"] += 1
            logger.warning(f"dedup kept repeated document id={doc.id} with new text")
        seen_text.add(digest)
        seen_ids.add(doc.id)
        yield dataclasses.replace(doc, text=text)
