"""Raw and cleaned document records and their JSONL forms."""
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Iterator, List

from clinical_lm.errors import SchemaError
from clinical_lm.utils import read_jsonl, write_jsonl

DEFAULT_SOURCE_TAG = "clinical"


@dataclass
class RawDocument:
    id: str
    text: str
    source_tag: str = DEFAULT_SOURCE_TAG

    def to_dict(self) -> Dict[str, Any]:
        return {"id": self.id, "text": self.text, "source_tag": self.source_tag}


@dataclass
class CleanDocument:
    """Sentences as lists of word tokens; no sentence is empty."""

    id: str
    sentences: List[List[str]] = field(default_factory=list)
    source_tag: str = DEFAULT_SOURCE_TAG

    @property
    def num_words(self) -> int:
        return sum(len(s) for s in self.sentences)

    def sentence_texts(self) -> List[str]:
        return [" ".join(s) for s in self.sentences]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "sentences": self.sentences,
            "source_tag": self.source_tag,
        }


def raw_document_from_row(row: Dict[str, Any], where: str = "") -> RawDocument:
    if "id" not in row or "text" not in row:
        raise SchemaError(
            f"{where}document row needs 'id' and 'text', got {sorted(row)}"
        )
    text = row["text"]
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="ignore")
    return RawDocument(
        id=str(row["id"]),
        text="" if text is None else str(text),
        source_tag=str(row.get("source_tag") or DEFAULT_SOURCE_TAG),
    )


def read_raw_documents(path: str, lenient: bool = True) -> Iterator[RawDocument]:
    for n, row in enumerate(read_jsonl(path, lenient=lenient), start=1):
        yield raw_document_from_row(row, where=f"{path} row {n}: ")


def read_clean_documents(path: str) -> Iterator[CleanDocument]:
    for n, row in enumerate(read_jsonl(path, lenient=False), start=1):
        sentences = row.get("sentences")
        if "id" not in row or not isinstance(sentences, list):
            raise SchemaError(
                f"{path} row {n}: cleaned document needs 'id' and 'sentences'"
            )
        yield CleanDocument(
            id=str(row["id"]),
            sentences=[[str(t) for t in s] for s in sentences if s],
            source_tag=str(row.get("source_tag") or DEFAULT_SOURCE_TAG),
        )


def write_documents(path: str, docs: Iterable) -> int:
    return write_jsonl(path, (d.to_dict() for d in docs))
