"""
Corpus preprocessing: normalize, drop empty and duplicate documents,
optionally subsample, de-identify clinical sources, split sentences and
tokenize words.

Documents are independent, so the per-document work runs on a thread pool;
the emitted corpus is sorted by document id.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Tuple

from clinical_lm.conf import CorpusConfig
from clinical_lm.corpus.deid import DeidReport, PhiSpan, RuleSet, deidentify
from clinical_lm.corpus.documents import CleanDocument, RawDocument
from clinical_lm.corpus.normalize import dedup_corpus
from clinical_lm.corpus.sentences import split_sentences, tokenize_words
from clinical_lm.errors import EmptyCorpusError
from clinical_lm.static.load import load_abbreviations
from clinical_lm.utils import stable_fraction

logger = logging.getLogger(__name__)

TASK_PREPROCESS = "preprocess"


@dataclass
class CorpusReport:
    documents_in: int = 0
    documents_out: int = 0
    empty_dropped: int = 0
    duplicates_dropped: int = 0
    repeated_ids: int = 0
    sampled_out: int = 0
    sentences: int = 0
    words: int = 0
    sources: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def add_document(self, doc: CleanDocument) -> None:
        self.documents_out += 1
        self.sentences += len(doc.sentences)
        self.words += doc.num_words
        entry = self.sources.setdefault(
            doc.source_tag, {"documents": 0, "sentences": 0, "words": 0}
        )
        entry["documents"] += 1
        entry["sentences"] += len(doc.sentences)
        entry["words"] += doc.num_words

    def to_dict(self) -> Dict[str, object]:
        return {
            "documents_in": self.documents_in,
            "documents_out": self.documents_out,
            "empty_dropped": self.empty_dropped,
            "duplicates_dropped": self.duplicates_dropped,
            "repeated_ids": self.repeated_ids,
            "sampled_out": self.sampled_out,
            "sentences": self.sentences,
            "words": self.words,
            "sources": {k: dict(v) for k, v in sorted(self.sources.items())},
        }


def subsample(
    docs: Iterable[RawDocument], fraction: float, seed: int = 0
) -> Iterator[RawDocument]:
    """Keep documents whose seeded id hash falls below ``fraction``."""
    if fraction >= 1.0:
        yield from docs
        return
    for doc in docs:
        if stable_fraction(f"{seed}:{doc.id}") < fraction:
            yield doc


def process_document(
    doc: RawDocument,
    rules: Optional[RuleSet],
    abbreviations: FrozenSet[str],
) -> Tuple[CleanDocument, List[PhiSpan]]:
    """De-identify (when ``rules`` is given) then split and tokenize."""
    text = doc.text
    spans: List[PhiSpan] = []
    if rules is not None:
        text, spans = deidentify(text, rules)
    sentences = []
    for sentence in split_sentences(text, abbreviations):
        words = tokenize_words(sentence)
        if words:
            sentences.append(words)
    return CleanDocument(doc.id, sentences, doc.source_tag), spans


def preprocess_corpus(
    docs: Iterable[RawDocument],
    cfg: Optional[CorpusConfig] = None,
    rules: Optional[RuleSet] = None,
) -> Tuple[List[CleanDocument], DeidReport, CorpusReport]:
    """
    Run the full pipeline. Only documents whose source tag is in
    ``cfg.deid_tags`` are de-identified. Raises EmptyCorpusError when no
    document survives.
    """
    cfg = cfg or CorpusConfig()
    rules = rules or RuleSet.from_file(cfg.rules)
    abbreviations = load_abbreviations(cfg.abbreviations)
    deid_tags = set(cfg.deid_tags)
    corpus_report = CorpusReport()
    deid_report = DeidReport()
    stats: Dict[str, int] = {}

    def _counted(stream):
        for doc in stream:
            corpus_report.documents_in += 1
            yield doc

    kept = list(dedup_corpus(_counted(docs), stats))
    sampled = list(subsample(kept, cfg.sample_fraction, cfg.seed))
    corpus_report.empty_dropped = stats["empty"]
    corpus_report.duplicates_dropped = stats["duplicates"]
    corpus_report.repeated_ids = stats["repeated_ids"]
    corpus_report.sampled_out = len(kept) - len(sampled)
    logger.info(
        f"Starting {TASK_PREPROCESS} documents={len(sampled)} "
        f"workers={cfg.workers} deid_tags={sorted(deid_tags)}"
    )

    def _work(doc: RawDocument):
        doc_rules = rules if doc.source_tag in deid_tags else None
        return process_document(doc, doc_rules, abbreviations), doc.source_tag in deid_tags

    with ThreadPoolExecutor(max_workers=max(cfg.workers, 1)) as pool:
        results = list(pool.map(_work, sampled))

    clean: List[CleanDocument] = []
    for (doc, spans), deidentified in results:
        if deidentified:
            deid_report.add(spans)
        if doc.sentences:
            clean.append(doc)
    clean.sort(key=lambda d: d.id)
    for doc in clean:
        corpus_report.add_document(doc)
    if not clean:
        raise EmptyCorpusError("no documents left after preprocessing")
    logger.info(
        f"Finished {TASK_PREPROCESS} documents={len(clean)} "
        f"sentences={corpus_report.sentences} phi={deid_report.total}"
    )
    return clean, deid_report, corpus_report


def deidentify_documents(
    docs: Iterable[RawDocument], rules: RuleSet
) -> Tuple[List[RawDocument], DeidReport]:
    """De-identify raw documents without splitting (the deidentify command)."""
    report = DeidReport()
    out = []
    for doc in docs:
        text, spans = deidentify(doc.text, rules)
        report.add(spans)
        out.append(RawDocument(doc.id, text, doc.source_tag))
    return out, report
