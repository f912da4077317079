"""
Synthetic fixtures: a PHI-injected note corpus with its injected span list,
a mixed-source pretraining corpus, and small datasets for every
fine-tuning task. Everything is drawn from ``static/fixture_templates.yaml``
with a seeded numpy generator, so a seed fixes every file byte for byte.
"""
import logging
import os
import re
import string
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from clinical_lm.constants import NLI_LABELS, NO_RELATION
from clinical_lm.corpus.deid import PHI_CATEGORIES, RuleSet, default_rules, find_phi
from clinical_lm.corpus.documents import RawDocument, write_documents
from clinical_lm.corpus.sentences import tokenize_words
from clinical_lm.static.load import get_fixture_templates, get_gazetteers
from clinical_lm.tasks.datasets import (
    NerExample,
    NliExample,
    QaAnswerSpan,
    QaExample,
    ReExample,
    StsExample,
    example_rows,
)
from clinical_lm.utils import write_jsonl

logger = logging.getLogger(__name__)

TASK_GEN_FIXTURES = "gen_fixtures"

_SLOT_RE = re.compile(r"\{(\w+)\}")
_SLOT_LISTS = {
    "drug": "drugs",
    "ade": "ades",
    "reason": "reasons",
    "other_reason": "reasons",
    "dosage": "dosages",
    "frequency": "frequencies",
    "route": "routes",
    "test": "tests",
}
NER_CATEGORIES = ("drug", "reason", "ade")
_VIN_ALPHABET = "ABCDEFGHJKLMNPRSTUVWXYZ0123456789"

DEFAULT_SIZES = {
    "phi_documents": 100,
    "pretrain_documents": 200,
    "ner": 32,
    "re": 30,
    "sts": 30,
    "nli": 30,
    "qa": 24,
}


class TemplateFiller:
    """Fills ``{slot}`` templates and reports where each slot landed."""

    def __init__(self, rng: np.random.Generator, templates: Optional[Mapping] = None):
        self.rng = rng
        self.templates = templates or get_fixture_templates()

    def choice(self, options: Sequence):
        return options[int(self.rng.integers(len(options)))]

    def value(self, slot: str) -> str:
        return str(self.choice(self.templates[_SLOT_LISTS[slot]]))

    def sample(self, template: str, fixed: Optional[Dict[str, str]] = None) -> Dict[str, str]:
        values = dict(fixed or {})
        for slot in _SLOT_RE.findall(template):
            if slot not in values:
                values[slot] = self.value(slot)
        if "other_reason" in values:
            while values["other_reason"] == values.get("reason"):
                values["other_reason"] = self.value("other_reason")
        return values

    def fill(self, template: str, fixed: Optional[Dict[str, str]] = None) -> Tuple[str, Dict[str, Tuple[int, int]]]:
        values = self.sample(template, fixed)
        parts: List[str] = []
        spans: Dict[str, Tuple[int, int]] = {}
        pos = 0
        length = 0
        for m in _SLOT_RE.finditer(template):
            literal = template[pos:m.start()]
            parts.append(literal)
            length += len(literal)
            value = values[m.group(1)]
            spans.setdefault(m.group(1), (length, length + len(value)))
            parts.append(value)
            length += len(value)
            pos = m.end()
        parts.append(template[pos:])
        text = "".join(parts)
        return text[:1].upper() + text[1:], spans


# PHI values shaped to the packaged rules in phi_rules.tsv.

def _digits(rng: np.random.Generator, n: int) -> str:
    return "".join(str(int(d)) for d in rng.integers(0, 10, size=n))


def _letters(rng: np.random.Generator, n: int) -> str:
    return "".join(string.ascii_uppercase[int(k)] for k in rng.integers(0, 26, size=n))


def _vin(rng: np.random.Generator) -> str:
    letters = [c for c in _VIN_ALPHABET if c.isalpha()]
    body = "".join(_VIN_ALPHABET[int(k)] for k in rng.integers(0, len(_VIN_ALPHABET), size=15))
    return letters[int(rng.integers(len(letters)))] + body + _digits(rng, 1)


def phi_value(category: str, rng: np.random.Generator, template: str = "") -> str:
    """A random value of ``category``; ``template`` picks the VEHICLE form (VIN or plate)."""
    gaz = get_gazetteers()

    def pick(name):
        return gaz[name][int(rng.integers(len(gaz[name])))]

    if category == "NAME":
        return f"{pick('first_names')} {pick('last_names')}"
    if category == "GEO":
        if rng.random() < 0.5:
            return f"{int(rng.integers(1, 9999))} {pick('streets')} {pick('street_suffixes')}"
        return f"{pick('cities')}, FL"
    if category == "DATE":
        month, day, year = int(rng.integers(1, 13)), int(rng.integers(1, 29)), int(rng.integers(1950, 2024))
        if rng.random() < 0.5:
            return f"{month:02d}/{day:02d}/{year}"
        return f"{year}-{month:02d}-{day:02d}"
    if category in ("PHONE", "FAX"):
        return f"352-{_digits(rng, 3)}-{_digits(rng, 4)}"
    if category == "EMAIL":
        return f"{pick('first_names').lower()}{_digits(rng, 2)}@clinic.example.org"
    if category == "SSN":
        return f"{_digits(rng, 3)}-{_digits(rng, 2)}-{_digits(rng, 4)}"
    if category == "MRN":
        return _digits(rng, 8)
    if category in ("HEALTH_PLAN", "LICENSE"):
        return _letters(rng, 2) + _digits(rng, 7)
    if category == "ACCOUNT":
        return _digits(rng, 9)
    if category == "VEHICLE":
        return _vin(rng) if "VIN" in template else f"{_letters(rng, 3)}-{_digits(rng, 4)}"
    if category == "DEVICE":
        return f"PM-{_digits(rng, 5)}-{_letters(rng, 1)}"
    if category == "URL":
        return f"https://portal.example.org/p/{_digits(rng, 5)}"
    if category == "IP":
        return ".".join(str(int(o)) for o in rng.integers(1, 255, size=4))
    if category == "BIOMETRIC":
        return f"FP-{_digits(rng, 4)}-{_letters(rng, 1)}"
    if category == "PHOTO":
        return f"wound_{_digits(rng, 4)}.jpg"
    if category == "OTHER_ID":
        return f"ST-{_digits(rng, 5)}"
    raise ValueError(f"no value generator for PHI category {category!r}")


@dataclass(frozen=True)
class InjectedPhi:
    doc_id: str
    category: str
    start: int
    end: int
    surface: str

    def to_dict(self) -> Dict[str, object]:
        return {"doc_id": self.doc_id, "category": self.category,
                "start": self.start, "end": self.end, "surface": self.surface}


def _phi_sentence(category: str, filler: TemplateFiller) -> Tuple[str, Tuple[int, int]]:
    template = filler.choice(filler.templates["phi_templates"][category])
    value = phi_value(category, filler.rng, template)
    start = template.index("{phi}")
    return template.replace("{phi}", value), (start, start + len(value))


def generate_phi_corpus(
    n_documents: int = DEFAULT_SIZES["phi_documents"],
    phi_per_document: int = 6,
    seed: int = 0,
) -> Tuple[List[RawDocument], List[InjectedPhi]]:
    """
    Notes with PHI sentences between template clinical sentences.
    Categories rotate so every category is injected about equally often.
    """
    filler = TemplateFiller(np.random.default_rng([seed, 11]))
    clinical = filler.templates["clinical_sentences"]
    docs, injected = [], []
    k = 0
    for i in range(n_documents):
        doc_id = f"phi-{i:05d}"
        text = ""
        for _ in range(phi_per_document):
            category = PHI_CATEGORIES[k % len(PHI_CATEGORIES)]
            k += 1
            clinical_sentence, _ = filler.fill(filler.choice(clinical))
            sentence, (lo, hi) = _phi_sentence(category, filler)
            text = f"{text} {clinical_sentence} " if text else f"{clinical_sentence} "
            injected.append(InjectedPhi(doc_id, category, len(text) + lo, len(text) + hi, sentence[lo:hi]))
            text += sentence
        docs.append(RawDocument(doc_id, text, "clinical"))
    logger.info(f"Generated phi corpus documents={len(docs)} spans={len(injected)}")
    return docs, injected


def phi_recall(
    docs: Sequence[RawDocument],
    injected: Sequence[InjectedPhi],
    rules: Optional[RuleSet] = None,
) -> Dict[str, float]:
    """Per category, the fraction of injected spans wholly inside a found span of that category."""
    rules = rules or default_rules()
    found = {doc.id: find_phi(doc.text, rules) for doc in docs}
    hits: Dict[str, List[int]] = {}
    for span in injected:
        covered = any(
            f.category == span.category and f.start <= span.start and span.end <= f.end
            for f in found.get(span.doc_id, [])
        )
        hits.setdefault(span.category, []).append(int(covered))
    return {cat: sum(v) / len(v) for cat, v in sorted(hits.items())}


def generate_pretraining_corpus(
    n_documents: int = DEFAULT_SIZES["pretrain_documents"],
    sentences_per_document: int = 12,
    seed: int = 0,
    phi_every: int = 4,
) -> List[RawDocument]:
    """
    Clinical notes (with occasional PHI) and encyclopedia-style documents,
    three clinical to one encyclopedia.
    """
    filler = TemplateFiller(np.random.default_rng([seed, 12]))
    clinical = filler.templates["clinical_sentences"]
    encyclopedia = filler.templates["encyclopedia_sentences"]
    docs = []
    for i in range(n_documents):
        source = "encyclopedia" if i % 4 == 3 else "clinical"
        pool = encyclopedia if source == "encyclopedia" else clinical
        sentences = []
        for j in range(sentences_per_document):
            if source == "clinical" and phi_every and j % phi_every == phi_every - 1:
                category = PHI_CATEGORIES[int(filler.rng.integers(len(PHI_CATEGORIES)))]
                sentences.append(_phi_sentence(category, filler)[0])
            else:
                sentences.append(filler.fill(filler.choice(pool))[0])
        # paragraphs of four sentences
        paragraphs = [" ".join(sentences[p:p + 4]) for p in range(0, len(sentences), 4)]
        docs.append(RawDocument(f"doc-{i:05d}", "\n\n".join(paragraphs), source))
    return docs


def _tokens_with_labels(template: str, values: Dict[str, str]) -> Tuple[List[str], List[str]]:
    tokens: List[str] = []
    labels: List[str] = []
    pos = 0
    for m in _SLOT_RE.finditer(template):
        literal = tokenize_words(template[pos:m.start()])
        tokens += literal
        labels += ["O"] * len(literal)
        words = tokenize_words(values[m.group(1)])
        cat = m.group(1)
        tokens += words
        if cat in NER_CATEGORIES:
            labels += [f"B-{cat}"] + [f"I-{cat}"] * (len(words) - 1)
        else:
            labels += ["O"] * len(words)
        pos = m.end()
    tail = tokenize_words(template[pos:])
    return tokens + tail, labels + ["O"] * len(tail)


def ner_examples(n: int = DEFAULT_SIZES["ner"], seed: int = 0) -> List[NerExample]:
    filler = TemplateFiller(np.random.default_rng([seed, 13]))
    templates = filler.templates["ner_sentences"]
    out = []
    for i in range(n):
        template = templates[i % len(templates)]
        tokens, labels = _tokens_with_labels(template, filler.sample(template))
        if tokens and tokens[0][:1].islower():
            tokens[0] = tokens[0][:1].upper() + tokens[0][1:]
        out.append(NerExample(tokens, labels))
    return out


def re_examples(n: int = DEFAULT_SIZES["re"], seed: int = 0) -> List[ReExample]:
    """Cycles treats / adverse-effect (same sentence) and no-relation (neighbouring sentences)."""
    filler = TemplateFiller(np.random.default_rng([seed, 14]))
    table = filler.templates["relation_sentences"]
    labels = sorted(table)
    out = []
    for i in range(n):
        label = labels[i % len(labels)]
        if label == NO_RELATION:
            s1, spans1 = filler.fill(table[label]["first"])
            s2, spans2 = filler.fill(table[label]["second"])
            out.append(ReExample(s1, s2, spans1["drug"], spans2["reason"], label))
            continue
        text, spans = filler.fill(filler.choice(table[label]))
        other = "ade" if "ade" in spans else "reason"
        out.append(ReExample(text, text, spans["drug"], spans[other], label))
    return out


def sts_examples(n: int = DEFAULT_SIZES["sts"], seed: int = 0) -> List[StsExample]:
    filler = TemplateFiller(np.random.default_rng([seed, 15]))
    clinical = filler.templates["clinical_sentences"]
    scores = filler.templates["sts"]
    kinds = ("identical", "same_template", "different_template")
    out = []
    for i in range(n):
        kind = kinds[i % len(kinds)]
        k = int(filler.rng.integers(len(clinical)))
        a, _ = filler.fill(clinical[k])
        if kind == "identical":
            b = a
        elif kind == "same_template":
            b, _ = filler.fill(clinical[k])
        else:
            b, _ = filler.fill(clinical[(k + 1 + int(filler.rng.integers(len(clinical) - 1))) % len(clinical)])
        out.append(StsExample(a, b, float(scores[kind])))
    return out


def nli_examples(n: int = DEFAULT_SIZES["nli"], seed: int = 0) -> List[NliExample]:
    filler = TemplateFiller(np.random.default_rng([seed, 16]))
    table = filler.templates["nli"]
    out = []
    for i in range(n):
        label = NLI_LABELS[i % len(NLI_LABELS)]
        pair = table[label]
        values = filler.sample(pair["premise"] + " " + pair["hypothesis"])
        premise, _ = filler.fill(pair["premise"], values)
        hypothesis, _ = filler.fill(pair["hypothesis"], values)
        out.append(NliExample(premise, hypothesis, label))
    return out


def qa_examples(
    n: int = DEFAULT_SIZES["qa"],
    seed: int = 0,
    max_fillers: int = 3,
) -> List[QaExample]:
    """One answer-bearing sentence placed among up to ``max_fillers`` filler sentences."""
    filler = TemplateFiller(np.random.default_rng([seed, 17]))
    table = filler.templates["qa"]
    out = []
    for i in range(n):
        values = filler.sample(table["question"] + " " + table["context_sentence"])
        question, _ = filler.fill(table["question"], values)
        answer_sentence, spans = filler.fill(table["context_sentence"], values)
        before = int(filler.rng.integers(0, max_fillers + 1))
        after = int(filler.rng.integers(0, max_fillers + 1))
        prefix = " ".join([table["filler_sentence"]] * before)
        offset = len(prefix) + 1 if prefix else 0
        context = " ".join(p for p in (prefix, answer_sentence, " ".join([table["filler_sentence"]] * after)) if p)
        lo, hi = spans["reason"]
        answer = QaAnswerSpan(offset + lo, answer_sentence[lo:hi])
        out.append(QaExample(question, context, [answer], f"qa-{i:04d}"))
    return out


TASK_GENERATORS = {
    "ner": ner_examples,
    "re": re_examples,
    "sts": sts_examples,
    "nli": nli_examples,
    "qa": qa_examples,
}


def write_fixtures(out_dir: str, seed: int = 0, sizes: Optional[Mapping[str, int]] = None) -> Dict[str, str]:
    """Write every fixture file under ``out_dir``; returns name -> path."""
    sizes = {**DEFAULT_SIZES, **(sizes or {})}
    os.makedirs(out_dir, exist_ok=True)
    logger.info(f"Starting {TASK_GEN_FIXTURES} out={out_dir} seed={seed}")
    paths = {}
    docs, injected = generate_phi_corpus(sizes["phi_documents"], seed=seed)
    paths["phi_corpus"] = os.path.join(out_dir, "phi_corpus.jsonl")
    write_documents(paths["phi_corpus"], docs)
    paths["phi_spans"] = os.path.join(out_dir, "phi_spans.jsonl")
    write_jsonl(paths["phi_spans"], (s.to_dict() for s in injected))
    paths["pretrain_corpus"] = os.path.join(out_dir, "pretrain_corpus.jsonl")
    write_documents(paths["pretrain_corpus"], generate_pretraining_corpus(sizes["pretrain_documents"], seed=seed))
    for task, generate in TASK_GENERATORS.items():
        paths[task] = os.path.join(out_dir, f"{task}.jsonl")
        write_jsonl(paths[task], example_rows(task, generate(sizes[task], seed=seed)))
    logger.info(f"Finished {TASK_GEN_FIXTURES} files={len(paths)}")
    return paths
