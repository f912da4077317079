"""
Per-task JSONL datasets.

    ner  {"tokens": [...], "labels": [...]}
    re   {"s1", "s2", "c1": [start, end], "c2": [start, end], "label"}
    sts  {"a", "b", "score"}
    nli  {"premise", "hypothesis", "label"}
    qa   {"question", "context", "answers": [{"start", "text"}]}

Rows missing a task's fields raise SchemaError naming the task, the row
and the missing fields.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Sequence, Tuple

from clinical_lm.constants import NLI_LABELS, STS_MAX_SCORE, STS_MIN_SCORE
from clinical_lm.errors import SchemaError
from clinical_lm.utils import read_jsonl

logger = logging.getLogger(__name__)

REQUIRED_FIELDS: Dict[str, Tuple[str, ...]] = {
    "ner": ("tokens", "labels"),
    "re": ("s1", "s2", "c1", "c2", "label"),
    "sts": ("a", "b", "score"),
    "nli": ("premise", "hypothesis", "label"),
    "qa": ("question", "context", "answers"),
}


@dataclass
class NerExample:
    tokens: List[str]
    labels: List[str]


@dataclass
class ReExample:
    s1: str
    s2: str
    c1: Tuple[int, int]
    c2: Tuple[int, int]
    label: str


@dataclass
class StsExample:
    a: str
    b: str
    score: float


@dataclass
class NliExample:
    premise: str
    hypothesis: str
    label: str


@dataclass
class QaAnswerSpan:
    start: int
    text: str

    @property
    def end(self) -> int:
        return self.start + len(self.text)


@dataclass
class QaExample:
    question: str
    context: str
    answers: List[QaAnswerSpan] = field(default_factory=list)
    id: str = ""


def _span(value: Any, name: str, where: str) -> Tuple[int, int]:
    try:
        start, end = (int(v) for v in value)
    except (TypeError, ValueError):
        raise SchemaError(f"{where}{name} must be [start, end], got {value!r}")
    if not 0 <= start < end:
        raise SchemaError(f"{where}{name} is empty or negative: {value!r}")
    return start, end


def _ner(row, where) -> NerExample:
    tokens = [str(t) for t in row["tokens"]]
    labels = [str(t) for t in row["labels"]]
    if len(tokens) != len(labels):
        raise SchemaError(f"{where}{len(tokens)} tokens but {len(labels)} labels")
    for label in labels:
        if label != "O" and not label.startswith(("B-", "I-")):
            raise SchemaError(f"{where}label {label!r} is not BIO")
    return NerExample(tokens, labels)


def _re(row, where) -> ReExample:
    ex = ReExample(
        str(row["s1"]), str(row["s2"]),
        _span(row["c1"], "c1", where), _span(row["c2"], "c2", where),
        str(row["label"]),
    )
    if ex.c1[1] > len(ex.s1) or ex.c2[1] > len(ex.s2):
        raise SchemaError(f"{where}concept offsets run past the sentence")
    return ex


def _sts(row, where) -> StsExample:
    try:
        score = float(row["score"])
    except (TypeError, ValueError):
        raise SchemaError(f"{where}score must be a number, got {row['score']!r}")
    if not STS_MIN_SCORE <= score <= STS_MAX_SCORE:
        raise SchemaError(f"{where}score {score} outside [{STS_MIN_SCORE}, {STS_MAX_SCORE}]")
    return StsExample(str(row["a"]), str(row["b"]), score)


def _nli(row, where) -> NliExample:
    label = str(row["label"])
    if label not in NLI_LABELS:
        raise SchemaError(f"{where}label {label!r} not in {NLI_LABELS}")
    return NliExample(str(row["premise"]), str(row["hypothesis"]), label)


def _qa(row, where) -> QaExample:
    context = str(row["context"])
    answers = []
    for answer in row["answers"] or []:
        if not isinstance(answer, dict) or "start" not in answer or "text" not in answer:
            raise SchemaError(f"{where}answers need 'start' and 'text'")
        span = QaAnswerSpan(int(answer["start"]), str(answer["text"]))
        if context[span.start:span.end] != span.text:
            raise SchemaError(f"{where}answer {span.text!r} does not match the context at {span.start}")
        answers.append(span)
    return QaExample(str(row["question"]), context, answers, str(row.get("id") or ""))


_PARSERS: Dict[str, Callable[[Dict[str, Any], str], Any]] = {
    "ner": _ner, "re": _re, "sts": _sts, "nli": _nli, "qa": _qa,
}


def example_from_row(task: str, row: Dict[str, Any], where: str = "") -> Any:
    if task not in REQUIRED_FIELDS:
        raise SchemaError(f"unknown task {task!r}; expected one of {sorted(REQUIRED_FIELDS)}")
    missing = [f for f in REQUIRED_FIELDS[task] if f not in row]
    if missing:
        raise SchemaError(f"{where}{task} row is missing {missing}; has {sorted(row)}")
    return _PARSERS[task](row, where)


def read_task_examples(task: str, path: str) -> List[Any]:
    try:
        examples = [
            example_from_row(task, row, where=f"{path}:{n}: ")
            for n, row in enumerate(read_jsonl(path, lenient=False), start=1)
        ]
    except SchemaError:
        raise
    except ValueError as e:
        raise SchemaError(str(e)) from e
    logger.info(f"Read task dataset task={task} path={path} examples={len(examples)}")
    return examples


def example_rows(task: str, examples: Sequence[Any]) -> List[Dict[str, Any]]:
    """Inverse of ``read_task_examples`` for writing fixtures."""
    rows = []
    for ex in examples:
        if task == "qa":
            rows.append({
                "id": ex.id, "question": ex.question, "context": ex.context,
                "answers": [{"start": a.start, "text": a.text} for a in ex.answers],
            })
        elif task == "re":
            rows.append({"s1": ex.s1, "s2": ex.s2, "c1": list(ex.c1), "c2": list(ex.c2), "label": ex.label})
        else:
            rows.append(dict(vars(ex)))
    return rows
