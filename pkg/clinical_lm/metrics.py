"""
Evaluation measures for the fine-tuning tasks: strict span P/R/F1 (NER),
label P/R/F1 over positive relations (RE), Pearson correlation (STS),
accuracy (NLI) and exact match / token F1 (QA).
"""
import collections
import logging
import re
import string
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Hashable, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from clinical_lm.constants import NO_RELATION
from clinical_lm.errors import ShapeError, UndefinedMetricError
from clinical_lm.utils import atomic_write_json

logger = logging.getLogger(__name__)

SpanKey = Tuple[Hashable, ...]
_ARTICLES = re.compile(r"\b(a|an|the)\b", re.UNICODE)
_PUNCTUATION = frozenset(string.punctuation)


@dataclass
class PrfResult:
    precision: float
    recall: float
    f1: float
    tp: int = 0
    n_gold: int = 0
    n_pred: int = 0
    per_category: Dict[str, "PrfResult"] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["per_category"] = {k: v.to_dict() for k, v in self.per_category.items()}
        return out


def prf(tp: int, n_gold: int, n_pred: int) -> PrfResult:
    """
    Counts to P/R/F1. Nothing gold and nothing predicted scores 1; an empty
    side otherwise scores 0.
    """
    if n_gold == 0 and n_pred == 0:
        return PrfResult(1.0, 1.0, 1.0, tp, n_gold, n_pred)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return PrfResult(precision, recall, f1, tp, n_gold, n_pred)


def span_prf(gold: Iterable[SpanKey], pred: Iterable[SpanKey]) -> PrfResult:
    """
    Strict match on span tuples whose last element is the category, e.g.
    (start, end, category) or (sentence, start, end, category). Micro overall
    plus per category.
    """
    gold_set, pred_set = set(map(tuple, gold)), set(map(tuple, pred))
    result = prf(len(gold_set & pred_set), len(gold_set), len(pred_set))
    for cat in sorted({str(s[-1]) for s in gold_set | pred_set}):
        g = {s for s in gold_set if str(s[-1]) == cat}
        p = {s for s in pred_set if str(s[-1]) == cat}
        result.per_category[cat] = prf(len(g & p), len(g), len(p))
    return result


def label_prf(gold: Sequence[Hashable], pred: Sequence[Hashable], negative: Hashable = NO_RELATION) -> PrfResult:
    """Micro P/R/F1 over examples whose gold or predicted label is not ``negative``."""
    _check_lengths(gold, pred)
    keyed_gold = {(i, g) for i, g in enumerate(gold) if g != negative}
    keyed_pred = {(i, p) for i, p in enumerate(pred) if p != negative}
    result = prf(len(keyed_gold & keyed_pred), len(keyed_gold), len(keyed_pred))
    for label in sorted({str(k[1]) for k in keyed_gold | keyed_pred}):
        g = {k for k in keyed_gold if str(k[1]) == label}
        p = {k for k in keyed_pred if str(k[1]) == label}
        result.per_category[label] = prf(len(g & p), len(g), len(p))
    return result


def _check_lengths(gold: Sequence[Any], pred: Sequence[Any]) -> None:
    if len(gold) != len(pred):
        raise ShapeError("gold and predicted lengths differ", (len(gold),), (len(pred),))


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    _check_lengths(x, y)
    if len(x) < 2:
        raise UndefinedMetricError(f"pearson needs at least 2 pairs, got {len(x)}")
    xs, ys = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        raise UndefinedMetricError("pearson is undefined when one side has zero variance")
    return float(stats.pearsonr(xs, ys)[0])


def accuracy(gold: Sequence[Hashable], pred: Sequence[Hashable]) -> float:
    _check_lengths(gold, pred)
    if not gold:
        raise UndefinedMetricError("accuracy over zero examples")
    return sum(g == p for g, p in zip(gold, pred)) / len(gold)


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    text = "".join(ch for ch in text.lower() if ch not in _PUNCTUATION)
    return " ".join(_ARTICLES.sub(" ", text).split())


def _token_f1(gold: str, pred: str) -> float:
    gold_toks, pred_toks = gold.split(), pred.split()
    if not gold_toks or not pred_toks:
        return float(gold_toks == pred_toks)
    same = sum((collections.Counter(gold_toks) & collections.Counter(pred_toks)).values())
    if same == 0:
        return 0.0
    precision, recall = same / len(pred_toks), same / len(gold_toks)
    return 2 * precision * recall / (precision + recall)


def qa_em_f1(gold_answers: Sequence[str], predicted: str) -> Tuple[int, float]:
    golds = [normalize_answer(g) for g in gold_answers]
    pred = normalize_answer(predicted)
    em = int(any(pred == g for g in golds))
    f1 = max((_token_f1(g, pred) for g in golds), default=0.0)
    return em, f1


def qa_scores(gold: Sequence[Sequence[str]], pred: Sequence[str]) -> Dict[str, float]:
    """Mean EM and F1 over questions."""
    _check_lengths(gold, pred)
    if not gold:
        raise UndefinedMetricError("qa scores over zero questions")
    pairs = [qa_em_f1(g, p) for g, p in zip(gold, pred)]
    return {
        "exact_match": sum(em for em, _ in pairs) / len(pairs),
        "f1": sum(f1 for _, f1 in pairs) / len(pairs),
    }


def write_metrics(
    path: str,
    task: str,
    values: Dict[str, float],
    per_category: Optional[Dict[str, Any]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    report: Dict[str, Any] = {"task": task, "metrics": dict(values)}
    report["per_category"] = per_category or {}
    if extra:
        report.update(extra)
    atomic_write_json(path, report)
    logger.info(f"Wrote metrics task={task} path={path} " + " ".join(f"{k}={v:.4f}" for k, v in values.items()))
    return report


def summarize(result: PrfResult) -> Tuple[Dict[str, float], Dict[str, Any]]:
    """(headline P/R/F1, per-category table) for ``write_metrics``."""
    values = {"precision": result.precision, "recall": result.recall, "f1": result.f1}
    table = {
        cat: {"precision": r.precision, "recall": r.recall, "f1": r.f1, "support": r.n_gold}
        for cat, r in result.per_category.items()
    }
    return values, table
