"""
Safe-harbor de-identification with a regex + gazetteer rule engine.

Rules come from a tab-separated file (CATEGORY, pattern). Each match
becomes a candidate span; candidates are resolved longest first, then
leftmost, then by rule order, and replaced by ``[**CATEGORY**]``. Existing
dummy tokens are never matched again, so the output is a fixed point.
"""
import logging
import re
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from clinical_lm.errors import ConfigError
from clinical_lm.static.load import default_rules_path, get_gazetteers

logger = logging.getLogger(__name__)

PHI_CATEGORIES = (
    "NAME",
    "GEO",
    "DATE",
    "PHONE",
    "FAX",
    "EMAIL",
    "SSN",
    "MRN",
    "HEALTH_PLAN",
    "ACCOUNT",
    "LICENSE",
    "VEHICLE",
    "DEVICE",
    "URL",
    "IP",
    "BIOMETRIC",
    "PHOTO",
    "OTHER_ID",
)

DUMMY_RE = re.compile(r"\[\*\*[A-Z_]+\*\*\]")
_PLACEHOLDER_RE = re.compile(r"\{\{(\w+)\}\}")
PHI_GROUP = "phi"


def dummy_token(category: str) -> str:
    return f"[**{category}**]"


@dataclass(frozen=True)
class PhiSpan:
    category: str
    start: int
    end: int
    surface: str

    def to_dict(self) -> Dict[str, object]:
        return {
            "category": self.category,
            "start": self.start,
            "end": self.end,
            "surface": self.surface,
        }


@dataclass(frozen=True)
class Rule:
    category: str
    pattern: "re.Pattern"
    index: int
    source: str = ""


class RuleSet:
    """Ordered, compiled PHI rules."""

    def __init__(self, rules: Sequence[Rule]):
        self.rules = list(rules)

    def __len__(self) -> int:
        return len(self.rules)

    @property
    def categories(self) -> List[str]:
        return sorted({r.category for r in self.rules})

    @classmethod
    def from_text(
        cls,
        text: str,
        gazetteers: Optional[Mapping[str, Sequence[str]]] = None,
        source: str = "<rules>",
    ) -> "RuleSet":
        if gazetteers is None:
            gazetteers = get_gazetteers()
        rules: List[Rule] = []
        for lineno, raw in enumerate(text.split("\n"), start=1):
            line = raw.rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "\t" not in line:
                raise ConfigError(
                    f"{source}:{lineno}: expected CATEGORY<TAB>pattern"
                )
            category, pattern = line.split("\t", 1)
            category = category.strip()
            if category not in PHI_CATEGORIES:
                raise ConfigError(
                    f"{source}:{lineno}: unknown PHI category {category!r}"
                )
            expanded = _expand_gazetteers(pattern, gazetteers, source, lineno)
            try:
                compiled = re.compile(expanded)
            except re.error as e:
                raise ConfigError(
                    f"{source}:{lineno}: bad pattern for {category}: {e}"
                ) from e
            rules.append(
                Rule(category, compiled, len(rules), f"{source}:{lineno}")
            )
        return cls(rules)

    @classmethod
    def from_file(cls, path: Optional[str] = None) -> "RuleSet":
        path = path or default_rules_path()
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read(), source=path)


def _expand_gazetteers(
    pattern: str,
    gazetteers: Mapping[str, Sequence[str]],
    source: str,
    lineno: int,
) -> str:
    def _sub(m):
        name = m.group(1)
        words = gazetteers.get(name)
        if not words:
            raise ConfigError(f"{source}:{lineno}: unknown gazetteer {name!r}")
        ordered = sorted(set(words), key=lambda w: (-len(w), w))
        return "(?:" + "|".join(re.escape(w) for w in ordered) + ")"

    return _PLACEHOLDER_RE.sub(_sub, pattern)


_default_rules: Optional[RuleSet] = None


def default_rules() -> RuleSet:
    global _default_rules
    if _default_rules is None:
        _default_rules = RuleSet.from_file()
    return _default_rules


@dataclass
class DeidReport:
    documents: int = 0
    counts: Dict[str, int] = field(
        default_factory=lambda: {c: 0 for c in PHI_CATEGORIES}
    )

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def add(self, spans: Sequence[PhiSpan]) -> None:
        self.documents += 1
        for span in spans:
            self.counts[span.category] = self.counts.get(span.category, 0) + 1

    def merge(self, other: "DeidReport") -> None:
        self.documents += other.documents
        for k, v in other.counts.items():
            self.counts[k] = self.counts.get(k, 0) + v

    def to_dict(self) -> Dict[str, object]:
        return {
            "documents": self.documents,
            "counts": dict(self.counts),
            "total": self.total,
        }


def _overlaps(start: int, end: int, taken: List[Tuple[int, int]]) -> bool:
    return any(start < e and s < end for s, e in taken)


def find_phi(text: str, rules: RuleSet) -> List[PhiSpan]:
    """Resolved, non-overlapping PHI spans of ``text`` in reading order."""
    blocked = [m.span() for m in DUMMY_RE.finditer(text)]
    candidates = []
    for rule in rules.rules:
        has_group = PHI_GROUP in rule.pattern.groupindex
        for m in rule.pattern.finditer(text):
            if has_group and m.group(PHI_GROUP) is not None:
                start, end = m.span(PHI_GROUP)
            else:
                start, end = m.span()
            if start >= end or _overlaps(start, end, blocked):
                continue
            candidates.append((-(end - start), start, rule.index, end, rule.category))
    candidates.sort()
    accepted: List[Tuple[int, int, str]] = []
    for _neg_len, start, _idx, end, category in candidates:
        if _overlaps(start, end, [(s, e) for s, e, _ in accepted]):
            continue
        accepted.append((start, end, category))
    accepted.sort()
    return [PhiSpan(c, s, e, text[s:e]) for s, e, c in accepted]


def deidentify(text: str, rules: Optional[RuleSet] = None) -> Tuple[str, List[PhiSpan]]:
    """
    Replace every resolved PHI span with its dummy token. Span offsets
    refer to the input text.
    """
    rules = rules or default_rules()
    spans = find_phi(text, rules)
    if not spans:
        return text, []
    parts = []
    pos = 0
    for span in spans:
        parts.append(text[pos:span.start])
        parts.append(dummy_token(span.category))
        pos = span.end
    parts.append(text[pos:])
    return "".join(parts), spans
