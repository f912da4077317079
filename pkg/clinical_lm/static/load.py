"""
Load model presets, abbreviations, gazetteers, the relation allowlist and
fixture templates from YAML, plus the default PHI rule file. Paths are
resolved relative to this file so it works when the package is installed.
"""
from __future__ import annotations

import os
from typing import Any, Dict, FrozenSet, List, Optional, Tuple

import yaml

_THIS_DIR = os.path.dirname(os.path.abspath(__file__))

_presets: Optional[Dict[str, Dict[str, Any]]] = None
_abbreviations: Optional[FrozenSet[str]] = None
_gazetteers: Optional[Dict[str, List[str]]] = None
_relation_pairs: Optional[Dict[str, Any]] = None
_fixture_templates: Optional[Dict[str, Any]] = None

PHI_RULES_FILENAME = "phi_rules.tsv"


def _path(*parts: str) -> str:
    return os.path.join(_THIS_DIR, *parts)


def _load_yaml(filename: str) -> Any:
    with open(_path(filename), encoding="utf-8") as f:
        return yaml.safe_load(f)


def default_rules_path() -> str:
    return _path(PHI_RULES_FILENAME)


def get_presets() -> Dict[str, Dict[str, Any]]:
    """Preset name -> model fields (plus reference_params). Cached."""
    global _presets
    if _presets is None:
        data = _load_yaml("presets.yaml") or {}
        _presets = {
            str(name): dict(fields or {})
            for name, fields in (data.get("presets") or {}).items()
        }
    return _presets


def load_abbreviations(path: Optional[str] = None) -> FrozenSet[str]:
    """
    Abbreviations that suppress sentence splits. The packaged list is
    cached; a custom path (YAML list or one word per line) is read fresh.
    """
    global _abbreviations
    if path:
        with open(path, encoding="utf-8") as f:
            text = f.read()
        if path.endswith((".yaml", ".yml")):
            data = yaml.safe_load(text) or {}
            words = data.get("abbreviations", []) if isinstance(data, dict) else data
        else:
            words = [line.strip() for line in text.splitlines()]
        return frozenset(str(w).rstrip(".") for w in words if str(w).strip())
    if _abbreviations is None:
        data = _load_yaml("abbreviations.yaml") or {}
        _abbreviations = frozenset(
            str(w).rstrip(".") for w in (data.get("abbreviations") or [])
        )
    return _abbreviations


def get_gazetteers() -> Dict[str, List[str]]:
    """Gazetteer name -> entries, for {{name}} expansion in PHI rules."""
    global _gazetteers
    if _gazetteers is None:
        data = _load_yaml("gazetteers.yaml") or {}
        _gazetteers = {
            str(k): [str(v) for v in (vals or [])] for k, vals in data.items()
        }
    return _gazetteers


def get_relation_allowlist() -> Tuple[FrozenSet[Tuple[str, str]], int]:
    """
    (allowed unordered type pairs, default max sentence gap). Pairs are
    stored in both orders.
    """
    global _relation_pairs
    if _relation_pairs is None:
        _relation_pairs = _load_yaml("relation_pairs.yaml") or {}
    pairs = set()
    for left, right in _relation_pairs.get("allowed_pairs") or []:
        pairs.add((str(left), str(right)))
        pairs.add((str(right), str(left)))
    return frozenset(pairs), int(_relation_pairs.get("max_sentence_gap", 1))


def get_fixture_templates() -> Dict[str, Any]:
    global _fixture_templates
    if _fixture_templates is None:
        _fixture_templates = _load_yaml("fixture_templates.yaml") or {}
    return _fixture_templates
