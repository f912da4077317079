"""
Shared helpers: value coercion, stable hashing, atomic writes and JSONL IO.

The boolean coercion is used by conf and the config dataclasses; atomic writes
by every artifact writer so an aborted run never leaves partial files.
"""
import contextlib
import hashlib
import json
import logging
import os
import tempfile
from typing import Any, Dict, Iterable, Iterator, Optional, Tuple

from json_repair import repair_json

logger = logging.getLogger(__name__)

_TRUE_STRINGS = frozenset({"1", "true", "yes", "on"})
_FALSE_STRINGS = frozenset({"0", "false", "no", "off"})


def _safe_bool(value: Any, default: bool = False) -> bool:
    """Coerce common truthy/falsy spellings; default when unrecognized."""
    if isinstance(value, bool):
        return value
    if value is None:
        return default
    text = str(value).strip().lower()
    if text in _TRUE_STRINGS:
        return True
    if text in _FALSE_STRINGS:
        return False
    return default


def stable_fraction(key: str) -> float:
    """
    Map a string to [0, 1) by SHA-1, independent of process and corpus order.
    Used for validation splits and corpus subsampling.
    """
    digest = hashlib.sha1(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / float(1 << 64)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str, chunk_size: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            chunk = f.read(chunk_size)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()


@contextlib.contextmanager
def atomic_open(path: str, mode: str = "w", encoding: Optional[str] = "utf-8"):
    """
    Open a temp file beside ``path`` and rename it into place on success.
    On any exception the temp file is removed and ``path`` is untouched.
    """
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(
        prefix=f".{os.path.basename(path)}.", suffix=".tmp", dir=directory
    )
    kwargs = {} if "b" in mode else {"encoding": encoding, "newline": ""}
    try:
        with os.fdopen(fd, mode, **kwargs) as f:
            yield f
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    with atomic_open(path, "w") as f:
        f.write(text)


def atomic_write_json(path: str, obj: Any) -> None:
    atomic_write_text(
        path, json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False)
        + "\n"
    )


def _parse_json_line(line: str) -> Tuple[Optional[Dict[str, Any]], bool]:
    """
    Parse one JSONL line as an object. Falls back to json_repair for
    truncated or sloppy lines. Returns (obj or None, repaired).
    """
    try:
        obj = json.loads(line)
        if isinstance(obj, dict):
            return obj, False
        return None, False
    except json.JSONDecodeError:
        pass
    try:
        repaired = repair_json(line)
        obj = json.loads(repaired)
    except Exception as e:
        logger.debug(f"JSONL line could not be repaired: {e}")
        return None, False
    if not isinstance(obj, dict) or not obj:
        return None, False
    return obj, True


def read_jsonl(path: str, lenient: bool = True) -> Iterator[Dict[str, Any]]:
    """
    Yield one dict per non-blank line. With lenient=True malformed lines are
    repaired when possible and skipped otherwise (with a warning summary);
    with lenient=False the first malformed line raises ValueError.
    """
    repaired_count = 0
    skipped_count = 0
    with open(path, encoding="utf-8", errors="replace") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            if not lenient:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ValueError(
                        f"{path}:{lineno}: invalid JSON: {e.msg}"
                    ) from e
                if not isinstance(obj, dict):
                    raise ValueError(f"{path}:{lineno}: expected object")
                yield obj
                continue
            obj, repaired = _parse_json_line(line)
            if obj is None:
                skipped_count += 1
                continue
            repaired_count += int(repaired)
            yield obj
    if repaired_count or skipped_count:
        logger.warning(
            f"read_jsonl path={path} repaired={repaired_count} "
            f"skipped={skipped_count}"
        )


def write_jsonl(path: str, rows: Iterable[Dict[str, Any]]) -> int:
    """Write rows atomically as JSONL; return the number of rows."""
    n = 0
    with atomic_open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True))
            f.write("\n")
            n += 1
    return n
