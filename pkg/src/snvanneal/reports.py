"""Report codecs: sorted JSON documents and flat CSV tables.

Both formats carry a version stamp and an optional generation timestamp,
and the timestamp always occupies exactly one line so that reruns can be
compared byte-for-byte after dropping it.

JSON reports are ordinary JSON objects::

    {
      "generated_at": "...",      <- the only line that varies between reruns
      "results": ...,
      "snvanneal_version": "0.1.0"
    }

CSV reports start with a ``#`` comment line holding the stamp, followed by
a header row and one row per record (CRLF line endings).  Cells are written so that ints,
floats (shortest round-trip repr), booleans, None and strings read back
with their original types.
"""
from __future__ import annotations

import csv
import io
import json
import math
import re
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, List, Optional, Sequence

from . import __version__
from .exceptions import InvalidInputError, ReportIOError

FORMATS = ("json", "csv")
TIMESTAMP_KEY = "generated_at"
_INT = re.compile(r"^-?\d+$")
_FLOAT = re.compile(r"^-?(\d+\.\d*|\.\d+|\d+)([eE][-+]?\d+)?$|^-?inf$|^nan$")


def utc_now() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat().replace("+00:00", "Z")


def _json_default(obj):
    # numpy scalars and arrays without importing numpy at module level
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(f"{type(obj).__name__} is not JSON serialisable")


def dumps_json(results: Any, timestamp: Optional[str] = None) -> str:
    """Serialise ``results`` as a stamped JSON report (sorted keys, 2-space indent)."""
    doc = {"snvanneal_version": __version__, "results": results}
    if timestamp is not None:
        doc[TIMESTAMP_KEY] = timestamp
    return json.dumps(doc, sort_keys=True, indent=2, default=_json_default, allow_nan=True) + "\n"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if hasattr(v, "item") and not isinstance(v, (list, dict)):
        v = v.item()
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    if isinstance(v, str):
        if v in ("", "true", "false") or v.startswith("#") or _INT.match(v) or _FLOAT.match(v):
            raise InvalidInputError(f"string cell {v!r} would not round-trip through CSV")
        if "\x00" in v:
            raise InvalidInputError("CSV cells cannot hold NUL characters")
        return v
    raise InvalidInputError(f"CSV cells must be scalars, got {type(v).__name__}")


def _parse_cell(s: str):
    if s == "":
        return None
    if s in ("true", "false"):
        return s == "true"
    if _INT.match(s):
        return int(s)
    if _FLOAT.match(s):
        return float(s)
    return s


def _columns(rows: Sequence[dict]) -> List[str]:
    cols: List[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return cols


def dumps_csv(rows: Sequence[dict], timestamp: Optional[str] = None, columns: Optional[Sequence[str]] = None) -> str:
    """Serialise a list of flat records as a stamped CSV table.

    Columns follow ``columns`` or, by default, the order keys first appear
    in ``rows``.  Missing cells are written empty and read back as None.
    """
    if isinstance(rows, dict):
        raise InvalidInputError("CSV reports need a list of flat records")
    cols = list(columns) if columns is not None else _columns(rows)
    stamp = f"# snvanneal_version={__version__}"
    if timestamp is not None:
        stamp += f" {TIMESTAMP_KEY}={timestamp}"
    buf = io.StringIO()
    # RFC 4180 line endings, so bare CR or LF inside a cell gets quoted
    buf.write(stamp + "\r\n")
    w = csv.writer(buf, lineterminator="\r\n")
    if cols:
        w.writerow(cols)
    for r in rows:
        extra = set(r) - set(cols)
        if extra:
            raise InvalidInputError(f"record has keys outside the column list: {sorted(extra)}")
        w.writerow([_cell(r.get(c)) for c in cols])
    return buf.getvalue()


def emit_report(results, path, format: Optional[str] = None, timestamp: Optional[str] = "now",
                columns: Optional[Sequence[str]] = None) -> Path:
    """Write ``results`` to ``path`` as JSON or CSV.

    Parameters
    ----------
    results : dict or list
        JSON-ready structure; CSV requires a list of flat dicts.
    path : path-like
        Destination file.  Parent directories are created.
    format : {"json", "csv"}, optional
        Inferred from the file suffix when omitted.
    timestamp : str or None
        ``"now"`` stamps the current UTC time; None omits the line's timestamp.

    Returns
    -------
    pathlib.Path

    Raises
    ------
    ReportIOError
        The file could not be written.
    """
    path = Path(path)
    fmt = format or (path.suffix.lstrip(".").lower() or "json")
    if fmt not in FORMATS:
        raise InvalidInputError(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    ts = utc_now() if timestamp == "now" else timestamp
    text = dumps_json(results, ts) if fmt == "json" else dumps_csv(results, ts, columns)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise ReportIOError(f"cannot write {path}: {exc.strerror or exc}", path=str(path)) from exc
    return path


def loads_report(text: str, fmt: str):
    if fmt == "json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"malformed JSON report: {exc}") from exc
        if not isinstance(doc, dict) or "results" not in doc:
            raise InvalidInputError("JSON report lacks a 'results' member")
        return doc["results"]
    # data cells never start with "#", so only the stamp line is skipped
    rows = [r for r in csv.reader(io.StringIO(text, newline="")) if r and not r[0].startswith("#")]
    if not rows:
        return []
    header = rows[0]
    return [{k: _parse_cell(v) for k, v in zip(header, row)} for row in rows[1:]]


def read_report(path, format: Optional[str] = None):
    """Inverse of :func:`emit_report`; returns the original ``results``."""
    path = Path(path)
    fmt = format or (path.suffix.lstrip(".").lower() or "json")
    if fmt not in FORMATS:
        raise InvalidInputError(f"unknown report format {fmt!r}")
    try:
        text = path.read_text()
    except OSError as exc:
        raise ReportIOError(f"cannot read {path}: {exc.strerror or exc}", path=str(path)) from exc
    return loads_report(text, fmt)


def strip_timestamp(text: str) -> str:
    """Drop the timestamp line so two reports can be compared byte-for-byte."""
    keep = [ln for ln in text.split("\n")
            if f'"{TIMESTAMP_KEY}"' not in ln and not (ln.startswith("#") and TIMESTAMP_KEY in ln)]
    return "\n".join(keep)
