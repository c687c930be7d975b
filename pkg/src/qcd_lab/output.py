"""CSV tables with a JSON sidecar.

The sidecar is written first with ``"status": "running"``; the CSV body goes
to ``<path>.partial`` and is renamed into place once complete, after which
the sidecar is rewritten with ``"status": "complete"`` and the wall-clock
time.  A run that raises is marked ``"failed"`` with the error; one that is
killed outright leaves a ``running`` sidecar and/or a ``.partial`` file.
"""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence

from . import __version__


@dataclass
class Table:
    columns: Sequence[str]
    rows: List[Dict[str, Any]] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)

    def add(self, **row):
        missing = set(self.columns) - set(row)
        if missing:
            raise KeyError(f"row is missing columns {sorted(missing)}")
        self.rows.append(row)

    def column(self, name):
        return [r[name] for r in self.rows]

    def where(self, **match):
        return [r for r in self.rows if all(r[k] == v for k, v in match.items())]


def format_value(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(float(v))
    if hasattr(v, "item"):
        return format_value(v.item())
    return str(v)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _json_default(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    return str(o)


def _write_json(path: Path, payload) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    os.replace(tmp, path)


@contextmanager
def result_files(path, config: Dict[str, Any], seed: int):
    """Context manager yielding a writer ``fn(table)`` for one result file."""
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    side = sidecar_path(path)
    meta = {
        "config": config,
        "seed": seed,
        "code_version": __version__,
        "python": platform.python_version(),
        "status": "running",
        "csv": path.name,
    }
    _write_json(side, meta)
    start = time.perf_counter()
    written = {}

    def write(table: Table):
        partial = path.with_name(path.name + ".partial")
        with open(partial, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(list(table.columns))
            for row in table.rows:
                wr.writerow([format_value(row[c]) for c in table.columns])
        os.replace(partial, path)
        written["table"] = table

    try:
        yield write
    except Exception as e:
        meta["status"] = "failed"
        meta["error"] = f"{type(e).__name__}: {e}"
        meta["wall_clock_seconds"] = time.perf_counter() - start
        _write_json(side, meta)
        raise
    meta["status"] = "complete" if written else "no-output"
    meta["wall_clock_seconds"] = time.perf_counter() - start
    if written and written["table"].meta:
        meta["results"] = written["table"].meta
    _write_json(side, meta)


def write_table(table: Table, path, config: Dict[str, Any], seed: int) -> None:
    with result_files(path, config, seed) as write:
        write(table)


def read_csv(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
