"""Results store: a directory tree of dated JSON/CSV artifacts plus a lock file."""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Sequence


class StoreLockedError(RuntimeError):
    pass


def _clean(obj: Any) -> Any:
    """JSON-safe copy: NaN/inf become null so reports stay valid JSON."""
    if isinstance(obj, float):
        return obj if obj == obj and obj not in (float("inf"), float("-inf")) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=1) + "\n"


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def write_json(path: Path, obj: Any) -> None:
    write_text(path, dumps(obj))


def read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    write_text(path, buf.getvalue())


class ResultsStore:
    def __init__(self, root: Path | str):
        self.root = Path(root)

    def run_dir(self, day: dt.date) -> Path:
        return self.root / "runs" / day.strftime("%Y%m%d")

    def aggregate_path(self, source: str, day: dt.date) -> Path:
        return self.root / "aggregates" / source / f"{day.strftime('%Y%m%d')}.jsonl.gz"

    @property
    def manifest_path(self) -> Path:
        return self.root / "aggregates" / "manifest.json"

    def read_manifest(self) -> dict[str, Any]:
        if self.manifest_path.exists():
            return read_json(self.manifest_path)
        return {}

    def write_manifest(self, manifest: dict[str, Any]) -> None:
        write_json(self.manifest_path, manifest)

    def find_case(self, case_id: str) -> Path | None:
        runs = self.root / "runs"
        if not runs.is_dir():
            return None
        for d in sorted(runs.iterdir()):
            p = d / "cases" / f"{case_id}.json"
            if p.exists():
                return p
        return None

    def latest_run(self) -> Path | None:
        runs = self.root / "runs"
        if not runs.is_dir():
            return None
        done = [d for d in sorted(runs.iterdir()) if (d / "run.json").exists()]
        return done[-1] if done else None

    @contextmanager
    def lock(self) -> Iterator[None]:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / ".lock"
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise StoreLockedError(f"results store {self.root} is locked by another run ({path})") from exc
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            path.unlink(missing_ok=True)
