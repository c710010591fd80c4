"""Primary outputs and per-run logs.

Primary outputs (tables, traces, transcripts) depend only on the run's
provenance, so rerunning with the same seed reproduces them byte for byte.
Run ids, timestamps and wall times go to ``logs/<run_id>/`` instead.
"""

from __future__ import annotations

import csv
import datetime
import json
import uuid
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence

from . import __version__, tuning


def _provenance_line(command: str, provenance: Dict[str, Any]) -> str:
    config = json.dumps(provenance, sort_keys=True, separators=(",", ":"))
    return f"# obpuf {__version__} command={command} seed={provenance.get('seed')} config={config}"


def write_table(
    rows: Sequence[Dict[str, Any]],
    stem: Path,
    fmt: str,
    command: str,
    provenance: Dict[str, Any],
    columns: Optional[Sequence[str]] = None,
) -> Path:
    """Write ``rows`` to ``<stem>.csv`` (provenance comment + header) or ``<stem>.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    if fmt == "json":
        path = stem.with_suffix(".json")
        payload = {
            "obpuf": __version__,
            "command": command,
            "provenance": provenance,
            "rows": [{c: row.get(c) for c in columns} for row in rows],
        }
        with path.open("w", encoding="utf-8", newline="\n") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        return path
    if fmt != "csv":
        raise ValueError(f"unknown output format {fmt!r}")
    path = stem.with_suffix(".csv")
    with path.open("w", encoding="utf-8", newline="") as f:
        f.write(_provenance_line(command, provenance) + "\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row.get(c, "") for c in columns])
    return path


def read_table(path: Path) -> List[Dict[str, str]]:
    """Rows of a CSV written by :func:`write_table` (provenance line skipped)."""
    with Path(path).open("r", encoding="utf-8", newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))


def write_jsonl(lines: Iterable[str], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")
    return path


class RunLog:
    """``run_log.txt`` and ``run_report.json`` under ``<out>/logs/<run_id>/``.

    Messages are echoed to the console when requested and forwarded to an
    optional callback whose exceptions are swallowed.
    """

    def __init__(
        self,
        out_dir: Path,
        command: str,
        log_to_console: bool = False,
        log_callback: Optional[Callable[[str], None]] = None,
    ) -> None:
        self.command = command
        self.run_id = datetime.datetime.now().strftime("%Y%m%d_%H%M%S_") + uuid.uuid4().hex[:8]
        self.log_dir = Path(out_dir) / "logs" / self.run_id
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.run_log_path = self.log_dir / "run_log.txt"
        self.report_path = self.log_dir / "run_report.json"
        self.log_to_console = log_to_console
        self.log_callback = log_callback
        self.started = datetime.datetime.now()
        self.report: Dict[str, Any] = {
            "run_id": self.run_id,
            "command": command,
            "version": __version__,
            "timestamp": self.started.isoformat(),
            "outputs": [],
            "warnings": [],
        }
        self._handle = open(self.run_log_path, "w", encoding="utf-8", buffering=1)
        self.log(f"obpuf run_id={self.run_id} command={command}")

    def log(self, msg: str) -> None:
        if self.log_to_console:
            print(msg)
        if self.log_callback is not None:
            try:
                self.log_callback(msg)
            except Exception:
                pass
        if self._handle is not None:
            self._handle.write(msg + "\n")
            self._handle.flush()

    def warn(self, msg: str) -> None:
        if msg in self.report["warnings"]:
            return
        self.report["warnings"].append(msg)
        print(f"Warning: {msg}")
        if self._handle is not None:
            self._handle.write(f"Warning: {msg}\n")

    def progress(self, event: Dict[str, Any]) -> None:
        if self.log_to_console:
            detail = " ".join(f"{k}={v}" for k, v in event.items() if k not in ("phase", "event"))
            self.log(f"[{event.get('phase')}] {event.get('event')} {detail}".rstrip())

    def output(self, path: Path) -> None:
        self.report["outputs"].append(str(path))
        self.log(f"Wrote {path}")

    def close(self, **summary: Any) -> Dict[str, Any]:
        self.report.update(summary)
        self.report["wall_time_s"] = round((datetime.datetime.now() - self.started).total_seconds(), 3)
        self.report["tuning"] = tuning.snapshot()
        self.report_path.write_text(json.dumps(self.report, indent=2, default=str), encoding="utf-8")
        if self._handle is not None:
            self._handle.close()
            self._handle = None
        return self.report

    def __enter__(self) -> "RunLog":
        return self

    def __exit__(self, exc_type: Any, exc: Any, tb: Any) -> None:
        if exc is not None:
            self.report["error"] = f"{type(exc).__name__}: {exc}"
        if self._handle is not None:
            self.close()
