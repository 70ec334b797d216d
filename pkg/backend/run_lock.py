#!/usr/bin/env python3
"""
run_lock.py — Ownership marker for an experiment output directory.

`run` and `sweep` hold the directory while they write seed caches and the
report files; `report` reads the marker and leaves the files alone while a
live run still owns them. A marker whose process is gone is treated as free.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from datetime import datetime
from pathlib import Path
from typing import Optional

MARKER = ".harness.lock"


def _pid_alive(pid: int) -> bool:
    if pid <= 0:
        return False
    try:
        os.kill(pid, 0)
        return True
    except (OSError, ProcessLookupError):
        return False


@dataclass(frozen=True)
class Holder:
    pid: int
    command: str
    config_hash: str
    started: str

    @property
    def alive(self) -> bool:
        return _pid_alive(self.pid)

    def describe(self) -> str:
        tag = f", config {self.config_hash[:16]}" if self.config_hash else ""
        return f"`{self.command}` (PID {self.pid}, started {self.started}{tag})"


class OutputLock:
    """Context manager owning `out_dir` for one harness command."""

    def __init__(self, out_dir: Path, command: str = "", config_hash: str = ""):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / MARKER
        self.command = command
        self.config_hash = config_hash

    def holder(self) -> Optional[Holder]:
        """Current marker contents, or None when absent or unreadable."""
        if not self.path.exists():
            return None
        try:
            info = json.loads(self.path.read_text())
            return Holder(int(info.get("pid", 0)), str(info.get("command", "?")),
                          str(info.get("config_hash", "")), str(info.get("started", "?")))
        except (json.JSONDecodeError, ValueError, OSError):
            return None

    def live_holder(self) -> Optional[Holder]:
        """The holder if it is another process that is still running."""
        holder = self.holder()
        if holder is None or holder.pid == os.getpid() or not holder.alive:
            return None
        return holder

    def acquire(self) -> "OutputLock":
        holder = self.live_holder()
        if holder is not None:
            raise RuntimeError(f"{self.out_dir} is locked by {holder.describe()}. "
                               f"If this is stale, delete {self.path}")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        record = Holder(os.getpid(), self.command, self.config_hash,
                        datetime.now().isoformat(timespec="seconds"))
        self.path.write_text(json.dumps(asdict(record), indent=2))
        return self

    def release(self) -> None:
        holder = self.holder()
        if holder is not None and holder.pid == os.getpid():
            self.path.unlink(missing_ok=True)

    def __enter__(self) -> "OutputLock":
        return self.acquire()

    def __exit__(self, *exc) -> None:
        self.release()
