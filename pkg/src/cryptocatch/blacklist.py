"""Dynamic blacklist of confirmed mining-pool endpoints.

State lives in an append-only NDJSON journal: every line is the full entry
after an update, so replay is a last-write-wins fold keyed on
``(host, port)``. A torn final line (crash mid-write) is ignored on load.
"""
from __future__ import annotations

import datetime as dt
import json
import logging
import os
import re
import threading
from dataclasses import asdict, dataclass, replace
from typing import Iterable

from cryptocatch.probe import Outcome, ProbeVerdict

log = logging.getLogger(__name__)

SOURCES = ("probe_confirmed", "manual")
MODES = ("realtime", "batch")


class BlacklistIOError(OSError):
    """Persisting to the journal failed; affected entries stay staged."""


def utc(ts=None) -> dt.datetime:
    if ts is None:
        return dt.datetime.now(dt.timezone.utc)
    if isinstance(ts, (int, float)):
        return dt.datetime.fromtimestamp(ts, dt.timezone.utc)
    if isinstance(ts, str):
        ts = dt.datetime.fromisoformat(ts.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=dt.timezone.utc)
    return ts.astimezone(dt.timezone.utc)


def iso(ts: dt.datetime) -> str:
    return utc(ts).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


_DURATION = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([smhdw])\s*$")
_UNITS = {"s": 1, "m": 60, "h": 3600, "d": 86400, "w": 604800}


def parse_duration(text: str) -> dt.timedelta:
    """``30d``, ``12h``, ``90m``, ``45s`` or ``2w``."""
    m = _DURATION.match(text)
    if not m:
        raise ValueError(f"bad duration {text!r}")
    return dt.timedelta(seconds=float(m.group(1)) * _UNITS[m.group(2)])


def format_endpoint(host: str, port: int) -> str:
    return f"[{host}]:{port}" if ":" in host else f"{host}:{port}"


@dataclass(frozen=True)
class BlacklistEntry:
    host: str
    port: int
    variant: str | None
    first_seen: str
    last_confirmed: str
    source: str = "probe_confirmed"
    confirm_count: int = 1

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.confirm_count < 1:
            raise ValueError("confirm_count must be >= 1")
        if utc(self.last_confirmed) < utc(self.first_seen):
            raise ValueError("last_confirmed precedes first_seen")

    @property
    def key(self) -> tuple[str, int]:
        return self.host, self.port

    @property
    def endpoint(self) -> str:
        return format_endpoint(self.host, self.port)

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "BlacklistEntry":
        d = json.loads(line)
        return cls(d["host"], int(d["port"]), d.get("variant"), d["first_seen"], d["last_confirmed"],
                   d.get("source", "probe_confirmed"), int(d.get("confirm_count", 1)))


def replay(lines: Iterable[str]) -> dict[tuple[str, int], BlacklistEntry]:
    """Fold journal lines into the live view; stops at a torn trailing line."""
    view: dict[tuple[str, int], BlacklistEntry] = {}
    for raw in lines:
        if not raw.endswith("\n"):
            break  # incomplete write
        line = raw.strip()
        if not line:
            continue
        try:
            entry = BlacklistEntry.from_json(line)
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("skipping corrupt journal line: %s", exc)
            continue
        view[entry.key] = entry
    return view


class BlacklistStore:
    """Single-writer blacklist with realtime or batch persistence.

    Realtime mode appends each upsert to the journal immediately. Batch mode
    stages upserts in memory until :meth:`flush`. Queries see staged entries
    in both modes.
    """

    def __init__(self, journal, mode: str = "realtime", flush_interval: dt.timedelta = dt.timedelta(hours=24)):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if flush_interval <= dt.timedelta(0):
            raise ValueError("flush interval must be positive")
        self.journal = os.fspath(journal)
        self.mode = mode
        self.flush_interval = flush_interval
        self.last_flush: dt.datetime | None = None
        self._lock = threading.RLock()
        self._durable: dict[tuple[str, int], BlacklistEntry] = {}
        self._staged: dict[tuple[str, int], BlacklistEntry] = {}
        self.reload()

    # -- persistence -----------------------------------------------------

    def reload(self) -> None:
        with self._lock:
            self._staged.clear()
            if os.path.exists(self.journal):
                with open(self.journal, encoding="utf-8", newline="") as fh:
                    self._durable = replay(fh)
            else:
                self._durable = {}

    def _append(self, entries: list[BlacklistEntry]) -> None:
        if not entries:
            return
        payload = "".join(e.to_json() + "\n" for e in entries)
        try:
            with open(self.journal, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise BlacklistIOError(f"cannot append to {self.journal}: {exc}") from exc
        for e in entries:
            self._durable[e.key] = e

    def compact(self) -> int:
        """Rewrite the journal as one line per live entry; returns the line count."""
        with self._lock:
            entries = [self._durable[k] for k in sorted(self._durable)]
            folder = os.path.dirname(os.path.abspath(self.journal))
            tmp = self.journal + ".compact.tmp"
            try:
                with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
                    for e in entries:
                        fh.write(e.to_json() + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, self.journal)
                if hasattr(os, "O_DIRECTORY"):
                    dfd = os.open(folder, os.O_DIRECTORY)
                    try:
                        os.fsync(dfd)
                    finally:
                        os.close(dfd)
            except OSError as exc:
                raise BlacklistIOError(f"compaction failed: {exc}") from exc
            return len(entries)

    # -- mutations -------------------------------------------------------

    def _upsert(self, host, port, variant, now, source) -> BlacklistEntry:
        key = (host, int(port))
        t = iso(utc(now))
        prev = self._staged.get(key) or self._durable.get(key)
        if prev is None:
            return BlacklistEntry(host, int(port), variant, t, t, source, 1)
        if utc(t) < utc(prev.last_confirmed):
            t = prev.last_confirmed  # clocks never move an entry backwards
        return replace(prev, last_confirmed=t, confirm_count=prev.confirm_count + 1,
                       variant=variant or prev.variant)

    def _commit(self, entry: BlacklistEntry) -> BlacklistEntry:
        self._staged[entry.key] = entry
        if self.mode == "realtime":
            # also retries entries left over from an earlier failed write
            pending = list(self._staged.values())
            self._append(pending)
            self._staged.clear()
        return entry

    def confirm(self, verdict: ProbeVerdict, now=None) -> BlacklistEntry | None:
        """Upsert a PoolPositive verdict; any other outcome is a no-op."""
        if verdict.outcome is not Outcome.POSITIVE:
            return None
        variant = verdict.variant.value if verdict.variant else None
        with self._lock:
            return self._commit(self._upsert(verdict.target.host, verdict.target.port, variant, now, "probe_confirmed"))

    def add_manual(self, host: str, port: int, variant: str | None = None, now=None) -> BlacklistEntry:
        with self._lock:
            return self._commit(self._upsert(host, port, variant, now, "manual"))

    def flush(self, now=None) -> int:
        """Persist staged entries (batch mode); returns how many were written."""
        with self._lock:
            if self.mode == "realtime" and not self._staged:
                log.warning("flush called in realtime mode; nothing to do")
                return 0
            pending = list(self._staged.values())
            self._append(pending)
            self._staged.clear()
            self.last_flush = utc(now)
            return len(pending)

    def flush_due(self, now=None) -> bool:
        if self.mode != "batch":
            return False
        return self.last_flush is None or utc(now) - self.last_flush >= self.flush_interval

    def maybe_flush(self, now=None) -> int:
        return self.flush(now) if self.flush_due(now) else 0

    # -- queries ---------------------------------------------------------

    def live_view(self) -> dict[tuple[str, int], BlacklistEntry]:
        with self._lock:
            view = dict(self._durable)
            view.update(self._staged)
            return view

    def durable_view(self) -> dict[tuple[str, int], BlacklistEntry]:
        with self._lock:
            return dict(self._durable)

    @property
    def staged(self) -> list[BlacklistEntry]:
        with self._lock:
            return list(self._staged.values())

    def query(self, host: str, port: int) -> BlacklistEntry | None:
        with self._lock:
            key = (host, int(port))
            return self._staged.get(key) or self._durable.get(key)

    def __contains__(self, endpoint) -> bool:
        return self.query(*endpoint) is not None

    def __len__(self) -> int:
        return len(self.live_view())

    def entries(self) -> list[BlacklistEntry]:
        view = self.live_view()
        return [view[k] for k in sorted(view)]

    def export(self, max_age: dt.timedelta | str | None = None, now=None) -> str:
        """Deny-list text: sorted, de-duplicated ``host:port`` lines."""
        if isinstance(max_age, str):
            max_age = parse_duration(max_age)
        cutoff = utc(now) - max_age if max_age is not None else None
        lines = {
            e.endpoint for e in self.live_view().values()
            if cutoff is None or utc(e.last_confirmed) >= cutoff
        }
        return "".join(f"{line}\n" for line in sorted(lines))
