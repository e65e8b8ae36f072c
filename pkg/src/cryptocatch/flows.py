"""Packet-record parsing and flow windowing.

Input is a stream of packet records (five-tuple, timestamp, payload length),
either NDJSON or CSV. Records are grouped into directional flows and each
flow is cut into windows of at most ``window_size`` consecutive packets,
the unit that features and classifiers operate on.
"""
from __future__ import annotations

import csv
import io
import ipaddress
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CSV_HEADER = ("ts", "src_ip", "src_port", "dst_ip", "dst_port", "proto", "len")
PROTOCOLS = ("TCP", "UDP")

BENIGN = "benign"
MINING = "mining"
COIN_LABELS = ("BTC", "XMR", "ETC", "ETHW", "ETF", "CFX", "RVN")
LABELS = (BENIGN, *COIN_LABELS, MINING)


class RecordError(ValueError):
    """A packet record line could not be parsed or failed validation."""


@dataclass(frozen=True, order=True)
class FlowKey:
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    proto: str

    def __str__(self) -> str:
        return "|".join(
            (self.proto, self.src_ip, str(self.src_port), self.dst_ip, str(self.dst_port))
        )

    @classmethod
    def parse(cls, text: str) -> "FlowKey":
        proto, src_ip, src_port, dst_ip, dst_port = text.split("|")
        return cls(src_ip, int(src_port), dst_ip, int(dst_port), proto)

    @property
    def destination(self) -> tuple[str, int]:
        return self.dst_ip, self.dst_port


@dataclass(frozen=True)
class PacketRecord:
    ts: float
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    proto: str
    len: int

    @property
    def key(self) -> FlowKey:
        return FlowKey(self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.proto)

    def to_json(self) -> str:
        return json.dumps(
            {
                "ts": self.ts,
                "src_ip": self.src_ip,
                "src_port": self.src_port,
                "dst_ip": self.dst_ip,
                "dst_port": self.dst_port,
                "proto": self.proto,
                "len": self.len,
            },
            separators=(",", ":"),
        )


@dataclass(frozen=True)
class Window:
    """Up to ``window_size`` consecutive packets of one flow instance."""

    key: FlowKey
    seq_index: int
    packets: tuple[tuple[float, int], ...]
    label: str | None = None

    def __post_init__(self):
        if len(self.packets) < 2:
            raise ValueError("a window needs at least two packets")

    @property
    def window_id(self) -> str:
        return f"{self.key}|{self.seq_index}"

    @property
    def lengths(self) -> np.ndarray:
        return np.array([n for _, n in self.packets], dtype=float)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([t for t, _ in self.packets], dtype=float)

    @property
    def iats(self) -> np.ndarray:
        return np.diff(self.timestamps)

    def to_dict(self) -> dict:
        return {
            "key": {
                "src_ip": self.key.src_ip,
                "src_port": self.key.src_port,
                "dst_ip": self.key.dst_ip,
                "dst_port": self.key.dst_port,
                "proto": self.key.proto,
            },
            "seq_index": self.seq_index,
            "packets": [[t, n] for t, n in self.packets],
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "Window":
        k = obj["key"]
        key = FlowKey(k["src_ip"], int(k["src_port"]), k["dst_ip"], int(k["dst_port"]), k["proto"])
        packets = tuple((float(t), int(n)) for t, n in obj["packets"])
        return cls(key, int(obj["seq_index"]), packets, obj.get("label"))


@dataclass
class ParseResult:
    """Records parsed from one stream plus the tally of rejected lines."""

    records: list[PacketRecord] = field(default_factory=list)
    errors: list[tuple[int, str]] = field(default_factory=list)

    @property
    def error_count(self) -> int:
        return len(self.errors)

    def __iter__(self) -> Iterator[PacketRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


def _port(value) -> int:
    if isinstance(value, bool):
        raise RecordError("port must be an integer")
    if isinstance(value, float):
        if not value.is_integer():
            raise RecordError(f"port {value!r} is not an integer")
        value = int(value)
    port = int(value)
    if not 0 <= port <= 65535:
        raise RecordError(f"port {port} out of range")
    return port


def make_record(ts, src_ip, src_port, dst_ip, dst_port, proto, length) -> PacketRecord:
    """Validate raw field values and build a :class:`PacketRecord`."""
    try:
        ts = float(ts)
    except (TypeError, ValueError):
        raise RecordError(f"bad timestamp {ts!r}") from None
    if not math.isfinite(ts) or ts < 0:
        raise RecordError(f"timestamp {ts!r} must be finite and non-negative")
    for ip in (src_ip, dst_ip):
        try:
            ipaddress.ip_address(str(ip))
        except ValueError:
            raise RecordError(f"bad IP address {ip!r}") from None
    proto = str(proto).upper()
    if proto not in PROTOCOLS:
        raise RecordError(f"unknown protocol {proto!r}")
    if isinstance(length, bool):
        raise RecordError("len must be an integer")
    try:
        if isinstance(length, float) and not length.is_integer():
            raise ValueError
        length = int(length)
    except (TypeError, ValueError):
        raise RecordError(f"bad length {length!r}") from None
    if length < 0:
        raise RecordError(f"negative length {length}")
    try:
        sport, dport = _port(src_port), _port(dst_port)
    except (TypeError, ValueError) as exc:
        raise RecordError(str(exc)) from None
    return PacketRecord(round(ts, 6), str(src_ip), sport, str(dst_ip), dport, proto, length)


def _text_lines(stream) -> Iterator[str]:
    if isinstance(stream, bytes):
        stream = stream.decode("utf-8")
    if isinstance(stream, str):
        yield from io.StringIO(stream)
        return
    for line in stream:
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        yield line


def parse_records(stream, fmt: str = "ndjson", strict: bool = False) -> ParseResult:
    """Parse an NDJSON or CSV packet-record stream.

    ``stream`` may be bytes, str, or any iterable of lines (text or binary
    file objects included). Blank lines are ignored. In lenient mode each
    malformed line is skipped and noted in ``ParseResult.errors``; with
    ``strict=True`` the first one raises :class:`RecordError`.
    """
    fmt = fmt.lower()
    if fmt not in ("ndjson", "csv"):
        raise ValueError(f"unknown record format {fmt!r}")
    result = ParseResult()
    lines = _text_lines(stream)

    def reject(lineno: int, msg: str):
        if strict:
            raise RecordError(f"line {lineno}: {msg}")
        result.errors.append((lineno, msg))

    if fmt == "ndjson":
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise RecordError("record is not a JSON object")
                rec = make_record(*(obj[name] for name in CSV_HEADER))
            except (ValueError, KeyError, TypeError) as exc:
                reject(lineno, f"{type(exc).__name__}: {exc}")
                continue
            result.records.append(rec)
        return result

    header_seen = False
    for lineno, row in enumerate(csv.reader(lines), 1):
        if not row or not any(cell.strip() for cell in row):
            continue
        if not header_seen:
            if tuple(c.strip() for c in row) != CSV_HEADER:
                raise RecordError(f"CSV header must be {','.join(CSV_HEADER)}")
            header_seen = True
            continue
        if len(row) != len(CSV_HEADER):
            reject(lineno, f"expected {len(CSV_HEADER)} fields, got {len(row)}")
            continue
        try:
            rec = make_record(*(c.strip() for c in row))
        except RecordError as exc:
            reject(lineno, str(exc))
            continue
        result.records.append(rec)
    return result


def write_records(records: Iterable[PacketRecord], fh: IO[str]) -> None:
    for rec in records:
        fh.write(rec.to_json())
        fh.write("\n")


def _flow_instances(records: Sequence[PacketRecord], flow_timeout: float):
    by_key: OrderedDict[FlowKey, list[tuple[float, int, int]]] = OrderedDict()
    for order, rec in enumerate(records):
        by_key.setdefault(rec.key, []).append((rec.ts, order, rec.len))
    for key, pkts in by_key.items():
        # stable on input order for equal timestamps
        pkts.sort(key=lambda p: (p[0], p[1]))
        instance: list[tuple[float, int]] = []
        last_ts = None
        instances = []
        for ts, _, length in pkts:
            if last_ts is not None and ts - last_ts > flow_timeout:
                instances.append(instance)
                instance = []
            instance.append((ts, length))
            last_ts = ts
        instances.append(instance)
        yield key, instances


def segment_flows(
    records: Sequence[PacketRecord],
    window_size: int = 10,
    flow_timeout: float = 120.0,
    labels: Mapping[FlowKey, str] | None = None,
) -> list[Window]:
    """Cut directional flows into windows of ``window_size`` packets.

    An idle gap longer than ``flow_timeout`` seconds starts a new flow
    instance under the same key. A trailing segment with a single packet is
    dropped; shorter tails of two or more packets are kept. ``seq_index``
    keeps counting across the instances of one key so window ids stay unique.
    """
    if window_size < 2:
        raise ValueError("window_size must be at least 2")
    windows: list[Window] = []
    for key, instances in _flow_instances(records, flow_timeout):
        label = labels.get(key) if labels else None
        seq = 0
        for instance in instances:
            for start in range(0, len(instance), window_size):
                chunk = instance[start : start + window_size]
                if len(chunk) < 2:
                    continue
                windows.append(Window(key, seq, tuple(chunk), label))
                seq += 1
    return windows


def length_distribution(
    windows: Iterable[Window], ranges: Sequence[tuple[float, float]]
) -> list[float]:
    """Fraction of all packets whose length falls in each inclusive range."""
    if not ranges:
        raise ValueError("at least one range is required")
    for lo, hi in ranges:
        if lo > hi:
            raise ValueError(f"range ({lo}, {hi}) has lo > hi")
    lengths = [n for w in windows for _, n in w.packets]
    if not lengths:
        return [0.0] * len(ranges)
    arr = np.asarray(lengths)
    return [float(np.mean((arr >= lo) & (arr <= hi))) for lo, hi in ranges]


def write_windows(windows: Iterable[Window], fh: IO[str]) -> None:
    for w in windows:
        fh.write(json.dumps(w.to_dict(), separators=(",", ":")))
        fh.write("\n")


def read_windows(fh: Iterable[str]) -> list[Window]:
    return [Window.from_dict(json.loads(line)) for line in fh if line.strip()]


def read_labels(fh: Iterable[str]) -> dict[FlowKey, str]:
    """Read a labels CSV (five-tuple columns plus ``label``)."""
    reader = csv.DictReader(fh)
    out = {}
    for row in reader:
        key = FlowKey(
            row["src_ip"], int(row["src_port"]), row["dst_ip"], int(row["dst_port"]),
            row["proto"].upper(),
        )
        out[key] = row["label"]
    return out


def write_labels(labels: Mapping[FlowKey, str], fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["src_ip", "src_port", "dst_ip", "dst_port", "proto", "label"])
    for key, label in labels.items():
        writer.writerow([key.src_ip, key.src_port, key.dst_ip, key.dst_port, key.proto, label])
