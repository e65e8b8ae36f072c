"""Active verification of suspected mining-pool endpoints.

A probe opens a plain TCP connection to check availability, then sends a
Stratum subscription or login message for each protocol dialect over each
transport and classifies the first response line or frame. All attempts
for one target run concurrently under a single deadline of
``connect_timeout + read_timeout`` so that an unresponsive endpoint costs
at most that budget.
"""
from __future__ import annotations

import enum
import functools
import http.client
import json
import socket
import ssl
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass
from typing import Iterable, Sequence

from websockets.exceptions import InvalidHandshake, InvalidMessage, WebSocketException
from websockets.sync.client import connect as ws_connect

MAX_BODY = 64 * 1024
EXCERPT_LIMIT = 1024


class ProtocolVariant(str, enum.Enum):
    BTC = "StratumBTC"
    XMR = "StratumXMR"
    ETH = "StratumETH"
    WEBMINE = "StratumWebmineXMR"

    @property
    def short(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "ProtocolVariant":
        t = text.strip()
        for v in cls:
            if t.lower() in (v.short, v.value.lower()):
                return v
        raise ValueError(f"unknown protocol variant {text!r}")


STANDARD_VARIANTS = (ProtocolVariant.BTC, ProtocolVariant.XMR, ProtocolVariant.ETH)
ALL_VARIANTS = STANDARD_VARIANTS + (ProtocolVariant.WEBMINE,)


class Transport(str, enum.Enum):
    TCP = "TCP"
    TLS = "TLS"
    WEBSOCKET = "WebSocket"
    HTTP = "HTTP"  # JSON-RPC over HTTP POST; opt-in only

    @classmethod
    def parse(cls, text: str) -> "Transport":
        for t in cls:
            if text.strip().lower() in (t.value.lower(), t.name.lower()):
                return t
        raise ValueError(f"unknown transport {text!r}")


DEFAULT_TRANSPORTS = (Transport.TCP, Transport.TLS, Transport.WEBSOCKET)


class Outcome(str, enum.Enum):
    POSITIVE = "PoolPositive"
    NEGATIVE = "PoolNegative"
    UNREACHABLE = "Unreachable"
    SILENT = "Silent"


@dataclass(frozen=True)
class ProbeConfig:
    connect_timeout_ms: float = 100.0
    read_timeout_ms: float = 155.0
    max_parallel: int = 32
    # burn address / checksum-invalid placeholder: never a spendable wallet
    wallet: str = "0x000000000000000000000000000000000000dEaD"
    xmr_wallet: str = "4" + "0" * 94
    token: str = "00000000000000000000000000000000"
    verify_tls: bool = False

    def __post_init__(self):
        if self.connect_timeout_ms <= 0 or self.read_timeout_ms <= 0:
            raise ValueError("timeouts must be positive")
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")

    @property
    def budget_s(self) -> float:
        return (self.connect_timeout_ms + self.read_timeout_ms) / 1000.0

    @classmethod
    def from_dict(cls, data: dict) -> "ProbeConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown probe config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class ProbeTarget:
    host: str
    port: int
    transports: tuple[Transport, ...] = DEFAULT_TRANSPORTS

    def __post_init__(self):
        if not 1 <= int(self.port) <= 65535:
            raise ValueError(f"port out of range: {self.port}")
        if not self.transports:
            raise ValueError("at least one transport is required")

    @classmethod
    def parse(cls, text: str, transports=DEFAULT_TRANSPORTS) -> "ProbeTarget":
        host, sep, port = text.strip().rpartition(":")
        if not sep or not host or not port.isdigit():
            raise ValueError(f"expected host:port, got {text!r}")
        return cls(host.strip("[]"), int(port), tuple(transports))

    def __str__(self):
        return f"{self.host}:{self.port}"


@dataclass
class ProbeVerdict:
    target: ProbeTarget
    outcome: Outcome
    variant: ProtocolVariant | None = None
    response_kind: str | None = None
    excerpt: str = ""
    round_trip_ms: float = 0.0
    transport: Transport | None = None
    tls_verified: bool = False

    @property
    def endpoint(self) -> tuple[str, int]:
        return self.target.host, self.target.port

    def to_dict(self) -> dict:
        return {
            "host": self.target.host,
            "port": self.target.port,
            "outcome": self.outcome.value,
            "variant": self.variant.value if self.variant else None,
            "response_kind": self.response_kind,
            "excerpt": self.excerpt,
            "round_trip_ms": round(self.round_trip_ms, 3),
            "transport": self.transport.value if self.transport else None,
            "tls_verified": self.tls_verified,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeVerdict":
        return cls(
            ProbeTarget(d["host"], int(d["port"])),
            Outcome(d["outcome"]),
            ProtocolVariant(d["variant"]) if d.get("variant") else None,
            d.get("response_kind"),
            d.get("excerpt", ""),
            float(d.get("round_trip_ms", 0.0)),
            Transport(d["transport"]) if d.get("transport") else None,
            bool(d.get("tls_verified", False)),
        )


# ---- messages and response parsing ----


def message_object(variant: ProtocolVariant, config: ProbeConfig | None = None) -> dict:
    config = config or ProbeConfig()
    if variant is ProtocolVariant.BTC:
        return {"id": 1, "method": "mining.subscribe", "params": []}
    if variant is ProtocolVariant.XMR:
        return {"id": 1, "jsonrpc": "2.0", "method": "login", "params": {"login": config.xmr_wallet, "pass": "x"}}
    if variant is ProtocolVariant.ETH:
        return {"id": 1, "jsonrpc": "2.0", "method": "eth_submitLogin", "params": [config.wallet]}
    return {"id": "start", "m": "start", "p": {"token": config.token}, "subscribe": 1}


def encode(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":")).encode() + b"\n"


def build_message(variant: ProtocolVariant, config: ProbeConfig | None = None) -> bytes:
    """Single-line JSON subscription message for ``variant``, LF-terminated."""
    return encode(message_object(ProtocolVariant(variant), config))


def _parse(body) -> dict | None:
    if isinstance(body, str):
        body = body.encode("utf-8", "replace")
    try:
        line = bytes(body[:MAX_BODY]).split(b"\n", 1)[0].strip()
        obj = json.loads(line.decode("utf-8"))
    except (ValueError, UnicodeDecodeError, RecursionError):
        return None
    return obj if isinstance(obj, dict) else None


def classify_response(variant: ProtocolVariant, body) -> tuple[Outcome, str | None]:
    """Map a response line to ``(outcome, 'success'|'error'|None)``. Never raises."""
    try:
        obj = _parse(body)
    except Exception:  # defensive: the function is total
        obj = None
    if obj is None or "id" not in obj:
        return Outcome.NEGATIVE, None
    if ProtocolVariant(variant) is ProtocolVariant.WEBMINE:
        if "r" not in obj and "e" not in obj:
            return Outcome.NEGATIVE, None
        return Outcome.POSITIVE, "error" if obj.get("e") is not None else "success"
    if "result" not in obj and "error" not in obj:
        return Outcome.NEGATIVE, None
    return Outcome.POSITIVE, "error" if obj.get("error") is not None else "success"


def infer_variant(body) -> ProtocolVariant | None:
    """Guess which dialect produced a response from its key layout."""
    obj = _parse(body)
    if obj is None or "id" not in obj:
        return None
    if "r" in obj or "e" in obj:
        return ProtocolVariant.WEBMINE
    if "jsonrpc" in obj:
        result = obj.get("result", ...)
        if isinstance(result, dict) or result is ...:
            return ProtocolVariant.XMR
        return ProtocolVariant.ETH
    if "result" in obj or "error" in obj:
        return ProtocolVariant.BTC
    return None


# ---- transport attempts ----


@dataclass
class _Attempt:
    transport: Transport
    variant: ProtocolVariant
    connected: bool = False
    body: bytes | None = None
    at: float = 0.0
    outcome: Outcome | None = None
    kind: str | None = None

    @property
    def consistent(self) -> bool:
        return self.outcome is Outcome.POSITIVE and infer_variant(self.body) is self.variant


def _remaining(deadline: float) -> float:
    return max(0.001, deadline - time.monotonic())


def _read_line(sock, deadline) -> bytes:
    buf = b""
    while b"\n" not in buf and len(buf) < MAX_BODY:
        sock.settimeout(_remaining(deadline))
        try:
            chunk = sock.recv(4096)
        except (socket.timeout, TimeoutError):
            break
        except OSError:
            break
        if not chunk:
            break
        buf += chunk
        if time.monotonic() >= deadline:
            break
    return buf


@functools.lru_cache(maxsize=2)
def _client_tls_context(verify: bool) -> ssl.SSLContext:
    if verify:
        return ssl.create_default_context()
    # skip loading the CA store; certificates are not checked anyway
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.check_hostname = False
    ctx.verify_mode = ssl.CERT_NONE
    return ctx


def _open(target, deadline, config):
    timeout = min(config.connect_timeout_ms / 1000.0, _remaining(deadline))
    return socket.create_connection((target.host, target.port), timeout=timeout)


class _Round:
    """Shared state of one probe; results arriving after the deadline are dropped."""

    def __init__(self):
        self.lock = threading.Lock()
        self.closed = False
        self.sockets = []

    def track(self, sock):
        with self.lock:
            if self.closed:
                sock.close()
                raise OSError("probe finished")
            self.sockets.append(sock)

    def record(self, att: _Attempt, **fields):
        with self.lock:
            if not self.closed:
                for k, v in fields.items():
                    setattr(att, k, v)

    def close(self):
        with self.lock:
            self.closed = True
            socks, self.sockets = self.sockets, []
        for s in socks:
            try:
                s.close()
            except OSError:
                pass


def _run_attempt(att: _Attempt, target: ProbeTarget, config: ProbeConfig, deadline: float, rnd: _Round):
    message = build_message(att.variant, config)
    try:
        sock = _open(target, deadline, config)
        rnd.track(sock)
    except OSError:
        return att
    rnd.record(att, connected=True)
    body = None
    try:
        if att.transport is Transport.TCP:
            sock.sendall(message)
            body = _read_line(sock, deadline)
        elif att.transport is Transport.TLS:
            sock.settimeout(_remaining(deadline))
            try:
                tls = _client_tls_context(config.verify_tls).wrap_socket(sock, server_hostname=target.host)
            except (ssl.SSLError, OSError):
                return att  # handshake failure: attempt skipped
            rnd.track(tls)
            tls.sendall(message)
            body = _read_line(tls, deadline)
        elif att.transport is Transport.WEBSOCKET:
            body = _websocket_exchange(sock, target, message, deadline)
        elif att.transport is Transport.HTTP:
            body = _http_exchange(sock, target, message, deadline)
    except OSError:
        pass
    if body:
        outcome, kind = classify_response(att.variant, body)
        rnd.record(att, body=body, at=time.monotonic(), outcome=outcome, kind=kind)
    return att


def _websocket_exchange(sock, target, message, deadline) -> bytes | None:
    try:
        ws = ws_connect(
            f"ws://{target.host}:{target.port}/",
            sock=sock,
            open_timeout=_remaining(deadline),
            close_timeout=0.01,
            compression=None,
        )
    except (InvalidHandshake, InvalidMessage) as exc:
        # the peer answered, just not with a WebSocket upgrade
        if isinstance(exc.__cause__, EOFError) or "did not receive" in str(exc):
            return None
        return b"(non-websocket reply)"
    except (OSError, TimeoutError, WebSocketException):
        return None
    try:
        ws.send(message.decode().rstrip("\n"))
        frame = ws.recv(timeout=_remaining(deadline))
        return frame.encode() if isinstance(frame, str) else bytes(frame)
    except (TimeoutError, OSError, WebSocketException):
        return None
    finally:
        try:
            ws.close()
        except Exception:
            pass


def _http_exchange(sock, target, message, deadline) -> bytes | None:
    conn = http.client.HTTPConnection(target.host, target.port, timeout=_remaining(deadline))
    conn.sock = sock
    try:
        conn.request("POST", "/", body=message, headers={"Content-Type": "application/json"})
        return conn.getresponse().read(MAX_BODY) or None
    except (http.client.HTTPException, OSError):
        return None


def attempt_plan(target: ProbeTarget, variants: Sequence[ProtocolVariant]) -> list[tuple[Transport, ProtocolVariant]]:
    plan = []
    for transport in target.transports:
        for v in variants:
            if (transport is Transport.WEBSOCKET) == (v is ProtocolVariant.WEBMINE):
                plan.append((transport, v))
    return plan


def probe_one(target: ProbeTarget, variants: Sequence[ProtocolVariant] = ALL_VARIANTS, config: ProbeConfig | None = None) -> ProbeVerdict:
    """Probe a single endpoint. Never raises for network conditions."""
    config = config or ProbeConfig()
    variants = [ProtocolVariant(v) for v in variants]
    start = time.monotonic()
    deadline = start + config.budget_s

    def elapsed_ms(t=None):
        return ((t or time.monotonic()) - start) * 1000.0

    try:
        check = socket.create_connection((target.host, target.port), timeout=config.connect_timeout_ms / 1000.0)
        check.close()
    except OSError:  # includes DNS failure and timeouts
        return ProbeVerdict(target, Outcome.UNREACHABLE, round_trip_ms=elapsed_ms())

    plan = [_Attempt(t, v) for t, v in attempt_plan(target, variants)]
    rnd = _Round()
    pool = ThreadPoolExecutor(max_workers=max(1, len(plan)), thread_name_prefix="probe")
    pending = {pool.submit(_run_attempt, a, target, config, deadline, rnd) for a in plan}
    try:
        while pending:
            done, pending = wait(pending, timeout=_remaining(deadline), return_when=FIRST_COMPLETED)
            # a reply in the probed dialect settles the verdict
            if any(f.result().consistent for f in done) or time.monotonic() >= deadline:
                break
    finally:
        rnd.close()
        pool.shutdown(wait=False, cancel_futures=True)

    positives = [a for a in plan if a.outcome is Outcome.POSITIVE]
    if positives:
        consistent = [a for a in positives if a.consistent]
        best = (consistent or positives)[0]
        return ProbeVerdict(
            target, Outcome.POSITIVE, best.variant, best.kind,
            _excerpt(best.body), elapsed_ms(best.at), best.transport, config.verify_tls,
        )
    answered = [a for a in plan if a.body]
    if answered:
        first = min(answered, key=lambda a: a.at)
        return ProbeVerdict(target, Outcome.NEGATIVE, excerpt=_excerpt(first.body),
                            round_trip_ms=elapsed_ms(first.at), transport=first.transport)
    if any(a.connected for a in plan) or not plan:
        return ProbeVerdict(target, Outcome.SILENT, round_trip_ms=elapsed_ms())
    return ProbeVerdict(target, Outcome.UNREACHABLE, round_trip_ms=elapsed_ms())


def _excerpt(body: bytes | None) -> str:
    if not body:
        return ""
    return body[:EXCERPT_LIMIT].decode("utf-8", "replace").rstrip("\n")[:EXCERPT_LIMIT]


def probe_batch(targets: Iterable[ProbeTarget], variants: Sequence[ProtocolVariant] = ALL_VARIANTS,
                config: ProbeConfig | None = None) -> list[ProbeVerdict]:
    """Probe targets with at most ``config.max_parallel`` in flight; input order kept."""
    config = config or ProbeConfig()
    targets = list(targets)
    if not targets:
        return []
    with ThreadPoolExecutor(max_workers=min(config.max_parallel, len(targets))) as pool:
        return list(pool.map(lambda t: probe_one(t, variants, config), targets))


def read_targets(lines: Iterable[str], transports=DEFAULT_TRANSPORTS) -> list[ProbeTarget]:
    out = []
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if line:
            out.append(ProbeTarget.parse(line, transports))
    return out
