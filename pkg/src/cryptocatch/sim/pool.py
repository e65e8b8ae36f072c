"""Loopback mining-pool emulators and benign look-alike services.

Pools answer the subscription message of one protocol dialect with that
dialect's success or error body. Every received line (or WebSocket frame)
is logged verbatim in ``server.received``.
"""
from __future__ import annotations

import datetime as dt
import functools
import json
import logging
import os
import socket
import socketserver
import ssl
import tempfile
import threading
from dataclasses import dataclass
from typing import Callable

from websockets.sync.server import serve as ws_serve

from cryptocatch.probe import ProtocolVariant, encode

Responder = Callable[[bytes], "bytes | None"]

# availability checks and non-WebSocket probes routinely abort handshakes
_ws_log = logging.getLogger("cryptocatch.sim.websocket")
_ws_log.setLevel(logging.CRITICAL)

DUMMY_BLOB = "0" * 76 + "ff" * 2
SUBSCRIPTION_METHOD = {
    ProtocolVariant.BTC: "mining.subscribe",
    ProtocolVariant.XMR: "login",
    ProtocolVariant.ETH: "eth_submitLogin",
    ProtocolVariant.WEBMINE: "start",
}


@dataclass(frozen=True)
class PoolBehavior:
    kind: str = "success"  # success | error | silent | limit
    max_connections: int | None = None

    def __post_init__(self):
        if self.kind not in ("success", "error", "silent", "limit"):
            raise ValueError(f"unknown behavior {self.kind!r}")
        if self.kind == "limit" and (self.max_connections is None or self.max_connections < 0):
            raise ValueError("connection limit must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "PoolBehavior":
        t = text.strip().lower()
        aliases = {"respondsuccess": "success", "responderror": "error", "silentdrop": "silent"}
        t = aliases.get(t, t)
        if t.startswith("limit:") or t.startswith("connectionlimit:"):
            return cls("limit", int(t.split(":", 1)[1]))
        return cls(t)


RespondSuccess = PoolBehavior("success")
RespondError = PoolBehavior("error")
SilentDrop = PoolBehavior("silent")


def ConnectionLimit(n: int) -> PoolBehavior:  # noqa: N802 - reads like the other behaviors
    return PoolBehavior("limit", n)


def success_body(variant: ProtocolVariant, req_id=1) -> dict:
    if variant is ProtocolVariant.BTC:
        return {
            "id": req_id,
            "result": [["mining.set_difficulty", "b4b6693b72a50c7116db18d6497cac52"],
                       ["mining.notify", "ae6812eb4cd7735a302a8a9dd95cf71f"]],
            "error": None,
        }
    if variant is ProtocolVariant.XMR:
        return {
            "id": req_id,
            "jsonrpc": "2.0",
            "result": {
                "id": "00000000-0000-0000-0000-000000000001",
                "job": {"algo": "rx/0", "blob": DUMMY_BLOB, "target": "b88d0600"},
                "status": "OK",
            },
            "error": None,
        }
    if variant is ProtocolVariant.ETH:
        return {"id": req_id, "jsonrpc": "2.0", "result": True, "error": None}
    return {"r": {"subscribed": 0}, "id": req_id}


def error_body(variant: ProtocolVariant, req_id=1) -> dict:
    if variant is ProtocolVariant.BTC:
        return {"id": req_id, "result": False, "error": [20, "Not supported"]}
    if variant is ProtocolVariant.XMR:
        return {"id": req_id, "jsonrpc": "2.0", "error": {"code": -1, "message": "Invalid address"}}
    if variant is ProtocolVariant.ETH:
        return {"id": req_id, "jsonrpc": "2.0", "result": None, "error": {"code": -1, "message": "Invalid login"}}
    return {"e": "noRights", "id": req_id}


def pool_responder(variant: ProtocolVariant, behavior: PoolBehavior) -> Responder:
    default_id = "start" if variant is ProtocolVariant.WEBMINE else 1
    method_key = "m" if variant is ProtocolVariant.WEBMINE else "method"

    def respond(line: bytes):
        if behavior.kind == "silent":
            return None
        try:
            obj = json.loads(line.decode("utf-8"))
        except (ValueError, UnicodeDecodeError, RecursionError):
            obj = None
        if not isinstance(obj, dict):
            return encode(error_body(variant, default_id))
        req_id = obj.get("id", default_id)
        if obj.get(method_key) == SUBSCRIPTION_METHOD[variant] and behavior.kind != "error":
            return encode(success_body(variant, req_id))
        return encode(error_body(variant, req_id))

    return respond


@functools.lru_cache(maxsize=1)
def self_signed_cert() -> tuple[str, str]:
    """Paths of a throwaway localhost certificate and key (created once per process)."""
    from cryptography import x509
    from cryptography.hazmat.primitives import hashes, serialization
    from cryptography.hazmat.primitives.asymmetric import ec
    from cryptography.x509.oid import NameOID
    import ipaddress

    key = ec.generate_private_key(ec.SECP256R1())
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, "localhost")])
    now = dt.datetime.now(dt.timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - dt.timedelta(days=1))
        .not_valid_after(now + dt.timedelta(days=30))
        .add_extension(
            x509.SubjectAlternativeName([x509.DNSName("localhost"), x509.IPAddress(ipaddress.ip_address("127.0.0.1"))]),
            critical=False,
        )
        .sign(key, hashes.SHA256())
    )
    folder = tempfile.mkdtemp(prefix="cryptocatch-cert-")
    cert_path, key_path = os.path.join(folder, "cert.pem"), os.path.join(folder, "key.pem")
    with open(cert_path, "wb") as fh:
        fh.write(cert.public_bytes(serialization.Encoding.PEM))
    with open(key_path, "wb") as fh:
        fh.write(key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                                   serialization.NoEncryption()))
    return cert_path, key_path


def server_tls_context() -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.load_cert_chain(*self_signed_cert())
    return ctx


class _Server:
    """Common lifecycle: start/stop, received log, cumulative connection counter."""

    def __init__(self, limit: int | None = None):
        self.limit = limit
        self.received: list[bytes] = []
        self.connections = 0
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None

    def _admit(self) -> bool:
        with self._lock:
            self.connections += 1
            return self.limit is None or self.connections <= self.limit

    def _log(self, data: bytes):
        with self._lock:
            self.received.append(data)

    @property
    def host(self) -> str:
        return self.address[0]

    @property
    def port(self) -> int:
        return self.address[1]

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


class _ThreadingTCP(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128


class LineServer(_Server):
    """Newline-framed TCP server (optionally TLS) driven by a responder."""

    def __init__(self, respond: Responder, bind=("127.0.0.1", 0), tls: bool = False,
                 limit: int | None = None, close_after_reply: bool = False):
        super().__init__(limit)
        self.respond = respond
        self.tls = tls
        self.close_after_reply = close_after_reply
        self._tls_ctx = server_tls_context() if tls else None
        self._active: set[socket.socket] = set()
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                outer._serve_connection(self.request)

        try:
            self._srv = _ThreadingTCP(tuple(bind), Handler)
        except OSError as exc:
            raise RuntimeError(f"cannot bind {bind[0]}:{bind[1]}: {exc}") from exc
        self.address = self._srv.server_address[:2]

    def _serve_connection(self, sock: socket.socket):
        if not self._admit():
            return  # over the limit: accepted, then closed without a word
        with self._lock:
            self._active.add(sock)
        try:
            if self._tls_ctx is not None:
                sock.settimeout(5.0)
                try:
                    sock = self._tls_ctx.wrap_socket(sock, server_side=True)
                except (ssl.SSLError, OSError):
                    return
                sock.settimeout(None)
                with self._lock:
                    self._active.add(sock)
            reader = sock.makefile("rb")
            while True:
                try:
                    line = reader.readline(65536)
                except (OSError, ValueError):
                    return
                if not line:
                    return
                self._log(line)
                reply = self.respond(line.rstrip(b"\r\n"))
                if reply is not None:
                    try:
                        sock.sendall(reply)
                    except OSError:
                        return
                    if self.close_after_reply:
                        return
        finally:
            with self._lock:
                self._active.discard(sock)

    def start(self) -> "LineServer":
        self._thread = threading.Thread(target=self._srv.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._srv.shutdown()
        self._srv.server_close()
        with self._lock:
            active, self._active = list(self._active), set()
        for s in active:
            try:
                s.close()
            except OSError:
                pass


class WebSocketServer(_Server):
    """WebSocket text-frame server driven by a responder."""

    def __init__(self, respond: Responder, bind=("127.0.0.1", 0), tls: bool = False, limit: int | None = None):
        super().__init__(limit)
        self.respond = respond
        try:
            self._srv = ws_serve(self._handler, bind[0], bind[1], ssl=server_tls_context() if tls else None,
                                 compression=None, logger=_ws_log)
        except OSError as exc:
            raise RuntimeError(f"cannot bind {bind[0]}:{bind[1]}: {exc}") from exc
        self.address = self._srv.socket.getsockname()[:2]

    def _handler(self, ws):
        if not self._admit():
            ws.close()
            return
        for message in ws:
            data = message.encode() if isinstance(message, str) else bytes(message)
            self._log(data)
            reply = self.respond(data)
            if reply is not None:
                ws.send(reply.decode().rstrip("\n"))

    def start(self) -> "WebSocketServer":
        self._thread = threading.Thread(target=self._srv.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._srv.shutdown()


def serve_pool(variant, behavior: PoolBehavior = RespondSuccess, bind=("127.0.0.1", 0), tls: bool = False):
    """Start an emulated pool; Webmine pools speak WebSocket, the others raw lines."""
    variant = ProtocolVariant(variant)
    respond = pool_responder(variant, behavior)
    if variant is ProtocolVariant.WEBMINE:
        return WebSocketServer(respond, bind, tls, behavior.max_connections).start()
    return LineServer(respond, bind, tls, behavior.max_connections).start()


HTML_REPLY = (
    b"HTTP/1.0 200 OK\r\nContent-Type: text/html\r\nContent-Length: 34\r\n\r\n"
    b"<html><body>It works</body></html>"
)


def serve_html(bind=("127.0.0.1", 0)) -> LineServer:
    """A web server that answers anything with a fixed HTML page."""
    return LineServer(lambda line: HTML_REPLY, bind, close_after_reply=True).start()


def serve_json_echo(bind=("127.0.0.1", 0), wrap: bool = True) -> LineServer:
    """A JSON service reflecting each request; ``wrap`` nests it under ``echo``."""

    def respond(line: bytes):
        try:
            obj = json.loads(line.decode("utf-8"))
        except (ValueError, UnicodeDecodeError, RecursionError):
            obj = line.decode("utf-8", "replace")
        return encode({"echo": obj}) if wrap else encode(obj)

    return LineServer(respond, bind).start()


def closed_port(host: str = "127.0.0.1") -> int:
    """A loopback port with no listener (bound briefly, then released)."""
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]
