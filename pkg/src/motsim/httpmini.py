"""HTTP/1.1 subset used by the web experiments: GET, 200/404, 301/302 redirects.

Bodies are framed by ``Content-Length`` only.  The client renders whatever
bytes its TCP connection accepted for a transaction, so a forged response
that arrives first replaces the genuine one, and a response that overruns its
own ``Content-Length`` is flagged rather than truncated.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from urllib.parse import urlsplit

from .simnet import SimTime
from .tcpstack import CloseReason, TcpApp, TcpConnection, TcpError, TcpHost

MAX_REDIRECTS = 5
REDIRECT_CODES = (301, 302)
REASONS = {200: "OK", 301: "Moved Permanently", 302: "Found", 404: "Not Found"}


class HttpError(ValueError):
    pass


@dataclass(frozen=True)
class HttpRequest:
    target: str
    headers: dict[str, str] = field(default_factory=dict)
    method: str = "GET"
    version: str = "HTTP/1.1"

    def serialize(self) -> bytes:
        lines = [f"{self.method} {self.target} {self.version}"]
        lines += [f"{k}: {v}" for k, v in self.headers.items()]
        return ("\r\n".join(lines) + "\r\n\r\n").encode("latin-1")


@dataclass(frozen=True)
class HttpResponse:
    status_code: int
    body: bytes = b""
    headers: dict[str, str] = field(default_factory=dict)
    reason: str = ""
    trailing: bytes = field(default=b"", compare=False)
    content_length_mismatch: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.status_code in REDIRECT_CODES and "Location" not in self.headers:
            raise HttpError(f"{self.status_code} response without Location")
        if not self.reason:
            object.__setattr__(self, "reason", REASONS.get(self.status_code, "Unknown"))

    @property
    def location(self) -> str | None:
        return self.headers.get("Location")

    @property
    def is_redirect(self) -> bool:
        return self.status_code in REDIRECT_CODES

    def serialize(self) -> bytes:
        headers = dict(self.headers)
        headers.setdefault("Content-Length", str(len(self.body)))
        lines = [f"HTTP/1.1 {self.status_code} {self.reason}"]
        lines += [f"{k}: {v}" for k, v in headers.items()]
        return ("\r\n".join(lines) + "\r\n\r\n").encode("latin-1") + self.body


def _split_head(data: bytes) -> tuple[list[str], bytes]:
    head, sep, rest = data.partition(b"\r\n\r\n")
    if not sep:
        raise HttpError("incomplete header block")
    return head.decode("latin-1").split("\r\n"), rest


def _parse_headers(lines: list[str]) -> dict[str, str]:
    headers = {}
    for line in lines:
        name, sep, value = line.partition(":")
        if not sep:
            raise HttpError(f"malformed header line {line!r}")
        headers[name.strip()] = value.strip()
    return headers


def parse_request(data: bytes) -> HttpRequest:
    lines, _ = _split_head(data)
    parts = lines[0].split(" ")
    if len(parts) != 3 or not parts[2].startswith("HTTP/"):
        raise HttpError(f"malformed request line {lines[0]!r}")
    return HttpRequest(parts[1], _parse_headers(lines[1:]), parts[0], parts[2])


def parse_response(data: bytes) -> HttpResponse:
    """Parse a response; the body is cut at Content-Length.

    Bytes past Content-Length (or a body shorter than declared) set
    ``content_length_mismatch`` and the excess is kept in ``trailing``.
    """
    if not data.startswith(b"HTTP/1.1 "):
        raise HttpError("response does not start with 'HTTP/1.1 '")
    lines, rest = _split_head(data)
    parts = lines[0].split(" ", 2)
    if len(parts) < 2 or not parts[1].isdigit():
        raise HttpError(f"malformed status line {lines[0]!r}")
    headers = _parse_headers(lines[1:])
    body, trailing, mismatch = rest, b"", False
    if "Content-Length" in headers:
        n = int(headers["Content-Length"])
        body, trailing = rest[:n], rest[n:]
        mismatch = len(rest) != n
    return HttpResponse(int(parts[1]), body, headers, parts[2] if len(parts) > 2 else "",
                        trailing, mismatch)


# -- server -----------------------------------------------------------------

@dataclass(frozen=True)
class LogEntry:
    time: SimTime
    client_ip: str
    method: str
    target: str
    status: int


class _ServerConn(TcpApp):
    def __init__(self, server: "HttpServer"):
        self.server = server
        self.buffer = b""
        self.answered = False

    def on_data(self, conn, data):
        self.buffer += data
        if self.answered or b"\r\n\r\n" not in self.buffer:
            return
        self.answered = True
        request = parse_request(self.buffer)
        response = self.server.route(request)
        sim = self.server.host.sim
        self.server.log.append(LogEntry(sim.now, conn.tuple.remote_ip, request.method,
                                        request.target, response.status_code))
        sim.call_later(self.server.delay, lambda: self._respond(conn, response), "host-task")

    @staticmethod
    def _respond(conn: TcpConnection, response: HttpResponse) -> None:
        try:
            conn.send(response.serialize())
            conn.close()
        except TcpError:
            pass  # connection already gone; the server never learns why


class HttpServer:
    """Serves static routes after the host's artificial processing delay."""

    def __init__(self, host: TcpHost, routes: dict[str, bytes], port: int = 80,
                 delay: SimTime | None = None):
        self.host = host
        self.routes = routes
        self.delay = host.processing_delay if delay is None else delay
        self.log: list[LogEntry] = []
        host.listen(port, lambda: _ServerConn(self))

    def route(self, request: HttpRequest) -> HttpResponse:
        if request.method == "GET" and request.target in self.routes:
            return HttpResponse(200, self.routes[request.target],
                                {"Content-Type": "text/html", "Connection": "close"})
        return HttpResponse(404, b"not found", {"Connection": "close"})


def serve(host: TcpHost, routes: dict[str, bytes], delay: SimTime | None = None,
          port: int = 80) -> HttpServer:
    return HttpServer(host, routes, port, delay)


# -- client -----------------------------------------------------------------

class ConnectionOutcome(enum.Enum):
    CLOSED_BY_FIN = "ClosedByFin"
    TIMED_OUT = "TimedOut"
    RESET = "Reset"
    OPEN = "Open"


@dataclass
class Transaction:
    uri: str
    raw: bytes = b""
    response: HttpResponse | None = None
    outcome: ConnectionOutcome = ConnectionOutcome.OPEN
    error: str | None = None


@dataclass
class ClientView:
    transactions: list[Transaction] = field(default_factory=list)
    followed_redirects: list[str] = field(default_factory=list)

    @property
    def rendered_body(self) -> bytes:
        """All accepted bytes after the header block of the last transaction."""
        if not self.transactions:
            return b""
        last = self.transactions[-1]
        try:
            return _split_head(last.raw)[1]
        except HttpError:
            return b""

    @property
    def connection_outcome(self) -> ConnectionOutcome:
        return self.transactions[0].outcome if self.transactions else ConnectionOutcome.OPEN

    @property
    def response(self) -> HttpResponse | None:
        return self.transactions[-1].response if self.transactions else None


class _ClientConn(TcpApp):
    def __init__(self, browser: "Browser", txn: Transaction, path: str, host_header: str):
        self.browser = browser
        self.txn = txn
        self.request = HttpRequest(path, {"Host": host_header, **browser.extra_headers})

    def on_established(self, conn):
        conn.send(self.request.serialize())

    def on_data(self, conn, data):
        self.txn.raw += data

    def on_peer_fin(self, conn):
        self.txn.outcome = ConnectionOutcome.CLOSED_BY_FIN
        conn.close()
        self.browser.finish(self.txn)

    def on_closed(self, conn, reason):
        if self.txn.outcome is not ConnectionOutcome.OPEN:
            return
        self.txn.outcome = (ConnectionOutcome.TIMED_OUT if reason is CloseReason.TIMEOUT
                            else ConnectionOutcome.RESET)
        self.browser.finish(self.txn)


class Browser:
    """Fetches a URI, renders the first bytes that arrive, follows redirects."""

    def __init__(self, host: TcpHost, resolver: dict[str, str],
                 extra_headers: dict[str, str] | None = None):
        self.host = host
        self.resolver = resolver
        self.extra_headers = extra_headers or {}
        self.view = ClientView()

    def navigate(self, uri: str) -> ClientView:
        parts = urlsplit(uri)
        name = parts.hostname or ""
        if name not in self.resolver:
            raise HttpError(f"cannot resolve host {name!r}")
        txn = Transaction(uri)
        self.view.transactions.append(txn)
        app = _ClientConn(self, txn, parts.path or "/", name)
        self.host.connect(self.resolver[name], parts.port or 80, app)
        return self.view

    def finish(self, txn: Transaction) -> None:
        if not txn.raw:
            txn.error = "no response"
            return
        try:
            txn.response = parse_response(txn.raw)
        except HttpError as exc:
            txn.error = str(exc)
            return
        if (txn.response.is_redirect and
                len(self.view.followed_redirects) < MAX_REDIRECTS):
            self.view.followed_redirects.append(txn.response.location)
            self.navigate(txn.response.location)


def navigate(host: TcpHost, uri: str, resolver: dict[str, str]) -> ClientView:
    return Browser(host, resolver).navigate(uri)
