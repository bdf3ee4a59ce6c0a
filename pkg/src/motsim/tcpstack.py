"""Minimal TCP endpoint with first-arrival-wins segment acceptance.

The stack accepts a segment only when it starts exactly at ``rcv_nxt``.  A
later segment covering bytes that were already accepted is discarded and
answered with a duplicate ACK, which is the property a man-on-the-side
injection relies on.  There is no out-of-order queue, no congestion control
and no window management; partially overlapping segments are dropped whole
unless the host is configured with ``trim_overlap=True``.

Acceptance is keyed on the sequence number only.  An ACK field that covers
bytes never sent is ignored rather than answered, which keeps an injected
segment from provoking an ACK storm between the genuine endpoints.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

from .simnet import HostProfile, Node, SimEvent, SimTime, seconds
from .wire import (TcpFlags, WireError, WirePacket, decode, encode, ip_str,
                   mac_bytes, make_packet, MSS)

MOD = 1 << 32


def seq_lt(a: int, b: int) -> bool:
    return a != b and ((b - a) % MOD) < (1 << 31)


def seq_le(a: int, b: int) -> bool:
    return a == b or seq_lt(a, b)


class TcpError(RuntimeError):
    pass


class TcpState(enum.Enum):
    LISTEN = "Listen"
    SYN_SENT = "SynSent"
    SYN_RECEIVED = "SynReceived"
    ESTABLISHED = "Established"
    FIN_WAIT_1 = "FinWait1"
    FIN_WAIT_2 = "FinWait2"
    CLOSING = "Closing"
    CLOSE_WAIT = "CloseWait"
    LAST_ACK = "LastAck"
    TIME_WAIT = "TimeWait"
    CLOSED = "Closed"


class Verdict(enum.Enum):
    ACCEPTED = "Accepted"
    DUPLICATE_DISCARDED = "DuplicateDiscarded"
    OUT_OF_WINDOW_DISCARDED = "OutOfWindowDiscarded"
    CONNECTION_CLOSED = "ConnectionClosed"


class CloseReason(enum.Enum):
    NORMAL = "Normal"
    RESET = "Reset"
    TIMEOUT = "Timeout"


@dataclass(frozen=True)
class FourTuple:
    local_ip: str
    local_port: int
    remote_ip: str
    remote_port: int

    def reversed(self) -> "FourTuple":
        return FourTuple(self.remote_ip, self.remote_port, self.local_ip, self.local_port)


@dataclass(frozen=True)
class SegmentEvent:
    time: SimTime
    tuple: FourTuple
    seq: int
    length: int
    flags: TcpFlags
    verdict: Verdict


@dataclass
class TcpConfig:
    idle_timeout: SimTime = seconds(30)
    rto: SimTime = seconds(1)
    max_retries: int = 3
    time_wait: SimTime = seconds(2)
    trim_overlap: bool = False
    ttl: int = 64


class TcpApp:
    """Callbacks a connection makes into its application.  All optional."""

    def on_established(self, conn: "TcpConnection") -> None:
        pass

    def on_data(self, conn: "TcpConnection", data: bytes) -> None:
        pass

    def on_peer_fin(self, conn: "TcpConnection") -> None:
        pass

    def on_closed(self, conn: "TcpConnection", reason: CloseReason) -> None:
        pass


@dataclass
class _Unacked:
    seq: int
    flags: TcpFlags
    payload: bytes

    @property
    def end(self) -> int:
        n = len(self.payload) + bool(self.flags & TcpFlags.SYN) + bool(self.flags & TcpFlags.FIN)
        return (self.seq + n) % MOD


@dataclass
class TcpConnection:
    host: "TcpHost"
    tuple: FourTuple
    app: TcpApp
    state: TcpState = TcpState.CLOSED
    iss: int = 0
    snd_una: int = 0
    snd_nxt: int = 0
    rcv_nxt: int = 0
    last_ack_sent: int = 0
    fin_seen: bool = False
    close_reason: CloseReason | None = None
    retransmit_queue: list[_Unacked] = field(default_factory=list)
    retries: int = 0
    _rto_timer: SimEvent | None = None
    _idle_timer: SimEvent | None = None
    _tw_timer: SimEvent | None = None

    @property
    def sim(self):
        return self.host.sim

    @property
    def config(self) -> TcpConfig:
        return self.host.tcp_config

    # -- sending -------------------------------------------------------
    def _emit(self, flags: TcpFlags, payload: bytes = b"", seq: int | None = None) -> None:
        if flags & TcpFlags.ACK:
            self.last_ack_sent = self.rcv_nxt
        self.host.transmit_segment(self.tuple, self.snd_nxt if seq is None else seq,
                                   self.rcv_nxt, flags, payload)

    def send(self, payload: bytes, flags: TcpFlags = TcpFlags.PSH | TcpFlags.ACK) -> None:
        """Emit ``payload`` at ``snd_nxt``; ``FIN`` in ``flags`` also closes our side."""
        if self.state not in (TcpState.ESTABLISHED, TcpState.CLOSE_WAIT):
            raise TcpError(f"send in state {self.state.value}")
        flags |= TcpFlags.ACK
        chunks = [payload[i:i + MSS] for i in range(0, len(payload), MSS)] or [b""]
        for i, chunk in enumerate(chunks):
            f = flags if i == len(chunks) - 1 else (flags & ~TcpFlags.FIN)
            if not chunk and not f & TcpFlags.FIN:
                self._emit(TcpFlags.ACK)
                continue
            seg = _Unacked(self.snd_nxt, f, chunk)
            self._emit(f, chunk)
            self.snd_nxt = seg.end
            self.retransmit_queue.append(seg)
        if flags & TcpFlags.FIN:
            self.state = (TcpState.FIN_WAIT_1 if self.state is TcpState.ESTABLISHED
                          else TcpState.LAST_ACK)
        self._arm_rto()
        self._touch()

    def close(self) -> None:
        if self.state in (TcpState.ESTABLISHED, TcpState.CLOSE_WAIT):
            self.send(b"", TcpFlags.FIN | TcpFlags.ACK)
        elif self.state in (TcpState.SYN_SENT, TcpState.SYN_RECEIVED):
            self._finish(CloseReason.NORMAL)
        # already closing or closed: idempotent

    def abort(self, reason: CloseReason = CloseReason.RESET, send_rst: bool = True) -> None:
        if self.state is TcpState.CLOSED:
            return
        if send_rst:
            self._emit(TcpFlags.RST | TcpFlags.ACK)
        self._finish(reason)

    # -- timers --------------------------------------------------------
    def _touch(self) -> None:
        self.sim.cancel(self._idle_timer)
        if self.state is not TcpState.CLOSED:
            self._idle_timer = self.sim.call_later(self.config.idle_timeout, self._on_idle)

    def _on_idle(self) -> None:
        self._idle_timer = None
        self._finish(CloseReason.TIMEOUT)

    def _arm_rto(self) -> None:
        if self.retransmit_queue and self._rto_timer is None:
            self._rto_timer = self.sim.call_later(self.config.rto, self._on_rto)

    def _on_rto(self) -> None:
        self._rto_timer = None
        if not self.retransmit_queue or self.state is TcpState.CLOSED:
            return
        self.retries += 1
        if self.retries > self.config.max_retries:
            self._finish(CloseReason.TIMEOUT)
            return
        head = self.retransmit_queue[0]
        self._emit(head.flags, head.payload, seq=head.seq)
        self._arm_rto()

    def _finish(self, reason: CloseReason) -> None:
        if self.state is TcpState.CLOSED:
            return
        self.state = TcpState.CLOSED
        self.close_reason = reason
        for t in (self._rto_timer, self._idle_timer, self._tw_timer):
            self.sim.cancel(t)
        self.retransmit_queue.clear()
        self.host.forget(self)
        self.app.on_closed(self, reason)

    # -- receiving -----------------------------------------------------
    def _process_ack(self, ack: int) -> None:
        if not (seq_lt(self.snd_una, ack) and seq_le(ack, self.snd_nxt)):
            return
        self.snd_una = ack
        self.retransmit_queue = [s for s in self.retransmit_queue if seq_lt(ack, s.end)]
        self.retries = 0
        self.sim.cancel(self._rto_timer)
        self._rto_timer = None
        self._arm_rto()
        fin_acked = self.snd_una == self.snd_nxt
        if fin_acked:
            if self.state is TcpState.FIN_WAIT_1:
                self.state = TcpState.FIN_WAIT_2
            elif self.state is TcpState.CLOSING:
                self._enter_time_wait()
            elif self.state is TcpState.LAST_ACK:
                self._finish(CloseReason.NORMAL)

    def _enter_time_wait(self) -> None:
        self.state = TcpState.TIME_WAIT
        self.sim.cancel(self._idle_timer)
        self._tw_timer = self.sim.call_later(self.config.time_wait,
                                             lambda: self._finish(CloseReason.NORMAL))

    def on_segment(self, pkt: WirePacket) -> Verdict:
        tcp = pkt.tcp
        flags = tcp.flags
        if flags & TcpFlags.RST:
            self._finish(CloseReason.RESET)
            return Verdict.CONNECTION_CLOSED
        self._touch()

        if self.state is TcpState.SYN_SENT:
            if flags & TcpFlags.SYN and flags & TcpFlags.ACK and tcp.ack == self.snd_nxt:
                self.rcv_nxt = (tcp.seq + 1) % MOD
                self.snd_una = tcp.ack
                self.retransmit_queue.clear()
                self.state = TcpState.ESTABLISHED
                self._emit(TcpFlags.ACK)
                self.app.on_established(self)
                return Verdict.ACCEPTED
            return Verdict.OUT_OF_WINDOW_DISCARDED

        if flags & TcpFlags.SYN:
            # retransmitted SYN or SYN-ACK: re-acknowledge
            self._emit(TcpFlags.ACK)
            return Verdict.DUPLICATE_DISCARDED

        if flags & TcpFlags.ACK:
            if self.state is TcpState.SYN_RECEIVED and tcp.ack == self.snd_nxt:
                self.snd_una = tcp.ack
                self.retransmit_queue.clear()
                self.state = TcpState.ESTABLISHED
                self.app.on_established(self)
            else:
                self._process_ack(tcp.ack)
            if self.state is TcpState.CLOSED:
                return Verdict.ACCEPTED

        seq = tcp.seq
        payload = pkt.payload
        has_fin = bool(flags & TcpFlags.FIN)
        seg_len = len(payload) + has_fin
        if seg_len == 0:
            return Verdict.ACCEPTED
        end = (seq + seg_len) % MOD

        if seq != self.rcv_nxt:
            if seq_lt(seq, self.rcv_nxt):
                if seq_le(end, self.rcv_nxt):
                    self._emit(TcpFlags.ACK)
                    return Verdict.DUPLICATE_DISCARDED
                if not self.config.trim_overlap:
                    self._emit(TcpFlags.ACK)
                    return Verdict.OUT_OF_WINDOW_DISCARDED
                cut = (self.rcv_nxt - seq) % MOD
                payload = payload[cut:]
                seq = self.rcv_nxt
            else:
                self._emit(TcpFlags.ACK)
                return Verdict.OUT_OF_WINDOW_DISCARDED

        if self.fin_seen:
            # bytes beyond the peer's FIN: the stream no longer accepts data
            self.abort(CloseReason.RESET)
            return Verdict.CONNECTION_CLOSED

        self.rcv_nxt = (self.rcv_nxt + len(payload)) % MOD
        if has_fin:
            self.rcv_nxt = (self.rcv_nxt + 1) % MOD
            self.fin_seen = True
            if self.state is TcpState.ESTABLISHED:
                self.state = TcpState.CLOSE_WAIT
            elif self.state is TcpState.FIN_WAIT_1:
                self.state = TcpState.CLOSING
            elif self.state is TcpState.FIN_WAIT_2:
                self._enter_time_wait()
        if payload:
            self.app.on_data(self, payload)
        if has_fin and self.state is not TcpState.CLOSED:
            self.app.on_peer_fin(self)
        if self.state is not TcpState.CLOSED and self.last_ack_sent != self.rcv_nxt:
            self._emit(TcpFlags.ACK)
        return Verdict.ACCEPTED


class TcpHost(Node):
    """A node with a TCP stack.  Neighbors are resolved through a static table."""

    def __init__(self, profile: HostProfile, tcp_config: TcpConfig | None = None):
        super().__init__(profile)
        self.tcp_config = tcp_config or TcpConfig()
        self.listeners: dict[int, Callable[[], TcpApp]] = {}
        self.connections: dict[FourTuple, TcpConnection] = {}
        self.neighbors: dict[str, str] = {}
        self.segment_log: list[SegmentEvent] = []
        self.closed: list[TcpConnection] = []
        self._ephemeral = 49152

    def attached(self, sim) -> None:
        super().attached(sim)
        self.ip_id = self.rng.getrandbits(16)

    @property
    def ip(self) -> str:
        return self.profile.ip

    def next_ip_id(self) -> int:
        self.ip_id = (self.ip_id + 1) & 0xFFFF
        return self.ip_id

    def transmit_segment(self, tup: FourTuple, seq: int, ack: int, flags: TcpFlags,
                         payload: bytes = b"") -> None:
        pkt = make_packet(self.profile.mac, self.neighbors[tup.remote_ip], tup.local_ip,
                          tup.remote_ip, tup.local_port, tup.remote_port, seq, ack, flags,
                          payload, ip_id=self.next_ip_id(), ttl=self.tcp_config.ttl)
        self.send_frame(encode(pkt))

    def listen(self, port: int, app_factory: Callable[[], TcpApp]) -> None:
        self.listeners[port] = app_factory

    def connect(self, remote_ip: str, remote_port: int, app: TcpApp) -> TcpConnection:
        self._ephemeral += 1
        tup = FourTuple(self.ip, self._ephemeral, remote_ip, remote_port)
        if tup in self.connections:
            raise TcpError(f"tuple {tup} already in use")
        conn = TcpConnection(self, tup, app, TcpState.SYN_SENT)
        conn.iss = self.rng.getrandbits(32)
        conn.snd_una = conn.iss
        self.connections[tup] = conn
        conn._emit(TcpFlags.SYN, seq=conn.iss)
        conn.snd_nxt = (conn.iss + 1) % MOD
        conn.retransmit_queue.append(_Unacked(conn.iss, TcpFlags.SYN, b""))
        conn._arm_rto()
        conn._touch()
        return conn

    def forget(self, conn: TcpConnection) -> None:
        if self.connections.get(conn.tuple) is conn:
            del self.connections[conn.tuple]
            self.closed.append(conn)

    def receive(self, frame: bytes, iface: str) -> None:
        try:
            pkt = decode(frame)
        except WireError:
            return
        if pkt.eth.dst_mac != mac_bytes(self.profile.mac) or ip_str(pkt.ip.dst_ip) != self.ip:
            return
        if not (pkt.ip_checksum_ok and pkt.tcp_checksum_ok):
            return
        self.on_packet(pkt)

    def on_packet(self, pkt: WirePacket) -> None:
        tcp = pkt.tcp
        tup = FourTuple(self.ip, tcp.dst_port, ip_str(pkt.ip.src_ip), tcp.src_port)
        conn = self.connections.get(tup)
        if conn is not None:
            verdict = conn.on_segment(pkt)
        elif tcp.flags & TcpFlags.SYN and not tcp.flags & TcpFlags.ACK and tcp.dst_port in self.listeners:
            conn = TcpConnection(self, tup, self.listeners[tcp.dst_port](), TcpState.SYN_RECEIVED)
            conn.iss = self.rng.getrandbits(32)
            conn.snd_una = conn.iss
            conn.rcv_nxt = (tcp.seq + 1) % MOD
            self.connections[tup] = conn
            conn._emit(TcpFlags.SYN | TcpFlags.ACK, seq=conn.iss)
            conn.snd_nxt = (conn.iss + 1) % MOD
            conn.retransmit_queue.append(_Unacked(conn.iss, TcpFlags.SYN | TcpFlags.ACK, b""))
            conn._arm_rto()
            conn._touch()
            verdict = Verdict.ACCEPTED
        else:
            if not tcp.flags & TcpFlags.RST:
                self._reset_for(pkt, tup)
            verdict = Verdict.CONNECTION_CLOSED
        self.segment_log.append(SegmentEvent(self.sim.now, tup, tcp.seq, pkt.seq_len,
                                             tcp.flags, verdict))

    def _reset_for(self, pkt: WirePacket, tup: FourTuple) -> None:
        tcp = pkt.tcp
        if tcp.flags & TcpFlags.ACK:
            self.transmit_segment(tup, tcp.ack, 0, TcpFlags.RST)
        else:
            self.transmit_segment(tup, 0, tcp.seq + pkt.seq_len, TcpFlags.RST | TcpFlags.ACK)
