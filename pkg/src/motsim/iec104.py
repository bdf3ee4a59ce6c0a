"""IEC 60870-5-104 codec plus the master and outstation used for interrogation.

Wire layout::

    0x68 | length | ctrl1 ctrl2 ctrl3 ctrl4 | ASDU (I-format only)

I-format carries N(S) in ctrl1/ctrl2 and N(R) in ctrl3/ctrl4, both shifted
left by one bit.  S-format is ``01 00`` followed by N(R).  U-format sets the
two low bits of ctrl1 and a single function bit above them.

The ASDU uses the 104 profile: one-octet type and variable structure
qualifier, two-octet cause of transmission (cause + originator), two-octet
common address, three-octet information object address.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from .simnet import SimEvent, SimTime, seconds
from .tcpstack import CloseReason, TcpApp, TcpConnection, TcpError

START = 0x68
SEQ_MOD = 1 << 15
IEC104_PORT = 2404
QOI_STATION = 20


class Iec104Error(ValueError):
    pass


class Format(enum.Enum):
    I = "I"
    S = "S"
    U = "U"


class UFunction(enum.IntEnum):
    STARTDT_ACT = 0x07
    STARTDT_CON = 0x0B
    STOPDT_ACT = 0x13
    STOPDT_CON = 0x23
    TESTFR_ACT = 0x43
    TESTFR_CON = 0x83


class TypeId(enum.IntEnum):
    M_SP_NA_1 = 1
    M_DP_NA_1 = 3
    M_ST_NA_1 = 5
    C_IC_NA_1 = 100


class Cot(enum.IntEnum):
    SPONT = 3
    ACT = 6
    ACTCON = 7
    ACTTERM = 10
    INROGEN = 20


@dataclass(frozen=True)
class InformationObject:
    ioa: int
    value: int | bool
    quality: int = 0
    transient: bool = False

    def __post_init__(self):
        if not 0 <= self.ioa < 1 << 24:
            raise Iec104Error(f"IOA {self.ioa} out of range")


@dataclass(frozen=True)
class Asdu:
    type_id: int
    cot: int
    common_address: int = 1
    objects: tuple[InformationObject, ...] = ()
    originator: int = 0
    negative: bool = False
    test: bool = False
    raw: bytes = b""  # element bytes for unknown type ids
    opaque_count: int = 0  # object count of an unknown type id

    @property
    def known(self) -> bool:
        return self.type_id in TypeId._value2member_map_


@dataclass(frozen=True)
class Apdu:
    format: Format
    ns: int = 0
    nr: int = 0
    u_function: UFunction | None = None
    asdu: Asdu | None = None

    @classmethod
    def i(cls, ns: int, nr: int, asdu: Asdu) -> "Apdu":
        return cls(Format.I, ns % SEQ_MOD, nr % SEQ_MOD, None, asdu)

    @classmethod
    def s(cls, nr: int) -> "Apdu":
        return cls(Format.S, 0, nr % SEQ_MOD)

    @classmethod
    def u(cls, function: UFunction) -> "Apdu":
        return cls(Format.U, u_function=function)

    def describe(self) -> str:
        if self.format is Format.U:
            name = self.u_function.name.replace("_", " ").lower()
            return f"U {name}"
        if self.format is Format.S:
            return f"S N(R)={self.nr}"
        a = self.asdu
        tname = TypeId(a.type_id).name if a.known else f"type{a.type_id}"
        cname = Cot(a.cot).name if a.cot in Cot._value2member_map_ else str(a.cot)
        return f"I {tname} {cname} N(S)={self.ns} N(R)={self.nr}"


# -- element codecs ----------------------------------------------------------

def _encode_element(type_id: int, obj: InformationObject) -> bytes:
    if type_id == TypeId.M_SP_NA_1:
        return bytes([(obj.quality & 0xF0) | int(bool(obj.value))])
    if type_id == TypeId.M_DP_NA_1:
        if not 0 <= int(obj.value) <= 3:
            raise Iec104Error(f"double point value {obj.value} out of range")
        return bytes([(obj.quality & 0xF0) | int(obj.value)])
    if type_id == TypeId.M_ST_NA_1:
        v = int(obj.value)
        if not -64 <= v <= 63:
            raise Iec104Error(f"step position {v} out of range -64..63")
        return bytes([(v & 0x7F) | (0x80 if obj.transient else 0), obj.quality & 0xF1])
    if type_id == TypeId.C_IC_NA_1:
        return bytes([int(obj.value) & 0xFF])
    raise Iec104Error(f"cannot encode type id {type_id}")


_ELEMENT_LEN = {TypeId.M_SP_NA_1: 1, TypeId.M_DP_NA_1: 1, TypeId.M_ST_NA_1: 2,
                TypeId.C_IC_NA_1: 1}


def _decode_element(type_id: int, ioa: int, data: bytes) -> InformationObject:
    if type_id == TypeId.M_SP_NA_1:
        return InformationObject(ioa, bool(data[0] & 1), data[0] & 0xF0)
    if type_id == TypeId.M_DP_NA_1:
        return InformationObject(ioa, data[0] & 3, data[0] & 0xF0)
    if type_id == TypeId.M_ST_NA_1:
        v = data[0] & 0x7F
        if v & 0x40:
            v -= 0x80
        return InformationObject(ioa, v, data[1], bool(data[0] & 0x80))
    return InformationObject(ioa, data[0])


def encode_asdu(asdu: Asdu) -> bytes:
    if len(asdu.objects) > 127:
        raise Iec104Error("at most 127 objects per ASDU")
    cot = (asdu.cot & 0x3F) | (0x40 if asdu.negative else 0) | (0x80 if asdu.test else 0)
    count = len(asdu.objects) if asdu.known else asdu.opaque_count
    out = struct.pack("<BBBBH", asdu.type_id, count, cot, asdu.originator,
                      asdu.common_address)
    if not asdu.known:
        return out + asdu.raw
    for obj in asdu.objects:
        out += obj.ioa.to_bytes(3, "little") + _encode_element(asdu.type_id, obj)
    return out


def decode_asdu(data: bytes) -> Asdu:
    if len(data) < 6:
        raise Iec104Error("ASDU shorter than its data unit identifier")
    type_id, vsq, cot, orig, ca = struct.unpack_from("<BBBBH", data)
    if vsq & 0x80:
        raise Iec104Error("SQ=1 addressing is not supported")
    count = vsq & 0x7F
    head = dict(type_id=type_id, cot=cot & 0x3F, common_address=ca, originator=orig,
                negative=bool(cot & 0x40), test=bool(cot & 0x80))
    if type_id not in _ELEMENT_LEN:
        return Asdu(**head, raw=bytes(data[6:]), opaque_count=count)
    size = 3 + _ELEMENT_LEN[type_id]
    if len(data) != 6 + count * size:
        raise Iec104Error(f"ASDU length {len(data)} does not match {count} objects")
    objects = []
    for k in range(count):
        off = 6 + k * size
        ioa = int.from_bytes(data[off:off + 3], "little")
        objects.append(_decode_element(type_id, ioa, data[off + 3:off + size]))
    return Asdu(**head, objects=tuple(objects))


def encode_apdu(apdu: Apdu) -> bytes:
    if apdu.format is Format.I:
        if apdu.asdu is None:
            raise Iec104Error("I-format APDU needs an ASDU")
        ctrl = struct.pack("<HH", (apdu.ns % SEQ_MOD) << 1, (apdu.nr % SEQ_MOD) << 1)
        body = ctrl + encode_asdu(apdu.asdu)
    elif apdu.format is Format.S:
        body = struct.pack("<HH", 0x0001, (apdu.nr % SEQ_MOD) << 1)
    else:
        body = bytes([int(apdu.u_function), 0, 0, 0])
    if len(body) > 253:
        raise Iec104Error("APDU longer than 255 octets")
    return bytes([START, len(body)]) + body


def decode_apdu(data: bytes) -> Apdu:
    apdus = split_apdus(data)
    if len(apdus) != 1:
        raise Iec104Error(f"expected one APDU, found {len(apdus)}")
    return apdus[0]


def _decode_one(body: bytes) -> Apdu:
    if len(body) < 4:
        raise Iec104Error("APCI shorter than four control octets")
    c1 = body[0]
    if c1 & 1 == 0:
        ns, nr = struct.unpack_from("<HH", body)
        return Apdu(Format.I, ns >> 1, nr >> 1, None, decode_asdu(body[4:]))
    if c1 & 3 == 1:
        if len(body) != 4:
            raise Iec104Error("S-format APDU carries extra octets")
        return Apdu(Format.S, 0, struct.unpack_from("<H", body, 2)[0] >> 1)
    if len(body) != 4:
        raise Iec104Error("U-format APDU carries extra octets")
    try:
        return Apdu(Format.U, u_function=UFunction(c1))
    except ValueError:
        raise Iec104Error(f"unknown U-format function 0x{c1:02x}") from None


def split_apdus(payload: bytes) -> list[Apdu]:
    """Split back-to-back APDUs on start-octet/length boundaries."""
    out, i = [], 0
    while i < len(payload):
        if payload[i] != START:
            raise Iec104Error(f"bad start octet 0x{payload[i]:02x} at offset {i}")
        if i + 1 >= len(payload):
            raise Iec104Error("truncated APCI")
        length = payload[i + 1]
        end = i + 2 + length
        if end > len(payload):
            raise Iec104Error("APDU length overruns payload")
        out.append(_decode_one(payload[i + 2:end]))
        i = end
    return out


def pack_apdus(apdus: list[Apdu]) -> bytes:
    return b"".join(encode_apdu(a) for a in apdus)


# -- sessions ----------------------------------------------------------------

@dataclass
class Iec104Config:
    k: int = 12
    w: int = 8
    t1: SimTime = seconds(15)
    t2: SimTime = seconds(10)
    t3: SimTime = seconds(20)
    keepalive: bool = False
    common_address: int = 1


@dataclass
class PointConfig:
    single_points: dict[int, bool] = field(default_factory=dict)
    double_points: dict[int, int] = field(default_factory=dict)
    step_positions: dict[int, int] = field(default_factory=dict)

    def values(self) -> dict[int, int | bool]:
        return {**self.single_points, **self.double_points, **self.step_positions}


def preset_points() -> PointConfig:
    """Point table of the interrogation lab.

    Sized so the outstation's interrogation data segment is 388 octets,
    against 66 octets for a four-APDU forged burst.
    """
    sp = {1000 + i: bool(i % 3 == 0) for i in range(48)}
    dp = {2000 + i: (1, 2)[i % 2] for i in range(16)}
    st = {3000 + i: (i * 5) % 60 - 20 for i in range(16)}
    return PointConfig(sp, dp, st)


@dataclass
class PointValue:
    value: int | bool
    quality: int
    type_id: int
    updated_at: SimTime


@dataclass
class Iec104Session:
    send_seq: int = 0
    recv_seq: int = 0
    unacked: list[tuple[int, Apdu]] = field(default_factory=list)
    startdt_confirmed: bool = False
    received_since_ack: int = 0

    def next_i(self, asdu: Asdu) -> Apdu:
        apdu = Apdu.i(self.send_seq, self.recv_seq, asdu)
        self.unacked.append((self.send_seq, apdu))
        self.send_seq = (self.send_seq + 1) % SEQ_MOD
        self.received_since_ack = 0
        return apdu

    def outstanding(self) -> int:
        return len(self.unacked)

    def acknowledge(self, nr: int) -> bool:
        """Drain frames covered by ``nr``; False if it acknowledges unsent frames."""
        ahead = (self.send_seq - nr) % SEQ_MOD
        if ahead > len(self.unacked):
            return False
        self.unacked = self.unacked[len(self.unacked) - ahead:]
        return True


def gi_command(common_address: int = 1, cot: int = Cot.ACT) -> Asdu:
    return Asdu(TypeId.C_IC_NA_1, cot, common_address,
                (InformationObject(0, QOI_STATION),))


class Iec104Master(TcpApp):
    """Controlling station (HMI).

    Received data frames are applied without any authenticity check, and the
    receive counter follows the N(S) carried by each I-frame: a forged frame
    is indistinguishable from a genuine one at this layer.
    """

    def __init__(self, sim, config: Iec104Config | None = None, auto_gi: bool = True):
        self.sim = sim
        self.config = config or Iec104Config()
        self.auto_gi = auto_gi
        self.session = Iec104Session()
        self.point_table: dict[int, PointValue] = {}
        self.conn: TcpConnection | None = None
        self.buffer = b""
        self.gi_state: str | None = None
        self.protocol_errors: list[str] = []
        self.s_frames: list[int] = []
        self.log: list[tuple[SimTime, str, Apdu]] = []
        self.closed_reason: CloseReason | None = None
        self._t1: SimEvent | None = None
        self._t2: SimEvent | None = None
        self._t3: SimEvent | None = None

    def _send(self, apdus: list[Apdu]) -> None:
        for a in apdus:
            self.log.append((self.sim.now, "tx", a))
        self.conn.send(pack_apdus(apdus))

    def on_established(self, conn):
        self.conn = conn
        self.master_start()

    def master_start(self) -> None:
        self._send([Apdu.u(UFunction.STARTDT_ACT)])
        self._t1 = self.sim.call_later(self.config.t1, self._startdt_timeout)

    def _startdt_timeout(self) -> None:
        self._t1 = None
        if not self.session.startdt_confirmed:
            self.protocol_errors.append("STARTDT con timeout")
            self.conn.abort(CloseReason.TIMEOUT)

    def master_send_gi(self, common_address: int | None = None) -> Apdu:
        if not self.session.startdt_confirmed:
            raise Iec104Error("STARTDT not confirmed")
        if self.gi_state is not None:
            raise Iec104Error("interrogation already in progress")
        ca = self.config.common_address if common_address is None else common_address
        apdu = self.session.next_i(gi_command(ca))
        self.gi_state = "sent"
        self._send([apdu])
        return apdu

    def send_s_frame(self) -> None:
        self.session.received_since_ack = 0
        self.sim.cancel(self._t2)
        self._t2 = None
        self.s_frames.append(self.session.recv_seq)
        self._send([Apdu.s(self.session.recv_seq)])

    def on_data(self, conn, data):
        self.buffer += data
        try:
            apdus = split_apdus(self.buffer)
        except Iec104Error as exc:
            self.protocol_errors.append(str(exc))
            self.buffer = b""
            return
        self.buffer = b""
        for apdu in apdus:
            self.master_on_apdu(apdu)
        self._arm_keepalive()

    def master_on_apdu(self, apdu: Apdu) -> None:
        self.log.append((self.sim.now, "rx", apdu))
        s = self.session
        if apdu.format is Format.U:
            if apdu.u_function is UFunction.STARTDT_CON:
                s.startdt_confirmed = True
                self.sim.cancel(self._t1)
                self._t1 = None
                if self.auto_gi:
                    self.master_send_gi()
            elif apdu.u_function is UFunction.TESTFR_ACT:
                self._send([Apdu.u(UFunction.TESTFR_CON)])
            elif apdu.u_function is UFunction.TESTFR_CON:
                self.sim.cancel(self._t1)
                self._t1 = None
            return
        s.acknowledge(apdu.nr)
        if apdu.format is Format.S:
            return
        if not s.startdt_confirmed:
            self.protocol_errors.append("I-frame before STARTDT con")
            return
        s.recv_seq = (apdu.ns + 1) % SEQ_MOD
        s.received_since_ack += 1
        asdu = apdu.asdu
        if asdu.type_id == TypeId.C_IC_NA_1:
            if asdu.cot == Cot.ACTCON:
                self.gi_state = "confirmed"
            elif asdu.cot == Cot.ACTTERM:
                self.gi_state = None
                self.send_s_frame()
                return
        elif asdu.known:
            for obj in asdu.objects:
                self.point_table[obj.ioa] = PointValue(obj.value, obj.quality,
                                                       asdu.type_id, self.sim.now)
        if s.received_since_ack >= self.config.w:
            self.send_s_frame()
        elif self._t2 is None:
            self._t2 = self.sim.call_later(self.config.t2, self._on_t2)

    def _on_t2(self) -> None:
        self._t2 = None
        if self.session.received_since_ack and self.conn.state.value != "Closed":
            self.send_s_frame()

    def _arm_keepalive(self) -> None:
        if not self.config.keepalive:
            return
        self.sim.cancel(self._t3)
        self._t3 = self.sim.call_later(self.config.t3, self._on_t3)

    def _on_t3(self) -> None:
        self._t3 = None
        try:
            self._send([Apdu.u(UFunction.TESTFR_ACT)])
        except TcpError:
            return
        self._t1 = self.sim.call_later(self.config.t1, self._testfr_timeout)

    def _testfr_timeout(self) -> None:
        self._t1 = None
        self.conn.abort(CloseReason.TIMEOUT, send_rst=False)

    def on_closed(self, conn, reason):
        self.closed_reason = reason
        for t in (self._t1, self._t2, self._t3):
            self.sim.cancel(t)

    def point_values(self) -> dict[int, int | bool]:
        return {ioa: p.value for ioa, p in self.point_table.items()}


class Iec104Outstation(TcpApp):
    """Controlled station (PLC) answering station interrogation.

    U-format requests are answered at once.  An interrogation is answered
    with ActCon after the host's processing delay, then after a second delay
    with one TCP segment packing single points, double points, step
    positions and ActTerm.

    A peer N(R) that acknowledges frames never sent is a sequence error.  In
    ``"stall"`` mode the station stops serving the connection, probes it with
    ``resync_attempts`` TESTFR act frames and then goes silent, leaving the
    TCP idle timer to drop it; ``"abort"`` resets the connection instead.
    """

    def __init__(self, sim, points: PointConfig, processing_delay: SimTime,
                 config: Iec104Config | None = None, on_sequence_error: str = "stall",
                 resync_attempts: int = 6, resync_interval: SimTime = seconds(1)):
        self.sim = sim
        self.points = points
        self.delay = processing_delay
        self.config = config or Iec104Config()
        self.on_sequence_error = on_sequence_error
        self.resync_attempts = resync_attempts
        self.resync_interval = resync_interval
        self.session = Iec104Session()
        self.conn: TcpConnection | None = None
        self.buffer = b""
        self.desynced = False
        self.sequence_errors: list[str] = []
        self.log: list[tuple[SimTime, str, Apdu]] = []
        self.closed_reason: CloseReason | None = None

    def _send(self, apdus: list[Apdu]) -> None:
        if self.conn is None or self.conn.state.value == "Closed":
            return
        for a in apdus:
            self.log.append((self.sim.now, "tx", a))
        try:
            self.conn.send(pack_apdus(apdus))
        except TcpError:
            pass

    def on_established(self, conn):
        self.conn = conn

    def on_data(self, conn, data):
        self.buffer += data
        try:
            apdus = split_apdus(self.buffer)
        except Iec104Error as exc:
            self._sequence_error(str(exc))
            return
        self.buffer = b""
        for apdu in apdus:
            if self.desynced:
                self.log.append((self.sim.now, "ignored", apdu))
                continue
            self.outstation_on_apdu(apdu)

    def outstation_on_apdu(self, apdu: Apdu) -> None:
        self.log.append((self.sim.now, "rx", apdu))
        s = self.session
        if apdu.format is Format.U:
            reply = {UFunction.STARTDT_ACT: UFunction.STARTDT_CON,
                     UFunction.STOPDT_ACT: UFunction.STOPDT_CON,
                     UFunction.TESTFR_ACT: UFunction.TESTFR_CON}.get(apdu.u_function)
            if apdu.u_function is UFunction.STARTDT_ACT:
                s.startdt_confirmed = True
            if reply is not None:
                self._send([Apdu.u(reply)])
            return
        if not s.acknowledge(apdu.nr):
            self._sequence_error(f"N(R)={apdu.nr} acknowledges unsent frames "
                                 f"(V(S)={s.send_seq})")
            return
        if apdu.format is Format.S:
            return
        if apdu.ns != s.recv_seq:
            self._sequence_error(f"N(S)={apdu.ns} but V(R)={s.recv_seq}")
            return
        s.recv_seq = (s.recv_seq + 1) % SEQ_MOD
        asdu = apdu.asdu
        if asdu.type_id == TypeId.C_IC_NA_1 and asdu.cot == Cot.ACT:
            ca = asdu.common_address
            self.sim.call_later(self.delay, lambda: self._send_actcon(ca), "host-task")

    def _send_actcon(self, ca: int) -> None:
        self._send([self.session.next_i(gi_command(ca, Cot.ACTCON))])
        self.sim.call_later(self.delay, lambda: self._send_data(ca), "host-task")

    def interrogation_asdus(self, ca: int) -> list[Asdu]:
        groups = [(TypeId.M_SP_NA_1, self.points.single_points),
                  (TypeId.M_DP_NA_1, self.points.double_points),
                  (TypeId.M_ST_NA_1, self.points.step_positions)]
        out = []
        for type_id, table in groups:
            if table:
                objs = tuple(InformationObject(ioa, v) for ioa, v in sorted(table.items()))
                out.append(Asdu(type_id, Cot.INROGEN, ca, objs))
        out.append(gi_command(ca, Cot.ACTTERM))
        return out

    def _send_data(self, ca: int) -> None:
        self._send([self.session.next_i(a) for a in self.interrogation_asdus(ca)])

    def _sequence_error(self, why: str) -> None:
        self.sequence_errors.append(why)
        if self.on_sequence_error == "abort":
            if self.conn is not None:
                self.conn.abort(CloseReason.RESET)
            return
        if self.desynced:
            return
        self.desynced = True
        for k in range(1, self.resync_attempts + 1):
            self.sim.call_later(k * self.resync_interval,
                                lambda: self._send([Apdu.u(UFunction.TESTFR_ACT)]),
                                "host-task")

    def on_closed(self, conn, reason):
        self.closed_reason = reason
