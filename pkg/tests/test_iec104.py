import random

import pytest

from motsim import iec104
from motsim.iec104 import (Apdu, Asdu, Cot, Format, InformationObject, Iec104Error,
                           Iec104Session, TypeId, UFunction, decode_apdu, encode_apdu,
                           gi_command, pack_apdus, preset_points, split_apdus)

# byte vectors worked out by hand from the frame layout
VECTORS = [
    (Apdu.u(UFunction.STARTDT_ACT), "68 04 07 00 00 00"),
    (Apdu.u(UFunction.STARTDT_CON), "68 04 0b 00 00 00"),
    (Apdu.u(UFunction.STOPDT_ACT), "68 04 13 00 00 00"),
    (Apdu.u(UFunction.STOPDT_CON), "68 04 23 00 00 00"),
    (Apdu.u(UFunction.TESTFR_ACT), "68 04 43 00 00 00"),
    (Apdu.u(UFunction.TESTFR_CON), "68 04 83 00 00 00"),
    (Apdu.s(4), "68 04 01 00 08 00"),
    (Apdu.s(300), "68 04 01 00 58 02"),
    (Apdu.i(0, 0, gi_command(1)), "68 0e 00 00 00 00 64 01 06 00 01 00 00 00 00 14"),
    (Apdu.i(1, 2, gi_command(1, Cot.ACTTERM)), "68 0e 02 00 04 00 64 01 0a 00 01 00 00 00 00 14"),
    (Apdu.i(3, 1, Asdu(TypeId.M_ST_NA_1, Cot.INROGEN, 1, (InformationObject(3000, -20),))),
     "68 0f 06 00 02 00 05 01 14 00 01 00 b8 0b 00 6c 00"),
    (Apdu.i(0, 0, Asdu(TypeId.M_SP_NA_1, Cot.SPONT, 7, (InformationObject(1, True),))),
     "68 0e 00 00 00 00 01 01 03 00 07 00 01 00 00 01"),
]


@pytest.mark.parametrize("apdu, hexstr", VECTORS)
def test_known_vectors(apdu, hexstr):
    raw = bytes.fromhex(hexstr)
    assert encode_apdu(apdu) == raw
    assert decode_apdu(raw) == apdu


def test_gi_is_sixteen_octets():
    assert len(encode_apdu(Apdu.i(0, 0, gi_command()))) == 16


def random_apdu(rng: random.Random) -> Apdu:
    fmt = rng.choice("IUS")
    if fmt == "U":
        return Apdu.u(rng.choice(list(UFunction)))
    if fmt == "S":
        return Apdu.s(rng.randrange(iec104.SEQ_MOD))
    t = rng.choice(list(TypeId))
    cot = rng.choice(list(Cot))
    ca = rng.randrange(65536)
    if t == TypeId.C_IC_NA_1:
        objs = (InformationObject(0, rng.randrange(256)),)
    else:
        n = rng.randrange(1, 20)
        ioas = rng.sample(range(1 << 24), n)
        if t == TypeId.M_SP_NA_1:
            objs = tuple(InformationObject(i, rng.random() < .5, rng.choice((0, 0x10, 0x80)))
                         for i in ioas)
        elif t == TypeId.M_DP_NA_1:
            objs = tuple(InformationObject(i, rng.randrange(4), rng.choice((0, 0x40)))
                         for i in ioas)
        else:
            objs = tuple(InformationObject(i, rng.randrange(-64, 64), rng.choice((0, 1, 0x80)),
                                           rng.random() < .3) for i in ioas)
    asdu = Asdu(t, cot, ca, objs, rng.randrange(256), rng.random() < .1, rng.random() < .1)
    return Apdu.i(rng.randrange(iec104.SEQ_MOD), rng.randrange(iec104.SEQ_MOD), asdu)


def test_thousand_random_apdus_roundtrip():
    rng = random.Random(60870)
    apdus = [random_apdu(rng) for _ in range(1000)]
    for a in apdus:
        raw = encode_apdu(a)
        assert decode_apdu(raw) == a
        assert encode_apdu(decode_apdu(raw)) == raw
    packed = pack_apdus(apdus[:50])
    assert split_apdus(packed) == apdus[:50]


def test_unknown_type_kept_opaque():
    raw = bytes.fromhex("68 0d 00 00 00 00 2d 01 06 00 01 00 aa bb cc dd")[:2 + 0x0d]
    a = decode_apdu(raw)
    assert not a.asdu.known and a.asdu.raw == bytes.fromhex("aa bb cc")
    assert encode_apdu(a) == raw


@pytest.mark.parametrize("raw", [
    "67 04 07 00 00 00",           # bad start octet
    "68 06 07 00 00 00",           # length overrun
    "68 02 07 00",                 # short APCI
    "68 05 01 00 08 00 ff",        # S-frame with extra octet
    "68 04 ff 00 00 00",           # unknown U function
    "68 0e 00 00 00 00 01 81 03 00 01 00 01 00 00 01",   # SQ=1
    "68 0f 00 00 00 00 01 01 03 00 01 00 01 00 00 01 00",  # length/objects mismatch
])
def test_malformed_rejected(raw):
    with pytest.raises(Iec104Error):
        split_apdus(bytes.fromhex(raw))


def test_range_checks():
    with pytest.raises(Iec104Error):
        encode_apdu(Apdu.i(0, 0, Asdu(TypeId.M_ST_NA_1, 20, 1, (InformationObject(1, 64),))))
    with pytest.raises(Iec104Error):
        InformationObject(1 << 24, 0)


def test_session_acknowledge():
    s = Iec104Session()
    for _ in range(3):
        s.next_i(gi_command())
    assert s.acknowledge(2) and s.outstanding() == 1
    assert not s.acknowledge(5)
    assert s.acknowledge(3) and s.outstanding() == 0


def test_session_sequence_wraps():
    s = Iec104Session(send_seq=iec104.SEQ_MOD - 1)
    a = s.next_i(gi_command())
    b = s.next_i(gi_command())
    assert (a.ns, b.ns) == (iec104.SEQ_MOD - 1, 0)
    assert s.acknowledge(1)


def test_preset_points_segment_size():
    from motsim.iec104 import Iec104Outstation
    out = Iec104Outstation(None, preset_points(), 0)
    asdus = out.interrogation_asdus(1)
    payload = pack_apdus([Apdu.i(k + 1, 1, a) for k, a in enumerate(asdus)])
    assert len(payload) == 388
    assert [a.type_id for a in asdus] == [1, 3, 5, 100]


def test_master_outstation_interrogation():
    from motsim.experiments import run_experiment
    r = run_experiment("baseline-iec104", seed=5)
    assert r.hmi.point_values() == preset_points().values()
    assert r.hmi.s_frames == [5]
    assert r.hmi.protocol_errors == [] and r.plc.sequence_errors == []
    assert [e[2].format for e in r.plc.log if e[1] == "tx"][:1] == [Format.U]


def test_master_requires_startdt():
    from motsim.iec104 import Iec104Master
    m = Iec104Master(None)
    with pytest.raises(Iec104Error):
        m.master_send_gi()
