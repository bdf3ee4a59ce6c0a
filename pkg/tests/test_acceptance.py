"""Acceptance suite: one PASS/FAIL line per criterion, AC1 to AC9.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance criteria"
section at the end of the output.
"""
import hashlib
import random
import time

import dpkt
import numpy as np

from motsim import capture as cap
from motsim import iec104
from motsim.capture import Annotation
from motsim.cli import main
from motsim.detect import RuleId, analyze
from motsim.experiments import FORGED_PAGE, PRESETS, forged_payloads, run_experiment
from motsim.httpmini import ConnectionOutcome
from motsim.mots import Dist, analytic_win_probability, race_outcome
from motsim.simnet import ms
from motsim.tcpstack import CloseReason, Verdict
from motsim.wire import decode, encode

from oracles import naive_checksum, naive_tcp_checksum
from test_capture import GOLDEN
from test_iec104 import random_apdu
from test_wire import random_packet

HTTP_BUDGET_S = 1.0     # AC1, AC2
IEC_BUDGET_S = 5.0      # AC3, AC4
LEGIT_TO_FORGED = (692, 120)
APDU_TOLERANCE = 17     # octets; one interrogation-sized APDU of framing slack
RACE_TOLERANCE = 0.02
SEED = 7


def timed(preset, **kw):
    t0 = time.perf_counter()
    r = run_experiment(preset, seed=SEED, **kw)
    return r, time.perf_counter() - t0


def test_ac1_exp1_forged_page(verdict):
    r, wall = timed("1")
    view = r.client_view
    (forged_idx,) = r.forged_indices
    forged = r.capture[forged_idx].packet()
    fin = [e for e in r.hosts["Client"].segment_log
           if e.verdict is Verdict.ACCEPTED and e.flags & 1 and e.seq == forged.tcp.seq]
    alerts = analyze(r.capture)
    legit = [rec for rec in r.capture if rec.index > forged_idx
             and (p := rec.packet()) is not None and p.payload
             and p.tcp.src_port == 80 and p.payload.startswith(b"HTTP/1.1 200")]
    flagged = [rec.index for rec in legit
               if Annotation.SPURIOUS_RETRANSMISSION in rec.annotations
               or any(a.rule is RuleId.R2 and a.record_index == rec.index for a in alerts.alerts)]
    ok = (view.rendered_body == FORGED_PAGE
          and view.connection_outcome is ConnectionOutcome.CLOSED_BY_FIN
          and len(fin) == 1 and bool(legit) and flagged == [legit[0].index]
          and wall < HTTP_BUDGET_S)
    verdict("AC1", ok, f"rendered forged page, FIN from record {forged_idx}, "
                       f"legit record {legit[0].index if legit else None} flagged, "
                       f"wall {wall:.3f}s < {HTTP_BUDGET_S}s")


def test_ac2_exp2_redirect(verdict):
    r, wall = timed("2")
    view = r.client_view
    ok = (view.followed_redirects == ["http://attacker.lab/"]
          and [e.target for e in r.server.log] == ["/"] and wall < HTTP_BUDGET_S)
    verdict("AC2", ok, f"redirects={view.followed_redirects} server_log="
                       f"{[e.target for e in r.server.log]} wall {wall:.3f}s")


def test_ac3_exp3_replay(verdict):
    r, wall = timed("3")
    base = run_experiment("baseline-iec104", seed=SEED)
    listing = cap.render_listing(r.capture, overlay=True)
    lines = listing.splitlines()
    order = ["[SYN]", "[SYN,ACK]", "[ACK] Seq=1 Ack=1", "U startdt act", "U startdt con",
             "C_IC_NA_1 ACT ", "C_IC_NA_1 ACTCON", "[FORGED]",
             "[TCP Spurious Retransmission]", "[TCP Dup ACK]"]
    pos = [next((i for i, l in enumerate(lines) if m in l), -1) for m in order]
    in_order = -1 not in pos and pos == sorted(pos) and pos[:3] == [0, 1, 2]
    ok = (in_order and listing == GOLDEN.read_text()
          and r.hmi.point_values() == base.hmi.point_values()
          and r.hmi.closed_reason is CloseReason.TIMEOUT and wall < IEC_BUDGET_S)
    verdict("AC3", ok, f"listing order ok={in_order}, golden match={listing == GOLDEN.read_text()}, "
                       f"stale points={r.hmi.point_values() == base.hmi.point_values()}, "
                       f"close={r.hmi.closed_reason}, wall {wall:.3f}s "
                       f"(simulated {r.report.end_time / 1e6:.1f}s)")


def is_gi_answer(pkt):
    if pkt is None or pkt.tcp.src_port != iec104.IEC104_PORT or not pkt.payload:
        return False
    return any(a.format is iec104.Format.I and a.asdu.cot == iec104.Cot.ACTTERM
               for a in iec104.split_apdus(pkt.payload))


def test_ac4_exp4_crafted(verdict):
    r, wall = timed("4")
    (payload,) = forged_payloads(r)
    apdus = iec104.split_apdus(payload)
    kinds = [(a.asdu.type_id, a.asdu.cot) for a in apdus]
    want = [(iec104.TypeId.C_IC_NA_1, iec104.Cot.ACTCON),
            (iec104.TypeId.M_ST_NA_1, iec104.Cot.INROGEN),
            (iec104.TypeId.M_ST_NA_1, iec104.Cot.INROGEN),
            (iec104.TypeId.C_IC_NA_1, iec104.Cot.ACTTERM)]
    legit = [rec.packet().payload for rec in r.capture
             if rec.index not in r.capture.ground_truth and is_gi_answer(rec.packet())]
    legit_len = len(legit[0]) if legit else 0
    expected = legit_len * LEGIT_TO_FORGED[1] / LEGIT_TO_FORGED[0]
    ok = (kinds == want and 4 in r.hmi.s_frames and len(payload) < legit_len
          and abs(len(payload) - expected) <= APDU_TOLERANCE
          and r.hmi.closed_reason is CloseReason.TIMEOUT and wall < IEC_BUDGET_S)
    verdict("AC4", ok, f"4 APDUs={kinds == want}, S N(R)=4 in {r.hmi.s_frames}, "
                       f"forged {len(payload)}B vs legit {legit_len}B "
                       f"(|{len(payload)}-{expected:.1f}| <= {APDU_TOLERANCE}), "
                       f"close={r.hmi.closed_reason}, wall {wall:.3f}s")


def test_ac5_detection_matrix(verdict):
    fired = {p: analyze(run_experiment(p, seed=SEED).capture) for p in PRESETS}
    on = lambda rule: {p for p, a in fired.items() if a.fired(rule)}
    baselines = {"baseline-http", "baseline-iec104"}
    r1 = on(RuleId.R1) == {"1", "2", "4"}
    families = (on(RuleId.R2) >= {"1", "2"} and on(RuleId.R3) >= {"1", "2"}
                and on(RuleId.R4) >= {"3", "4"} and on(RuleId.R5) >= {"3"})
    quiet = all(not (on(rule) & baselines) for rule in RuleId)
    verdict("AC5", r1 and families and quiet,
            "; ".join(f"{rule.name}={sorted(on(rule))}" for rule in RuleId))


def test_ac6_race_properties(verdict):
    server = ms(500)
    sure = race_outcome(Dist.uniform(0, ms(0.999)), server, 10_000, SEED)
    sweep = [race_outcome(Dist.normal(ms(x), ms(25)), server, 10_000, SEED)
             for x in np.linspace(420, 580, 10)]
    monotone = all(a >= b for a, b in zip(sweep, sweep[1:]))
    cases = [(Dist.normal(ms(500), ms(40)), Dist.normal(ms(500), ms(30))),
             (Dist.uniform(ms(400), ms(600)), Dist.constant(server)),
             (Dist.exponential(ms(500)), Dist.constant(server))]
    gaps = [abs(race_outcome(a, s, 100_000, SEED) - analytic_win_probability(a, s))
            for a, s in cases]
    ok = sure == 1.0 and monotone and max(gaps) <= RACE_TOLERANCE
    verdict("AC6", ok, f"win_rate(<1ms)={sure}, sweep monotone={monotone} "
                       f"[{sweep[0]:.3f}..{sweep[-1]:.3f}], max |MC-analytic|="
                       f"{max(gaps):.4f} <= {RACE_TOLERANCE}")


def test_ac7_codec_soundness(verdict, tmp_path):
    rng = random.Random(SEED)
    apdu_ok = 0
    for _ in range(1000):
        apdu = random_apdu(rng)
        raw = iec104.encode_apdu(apdu)
        apdu_ok += iec104.encode_apdu(iec104.decode_apdu(raw)) == raw
    pkt_ok = 0
    for _ in range(1000):
        frame = encode(random_packet(rng))
        pkt = decode(frame)
        ip_sum = int.from_bytes(frame[24:26], "big")
        hdr = frame[14:24] + b"\0\0" + frame[26:34]
        pkt_ok += (encode(pkt) == frame and naive_checksum(hdr) == ip_sum
                   and naive_tcp_checksum(frame) == pkt.tcp.checksum)
    r = run_experiment("3", seed=SEED)
    path = tmp_path / "c.pcap"
    cap.write_pcap(r.capture, path)
    with open(path, "rb") as fh:
        frames = [buf for _ts, buf in dpkt.pcap.Reader(fh)]
    pcap_ok = frames == [rec.frame for rec in r.capture]
    verdict("AC7", apdu_ok == 1000 and pkt_ok == 1000 and pcap_ok,
            f"apdus {apdu_ok}/1000, packets+checksums {pkt_ok}/1000, "
            f"dpkt re-read {len(frames)}/{len(r.capture)} equal={pcap_ok}")


def test_ac8_determinism(verdict, tmp_path):
    same = []
    for preset in PRESETS:
        hashes = []
        for sub in ("a", "b"):
            main(["run", "--experiment", preset, "--seed", "21", "--out", str(tmp_path / sub)])
            d = "exp" + preset if preset.isdigit() else preset
            hashes.append(hashlib.sha256((tmp_path / sub / d / "capture.pcap").read_bytes())
                          .hexdigest())
        same.append(hashes[0] == hashes[1])
    verdict("AC8", all(same), f"identical pcap hashes for {sum(same)}/{len(PRESETS)} presets")


def test_ac9_no_false_positives(verdict):
    noisy = []
    for preset in ("baseline-http", "baseline-iec104"):
        for seed in range(100):
            a = analyze(run_experiment(preset, seed=seed).capture)
            if a.alerts:
                noisy.append((preset, seed, sorted({x.rule.name for x in a.alerts})))
    verdict("AC9", not noisy, f"alerts on {len(noisy)}/200 baseline runs {noisy[:3]}")
