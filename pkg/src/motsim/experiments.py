"""Scenario presets: two HTTP attacks, two IEC-104 attacks and clean baselines.

Every run records what the attacker's mirror port sees.  Which capture
records were injected is tracked separately in ``Capture.ground_truth`` and
is never consulted by the detectors.
"""
from __future__ import annotations

import copy
import dataclasses
import time
from dataclasses import dataclass, field

from . import iec104
from .capture import Capture
from .httpmini import Browser, ClientView, HttpServer, serve
from .iec104 import Asdu, Cot, InformationObject, Iec104Config, Iec104Master, Iec104Outstation
from .mots import (AckMode, AttackerHost, Dist, FlagsMode, ForgeTemplate, Protocol,
                   TriggerRule)
from .simnet import SimReport, SimTime, Simulator, Topology, build_topology
from .tcpstack import TcpConfig, TcpHost
from .wire import decode

HTTP_LAB = {
    "nodes": [
        {"name": "Client", "mac": "02:00:00:00:01:0a", "ip": "192.168.10.10", "role": "client"},
        {"name": "Server", "mac": "02:00:00:00:01:14", "ip": "192.168.10.20", "role": "server",
         "processing_delay_ms": 500},
        {"name": "Attacker", "mac": "02:00:00:00:01:42", "ip": "192.168.10.66", "role": "attacker"},
    ],
    "switches": [
        {"name": "lab", "ports": ["Client", "Server", "Attacker", "Attacker:tap"],
         "mirror_port": "Attacker:tap", "mirror_latency_us": 0},
    ],
    "links": [],
}

# The HMI sits in the SCADA enclave; PLC and attacker share the process
# network switch, whose mirror port the attacker listens on.
SCADA_LAB = {
    "nodes": [
        {"name": "HMI", "mac": "02:00:00:00:02:0a", "ip": "10.10.1.10", "role": "hmi"},
        {"name": "PLC", "mac": "02:00:00:00:03:14", "ip": "10.10.2.20", "role": "plc",
         "processing_delay_ms": 500},
        {"name": "Attacker", "mac": "02:00:00:00:03:42", "ip": "10.10.2.66", "role": "attacker"},
    ],
    "switches": [
        {"name": "scada", "ports": ["HMI", "pc"]},
        {"name": "pc", "ports": ["PLC", "Attacker", "Attacker:tap", "scada"],
         "mirror_port": "Attacker:tap", "mirror_latency_us": 0},
    ],
    "links": [{"a": "scada", "b": "pc", "latency_us": 200}],
}

SERVER_NAME = "server.lab"
ATTACKER_NAME = "attacker.lab"
LEGIT_PAGE = (b"<html><head><title>Intranet</title></head><body>"
              b"<h1>Intranet portal</h1><p>Welcome back. Today's notices: the "
              b"maintenance window starts at 22:00 and the canteen menu is "
              b"posted on the board.</p></body></html>")
FORGED_PAGE = b"<html><body><h1>Session expired</h1><p>Please sign in again.</p></body></html>"
PHISHING_PAGE = (b"<html><body><form action=\"/login\"><p>Sign in</p>"
                 b"<input name=\"user\"><input name=\"pass\" type=\"password\">"
                 b"</form></body></html>")
FORGED_STEPS = ((3000, 42), (3001, -42))

PRESETS = ("1", "2", "3", "4", "baseline-http", "baseline-iec104")
HTTP_PRESETS = ("1", "2", "baseline-http")
DEFAULT_FORGE_DELAY: SimTime = 100


class ExperimentError(ValueError):
    pass


@dataclass
class RunResult:
    preset: str
    seed: int
    capture: Capture
    report: SimReport
    sim: Simulator
    attacker: AttackerHost
    hosts: dict[str, TcpHost] = field(default_factory=dict)
    client_view: ClientView | None = None
    server: HttpServer | None = None
    hmi: Iec104Master | None = None
    plc: Iec104Outstation | None = None
    wall_seconds: float = 0.0

    @property
    def forged_indices(self) -> list[int]:
        return sorted(self.capture.ground_truth)


def preset_topology(preset: str) -> Topology:
    return build_topology(copy.deepcopy(HTTP_LAB if str(preset) in HTTP_PRESETS else SCADA_LAB))


def _by_role(topology: Topology, role: str) -> str:
    for name, h in topology.hosts.items():
        if h.role == role:
            return name
    raise ExperimentError(f"topology has no {role!r} node")


def default_template(preset: str, seed: int = 0, ack_mode: AckMode | None = None,
                     flags_mode: FlagsMode | None = None, ttl: int = 64,
                     topology: Topology | None = None) -> ForgeTemplate | None:
    preset = str(preset)
    if preset.startswith("baseline"):
        return None
    if preset in ("1", "2"):
        kw = dict(ack_mode=ack_mode or AckMode.STANDARD,
                  flags_mode=flags_mode or FlagsMode.FIN_ACK, ttl=ttl)
        if preset == "1":
            return ForgeTemplate.static_page(FORGED_PAGE, **kw)
        return ForgeTemplate.redirect(f"http://{ATTACKER_NAME}/", **kw)
    kw = dict(ack_mode=ack_mode or AckMode.LITERAL,
              flags_mode=flags_mode or FlagsMode.PUSH_ACK, ttl=ttl)
    if preset == "3":
        return ForgeTemplate.replay(baseline_gi_payload(seed, topology), **kw)
    ca = 1
    asdus = [iec104.gi_command(ca, Cot.ACTCON)]
    asdus += [Asdu(iec104.TypeId.M_ST_NA_1, Cot.INROGEN, ca, (InformationObject(ioa, v),))
              for ioa, v in FORGED_STEPS]
    asdus.append(iec104.gi_command(ca, Cot.ACTTERM))
    return ForgeTemplate.crafted(asdus, **kw)


def baseline_gi_payload(seed: int = 0, topology: Topology | None = None) -> bytes:
    """The outstation's interrogation data segment from a clean run."""
    result = run_experiment("baseline-iec104", topology, seed)
    for rec in result.capture:
        pkt = rec.packet()
        if pkt is None or not pkt.payload or pkt.tcp.src_port != iec104.IEC104_PORT:
            continue
        apdus = iec104.split_apdus(pkt.payload)
        if any(a.format is iec104.Format.I and a.asdu.cot == Cot.ACTTERM for a in apdus):
            return pkt.payload
    raise ExperimentError("baseline capture has no interrogation response")


def run_experiment(preset, topology: Topology | None = None, seed: int = 0, *,
                   forge_delay=DEFAULT_FORGE_DELAY, ack_mode: AckMode | None = None,
                   flags_mode: FlagsMode | None = None, ttl_skew: int = 0,
                   template: ForgeTemplate | None = None,
                   server_delay: SimTime | None = None,
                   time_cap: SimTime | None = None) -> RunResult:
    """Run one preset end to end and return the annotated mirror capture.

    ``forge_delay`` is the attacker's reaction time in microseconds, or a
    :class:`Dist` sampled once per trigger.  ``server_delay`` overrides the
    responder's (web server or PLC) processing delay.
    """
    preset = str(preset)
    if preset not in PRESETS:
        raise ExperimentError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    topology = topology or preset_topology(preset)
    http = preset in HTTP_PRESETS
    roles = {h.role for h in topology.hosts.values()}
    need = {"client", "server"} if http else {"hmi", "plc"}
    if not need <= roles:
        raise ExperimentError(f"preset {preset} needs nodes with roles {sorted(need)}")
    if server_delay is not None:
        topology = copy.deepcopy(topology)
        name = _by_role(topology, "server" if http else "plc")
        topology.hosts[name] = dataclasses.replace(topology.hosts[name],
                                                   processing_delay=server_delay)
    if topology.attacker() is None:
        raise ExperimentError("topology has no attacker node on a mirror port")
    if template is None:
        template = default_template(preset, seed, ack_mode, flags_mode, 64 + ttl_skew, topology)

    started = time.perf_counter()
    sim = Simulator(topology, seed, **({"time_cap": time_cap} if time_cap else {}))
    att_profile = topology.attacker()
    rules = [TriggerRule(Protocol.HTTP if http else Protocol.IEC104)]
    if isinstance(forge_delay, (Dist, tuple, list)):
        forge_delay = Dist.coerce(forge_delay).sampler()
    attacker = AttackerHost(att_profile, rules if template else [], template, forge_delay)
    hosts: dict[str, TcpHost] = {}
    for name, prof in topology.hosts.items():
        if prof is att_profile:
            hosts[name] = attacker
        elif prof.role == "client":
            hosts[name] = TcpHost(prof, TcpConfig(trim_overlap=True))
        else:
            hosts[name] = TcpHost(prof)
    for h in hosts.values():
        sim.attach(h)
        h.neighbors = {p.ip: p.mac for p in topology.hosts.values() if p is not h.profile}

    capture = Capture()
    tap = next(sw.mirror_port for sw in topology.switches.values()
               if sw.mirror_port and sw.mirror_port.split(":")[0] == att_profile.node.name)
    pending: list[tuple[bytes, str]] = []
    attacker.on_inject.append(lambda frame, why: pending.append((frame, why)))

    def on_tap(now, endpoint, frame):
        if endpoint != tap:
            return
        idx = capture.record(frame, now)
        for k, (f, why) in enumerate(pending):
            if f == frame:
                capture.mark_forged(idx, why)
                del pending[k]
                break
    sim.taps.append(on_tap)

    result = RunResult(preset, seed, capture, SimReport(), sim, attacker, hosts)
    if http:
        client = hosts[_by_role(topology, "client")]
        server = hosts[_by_role(topology, "server")]
        result.server = serve(server, {"/": LEGIT_PAGE})
        if preset == "2":
            serve(attacker, {"/": PHISHING_PAGE}, delay=0)
        browser = Browser(client, {SERVER_NAME: server.ip, ATTACKER_NAME: attacker.ip})
        result.client_view = browser.view
        sim.call_at(0, lambda: browser.navigate(f"http://{SERVER_NAME}/"), "host-task")
    else:
        hmi_host = hosts[_by_role(topology, "hmi")]
        plc_host = hosts[_by_role(topology, "plc")]
        cfg = Iec104Config()
        result.hmi = Iec104Master(sim, cfg)

        def make_outstation():
            result.plc = Iec104Outstation(sim, iec104.preset_points(),
                                          plc_host.processing_delay, cfg)
            return result.plc
        plc_host.listen(iec104.IEC104_PORT, make_outstation)
        sim.call_at(0, lambda: hmi_host.connect(plc_host.ip, iec104.IEC104_PORT, result.hmi),
                    "host-task")
    result.report = sim.run_until_idle()
    capture.annotate()
    result.wall_seconds = time.perf_counter() - started
    return result


def forged_payloads(result: RunResult) -> list[bytes]:
    return [decode(result.capture[i].frame).payload for i in result.forged_indices]
