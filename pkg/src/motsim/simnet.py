"""Deterministic discrete-event simulator: hosts, links, and mirroring switches.

Time is an integer count of microseconds.  Events run in ``(due, seq_no)``
order, so two events scheduled for the same instant fire in the order they
were scheduled.  Frames are raw bytes; switches only look at the two MAC
address fields.

Ports are named by *endpoint*: ``"Client"`` is the default interface of node
``Client`` and ``"Attacker:tap"`` is a second interface of ``Attacker``.  A
port may also be the name of another switch, which models an inter-enclave
link (the router between the SCADA and process-control networks).
"""
from __future__ import annotations

import copy
import hashlib
import heapq
import itertools
import random
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import yaml

SimTime = int

BROADCAST = b"\xff" * 6
DEFAULT_LINK_LATENCY = 100
DEFAULT_TIME_CAP = 60_000_000


def ms(value: float) -> SimTime:
    return int(round(value * 1000))


def seconds(value: float) -> SimTime:
    return int(round(value * 1_000_000))


class TopologyError(ValueError):
    pass


class SchedulingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NodeId:
    id: int
    name: str


@dataclass(frozen=True)
class Link:
    endpoint: str
    switch: str
    latency: SimTime = DEFAULT_LINK_LATENCY


@dataclass
class SwitchConfig:
    name: str
    ports: list[str]
    mirror_port: str | None = None
    mirror_latency: SimTime = 0
    mac_table: dict[bytes, str] = field(default_factory=dict)


@dataclass(frozen=True)
class HostProfile:
    node: NodeId
    mac: str
    ip: str
    processing_delay: SimTime = 0
    role: str = "host"


@dataclass(order=True)
class SimEvent:
    due: SimTime
    seq_no: int
    action: Callable[[], None] = field(compare=False)
    kind: str = field(default="host-task", compare=False)


@dataclass
class SimReport:
    delivered: int = 0
    dropped: int = 0
    mirrored: int = 0
    events: int = 0
    end_time: SimTime = 0
    hit_time_cap: bool = False
    trace_digest: str = ""

    @property
    def reason(self) -> str:
        return "time-cap" if self.hit_time_cap else "idle"


def split_endpoint(endpoint: str) -> tuple[str, str]:
    name, _, iface = endpoint.partition(":")
    return name, iface or "eth0"


@dataclass
class Topology:
    hosts: dict[str, HostProfile]
    switches: dict[str, SwitchConfig]
    links: list[Link]
    trunks: dict[frozenset, SimTime]

    def link_latency(self, endpoint: str, switch: str) -> SimTime:
        for link in self.links:
            if link.endpoint == endpoint and link.switch == switch:
                return link.latency
        key = frozenset((endpoint, switch))
        if key in self.trunks:
            return self.trunks[key]
        raise TopologyError(f"no link between {endpoint!r} and {switch!r}")

    def switch_of(self, endpoint: str) -> str:
        for link in self.links:
            if link.endpoint == endpoint:
                return link.switch
        raise TopologyError(f"endpoint {endpoint!r} is not attached to a switch")

    def path_latency(self, src: str, dst: str) -> SimTime:
        """Sum of link latencies on the unique switch path from src to dst."""
        start, goal = self.switch_of(src), self.switch_of(dst)
        dist = {start: 0}
        todo = deque([start])
        while todo:
            sw = todo.popleft()
            for key, lat in self.trunks.items():
                if sw in key:
                    (other,) = key - {sw}
                    if other not in dist:
                        dist[other] = dist[sw] + lat
                        todo.append(other)
        if goal not in dist:
            raise TopologyError(f"no path from {src!r} to {dst!r}")
        return self.link_latency(src, start) + dist[goal] + self.link_latency(dst, goal)

    def attacker(self) -> HostProfile | None:
        found = [h for h in self.hosts.values() if h.role == "attacker"]
        return found[0] if found else None


def build_topology(layout: dict, require_attacker: bool = False) -> Topology:
    """Validate a declarative topology description.

    ``layout`` has ``nodes``, ``switches`` and ``links`` lists, and an optional
    ``delays`` mapping of node name to processing delay in milliseconds.
    """
    hosts: dict[str, HostProfile] = {}
    delays = layout.get("delays", {}) or {}
    for i, node in enumerate(layout.get("nodes", [])):
        name = node["name"]
        if name in hosts:
            raise TopologyError(f"duplicate node {name!r}")
        delay = ms(delays.get(name, node.get("processing_delay_ms", 0)))
        if delay < 0:
            raise TopologyError(f"negative processing delay on {name!r}")
        mac = node["mac"]
        if not isinstance(mac, str) or len(mac.split(":")) != 6:
            # YAML 1.1 reads all-digit colon groups as base-60 ints; quote them
            raise TopologyError(f"node {name!r}: mac must be a quoted aa:bb:cc:dd:ee:ff string")
        hosts[name] = HostProfile(NodeId(i, name), mac, node["ip"], delay,
                                  node.get("role", "host"))
    switches: dict[str, SwitchConfig] = {}
    for sw in layout.get("switches", []):
        name = sw["name"]
        if name in switches or name in hosts:
            raise TopologyError(f"duplicate node {name!r}")
        ports = list(sw["ports"])
        if len(set(ports)) != len(ports):
            raise TopologyError(f"switch {name!r} lists a port twice")
        mirror = sw.get("mirror_port")
        if mirror is not None and mirror not in ports:
            raise TopologyError(f"mirror port {mirror!r} is not a member of {name!r}")
        mirror_latency = int(sw.get("mirror_latency_us", 0))
        if mirror_latency < 0:
            raise TopologyError("negative mirror latency")
        switches[name] = SwitchConfig(name, ports, mirror, mirror_latency)

    def known_endpoint(ep: str) -> bool:
        return split_endpoint(ep)[0] in hosts

    links: list[Link] = []
    trunks: dict[frozenset, SimTime] = {}
    for link in layout.get("links", []):
        a, b = link["a"], link["b"]
        latency = int(link.get("latency_us", DEFAULT_LINK_LATENCY))
        if latency < 0:
            raise TopologyError(f"negative latency on link {a}-{b}")
        if a == b:
            raise TopologyError("link endpoints must be distinct")
        if a in switches and b in switches:
            for x, y in ((a, b), (b, a)):
                if y not in switches[x].ports:
                    raise TopologyError(f"switch {x!r} has no port for {y!r}")
            trunks[frozenset((a, b))] = latency
            continue
        if a in switches:
            a, b = b, a
        if b not in switches:
            raise TopologyError(f"link {a}-{b} does not reach a declared switch")
        if not known_endpoint(a):
            raise TopologyError(f"link references undeclared node {a!r}")
        if a not in switches[b].ports:
            raise TopologyError(f"{a!r} is not a port of switch {b!r}")
        links.append(Link(a, b, latency))
    for sw in switches.values():
        for port in sw.ports:
            if port in switches:
                continue
            if not known_endpoint(port):
                raise TopologyError(f"switch {sw.name!r} port references undeclared node {port!r}")
            if not any(l.endpoint == port and l.switch == sw.name for l in links):
                lat = 0 if port == sw.mirror_port else DEFAULT_LINK_LATENCY
                links.append(Link(port, sw.name, lat))
    topo = Topology(hosts, switches, links, trunks)
    if require_attacker:
        attackers = [h for h in hosts.values() if h.role == "attacker"]
        if len(attackers) != 1:
            raise TopologyError("exactly one attacker node is required")
        name = attackers[0].node.name
        if not any(sw.mirror_port and split_endpoint(sw.mirror_port)[0] == name
                   for sw in switches.values()):
            raise TopologyError("the attacker must be attached to a mirror port")
    return topo


def load_topology(path: str | Path, require_attacker: bool = False) -> Topology:
    with open(path) as fh:
        return build_topology(yaml.safe_load(fh), require_attacker)


def forward_frame(switch: SwitchConfig, ingress: str, frame: bytes) -> list[str]:
    """Egress ports for one frame; the mirror port, if any, is listed last."""
    if ingress not in switch.ports:
        raise TopologyError(f"{ingress!r} is not a port of {switch.name!r}")
    if ingress == switch.mirror_port:
        return []
    dst, src = frame[0:6], frame[6:12]
    # sticky learning: a MAC stays on the port it was first seen on, so a
    # spoofed source address does not steal the genuine host's traffic
    switch.mac_table.setdefault(src, ingress)
    out_port = switch.mac_table.get(dst) if dst != BROADCAST else None
    if out_port is not None:
        if out_port == ingress:
            return []
        egress = [out_port]
    else:
        egress = [p for p in switch.ports if p not in (ingress, switch.mirror_port)]
    if switch.mirror_port is not None:
        egress.append(switch.mirror_port)
    return egress


class Node:
    """A simulated host.  Subclasses override :meth:`receive`."""

    def __init__(self, profile: HostProfile):
        self.profile = profile
        self.name = profile.node.name
        self.sim: Simulator | None = None

    @property
    def processing_delay(self) -> SimTime:
        return self.profile.processing_delay

    def attached(self, sim: "Simulator") -> None:
        self.sim = sim
        self.rng = random.Random(f"{sim.seed}:{self.name}")

    def receive(self, frame: bytes, iface: str) -> None:
        pass

    def send_frame(self, frame: bytes, iface: str = "eth0") -> None:
        self.sim.transmit(self.name, iface, frame)


class Simulator:
    def __init__(self, topology: Topology, seed: int = 0,
                 time_cap: SimTime = DEFAULT_TIME_CAP):
        # switches learn MACs as they run; keep the caller's topology pristine
        self.topology = copy.deepcopy(topology)
        self.seed = seed
        self.time_cap = time_cap
        self.now: SimTime = 0
        self.rng = random.Random(seed)
        self.nodes: dict[str, Node] = {}
        self.trace: list[tuple[SimTime, str, str, bytes]] = []
        self.taps: list[Callable[[SimTime, str, bytes], None]] = []
        self._queue: list[SimEvent] = []
        self._counter = itertools.count()
        self._report = SimReport()

    def attach(self, node: Node) -> Node:
        if node.name not in self.topology.hosts:
            raise TopologyError(f"node {node.name!r} is not in the topology")
        self.nodes[node.name] = node
        node.attached(self)
        return node

    def schedule(self, event: SimEvent) -> None:
        if event.due < self.now:
            raise SchedulingError(f"event due at {event.due} scheduled at {self.now}")
        heapq.heappush(self._queue, event)

    def call_at(self, due: SimTime, action: Callable[[], None], kind: str = "host-task") -> SimEvent:
        event = SimEvent(due, next(self._counter), action, kind)
        self.schedule(event)
        return event

    def call_later(self, delay: SimTime, action: Callable[[], None],
                   kind: str = "timer-expiry") -> SimEvent:
        return self.call_at(self.now + delay, action, kind)

    @staticmethod
    def cancel(event: SimEvent | None) -> None:
        if event is not None:
            event.action = _noop
            event.kind = "cancelled"

    def transmit(self, node: str, iface: str, frame: bytes) -> None:
        endpoint = node if iface == "eth0" else f"{node}:{iface}"
        switch = self.topology.switch_of(endpoint)
        latency = self.topology.link_latency(endpoint, switch)
        self.call_later(latency, lambda: self._at_switch(switch, endpoint, frame),
                        "frame-delivery")

    def _at_switch(self, switch_name: str, ingress: str, frame: bytes) -> None:
        switch = self.topology.switches[switch_name]
        egress = forward_frame(switch, ingress, frame)
        if not egress:
            self._report.dropped += 1
        for port in egress:
            if port == switch.mirror_port:
                self._report.mirrored += 1
                self.call_later(switch.mirror_latency,
                                lambda p=port: self._deliver(p, frame), "frame-delivery")
            elif port in self.topology.switches:
                lat = self.topology.link_latency(switch_name, port)
                self.call_later(lat, lambda p=port: self._at_switch(p, switch_name, frame),
                                "frame-delivery")
            else:
                lat = self.topology.link_latency(port, switch_name)
                self.call_later(lat, lambda p=port: self._deliver(p, frame), "frame-delivery")

    def _deliver(self, endpoint: str, frame: bytes) -> None:
        name, iface = split_endpoint(endpoint)
        self.trace.append((self.now, name, iface, frame))
        node = self.nodes.get(name)
        if node is None:
            self._report.dropped += 1
            return
        self._report.delivered += 1
        for tap in self.taps:
            tap(self.now, endpoint, frame)
        node.receive(frame, iface)

    def run_until_idle(self, time_cap: SimTime | None = None) -> SimReport:
        cap = self.time_cap if time_cap is None else time_cap
        while self._queue:
            if self._queue[0].kind == "cancelled":
                heapq.heappop(self._queue)
                continue
            if self._queue[0].due > cap:
                self._report.hit_time_cap = True
                self.now = cap
                break
            event = heapq.heappop(self._queue)
            self.now = event.due
            self._report.events += 1
            event.action()
        self._report.end_time = self.now
        self._report.trace_digest = self.trace_digest()
        return self._report

    def trace_digest(self) -> str:
        h = hashlib.sha256()
        for t, name, iface, frame in self.trace:
            h.update(f"{t}|{name}|{iface}|".encode())
            h.update(frame)
        return h.hexdigest()


def _noop() -> None:
    pass
