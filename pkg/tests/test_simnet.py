import pytest

from motsim.simnet import (BROADCAST, SchedulingError, Simulator, SwitchConfig, TopologyError,
                           Node, build_topology, forward_frame, load_topology, ms)
from motsim.experiments import HTTP_LAB, SCADA_LAB, run_experiment


def frame(dst: bytes, src: bytes) -> bytes:
    return dst + src + b"\x08\x00" + b"\0" * 46


A, B, C, D = (bytes([2, 0, 0, 0, 0, i]) for i in range(1, 5))


def lab(n_hosts=4, mirror=True):
    names = [f"H{i}" for i in range(n_hosts)]
    nodes = [{"name": n, "mac": f"02:00:00:00:00:{i + 1:02x}", "ip": f"10.0.0.{i + 1}"}
             for i, n in enumerate(names)]
    ports = list(names)
    sw = {"name": "sw", "ports": ports}
    if mirror:
        nodes.append({"name": "Spy", "mac": "02:00:00:00:00:99", "ip": "10.0.0.99",
                      "role": "attacker"})
        ports += ["Spy:tap"]
        sw["mirror_port"] = "Spy:tap"
    return {"nodes": nodes, "switches": [sw], "links": []}


class Recorder(Node):
    def __init__(self, profile):
        super().__init__(profile)
        self.got = []

    def receive(self, frame, iface):
        self.got.append((self.sim.now, iface, frame))


def attach_all(sim):
    return {n: sim.attach(Recorder(p)) for n, p in sim.topology.hosts.items()}


def test_tie_break_by_insertion_order():
    sim = Simulator(build_topology(lab()))
    order = []
    for k in range(5):
        sim.call_at(10, lambda k=k: order.append(k))
    sim.call_at(5, lambda: order.append("early"))
    sim.run_until_idle()
    assert order == ["early", 0, 1, 2, 3, 4]


def test_scheduling_in_the_past_is_an_error():
    sim = Simulator(build_topology(lab()))
    sim.call_at(10, lambda: sim.call_at(3, lambda: None))
    with pytest.raises(SchedulingError):
        sim.run_until_idle()


def test_time_cap_reported():
    sim = Simulator(build_topology(lab()), time_cap=100)
    sim.call_at(50, lambda: None)
    sim.call_at(500, lambda: None)
    rep = sim.run_until_idle()
    assert rep.hit_time_cap and rep.reason == "time-cap" and rep.end_time == 100


def test_cancelled_timer_does_not_advance_clock():
    sim = Simulator(build_topology(lab()))
    ev = sim.call_at(1000, lambda: None)
    sim.call_at(20, lambda: None)
    sim.cancel(ev)
    assert sim.run_until_idle().end_time == 20


def test_forward_known_destination_plus_mirror():
    sw = SwitchConfig("sw", ["H0", "H1", "H2", "H3", "Spy:tap"], "Spy:tap")
    forward_frame(sw, "H1", frame(A, B))                       # learn B on H1
    assert forward_frame(sw, "H0", frame(B, A)) == ["H1", "Spy:tap"]


def test_flood_unknown_destination_four_members_plus_mirror():
    sw = SwitchConfig("sw", ["H0", "H1", "H2", "H3", "Spy:tap"], "Spy:tap")
    out = forward_frame(sw, "H0", frame(D, A))
    assert out == ["H1", "H2", "H3", "Spy:tap"]
    assert forward_frame(sw, "H1", frame(BROADCAST, B))[-1] == "Spy:tap"


def test_mirror_ingress_is_never_forwarded():
    sw = SwitchConfig("sw", ["H0", "H1", "Spy:tap"], "Spy:tap")
    assert forward_frame(sw, "Spy:tap", frame(A, C)) == []


def test_learning_is_sticky_against_spoofed_source():
    sw = SwitchConfig("sw", ["H0", "H1", "H2"])
    forward_frame(sw, "H0", frame(B, A))
    forward_frame(sw, "H2", frame(B, A))                       # spoofed A from H2
    assert sw.mac_table[A] == "H0"


def test_deliveries_and_latency_additivity():
    sim = Simulator(build_topology(lab()))
    nodes = attach_all(sim)
    sim.call_at(0, lambda: nodes["H1"].send_frame(frame(A, B)))
    sim.call_at(1000, lambda: nodes["H0"].send_frame(frame(B, A)))
    sim.run_until_idle()
    t, _, _ = nodes["H1"].got[0]
    assert t == 1000 + sim.topology.path_latency("H0", "H1") == 1200
    assert [g[1] for g in nodes["Spy"].got] == ["tap", "tap"]


def test_causality_no_delivery_before_send():
    sim = Simulator(build_topology(lab()))
    nodes = attach_all(sim)
    sends = []
    for t, src in ((5, "H0"), (7, "H2"), (7, "H3")):
        def go(src=src):
            sends.append(sim.now)
            nodes[src].send_frame(frame(BROADCAST, bytes(6)))
        sim.call_at(t, go)
    sim.run_until_idle()
    for n in nodes.values():
        for t, _, _ in n.got:
            assert t >= min(sends) + 100


def test_trunk_path_latency():
    topo = build_topology(SCADA_LAB)
    assert topo.path_latency("HMI", "PLC") == 100 + 200 + 100


def test_no_forwarding_loops_bounded_deliveries():
    sim = Simulator(build_topology(SCADA_LAB))
    nodes = attach_all(sim)
    sim.call_at(0, lambda: nodes["HMI"].send_frame(frame(BROADCAST, A)))
    rep = sim.run_until_idle()
    assert rep.delivered == 3          # PLC, Attacker, Attacker:tap
    assert not rep.hit_time_cap


@pytest.mark.parametrize("mutate, msg", [
    (lambda t: t["nodes"].append(dict(t["nodes"][0])), "duplicate"),
    (lambda t: t["switches"][0].update(mirror_port="Nope"), "mirror"),
    (lambda t: t["links"].append({"a": "H0", "b": "sw", "latency_us": -1}), "negative"),
    (lambda t: t["switches"][0]["ports"].append("Ghost"), "undeclared"),
])
def test_topology_validation(mutate, msg):
    t = lab()
    mutate(t)
    with pytest.raises(TopologyError, match=msg):
        build_topology(t)


def test_attacker_must_sit_on_mirror_port():
    t = lab(mirror=False)
    t["nodes"].append({"name": "Evil", "mac": "02:00:00:00:00:66", "ip": "10.0.0.66",
                       "role": "attacker"})
    t["switches"][0]["ports"].append("Evil")
    with pytest.raises(TopologyError):
        build_topology(t, require_attacker=True)
    build_topology(HTTP_LAB, require_attacker=True)


def test_yaml_topology_and_delays(tmp_path):
    import yaml
    layout = dict(HTTP_LAB, delays={"Server": 250})
    path = tmp_path / "lab.yaml"
    path.write_text(yaml.safe_dump(layout))
    topo = load_topology(path, require_attacker=True)
    assert topo.hosts["Server"].processing_delay == ms(250)


def test_same_seed_same_trace_digest():
    a = run_experiment("1", seed=11).report.trace_digest
    b = run_experiment("1", seed=11).report.trace_digest
    c = run_experiment("1", seed=12).report.trace_digest
    assert a == b != c


def test_unquoted_numeric_mac_rejected(tmp_path):
    from motsim.simnet import TopologyError, load_topology
    path = tmp_path / "t.yaml"
    path.write_text("nodes:\n- {name: A, mac: 10:20:30:40:50:55, ip: 10.0.0.1}\n"
                    "switches: []\nlinks: []\n")
    with pytest.raises(TopologyError, match="quoted"):
        load_topology(path)


def test_shipped_topologies_load():
    from pathlib import Path
    from motsim.simnet import load_topology
    root = Path(__file__).parent.parent / "topologies"
    for name in ("http_lab.yaml", "scada_lab.yaml"):
        assert load_topology(root / name).attacker() is not None
