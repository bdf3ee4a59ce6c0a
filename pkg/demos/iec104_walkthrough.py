"""Step through the two IEC-104 attacks on the SCADA lab.

Exp 3 replays a stale interrogation answer; Exp 4 injects a short crafted one
with two fake step positions.  Writes pcaps under ./out/demo so they can be
opened in Wireshark.
"""
from pathlib import Path

from motsim import capture as cap
from motsim import iec104
from motsim.experiments import forged_payloads, run_experiment
from motsim.simnet import load_topology

topo_file = Path(__file__).parent.parent / "topologies" / "scada_lab.yaml"
out = Path("out/demo")
out.mkdir(parents=True, exist_ok=True)

base = run_experiment("baseline-iec104", load_topology(topo_file), seed=3)
print("baseline points:", len(base.hmi.point_values()), "S-frames:", base.hmi.s_frames)

for preset in ("3", "4"):
    r = run_experiment(preset, load_topology(topo_file), seed=3)
    (payload,) = forged_payloads(r)
    apdus = iec104.split_apdus(payload)
    print(f"\n== exp {preset}: forged {len(payload)} bytes, {len(apdus)} APDUs")
    for a in apdus:
        print("   ", a.describe())
    print("HMI S-frames:", r.hmi.s_frames, "close:", r.hmi.closed_reason)
    changed = {k: v for k, v in r.hmi.point_values().items()
               if base.hmi.point_values().get(k) != v}
    print("points that differ from baseline:", changed or "none")
    cap.write_pcap(r.capture, out / f"exp{preset}.pcap")
    print(cap.render_listing(r.capture, overlay=True).splitlines()[8][:110])

print("\npcaps in", out.resolve())
