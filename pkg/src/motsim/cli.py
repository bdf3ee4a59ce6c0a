"""Command line: ``motsim run|detect|race|matrix``."""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import capture as cap
from .detect import DetectConfig, DetectionMatrix, RuleId, analyze, format_report
from .experiments import PRESETS, ExperimentError, RunResult, run_experiment
from .mots import AckMode, Dist, FlagsMode, RacePaths, analytic_win_probability, race_outcome
from .simnet import TopologyError, load_topology, ms

OUT_ENV = "MOTSIM_OUT_DIR"


def _out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or "out")


def _dir_name(preset: str) -> str:
    return f"exp{preset}" if preset.isdigit() else preset


def parse_dist(text: str) -> Dist:
    """``kind:a[:b]`` in milliseconds, e.g. ``uniform:0:2`` or ``normal:1:0.2``."""
    kind, *nums = text.split(":")
    vals = [ms(float(x)) for x in nums]
    if kind not in ("constant", "uniform", "normal", "exponential") or not vals:
        raise ValueError(f"bad distribution {text!r}")
    return Dist(kind, *vals)


def _sim_report(result: RunResult) -> str:
    r = result.report
    lines = [f"preset={result.preset}", f"seed={result.seed}",
             f"end_reason={r.reason}", f"end_time_us={r.end_time}",
             f"events={r.events}", f"delivered={r.delivered}", f"dropped={r.dropped}",
             f"mirrored={r.mirrored}", f"trace_digest={r.trace_digest}",
             f"capture_records={len(result.capture)}",
             f"forged_records={','.join(map(str, result.forged_indices)) or 'none'}"]
    if result.client_view is not None:
        view = result.client_view
        lines += [f"client.outcome={view.connection_outcome.value}",
                  f"client.redirects={','.join(view.followed_redirects) or 'none'}",
                  f"client.rendered_bytes={len(view.rendered_body)}",
                  f"server.log_entries={len(result.server.log)}"]
    if result.hmi is not None:
        hmi, plc = result.hmi, result.plc
        lines += [f"hmi.close={hmi.closed_reason.value if hmi.closed_reason else 'open'}",
                  f"hmi.s_frames={','.join(map(str, hmi.s_frames)) or 'none'}",
                  f"hmi.points={len(hmi.point_table)}"]
        if plc is not None:
            lines += [f"plc.close={plc.closed_reason.value if plc.closed_reason else 'open'}",
                      f"plc.sequence_errors={len(plc.sequence_errors)}"]
    return "\n".join(lines) + "\n"


def write_run(result: RunResult, directory: Path, overlay: bool = False) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    cap.write_pcap(result.capture, directory / "capture.pcap")
    (directory / "listing.txt").write_text(cap.render_listing(result.capture, overlay))
    cap.write_sidecar(result.capture, directory / "forged.sidecar")
    (directory / "report.txt").write_text(_sim_report(result))
    return directory


def cmd_run(args) -> int:
    topology = load_topology(args.topology) if args.topology else None
    ack = AckMode.LITERAL if args.paper_literal_ack else (
        AckMode.STANDARD if args.standard_ack else None)
    kw = {}
    if args.attacker_delay is not None:
        kw["forge_delay"] = parse_dist(args.attacker_delay)
    if args.server_delay is not None:
        kw["server_delay"] = ms(args.server_delay)
    result = run_experiment(args.experiment, topology, args.seed, ack_mode=ack,
                            flags_mode=FlagsMode(args.flags) if args.flags else None,
                            ttl_skew=args.ttl_skew, **kw)
    out = write_run(result, _out_root(args.out) / _dir_name(result.preset), args.overlay)
    print(f"wrote {out}/{{capture.pcap,listing.txt,forged.sidecar,report.txt}} "
          f"({len(result.capture)} records, seed {args.seed})")
    return 0


def _detect_config(args) -> DetectConfig:
    cfg = DetectConfig(ipid_check=args.ipid_check, ipid_band=args.ipid_band)
    if args.rules:
        cfg.rules = frozenset(RuleId.parse(r) for r in args.rules.split(","))
    return cfg


def cmd_detect(args) -> int:
    capture = cap.read_pcap(args.pcap)
    analysis = analyze(capture, _detect_config(args))
    truth = cap.read_sidecar(args.ground_truth) if args.ground_truth else None
    text = format_report(analysis, capture, truth)
    if args.report:
        Path(args.report).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_race(args) -> int:
    server = ms(args.server_delay)
    paths = RacePaths()
    if args.sweep:
        dists = [Dist.constant(ms(float(x))) for x in args.sweep.split(",")]
    else:
        dists = [parse_dist(args.attacker_delay)]
    print(f"seed={args.seed} trials={args.trials} server_delay_ms={args.server_delay}")
    for d in dists:
        win = race_outcome(d, server, args.trials, args.seed, paths)
        exact = analytic_win_probability(d, server, paths)
        label = f"{d.kind}:{d.a / 1000:g}" + (f":{d.b / 1000:g}" if d.kind in ("uniform", "normal") else "")
        print(f"attacker_delay={label} win_rate={win:.4f} analytic={exact:.4f}")
    return 0


def cmd_matrix(args) -> int:
    matrix = DetectionMatrix()
    cfg = _detect_config(args)
    for preset in PRESETS:
        result = run_experiment(preset, seed=args.seed)
        matrix.add(_dir_name(preset), analyze(result.capture, cfg))
        if args.out:
            write_run(result, _out_root(args.out) / _dir_name(preset))
    text = f"seed={args.seed}\n" + matrix.format_table() + "\n" + matrix.format_kv()
    if args.out:
        (_out_root(args.out) / "matrix.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motsim", description="Man-on-the-side injection testbed")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment and write its artifacts")
    r.add_argument("--experiment", required=True, choices=PRESETS)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--topology", help="YAML topology file")
    r.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./out)")
    r.add_argument("--server-delay", type=float, help="responder delay in ms (default 500)")
    r.add_argument("--attacker-delay", help="attacker reaction, kind:a[:b] in ms")
    ack = r.add_mutually_exclusive_group()
    ack.add_argument("--paper-literal-ack", action="store_true",
                     help="forged ack = request seq (IEC-104 default)")
    ack.add_argument("--standard-ack", action="store_true",
                     help="forged ack = request seq + length (HTTP default)")
    r.add_argument("--flags", choices=[m.value for m in FlagsMode])
    r.add_argument("--ttl-skew", type=int, default=0)
    r.add_argument("--overlay", action="store_true", help="mark forged records in the listing")
    r.set_defaults(func=cmd_run)

    def rule_opts(q):
        q.add_argument("--rules", help="comma list, e.g. r1,r4")
        q.add_argument("--ipid-check", action="store_true")
        q.add_argument("--ipid-band", type=int, default=64)

    d = sub.add_parser("detect", help="analyze a pcap")
    d.add_argument("--pcap", required=True)
    d.add_argument("--ground-truth")
    d.add_argument("--report")
    rule_opts(d)
    d.set_defaults(func=cmd_detect)

    c = sub.add_parser("race", help="Monte-Carlo race between forged and genuine reply")
    c.add_argument("--server-delay", type=float, default=500.0, help="ms")
    c.add_argument("--attacker-delay", default="constant:0.1", help="kind:a[:b] in ms")
    c.add_argument("--sweep", help="comma list of constant attacker delays in ms")
    c.add_argument("--trials", type=int, default=10_000)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_race)

    m = sub.add_parser("matrix", help="run every preset and tabulate rule firings")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out")
    rule_opts(m)
    m.set_defaults(func=cmd_matrix)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ExperimentError, TopologyError, cap.CaptureError, ValueError, OSError) as exc:
        print(f"motsim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
