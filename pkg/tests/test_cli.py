import hashlib
import os

import pytest

from motsim.cli import main, parse_dist
from motsim.mots import Dist


def digest(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir())}


def test_run_writes_artifacts(tmp_path, capsys):
    assert main(["run", "--experiment", "1", "--seed", "3", "--out", str(tmp_path)]) == 0
    out = tmp_path / "exp1"
    assert sorted(p.name for p in out.iterdir()) == [
        "capture.pcap", "forged.sidecar", "listing.txt", "report.txt"]
    report = (out / "report.txt").read_text()
    assert "client.outcome=" in report and "forged_records=" in report
    assert "exp1" in capsys.readouterr().out


def test_run_is_byte_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert main(["run", "--experiment", "3", "--seed", "11",
                     "--out", str(tmp_path / sub)]) == 0
    assert digest(tmp_path / "a" / "exp3") == digest(tmp_path / "b" / "exp3")


def test_env_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("MOTSIM_OUT_DIR", str(tmp_path))
    assert main(["run", "--experiment", "baseline-http"]) == 0
    assert (tmp_path / "baseline-http" / "capture.pcap").exists()
    assert (tmp_path / "baseline-http" / "forged.sidecar").read_text() == ""


def test_detect_on_written_pcap(tmp_path, capsys):
    main(["run", "--experiment", "4", "--seed", "1", "--out", str(tmp_path)])
    capsys.readouterr()
    d = tmp_path / "exp4"
    rep = tmp_path / "detect.txt"
    assert main(["detect", "--pcap", str(d / "capture.pcap"), "--ground-truth",
                 str(d / "forged.sidecar"), "--report", str(rep)]) == 0
    text = capsys.readouterr().out
    assert text == rep.read_text()
    assert "R6_Iec104DuplicateResponse" in text


def test_detect_rule_filter(tmp_path, capsys):
    main(["run", "--experiment", "3", "--out", str(tmp_path)])
    capsys.readouterr()
    main(["detect", "--pcap", str(tmp_path / "exp3" / "capture.pcap"), "--rules", "r5"])
    text = capsys.readouterr().out
    assert "R5_SmallSegmentBurst" in text and "R6_Iec104DuplicateResponse=fired" not in text


def test_matrix_output(tmp_path, capsys):
    assert main(["matrix", "--seed", "7", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    for col in ("exp1", "exp2", "exp4"):
        assert f"matrix.R1_OverlapDiffData.{col}=fired" in text
    assert "matrix.R1_OverlapDiffData.exp3=silent" in text
    assert (tmp_path / "matrix.txt").read_text() == text
    assert (tmp_path / "baseline-iec104" / "capture.pcap").exists()


def test_race_output(capsys):
    assert main(["race", "--sweep", "0.1,499,501", "--trials", "200"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("seed=0 trials=200")
    rates = [float(l.split("win_rate=")[1].split()[0]) for l in lines[1:]]
    assert rates == [1.0, 1.0, 0.0]


def test_race_distribution(capsys):
    assert main(["race", "--attacker-delay", "normal:500:50", "--trials", "20000",
                 "--seed", "3"]) == 0
    line = capsys.readouterr().out.splitlines()[1]
    win = float(line.split("win_rate=")[1].split()[0])
    exact = float(line.split("analytic=")[1])
    assert abs(win - exact) < 0.02


@pytest.mark.parametrize("argv", [
    ["detect", "--pcap", "/nonexistent.pcap"],
    ["run", "--experiment", "1", "--attacker-delay", "gamma:1"],
    ["race", "--trials", "0"],
])
def test_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert capsys.readouterr().err.startswith("motsim: error:")


def test_bad_topology_file(tmp_path, capsys):
    topo = tmp_path / "t.yaml"
    topo.write_text("nodes: []\nswitches: []\nlinks: []\n")
    assert main(["run", "--experiment", "1", "--topology", str(topo),
                 "--out", str(tmp_path)]) == 2


def test_unknown_experiment_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["run", "--experiment", "9"])
    assert exc.value.code == 2


def test_parse_dist_units():
    assert parse_dist("uniform:0:2") == Dist("uniform", 0, 2000)
    assert parse_dist("constant:0.1") == Dist("constant", 100)
