import json
import subprocess
import sys

import yaml

from timingsim.cli import main


def test_scenarios_listed(capsys):
    assert main(["scenarios"]) == 0
    assert "builtin:reference" in capsys.readouterr().out


def test_validate_ok_and_invalid(tmp_path, capsys):
    assert main(["validate", "--config", "builtin:quiet"]) == 0
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"mtg": {"coupling": 1.0, "n_cs": 1000}}))
    assert main(["validate", "--config", str(bad)]) == 2
    assert "[mtg]" in capsys.readouterr().err


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["run", "--config", "builtin:quiet", "--cycles", "20", "--out", str(out), "--plots"]) == 0
    assert {p.name for p in out.iterdir()} >= {"events.log", "metrics.csv", "summary.json", "deviation.svg"}
    assert json.loads((out / "summary.json").read_text())["cycles"] == 20
    assert "PASS" in capsys.readouterr().out


def test_run_exit_code_reflects_checks(tmp_path):
    sc = {"cycles": 30, "link_mode": "direct", "checks": ["deviation_window"], "mtg": {"coupling": 0.03, "threshold_ps": 0}}
    p = tmp_path / "tight.yaml"
    p.write_text(yaml.safe_dump(sc))
    assert main(["run", "--config", str(p)]) == 1


def test_run_several_in_threads(tmp_path):
    out = tmp_path / "many"
    rc = main(["run", "--config", "builtin:quiet", "--config", "builtin:phase_step", "--cycles", "30", "--jobs", "2", "--out", str(out)])
    assert rc == 0
    assert (out / "quiet" / "metrics.csv").exists() and (out / "phase_step" / "metrics.csv").exists()


def test_compare_delay_modes(capsys):
    assert main(["compare-delay-modes", "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["fixed_error_span_ps"] == 2_120_000 and rep["tick_error_max_abs_ps"] == 0


def test_calibrate(capsys):
    assert main(["calibrate", "--config", "builtin:reference"]) == 0
    assert "coupling 0.0" in capsys.readouterr().out
    assert main(["calibrate", "--config", "builtin:reference", "--target-us", "0.0000001"]) == 2


def test_eventlink_file_tools(tmp_path, capsys):
    sched = tmp_path / "s.txt"
    sched.write_text("# tick code\n0 RTDL_START\n40 0x01\n60 EXTRACTION\n")
    evlk = tmp_path / "s.evlk"
    assert main(["eventlink", "encode", str(sched), "-o", str(evlk)]) == 0
    capsys.readouterr()
    assert main(["eventlink", "decode", str(evlk)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines == ["0\t0x02\tRTDL_START", "40\t0x01\tCYCLE_START", "60\t0x06\tEXTRACTION"]
    sched.write_text("0 1\n3 2\n")
    assert main(["eventlink", "encode", str(sched), "-o", str(evlk)]) == 2


def test_rtdl_file_tools(tmp_path, capsys):
    src = tmp_path / "f.txt"
    src.write_text("0x02 945390\n0x04 0xFFFFFF\n")
    bin_ = tmp_path / "f.rtdl"
    assert main(["rtdl", "build", str(src), "-o", str(bin_)]) == 0
    assert bin_.read_bytes()[:6] == bytes([0x7E, 0x02, 0x0E, 0x6C, 0xEE, 0x02 ^ 0x0E ^ 0x6C ^ 0xEE])
    capsys.readouterr()
    assert main(["rtdl", "dump", str(bin_)]) == 0
    assert "0x0E6CEE" in capsys.readouterr().out
    raw = bytearray(bin_.read_bytes())
    raw[8] ^= 4
    bin_.write_bytes(bytes(raw))
    assert main(["rtdl", "dump", str(bin_)]) == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "timingsim", "scenarios"], capture_output=True, text=True, check=True)
    assert "builtin:quiet" in out.stdout
