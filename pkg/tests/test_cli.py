import json
import os
import subprocess
import sys

import pytest

from edgewatch.cli import main
from edgewatch.simcore import save_scenario, synthetic_scenario


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "scenario.json"
    save_scenario(synthetic_scenario(3, n_frames=30, episodes=((5, 3),), payload_bytes=4096), path)
    return path


def test_run_writes_report(scenario_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--scenario", str(scenario_file), "--out", str(out)]) == 0
    report = json.loads((out / "session_report.json").read_text())
    assert report["incidents_recorded"] == 1 and report["raw_frame_bytes"] == 0
    assert (out / "session_report.csv").read_text().startswith("session_id,")
    assert (out / "session.log").read_text().startswith("WARN ")
    assert json.loads(capsys.readouterr().out)["mean_latency_ms"] == 28


def test_run_offload_device(scenario_file, tmp_path):
    out = tmp_path / "off"
    assert main(["run", "--scenario", str(scenario_file), "--strategy", "offload",
                 "--device", "lgv30", "--out", str(out)]) == 0
    report = json.loads((out / "session_report.json").read_text())
    assert report["latency"]["mean_ms"] == pytest.approx(1150)


def test_compare(scenario_file, tmp_path, capsys):
    out = tmp_path / "cmp"
    assert main(["compare", "--scenario", str(scenario_file), "--out", str(out),
                 "--devices", "s10plus", "lgv30"]) == 0
    data = json.loads((out / "comparison.json").read_text())
    assert [r["label"] for r in data["rows"]] == ["onload@s10plus", "onload@lgv30", "offload@default"]
    assert "32100" in (out / "references.csv").read_text()
    assert (out / "comparison.csv").exists()
    assert "offload@default" in capsys.readouterr().out


def test_metrics(tmp_path, capsys):
    labels = tmp_path / "labels.csv"
    rows = ["1,1"] * 41 + ["0,1"] + ["1,0"] * 4 + ["0,0"] * 5
    labels.write_text("predicted,actual\n" + "\n".join(rows) + "\n")
    assert main(["metrics", "--labels", str(labels), "--out", str(tmp_path / "m")]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["scores"]["accuracy"] == pytest.approx(0.9019, abs=1e-3)
    assert (tmp_path / "m" / "metrics.json").exists()


def test_vault_seal_open(tmp_path, capsys):
    payload = os.urandom(999)
    (tmp_path / "p.bin").write_bytes(payload)
    key = ["--key", "0a0b0c", "--key-id", "3"]
    assert main(["vault", "seal", *key, "--in", str(tmp_path / "p.bin"), "--out", str(tmp_path / "e"),
                 "--session", "00" * 16, "--timestamp", "77", "--confidence", "0.91"]) == 0
    assert json.loads(capsys.readouterr().out)["bytes"] == 999 + 41
    assert main(["vault", "open", *key, "--in", str(tmp_path / "e"), "--out", str(tmp_path / "o")]) == 0
    opened = json.loads(capsys.readouterr().out)
    assert opened["confidence_x1e4"] == 9100 and opened["class"] == "Violation"
    assert (tmp_path / "o").read_bytes() == payload


def test_tampered_envelope_exits_nonzero(tmp_path, capsys):
    (tmp_path / "p").write_bytes(b"hello")
    key = ["--key", "ff", "--key-id", "0"]
    main(["vault", "seal", *key, "--in", str(tmp_path / "p"), "--out", str(tmp_path / "e"),
          "--session", "x", "--timestamp", "1", "--confidence", "0.9"])
    env = bytearray((tmp_path / "e").read_bytes())
    env[-1] ^= 1
    (tmp_path / "e").write_bytes(bytes(env))
    assert main(["vault", "open", *key, "--in", str(tmp_path / "e")]) == 2
    assert "IntegrityFailure" in capsys.readouterr().err


def test_missing_scenario_exits_nonzero(tmp_path, capsys):
    assert main(["run", "--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert "error: FileNotFoundError" in capsys.readouterr().err


def test_consent_withheld_exit(tmp_path, capsys):
    path = tmp_path / "s.json"
    save_scenario(synthetic_scenario(1, n_frames=3, consent=False), path)
    assert main(["run", "--scenario", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "ConsentWithheld" in capsys.readouterr().err
    assert json.loads((tmp_path / "o" / "session_report.json").read_text())["consent_withheld"]


def test_generate(tmp_path):
    out = tmp_path / "g.json"
    assert main(["generate", "--out", str(out), "--seed", "5", "--frames", "12",
                 "--episode", "2:3", "--episode", "8:2"]) == 0
    data = json.loads(out.read_text())
    assert len(data["frames"]) == 12
    assert sum(any(t["class"] == "Violation" for t in f["truth"]) for f in data["frames"]) == 5


def test_module_entry_point_serves(tmp_path):
    proc = subprocess.Popen(
        [sys.executable, "-m", "edgewatch.cli", "serve", "--key", "aa", "--port", "0",
         "--log", str(tmp_path / "log")],
        stdout=subprocess.PIPE, text=True,
    )
    try:
        line = proc.stdout.readline()
        assert line.startswith("agent listening on http://127.0.0.1:")
    finally:
        proc.terminate()
        proc.wait(timeout=10)
