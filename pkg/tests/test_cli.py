import json
import signal
import subprocess
import sys
import time

import pytest

from fedclaims.cli import main
from fedclaims.metrics import EvaluationReport

HFL = """\
seed = 11
output_dir = "runs"

[data]
n = {n}
p = 4
base_frequency = 0.5
frequency_coefficients = [0.3, -0.2, 0.1, 0.0]
severity_shape = 2.0
severity_scale = 3.0

[partition]
kind = "horizontal"
{collaborators}
[model]
hidden = [6]

[training]
batch_size = 16
learning_rate = 0.01
rounds = {rounds}
local_epochs = {local_epochs}

[transport]
kind = "{transport}"
address = "127.0.0.1:0"
timeout = 20.0
"""

TWO = """
[[partition.collaborators]]
id = 1
fraction = 0.65

[[partition.collaborators]]
id = 2
fraction = 0.35
"""

ONE = """
[[partition.collaborators]]
id = 1
fraction = 1.0
"""

VFL = """\
seed = 5
output_dir = "runs"

[data]
n = 400
p = 4
base_frequency = 2.0
frequency_coefficients = [0.3, 0.2, 0.3, 0.2]
severity_shape = 2.0
severity_scale = 0.5

[partition]
kind = "vertical"
{collaborators}
[model]
embedding_width = 3
tail_hidden = [4]

[training]
batch_size = 32
learning_rate = 0.005
epochs = 2

[transport]
kind = "{transport}"
address = "127.0.0.1:0"
timeout = 20.0
"""

SPLIT = """
[[partition.collaborators]]
id = 1
features = ["x1", "x2"]
labels = true

[[partition.collaborators]]
id = 2
features = ["x3", "x4"]
"""

WHOLE = """
[[partition.collaborators]]
id = 1
features = ["x1", "x2", "x3", "x4"]
labels = true
"""


def hfl_config(tmp_path, name="hfl.toml", n=600, collaborators=TWO, rounds=3, local_epochs=1, transport="inproc"):
    path = tmp_path / name
    path.write_text(HFL.format(n=n, collaborators=collaborators, rounds=rounds, local_epochs=local_epochs,
                               transport=transport))
    return path


def vfl_config(tmp_path, name="vfl.toml", collaborators=SPLIT, transport="inproc"):
    path = tmp_path / name
    path.write_text(VFL.format(collaborators=collaborators, transport=transport))
    return path


def cli(*args):
    return main([str(a) for a in args])


def test_generate_is_deterministic(tmp_path):
    cfg = hfl_config(tmp_path, n=10000)
    assert cli("generate", "--config", cfg, "--out", tmp_path / "a") == 0
    assert cli("generate", "--config", cfg, "--out", tmp_path / "b") == 0
    a, b = tmp_path / "a" / "data", tmp_path / "b" / "data"
    names = sorted(p.name for p in a.iterdir())
    assert names == ["A_test.csv", "A_train.csv", "B_test.csv", "B_train.csv", "manifest.json"]
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert [c["rows"] for c in manifest["collaborators"]] == [6500, 3500]
    for c in manifest["collaborators"]:
        lines = (a / f"{c['name']}_train.csv").read_text().splitlines()
        assert len(lines) - 1 == c["train_rows"]
        assert c["train_rows"] + c["test_rows"] == c["rows"]


def test_generate_seed_override_changes_data(tmp_path):
    cfg = hfl_config(tmp_path)
    cli("generate", "--config", cfg, "--out", tmp_path / "a")
    cli("generate", "--config", cfg, "--out", tmp_path / "b", "--seed", 12)
    assert (tmp_path / "a/data/A_train.csv").read_bytes() != (tmp_path / "b/data/A_train.csv").read_bytes()


def test_overlapping_features_exit_2(tmp_path, capsys):
    cfg = vfl_config(tmp_path, collaborators=SPLIT.replace('["x3", "x4"]', '["x2", "x3", "x4"]'))
    assert cli("generate", "--config", cfg, "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "feature 'x2' is already assigned" in err
    assert not (tmp_path / "o").exists()


def test_mode_partition_mismatch_exit_2(tmp_path, capsys):
    assert cli("run", "--config", hfl_config(tmp_path), "--mode", "vfl") == 2
    assert "vertical partition" in capsys.readouterr().err


def test_unwritable_output_exit_2(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli("run", "--config", hfl_config(tmp_path), "--mode", "local", "--out", blocker / "x") == 2
    assert "cannot create output directory" in capsys.readouterr().err


def test_singleton_local_equals_hfl_model_files(tmp_path):
    cfg = hfl_config(tmp_path, collaborators=ONE, rounds=4, local_epochs=2)
    assert cli("run", "--config", cfg, "--mode", "local") == 0
    assert cli("run", "--config", cfg, "--mode", "hfl") == 0
    runs = tmp_path / "runs"
    assert (runs / "local/model_A.fcm").read_bytes() == (runs / "hfl/model_global.fcm").read_bytes()


def test_degenerate_vfl_matches_local_report(tmp_path):
    cfg = vfl_config(tmp_path, collaborators=WHOLE)
    assert cli("run", "--config", cfg, "--mode", "local") == 0
    assert cli("run", "--config", cfg, "--mode", "vfl") == 0
    local = EvaluationReport.read(tmp_path / "runs/local/report.jsonl").rows
    fed = EvaluationReport.read(tmp_path / "runs/vfl/report.jsonl").rows
    assert [r.key for r in local] == [r.key for r in fed]
    for lo, fe in zip(local, fed):
        assert (lo.mode, fe.mode) == ("local", "vfl")
        assert abs(lo.pe - fe.pe) <= 1e-12 and abs(lo.mse - fe.mse) <= 1e-12


@pytest.mark.parametrize("make, mode", [(hfl_config, "hfl"), (vfl_config, "vfl")])
def test_socket_and_inproc_runs_match(tmp_path, make, mode):
    cfg = make(tmp_path)
    assert cli("run", "--config", cfg, "--mode", mode, "--out", tmp_path / "i") == 0
    assert cli("run", "--config", cfg, "--mode", mode, "--out", tmp_path / "s", "--transport", "socket") == 0
    a, b = tmp_path / "i" / mode, tmp_path / "s" / mode
    for name in sorted(p.name for p in a.iterdir() if p.name != "run.log"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert "elapsed_s" in (b / "run.log").read_text()


def test_report_hfl_layout(tmp_path, capsys):
    cfg = hfl_config(tmp_path)
    cli("run", "--config", cfg, "--mode", "local")
    cli("run", "--config", cfg, "--mode", "hfl")
    capsys.readouterr()
    assert cli("report", tmp_path / "runs/local/report.jsonl", tmp_path / "runs/hfl/report.jsonl") == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["Collaborator", "Split", "Mode", "PE"]
    rows = [line.split() for line in lines if "Local" in line or "HFL" in line]
    assert len(rows) == 8  # train/test x local/hfl for each collaborator
    assert any(line.startswith("Collaborator A  Train  Local") for line in lines)
    assert any(line.startswith("Collaborator B  Train  Local") for line in lines)


def test_report_vfl_uses_company_rows(tmp_path, capsys):
    cfg = vfl_config(tmp_path)
    cli("run", "--config", cfg, "--mode", "local")
    cli("run", "--config", cfg, "--mode", "vfl")
    capsys.readouterr()
    assert cli("report", tmp_path / "runs/local/report.jsonl", tmp_path / "runs/vfl/report.jsonl") == 0
    out = capsys.readouterr().out
    assert "Company A     Train  Local" in out and "VFL" in out


def test_report_missing_local_lists_keys(tmp_path, capsys):
    cfg = hfl_config(tmp_path)
    cli("run", "--config", cfg, "--mode", "hfl")
    capsys.readouterr()
    assert cli("report", tmp_path / "runs/hfl/report.jsonl") == 2
    err = capsys.readouterr().err
    assert "no local baseline for A/test, A/train, B/test, B/train" in err


def test_report_rejects_garbage(tmp_path, capsys):
    bad = tmp_path / "r.jsonl"
    bad.write_text('{"collaborator": "A"}\n')
    assert cli("report", bad) == 2
    assert "r.jsonl:1" in capsys.readouterr().err


def test_serve_requires_socket(tmp_path, capsys):
    assert cli("serve", "--config", hfl_config(tmp_path), "--role", "aggregator") == 2
    assert cli("serve", "--config", hfl_config(tmp_path), "--role", "collaborator") == 2
    assert cli("serve", "--config", hfl_config(tmp_path, transport="socket"), "--role", "referee") == 2


# -- multi-process serving -----------------------------------------------------


def spawn(*args):
    return subprocess.Popen([sys.executable, "-m", "fedclaims.cli", *map(str, args)],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)


def listening(proc):
    line = proc.stdout.readline()
    assert line.startswith("listening on "), line + proc.stderr.read()
    return line.split()[-1]


def serve_hfl(cfg, out, *extra_per_collaborator):
    agg = spawn("serve", "--config", cfg, "--out", out, "--role", "aggregator")
    address = listening(agg)
    collaborators = [spawn("serve", "--config", cfg, "--out", out, "--role", "collaborator", cid, "--address", address,
                           *extra)
                     for cid, extra in zip((1, 2), extra_per_collaborator or ((), ()))]
    return agg, collaborators


def finish(proc, timeout=60):
    out, err = proc.communicate(timeout=timeout)
    return proc.returncode, out, err


def test_three_process_hfl_matches_inproc(tmp_path):
    cfg = hfl_config(tmp_path, transport="socket")
    agg, collaborators = serve_hfl(cfg, tmp_path / "served")
    results = [finish(p) for p in [agg, *collaborators]]
    assert [r[0] for r in results] == [0, 0, 0], results
    assert cli("run", "--config", cfg, "--mode", "hfl", "--out", tmp_path / "inproc", "--transport", "inproc") == 0
    served, inproc = tmp_path / "served/hfl", tmp_path / "inproc/hfl"
    assert (served / "history.jsonl").read_bytes() == (inproc / "history.jsonl").read_bytes()
    assert (served / "model_global.fcm").read_bytes() == (inproc / "model_global.fcm").read_bytes()
    merged = EvaluationReport.read(served / "report_A.jsonl").rows + EvaluationReport.read(served / "report_B.jsonl").rows
    assert sorted(merged, key=lambda r: r.key) == sorted(EvaluationReport.read(inproc / "report.jsonl").rows,
                                                         key=lambda r: r.key)


def test_two_process_vfl_matches_inproc(tmp_path):
    cfg = vfl_config(tmp_path, transport="socket")
    label = spawn("serve", "--config", cfg, "--out", tmp_path / "served", "--role", "label-worker")
    address = listening(label)
    feature = spawn("serve", "--config", cfg, "--out", tmp_path / "served", "--role", "feature-worker", 2,
                    "--address", address)
    assert [finish(p)[0] for p in (label, feature)] == [0, 0]
    assert cli("run", "--config", cfg, "--mode", "vfl", "--out", tmp_path / "inproc", "--transport", "inproc") == 0
    for name in ("history.jsonl", "report.jsonl", "model_tail.fcm", "model_A_head.fcm", "model_B_head.fcm"):
        assert (tmp_path / "served/vfl" / name).read_bytes() == (tmp_path / "inproc/vfl" / name).read_bytes()


def test_wrong_protocol_version_rejected(tmp_path):
    cfg = hfl_config(tmp_path, transport="socket")
    agg, (c1, c2) = serve_hfl(cfg, tmp_path / "o", (), ("--protocol-version", 2))
    code, _, err = finish(c2)
    assert code == 4 and "rejected protocol version 2" in err
    code, _, err = finish(agg)
    assert code == 4 and "collaborator 2 speaks protocol version 2, expected 1" in err
    assert finish(c1)[0] == 4


def test_interrupted_collaborator_names_round_and_id(tmp_path):
    cfg = hfl_config(tmp_path, n=4000, rounds=500, transport="socket")
    agg, (c1, c2) = serve_hfl(cfg, tmp_path / "o")
    history = tmp_path / "o/hfl/history.jsonl"
    deadline = time.monotonic() + 30
    while time.monotonic() < deadline and (not history.exists() or history.read_text().count("\n") < 2):
        time.sleep(0.05)
    c2.send_signal(signal.SIGINT)
    code, _, err = finish(c2)
    assert code == 130 and "interrupted" in err
    code, _, err = finish(agg)
    assert code == 4
    assert "OrchestrationError: round" in err and "lost collaborator 2" in err
    assert finish(c1)[0] == 4
