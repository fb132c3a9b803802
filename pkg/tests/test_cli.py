import csv
import json

import numpy as np
import pytest

from ufedgan import cli, transport

GAUSSIAN = """
seed = 0
[data]
source = "toy:gaussian1d"
num_samples = 2000
[partition]
num_users = 1
[protocol]
steps_per_round = 10
[output]
dir = "{out}"
synthetic_samples = 500
"""

MIXTURE = """
seed = 1
[data]
source = "toy:mixture2d"
num_samples = 3000
[partition]
num_users = {users}
beta = 0.5
[protocol]
steps_per_round = 5
[attacker]
users = [0, 1]
[output]
dir = "{out}"
synthetic_samples = 400
"""


def _config(tmp_path, template, name="c.toml", **fields):
    path = tmp_path / name
    path.write_text(template.format(out=tmp_path / "out", **fields))
    return str(path)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_partition_single_user(tmp_path, capsys):
    cfg = _config(tmp_path, GAUSSIAN)
    assert cli.main(["partition", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "N=1" in out and "conservation: ok" in out
    plan = json.loads((tmp_path / "out" / "partition.json").read_text())
    assert plan["num_users"] == 1


def test_partition_many_users(tmp_path, capsys):
    cfg = _config(tmp_path, MIXTURE, users=10)
    assert cli.main(["partition", "--config", cfg, "--out", str(tmp_path / "p")]) == 0
    lines = (tmp_path / "p" / "partition_summary.csv").read_text().splitlines()
    table = [l.split(",") for l in lines if l and not l.startswith("#")][1:]
    assert len(table) == 10
    assert sum(int(r[-1]) for r in table) == 2400  # 3000 minus the 20% holdout


def test_run_writes_artifacts(tmp_path, capsys):
    cfg = _config(tmp_path, MIXTURE, users=3)
    assert cli.main(["run", "--config", cfg, "--rounds", "3"]) == 0
    out = tmp_path / "out"
    for name in ("effective_config.json", "VERSION", "rng_streams.txt", "partition.json", "metrics.csv",
                 "summary.csv", "final_state.json"):
        assert (out / name).is_file(), name
    for u in range(3):
        assert (out / "checkpoints" / f"user{u}-generator.ufgc").is_file()
        assert np.load(out / "synthetic" / f"user{u}.npy").shape == (400, 2)
    rows = _rows(out / "metrics.csv")
    assert len(rows) == 9 and all(float(r["is"]) >= 1.0 for r in rows)
    assert sorted({int(r["round"]) for r in rows}) == [1, 2, 3]
    summary = _rows(out / "summary.csv")
    assert [r["role"] for r in summary] == ["server"] * 3 + ["attacker"] * 2
    frames = transport.transcript_import(out / "transcripts" / "user0.ufgt")
    assert len(frames) == 3 * 5
    effective = json.loads((out / "effective_config.json").read_text())
    assert effective["protocol"]["max_rounds"] == 3 and effective["seed"] == 1


def test_zero_rounds_writes_untrained_state(tmp_path):
    cfg = _config(tmp_path, GAUSSIAN)
    assert cli.main(["run", "--config", cfg, "--rounds", "0"]) == 0
    out = tmp_path / "out"
    assert _rows(out / "metrics.csv") == []
    state = json.loads((out / "final_state.json").read_text())
    assert state["rounds"] == 0 and state["stop_reasons"] == {"0": "max-rounds"}
    assert len(transport.transcript_import(out / "transcripts" / "user0.ufgt")) == 0


def test_run_is_byte_deterministic(tmp_path):
    cfg = _config(tmp_path, GAUSSIAN)
    for d in ("a", "b"):
        assert cli.main(["run", "--config", cfg, "--rounds", "4", "--out", str(tmp_path / d)]) == 0
    for name in ("metrics.csv", "summary.csv", "final_state.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert cli.main(["run", "--config", cfg, "--rounds", "4", "--seed", "7", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "final_state.json").read_bytes() != (tmp_path / "c" / "final_state.json").read_bytes()


def test_attack_from_transcript_file(tmp_path, capsys):
    cfg = _config(tmp_path, GAUSSIAN)
    assert cli.main(["run", "--config", cfg, "--rounds", "2"]) == 0
    capsys.readouterr()
    assert cli.main(["attack", "--config", cfg, "--user", "0"]) == 0
    assert "20 updates replayed" in capsys.readouterr().out
    rows = _rows(tmp_path / "out" / "attack_user0.csv")
    assert rows[0]["role"] == "attacker" and rows[0]["round"] == "2"


def test_attack_on_empty_transcript(tmp_path, capsys):
    cfg = _config(tmp_path, GAUSSIAN)
    empty = transport.transcript_export([], tmp_path / "empty.ufgt")
    assert cli.main(["attack", "--config", cfg, "--transcript", str(empty)]) == 0
    assert "0 updates replayed" in capsys.readouterr().out


def test_evaluate_checkpoint_and_synthetic(tmp_path, capsys):
    cfg = _config(tmp_path, MIXTURE, users=1)
    assert cli.main(["run", "--config", cfg, "--rounds", "2"]) == 0
    capsys.readouterr()
    ckpt = tmp_path / "out" / "checkpoints" / "user0-generator.ufgc"
    assert cli.main(["evaluate", "--config", cfg, "--checkpoint", str(ckpt), "--samples", "300"]) == 0
    out = capsys.readouterr().out
    real_acc = float(out.split("(real training set): accuracy ")[1].split()[0])
    assert real_acc > 0.95  # the eight ring modes are linearly separable
    assert _rows(tmp_path / "out" / "evaluation.csv")[0]["fid"]
    synth = tmp_path / "out" / "synthetic" / "user0.npy"
    assert cli.main(["evaluate", "--config", cfg, "--synthetic", str(synth)]) == 0


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "missing.toml")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[protocol]\nwarp_speed = 9\n")
    assert cli.main(["run", "--config", str(bad)]) == 2
    cfg = _config(tmp_path, GAUSSIAN)
    garbage = tmp_path / "garbage.ufgt"
    garbage.write_bytes(b"not a transcript at all, not even close")
    assert cli.main(["attack", "--config", cfg, "--transcript", str(garbage)]) == 3
    np.save(tmp_path / "wrong.npy", np.zeros((10, 3), np.float32))
    assert cli.main(["evaluate", "--config", cfg, "--synthetic", str(tmp_path / "wrong.npy")]) == 3
    assert cli.main(["evaluate", "--config", cfg, "--checkpoint", str(tmp_path / "absent.ufgc")]) == 3
    with pytest.raises(SystemExit) as exc:
        cli.main(["fly", "--config", cfg])
    assert exc.value.code == 2
    assert "error" in capsys.readouterr().err
