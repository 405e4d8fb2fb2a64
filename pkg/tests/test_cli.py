"""End-to-end command-line tests, run in-process for speed."""

import json
import subprocess
import sys

import numpy as np
import pytest

from blockmark.cli import EXIT_DATA, EXIT_GATE, EXIT_OK, EXIT_USAGE, main

TINY_SPEC = "synthetic:n=96,test_n=48,classes=4,shape=3x8x8,variants=4"
TINY_TRAIN_FLAGS = ["--epochs", "2", "--width", "8", "--no-batchnorm",
                    "--augment-pad", "0"]
KEY1_FINGERPRINT = (
    "09dcf6cc104df8ffecbe43a0fee935c9fb766c84a7a795bba1e441a92d145d0d"
)


def run(argv):
    """Invoke the CLI; normalize argparse's SystemExit into a return code."""
    try:
        return main(argv)
    except SystemExit as exc:
        return int(exc.code or 0)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Workspace with a key, a forged key, and a tiny embedded model."""
    root = tmp_path_factory.mktemp("cli")
    paths = {
        "key": root / "key.json",
        "forged": root / "forged.json",
        "model": root / "model.ckpt",
        "root": root,
    }
    assert run(["keygen", "--seed", "1", "--block-size", "2",
                "--out", str(paths["key"])]) == EXIT_OK
    assert run(["keygen", "--seed", "2", "--block-size", "2",
                "--out", str(paths["forged"])]) == EXIT_OK
    assert run(["train", "--data", TINY_SPEC, "--key", str(paths["key"]),
                "--out", str(paths["model"]), *TINY_TRAIN_FLAGS]) == EXIT_OK
    return paths


# -- keygen -------------------------------------------------------------------


def test_keygen_prints_fingerprint(tmp_path, capsys):
    out = tmp_path / "k.json"
    assert run(["keygen", "--seed", "1", "--block-size", "2",
                "--out", str(out)]) == EXIT_OK
    stdout = capsys.readouterr().out
    assert KEY1_FINGERPRINT in stdout
    assert "bits=12" in stdout
    assert json.loads(out.read_text())["fingerprint"] == KEY1_FINGERPRINT


def test_global_flag_position_is_equivalent(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run(["--seed", "1", "keygen", "--block-size", "2",
                "--out", str(a)]) == EXIT_OK
    assert run(["keygen", "--seed", "1", "--block-size", "2",
                "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    # A value after the subcommand overrides one before it.
    c = tmp_path / "c.json"
    assert run(["--seed", "5", "keygen", "--seed", "1", "--block-size", "2",
                "--out", str(c)]) == EXIT_OK
    assert json.loads(c.read_text())["seed"] == 1
    capsys.readouterr()


def test_keygen_default_location_uses_out_dir(tmp_path, capsys):
    assert run(["keygen", "--block-size", "2",
                "--out-dir", str(tmp_path / "kd")]) == EXIT_OK
    assert (tmp_path / "kd" / "key.json").exists()
    capsys.readouterr()


# -- exit codes ---------------------------------------------------------------


def test_usage_errors_exit_1(capsys):
    assert run(["keygen"]) == EXIT_USAGE  # missing --block-size
    assert run(["no-such-command"]) == EXIT_USAGE
    assert run([]) == EXIT_USAGE  # a subcommand is required
    assert run(["keygen", "--block-size", "2", "--bogus"]) == EXIT_USAGE
    capsys.readouterr()


def test_invalid_values_exit_1(ws, capsys):
    assert run(["keygen", "--block-size", "0"]) == EXIT_USAGE
    assert run(["verify", "--model", str(ws["model"]), "--key", str(ws["key"]),
                "--data", TINY_SPEC, "--threshold", "1.5"]) == EXIT_USAGE
    capsys.readouterr()


def test_missing_files_exit_2(ws, tmp_path, capsys):
    assert run(["verify", "--model", str(ws["model"]),
                "--key", str(tmp_path / "absent.json"),
                "--data", TINY_SPEC]) == EXIT_DATA
    assert run(["transform", "--key", str(ws["key"]),
                "--data", str(tmp_path / "nowhere")]) == EXIT_DATA
    assert run(["report", "--table", str(tmp_path / "none.json")]) == EXIT_DATA
    capsys.readouterr()


# -- transform ----------------------------------------------------------------


def test_transform_round_trip(ws, tmp_path, capsys):
    once = tmp_path / "once"
    twice = tmp_path / "twice"
    assert run(["transform", "--key", str(ws["key"]), "--data", TINY_SPEC,
                "--out-dir", str(once)]) == EXIT_OK
    assert (once / "train" / "manifest.json").exists()
    assert (once / "test" / "manifest.json").exists()
    # Transforming the pair again restores the original pixels exactly.
    assert run(["transform", "--key", str(ws["key"]), "--data", str(once),
                "--out-dir", str(twice)]) == EXIT_OK
    from blockmark.data import load_raw_dataset
    from blockmark.experiments import resolve_dataset

    train, _ = resolve_dataset(TINY_SPEC)
    restored = load_raw_dataset(twice / "train")
    assert np.array_equal(restored.images, train.images)
    assert np.array_equal(restored.labels, train.labels)
    # A single raw directory (not a train/test pair) also works.
    single = tmp_path / "single"
    assert run(["transform", "--key", str(ws["key"]),
                "--data", str(once / "train"),
                "--out-dir", str(single)]) == EXIT_OK
    assert (single / "manifest.json").exists()
    capsys.readouterr()


# -- train / verify -----------------------------------------------------------


def test_train_reports_tau(ws, capsys):
    capsys.readouterr()
    model2 = ws["root"] / "model2.ckpt"
    assert run(["train", "--data", TINY_SPEC, "--key", str(ws["key"]),
                "--out", str(model2), *TINY_TRAIN_FLAGS]) == EXIT_OK
    stdout = capsys.readouterr().out
    assert "test accuracy" in stdout
    assert "detection rate (tau)" in stdout
    # Same flags, same bytes: training through the CLI is deterministic.
    assert model2.read_bytes() == ws["model"].read_bytes()


def test_train_plain_has_no_tau_line(tmp_path, capsys):
    capsys.readouterr()
    out = tmp_path / "plain.ckpt"
    assert run(["train", "--data", TINY_SPEC, "--out", str(out),
                *TINY_TRAIN_FLAGS]) == EXIT_OK
    stdout = capsys.readouterr().out
    assert "detection rate" not in stdout
    from blockmark.nn import load_model

    assert load_model(out).metadata["watermarked"] is False


def test_verify_success_and_report(ws, tmp_path, capsys):
    capsys.readouterr()
    report_path = tmp_path / "report.json"
    code = run(["verify", "--model", str(ws["model"]), "--key", str(ws["key"]),
                "--data", TINY_SPEC, "--gate", "--report", str(report_path)])
    stdout = capsys.readouterr().out
    assert code == EXIT_OK, stdout
    assert "verdict=Successful" in stdout
    assert KEY1_FINGERPRINT in stdout
    doc = json.loads(report_path.read_text())
    assert doc["verdict"] == "Successful"
    assert doc["tau"] > 0.5
    assert doc["key_fingerprint"] == KEY1_FINGERPRINT


def test_verify_gate_failure_exits_3(ws, tmp_path, capsys):
    # Build a model whose prediction provably flips under the pixel code:
    # it thresholds one pixel that the key inverts, and on the 1/255 grid
    # x > 0.5 iff the inverted pixel is < 0.5, so tau is exactly zero.
    from blockmark.keygen import load_key
    from blockmark.nn import Model, save_model

    key = load_key(ws["key"])
    bit_index = int(np.flatnonzero(key.bits)[0])
    m = key.block_size
    ch, rem = divmod(bit_index, m * m)
    row, col = divmod(rem, m)
    h = w = 8
    flat_index = ch * h * w + row * w + col
    arch = [
        {"kind": "flatten"},
        {"kind": "dense", "name": "fc", "in_features": 3 * h * w,
         "out_features": 2},
    ]
    model = Model.initialize(arch, seed=0)
    model.params["fc.weight"][:] = 0.0
    model.params["fc.bias"][:] = 0.0
    model.params["fc.weight"][0, flat_index] = 1.0
    model.params["fc.bias"][0] = -0.5
    path = tmp_path / "flip.ckpt"
    save_model(model, path)

    code = run(["verify", "--model", str(path), "--key", str(ws["key"]),
                "--data", TINY_SPEC, "--gate"])
    stdout = capsys.readouterr().out
    assert code == EXIT_GATE, stdout
    assert "verdict=Unsuccessful" in stdout
    assert "tau=0.0000" in stdout
    # Without --gate the same verdict is reported but exits 0.
    assert run(["verify", "--model", str(path), "--key", str(ws["key"]),
                "--data", TINY_SPEC]) == EXIT_OK
    capsys.readouterr()


# -- attacks ------------------------------------------------------------------


def test_attack_prune_cli(ws, tmp_path, capsys):
    capsys.readouterr()
    out = tmp_path / "pruned.ckpt"
    assert run(["attack-prune", "--model", str(ws["model"]), "--rate", "0.5",
                "--out", str(out), "--data", TINY_SPEC,
                "--key", str(ws["key"])]) == EXIT_OK
    stdout = capsys.readouterr().out
    assert "newly zeroed weights" in stdout
    assert "detection rate after" in stdout
    assert out.exists()
    assert run(["attack-prune", "--model", str(ws["model"]), "--rate", "1.5",
                "--out", str(out)]) == EXIT_USAGE
    capsys.readouterr()


def test_attack_finetune_cli(ws, tmp_path, capsys):
    capsys.readouterr()
    out = tmp_path / "attacked.ckpt"
    assert run(["attack-finetune", "--model", str(ws["model"]),
                "--forged-key", str(ws["forged"]), "--data", TINY_SPEC,
                "--subset-size", "16", "--epochs", "2",
                "--key", str(ws["key"]), "--out", str(out)]) == EXIT_OK
    stdout = capsys.readouterr().out
    assert "forged key" in stdout
    assert "original key" in stdout
    from blockmark.nn import load_model

    meta = load_model(out).metadata
    assert meta["finetune_attack"]["subset_size"] == 16


# -- experiments and report ---------------------------------------------------

EXP_FLAGS = ["--data", TINY_SPEC, "--block-sizes", "2", "--epochs", "2",
             "--width", "8", "--no-batchnorm", "--subset-sizes", "16",
             "--finetune-epochs", "2", "--prune-rates", "0.0,0.5", "--quiet"]


def test_exp_prune_and_report(tmp_path, capsys):
    out = tmp_path / "sweep"
    assert run(["exp-prune", *EXP_FLAGS, "--out-dir", str(out)]) == EXIT_OK
    stdout = capsys.readouterr().out
    assert "prune-sweep (2 rows)" in stdout
    for name in ("table.json", "table.csv", "summary.txt", "manifest.json",
                 "prune_curve.png"):
        assert (out / name).exists(), name
    elsewhere = tmp_path / "re"
    assert run(["report", "--table", str(out / "table.json"),
                "--out-dir", str(elsewhere)]) == EXIT_OK
    assert (elsewhere / "table.json").read_bytes() == (
        out / "table.json"
    ).read_bytes()
    assert (elsewhere / "prune_curve.png").exists()
    capsys.readouterr()


def test_exp_table1_runs(tmp_path, capsys):
    out = tmp_path / "grid"
    assert run(["exp-table1", *EXP_FLAGS, "--out-dir", str(out)]) == EXIT_OK
    table = json.loads((out / "table.json").read_text())
    assert table["kind"] == "blocksize-grid"
    assert [r["model"] for r in table["rows"]] == ["baseline", "embedded"]
    capsys.readouterr()


def test_exp_finetune_runs(tmp_path, capsys):
    out = tmp_path / "ft"
    assert run(["exp-finetune", *EXP_FLAGS, "--out-dir", str(out)]) == EXIT_OK
    table = json.loads((out / "table.json").read_text())
    assert table["kind"] == "finetune-grid"
    assert [r["subset_size"] for r in table["rows"]] == [16]
    capsys.readouterr()


# -- config files -------------------------------------------------------------


def test_config_file_matches_flags(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "# tiny sweep\n"
        f"dataset = {TINY_SPEC}\n"
        "block_sizes = 2\n"
        "epochs = 2\n"
        "model_width = 8\n"
        "model_batchnorm = false\n"
        "subset_sizes = 16\n"
        "finetune_epochs = 2\n"
        "prune_rates = 0.0, 0.5\n"
    )
    via_cfg = tmp_path / "via_cfg"
    via_flags = tmp_path / "via_flags"
    assert run(["exp-prune", "--config", str(cfg), "--quiet",
                "--out-dir", str(via_cfg)]) == EXIT_OK
    assert run(["exp-prune", *EXP_FLAGS, "--out-dir", str(via_flags)]) == EXIT_OK
    assert (via_cfg / "table.json").read_bytes() == (
        via_flags / "table.json"
    ).read_bytes()
    capsys.readouterr()


def test_flags_override_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"dataset = {TINY_SPEC}\nepochs = 2\nprune_rates = 0.0\n"
                   "model_width = 8\nmodel_batchnorm = false\nblock_sizes = 2\n")
    out = tmp_path / "out"
    assert run(["exp-prune", "--config", str(cfg), "--epochs", "3", "--quiet",
                "--out-dir", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["epochs"] == 3
    capsys.readouterr()


def test_config_file_errors(tmp_path, capsys):
    bad_line = tmp_path / "bad.cfg"
    bad_line.write_text("epochs 2\n")
    assert run(["exp-prune", "--config", str(bad_line)]) == EXIT_DATA
    assert "expected key=value" in capsys.readouterr().err
    unknown = tmp_path / "unknown.cfg"
    unknown.write_text("no_such_option = 1\n")
    assert run(["exp-prune", "--config", str(unknown)]) == EXIT_USAGE
    assert "valid keys" in capsys.readouterr().err
    assert run(["exp-prune", "--config", str(tmp_path / "ghost.cfg")]) == EXIT_DATA
    capsys.readouterr()


# -- determinism flag ---------------------------------------------------------


def test_deterministic_flag_pins_threads(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("OMP_NUM_THREADS", "8")
    monkeypatch.setenv("MKL_NUM_THREADS", "8")
    assert run(["--deterministic", "keygen", "--block-size", "2",
                "--out", str(tmp_path / "k.json")]) == EXIT_OK
    captured = capsys.readouterr()
    import os

    assert os.environ["OMP_NUM_THREADS"] == "1"
    assert os.environ["MKL_NUM_THREADS"] == "1"
    # numpy is already loaded in this test process, and the CLI says so.
    assert "numpy already imported" in captured.err


# -- console entry point ------------------------------------------------------


def test_console_script_subprocess(tmp_path):
    out = tmp_path / "k.json"
    proc = subprocess.run(
        [sys.executable, "-m", "blockmark.cli", "keygen", "--seed", "1",
         "--block-size", "2", "--out", str(out)],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == EXIT_OK, proc.stderr
    assert KEY1_FINGERPRINT in proc.stdout
    assert out.exists()
