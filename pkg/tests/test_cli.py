import csv
import json

import numpy as np
import pytest

from ptstab.cli import EXIT_INVALID, EXIT_IO, EXIT_NUMERIC, EXIT_OK, build_parser, main, resolve
from ptstab.dataset import load_dataset
from ptstab.neural_operator import load_operator

GEN = ["gen-data", "--kind", "kernel", "--n", "4", "--dx", "0.1", "--dt", "0.01", "--n-times", "5",
       "--jobs", "1"]
COARSE = ["--dx", "0.1", "--dt", "0.005"]


def _files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(GEN + ["--seed", "7", "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def checkpoint(corpus, tmp_path_factory):
    stem = tmp_path_factory.mktemp("ck") / "kernel"
    assert main(["train", "--kind", "kernel", "--data", str(corpus / "kernel.manifest.json"),
                 "--epochs", "3", "--seed", "1", "--out", str(stem)]) == EXIT_OK
    return stem


def test_gen_data_writes_three_files(corpus):
    assert sorted(p.name for p in corpus.iterdir()) == [
        "kernel.inputs.bin", "kernel.manifest.json", "kernel.targets.bin"]
    assert load_dataset(corpus / "kernel.manifest.json").manifest["count"] == 4


def test_gen_data_is_deterministic(corpus, tmp_path):
    assert main(GEN + ["--seed", "7", "--out", str(tmp_path)]) == EXIT_OK
    assert _files(tmp_path) == _files(corpus)


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PTSTAB_SEED", "7")
    assert resolve(GEN + ["--out", "x"]).seed == 7
    assert resolve(GEN + ["--seed", "2", "--out", "x"]).seed == 2
    monkeypatch.delenv("PTSTAB_SEED")
    assert resolve(GEN + ["--out", "x"]).seed == 0
    monkeypatch.setenv("PTSTAB_SEED", "seven")
    assert main(GEN + ["--out", str(tmp_path)]) == EXIT_INVALID


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 9, "n-times": 3, "sigma_low": 2.5}))
    args = resolve(["gen-data", "--config", str(cfg), "--n", "4"])
    assert (args.n, args.n_times, args.sigma_low, args.sigma_high) == (4, 3, 2.5, 4.0)
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_INVALID
    cfg.write_text("{not json")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_INVALID
    assert main(["gen-data", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_IO


def test_unknown_flag_is_an_error():
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--no-such-flag"])
    assert exc.value.code == EXIT_INVALID


@pytest.mark.parametrize("command", ["gen-data", "train", "simulate", "verify", "bench"])
def test_help_documents_every_flag(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text
        if action.option_strings and action.dest != "help":
            assert action.help


@pytest.mark.parametrize("argv", [
    ["simulate", "--dx", "-0.1"],
    ["simulate", "--T", "8", "--margin", "9"],
    ["simulate", "--controller", "no-kernel"],
    ["simulate", "--controller", "perturbed", "--eps", "-1"],
    ["bench"],
])
def test_invalid_input_exit_code(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path)]) == EXIT_INVALID


def test_missing_paths_are_invalid():
    assert main(["gen-data"]) == EXIT_INVALID
    assert main(["train", "--out", "x"]) == EXIT_INVALID
    assert main(["train", "--data", "x"]) == EXIT_INVALID


def test_train_writes_checkpoint_and_is_deterministic(corpus, checkpoint, tmp_path, capsys):
    stem = tmp_path / "again"
    assert main(["train", "--kind", "kernel", "--data", str(corpus / "kernel.manifest.json"),
                 "--epochs", "3", "--seed", "1", "--out", str(stem)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "final train MSE" in out and "validation L2 field error" in out
    for suffix in (".json", ".bin"):
        assert stem.with_suffix(suffix).read_bytes() == checkpoint.with_suffix(suffix).read_bytes()
    assert load_operator(checkpoint).kind == "kernel"


def test_train_rejects_mismatched_kind(corpus, tmp_path):
    assert main(["train", "--kind", "feedback", "--data", str(corpus / "kernel.manifest.json"),
                 "--out", str(tmp_path / "f")]) == EXIT_INVALID


def test_train_feedback_operator(tmp_path, capsys):
    data = tmp_path / "fb"
    assert main(["gen-data", "--kind", "feedback", "--n", "3", "--n-stored", "6", "--dx", "0.1",
                 "--dt", "0.01", "--jobs", "1", "--seed", "3", "--out", str(data)]) == EXIT_OK
    assert main(["train", "--kind", "feedback", "--data", str(data / "feedback.manifest.json"),
                 "--epochs", "2", "--out", str(tmp_path / "fbop")]) == EXIT_OK
    assert "validation max |U_hat - U|" in capsys.readouterr().out
    assert load_operator(tmp_path / "fbop").kind == "feedback"


def test_corrupted_dataset_exit_code(corpus, tmp_path):
    for p in corpus.iterdir():
        (tmp_path / p.name).write_bytes(p.read_bytes())
    blob = tmp_path / "kernel.targets.bin"
    raw = bytearray(blob.read_bytes())
    raw[10] ^= 0xFF
    blob.write_bytes(bytes(raw))
    assert main(["train", "--data", str(tmp_path / "kernel.manifest.json"),
                 "--out", str(tmp_path / "ck")]) == EXIT_IO
    assert main(["verify", "--data", str(tmp_path / "kernel.manifest.json")]) == EXIT_IO


def _simulate(out, *extra):
    return main(["simulate", *COARSE, "--out", str(out), *extra])


def _json_line(text):
    return json.loads(text.strip().splitlines()[-1])


def test_simulate_open_and_closed_loop(tmp_path, capsys):
    assert _simulate(tmp_path, "--controller", "open-loop") == EXIT_OK
    assert _json_line(capsys.readouterr().out)["blown_up"]
    assert _simulate(tmp_path, "--controller", "analytic") == EXIT_OK
    res = _json_line(capsys.readouterr().out)
    assert not res["blown_up"] and res["terminal_ratio"] <= 1e-2 and res["envelope_pass"]
    for suffix in ("_state.csv", "_scalar.csv", "_envelope.csv", "_report.json"):
        assert (tmp_path / f"analytic{suffix}").exists()
    lines = (tmp_path / "analytic_scalar.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    assert lines[1] == "t,U,l2norm"


def test_simulate_is_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert _simulate(tmp_path / sub, "--controller", "perturbed", "--eps", "0.01", "--seed", "4") == EXIT_OK
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    assert _simulate(tmp_path / "c", "--controller", "perturbed", "--eps", "0.01", "--seed", "5") == EXIT_OK
    a = (tmp_path / "a" / "perturbed_scalar.csv").read_text()
    assert a != (tmp_path / "c" / "perturbed_scalar.csv").read_text()


def test_simulate_stride(tmp_path):
    assert _simulate(tmp_path, "--stride", "10", "--run-id", "s") == EXIT_OK
    with open(tmp_path / "s_scalar.csv") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    assert len(rows) - 1 == 1520 // 10 + 1


def test_simulate_with_kernel_surrogate(checkpoint, tmp_path, capsys):
    assert _simulate(tmp_path, "--controller", "no-kernel", "--checkpoint", str(checkpoint)) == EXIT_OK
    assert "terminal_ratio" in _json_line(capsys.readouterr().out)
    report = json.loads((tmp_path / "no-kernel_report.json").read_text())
    assert report["gain_error_l2_max"] > 0


def test_simulate_rejects_wrong_checkpoint_kind(checkpoint, tmp_path):
    assert _simulate(tmp_path, "--controller", "no-feedback", "--checkpoint", str(checkpoint)) == EXIT_INVALID


def test_bench_emits_one_row_per_dx(checkpoint, tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert main(["bench", "--checkpoint", str(checkpoint), "--dx", "0.1,0.05", "--repetitions", "1",
                 "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# ")
    header = [l for l in lines if not l.startswith("#")]
    assert header[0] == "dx,analytic_s,surrogate_s,speedup"
    rows = np.array([[float(v) for v in l.split(",")] for l in header[1:]])
    assert rows.shape == (2, 4)
    assert np.allclose(rows[:, 3], rows[:, 1] / rows[:, 2], rtol=1e-4)
    assert main(["bench", "--checkpoint", str(checkpoint), "--dx", "a,b"]) == EXIT_INVALID


def test_verify_flags_tampered_checkpoint(checkpoint, tmp_path, capsys):
    for suffix in (".json", ".bin"):
        (tmp_path / f"ck{suffix}").write_bytes(checkpoint.with_suffix(suffix).read_bytes())
    raw = bytearray((tmp_path / "ck.bin").read_bytes())
    raw[0] ^= 0x01
    (tmp_path / "ck.bin").write_bytes(bytes(raw))
    assert main(["verify", "--checkpoint", str(tmp_path / "ck")]) == EXIT_IO
    assert "[FAIL] checksum" in capsys.readouterr().out


def test_exit_code_constants():
    assert (EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO) == (0, 1, 2, 3)


def test_verify_quick_passes_with_epsilon_sweep(capsys):
    assert main(["verify", "--quick", "--epsilon-scaling"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "[FAIL]" not in out
    assert out.count("[PASS]") == 6
    table = out[out.index("eps,terminal_l2,practical_bound"):].splitlines()[1:4]
    assert [row.split(",")[0] for row in table] == ["1e-03", "1e-02", "1e-01"]
