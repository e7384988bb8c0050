import json

import numpy as np
import pytest

from streamlmm.cli import EXIT_FAIL, EXIT_INPUT, EXIT_OK, main


def manifest(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--out", str(data), "--videos", "60", "--seed", "4"]) == EXIT_OK
    ck = root / "model.npz"
    cfg = root / "model.ini"
    cfg.write_text(
        "[model]\nlayers = 2\nmodel_dim = 32\nheads = 2\nhead_dim = 16\ncross_every = 1\n"
        "vocab = 40\npatch_grid = 2x2\nn_symbols = 8\nenc_dim = 8\n"
    )
    code = main(["train", "--corpus", str(data / "corpus.jsonl"), "--config", str(cfg), "--out", str(ck),
                 "--steps", "12", "--batch-size", "4", "--gate-kind", "tanh", "--no-use-vffn"])
    assert code == EXIT_OK
    return root


def test_gen_data_outputs_and_reproducibility(workspace, tmp_path):
    data = workspace / "data"
    m = manifest(data / "manifest.json")
    assert m["command"] == "gen-data" and m["result"]["videos"] == 60 and m["exit_code"] == 0
    assert {"streamlmm", "numpy", "python"} <= set(m["versions"])
    again = tmp_path / "again"
    assert main(["gen-data", "--out", str(again), "--videos", "60", "--seed", "4"]) == EXIT_OK
    for name in ("corpus.jsonl", "future.jsonl", "schedules/v000000.jsonl"):
        assert (again / name).read_bytes() == (data / name).read_bytes()
    sched = [json.loads(x) for x in (data / "schedules/v000000.jsonl").read_text().splitlines()[1:]]
    assert np.allclose(np.diff([r["time"] for r in sched]), 0.2)


def test_seed_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("STREAMLMM_SEED", "4")
    assert main(["gen-data", "--out", str(tmp_path / "a"), "--videos", "5", "--seed", "99", "--schedules", "0"]) == EXIT_OK
    monkeypatch.delenv("STREAMLMM_SEED")
    assert main(["gen-data", "--out", str(tmp_path / "b"), "--videos", "5", "--seed", "4", "--schedules", "0"]) == EXIT_OK
    assert (tmp_path / "a/corpus.jsonl").read_bytes() == (tmp_path / "b/corpus.jsonl").read_bytes()
    assert manifest(tmp_path / "a/manifest.json")["seeds"]["corpus"] == 4
    monkeypatch.setenv("STREAMLMM_SEED", "x")
    assert main(["gen-data", "--out", str(tmp_path / "c"), "--videos", "5"]) == EXIT_INPUT


def test_train_records_loss_and_ablation_flags(workspace):
    m = manifest(workspace / "model.manifest.json")
    cfg = m["config"]["model"]
    assert cfg["gate_kind"] == "tanh" and cfg["use_vffn"] is False
    lines = (workspace / "model.loss.jsonl").read_text().splitlines()
    assert len(lines) == 13
    first = json.loads(lines[1])["loss"]
    assert abs(first - np.log(40)) < 0.5


def test_train_is_deterministic(workspace, tmp_path):
    out = tmp_path / "m.npz"
    args = ["train", "--corpus", str(workspace / "data/corpus.jsonl"), "--config", str(workspace / "model.ini"), "--out", str(out),
            "--steps", "12", "--batch-size", "4", "--gate-kind", "tanh", "--no-use-vffn"]
    assert main(args) == EXIT_OK
    a = (workspace / "model.loss.jsonl").read_text()
    assert (tmp_path / "m.loss.jsonl").read_text() == a


def test_decode_modes_agree(workspace):
    sched = workspace / "data/schedules/v000001.jsonl"
    outs = {}
    for mode in ("streaming", "offline-oracle", "fixed-context"):
        out = workspace / f"{mode}.jsonl"
        code = main(["decode", "--checkpoint", str(workspace / "model.npz"), "--schedule", str(sched), "--question",
                     "which symbol is visible right now ?", "--t-q", "4", "--mode", mode, "--max-tokens", "5", "--out", str(out)])
        assert code == EXIT_OK
        outs[mode] = [json.loads(x) for x in out.read_text().splitlines()]
    tok = lambda rows: [r["token"] for r in rows if r.get("type") == "token"]
    assert tok(outs["streaming"]) == tok(outs["offline-oracle"])
    assert outs["streaming"][-1]["freshness"]["newest_fraction"] == 1.0
    fixed = [r for r in outs["fixed-context"] if r.get("type") == "token"]
    assert all(max(r["attended"]) <= 4.0 for r in fixed)
    m = manifest(workspace / "streaming.manifest.json")
    assert m["result"]["status"] == "ok" and m["inputs"][0].endswith("model.npz")


def test_decode_input_errors(workspace, tmp_path):
    bad = tmp_path / "s.jsonl"
    bad.write_text('{"format": "streamlmm-schedule", "version": 1}\n{"time": 0, "frame": "nope.npy"}\n')
    args = ["decode", "--checkpoint", str(workspace / "model.npz"), "--question", "which", "--out", str(tmp_path / "t.jsonl")]
    assert main(args + ["--schedule", str(bad)]) == EXIT_INPUT
    assert main(args + ["--schedule", str(tmp_path / "missing.jsonl")]) == EXIT_INPUT
    assert manifest(tmp_path / "t.manifest.json")["exit_code"] == EXIT_INPUT


def test_bench_command(tmp_path):
    out = tmp_path / "b.jsonl"
    assert main(["bench", "--frames", "0,2,4", "--text-len", "8", "--repeats", "1", "--out", str(out)]) == EXIT_OK
    rows = [json.loads(x) for x in out.read_text().splitlines()]
    assert rows[0]["format"] == "streamlmm-bench" and rows[-1]["type"] == "summary"
    assert all(r["flops_formula"] == r["flops_counted"] for r in rows[1:-1])
    assert main(["bench", "--frames", "a,b"]) == EXIT_INPUT


def test_verify_command(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    out = tmp_path / "r.json"
    assert main(["verify", "mask", "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["passed"] is True
    assert main(["verify", "no-such-suite"]) == EXIT_INPUT
    assert (tmp_path / "streamlmm-verify.manifest.json").exists()


def test_verify_failure_exit_code(tmp_path, monkeypatch):
    from streamlmm import verify

    monkeypatch.setitem(verify.SUITES, "mask", lambda: {"passed": False})
    assert main(["verify", "mask", "--out", str(tmp_path / "r.json")]) == EXIT_FAIL


def test_usage_error_exit_code():
    assert main(["train"]) == EXIT_INPUT
