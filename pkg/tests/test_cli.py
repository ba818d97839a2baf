import csv
import json

import numpy as np
import pytest

from unlearnkit import checkpoint as ckpt
from unlearnkit.model import ModelConfig, init_model
from unlearnkit.sweeps import SWEEP_COLUMNS

from pipeline import TINY_MODEL, eval_flags, ok, run_cli, toy_pipeline


@pytest.fixture(scope="module")
def pipe(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    logs = toy_pipeline(root)
    return root, logs


def rows_of(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_sweep_csv_layout(pipe):
    root, _ = pipe
    for name, method, knobs in (("tv.csv", "tv", ["0.0", "0.6", "1.0"]), ("pcgu.csv", "pcgu", ["0.0", "0.3"])):
        header = (root / name).read_text(encoding="utf-8").splitlines()[0]
        assert header == ",".join(SWEEP_COLUMNS)
        rows = rows_of(root / name)
        assert [r["knob"] for r in rows] == knobs
        assert all(r["method"] == method and r["runtime_seconds"] == "" for r in rows)


def test_zero_knob_rows_equal_eval(pipe):
    root, _ = pipe
    report = json.loads((root / "report.json").read_text(encoding="utf-8"))
    for name in ("tv.csv", "pcgu.csv"):
        first = rows_of(root / name)[0]
        assert float(first["bias_score"]) == report["bias_score"]
        assert float(first["perplexity"]) == report["perplexity"]
        assert float(first["mc_accuracy"]) == report["mc_accuracy"]
    assert report["checkpoint"].endswith("base.ulkt") and len(report["config_hash"]) == 16
    assert abs(abs(report["bias_score"] - 0.5) - report["delta"]) <= 1e-12


def test_permuted_grid_gives_same_rows(pipe, tmp_path):
    root, _ = pipe
    data = root / "data"
    common = ["--base", root / "base.ulkt", "--train-pairs", data / "pairs.jsonl", "--epochs", 1, "--batch-size", 64, "--alpha", 0.05, *eval_flags(data)]
    ok("sweep-pcgu", *common, "--ks", "0.3,0", "--out", tmp_path / "perm.csv")
    assert (tmp_path / "perm.csv").read_bytes() == (root / "pcgu.csv").read_bytes()
    ok("sweep-pcgu", *common, "--ks", "0.3", "--out", tmp_path / "one.csv")
    assert rows_of(tmp_path / "one.csv")[0] == rows_of(root / "pcgu.csv")[1]


def test_sweep_rows_match_single_commands(pipe, tmp_path):
    root, _ = pipe
    data = root / "data"
    ok("eval", "--ckpt", root / "debiased.ulkt", *eval_flags(data), "--out", tmp_path / "r.json")
    report = json.loads((tmp_path / "r.json").read_text(encoding="utf-8"))
    row = rows_of(root / "tv.csv")[1]
    assert float(row["bias_score"]) == report["bias_score"] and float(row["perplexity"]) == report["perplexity"]


def test_sharded_cli_matches_plain(pipe):
    root, _ = pipe
    a, b = ckpt.read(root / "pcgu.ulkt").params, ckpt.read(root / "pcgu2.ulkt").params
    assert all(np.max(np.abs(a[k] - b[k])) <= 1e-6 for k in a)
    plain = rows_of(root / "pcgu_log.csv")
    sharded = [r for r in rows_of(root / "pcgu2_log.csv") if r["phase"] == "select"]
    assert [r["selected_count"] for r in plain] == [r["selected_count"] for r in sharded]
    assert list(plain[0]) == ["epoch", "batch", "mean_adv_logprob", "mean_cosine", "selected_count"]


def test_train_zero_steps_is_init(pipe, tmp_path):
    root, _ = pipe
    data = root / "data"
    ok("train-base", "--corpus", data / "pretrain.txt", "--vocab", data / "vocab.json", "--config", root / "model.json", "--steps", 0, "--seed", 5, "--out", tmp_path / "z.ulkt")
    c = ckpt.read(tmp_path / "z.ulkt")
    cfg = ModelConfig.from_dict({**ModelConfig().to_dict(), **TINY_MODEL, "vocab_size": len(c.vocab), "init_seed": 5})
    assert c.params.bit_equal(init_model(cfg))


def test_task_vector_sources_agree(pipe, tmp_path):
    root, _ = pipe
    ok("tv", "apply", "--pre", root / "base.ulkt", "--ft", root / "ft.ulkt", "--lam", 0.6, "--negate", "--out", tmp_path / "d.ulkt")
    assert (tmp_path / "d.ulkt").read_bytes() == (root / "debiased.ulkt").read_bytes()
    assert ckpt.read(root / "tau.ulkt").kind == "task_vector"


def test_generate_is_reproducible(pipe):
    root, logs = pipe
    again = ok("generate", "--ckpt", root / "base.ulkt", "--prompt", "the", "--max-new", 5, "--temperature", 0.8, "--seed", 3)
    assert again == logs["generate"] and again.startswith("the")


@pytest.mark.parametrize("suffix,magic", [(".png", b"\x89PNG"), (".svg", b"<?xml"), (".pdf", b"%PDF")])
def test_plot_formats(pipe, tmp_path, suffix, magic):
    root, _ = pipe
    out = tmp_path / f"fig{suffix}"
    ok("plot", root / "tv.csv", "--out", out)
    assert out.read_bytes().startswith(magic)
    first = out.read_bytes()
    ok("plot", root / "tv.csv", "--out", out)
    assert out.read_bytes() == first


def test_sweep_plot_flag(pipe, tmp_path):
    root, _ = pipe
    data = root / "data"
    ok("sweep-tv", "--base", root / "base.ulkt", "--tv", root / "tau.ulkt", "--lambdas", "0,1", *eval_flags(data), "--out", tmp_path / "t.csv", "--plot", tmp_path / "t.png")
    assert (tmp_path / "t.png").read_bytes().startswith(b"\x89PNG")


def test_timing_fills_runtime(pipe, tmp_path):
    root, _ = pipe
    data = root / "data"
    ok("sweep-tv", "--base", root / "base.ulkt", "--tv", root / "tau.ulkt", "--lambdas", "0", *eval_flags(data), "--out", tmp_path / "t.csv", "--timing")
    assert float(rows_of(tmp_path / "t.csv")[0]["runtime_seconds"]) >= 0


def test_exit_codes(pipe, tmp_path):
    root, _ = pipe
    data = root / "data"
    base = root / "base.ulkt"
    assert run_cli()[0] == 1
    assert run_cli("eval", "--nonsense")[0] == 1
    assert run_cli("pcgu", "--base", base, "--pairs", data / "pairs.jsonl", "--out", tmp_path / "x", "--k", 2)[0] == 1
    assert run_cli("sweep-tv", "--base", base, "--tv", root / "tau.ulkt", "--lambdas", "0,0", *eval_flags(data), "--out", tmp_path / "x.csv")[0] == 1
    assert run_cli("eval", "--ckpt", tmp_path / "missing.ulkt", *eval_flags(data))[0] == 2
    broken = tmp_path / "broken.ulkt"
    broken.write_bytes(base.read_bytes()[:-3])
    assert run_cli("eval", "--ckpt", broken, *eval_flags(data))[0] == 2
    assert run_cli("sweep-tv", "--base", base, "--tv", base, *eval_flags(data), "--out", tmp_path / "x.csv")[0] == 2
    assert run_cli("plot", data / "pretrain.txt", "--out", tmp_path / "p.png")[0] == 2
    c = ckpt.read(base)
    blown = c.params.replace({"head.w": c.params["head.w"] * np.float32(1e6)})
    ckpt.write(tmp_path / "blown.ulkt", blown, vocab=c.vocab)
    assert run_cli("eval", "--ckpt", tmp_path / "blown.ulkt", *eval_flags(data))[0] == 3
