import json

import numpy as np
import pytest

from tracelm.cli import (
    EXIT_BAD_DATA,
    EXIT_HASH_MISMATCH,
    EXIT_MISSING_INPUT,
    EXIT_USAGE,
    RunConfig,
    load_run_config,
    main,
)
from tracelm.synth import ProcessSpec, uniform_delta_bins


def demo_spec(n=5, seed=3):
    rng = np.random.default_rng(seed)
    transitions = rng.dirichlet(np.ones(n) * 3.0, size=n)
    return ProcessSpec(
        actions=tuple(f"Action {i} done" for i in range(n)),
        transitions=transitions,
        initial=np.full(n, 1 / n),
        delta_bins=uniform_delta_bins(n),
        patient_pool=3,
        rows_per_session=(4, 9),
        sessions_per_shift=(2, 3),
        seed=seed,
    )


MODEL_FLAGS = [
    "--preset", "gpt2-3layer", "--d-model", "16", "--n-heads", "2",
    "--d-ff", "32", "--context-len", "64",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    spec_path = root / "proc.json"
    spec_path.write_text(demo_spec().to_json())
    assert main(["synth", "--process", str(spec_path), "--clinicians", "8",
                 "--events-per-clinician", "150", "--out-dir", str(root / "synth"),
                 "--seed", "3"]) == 0
    corpus = root / "synth" / "corpus.csv"
    assert main(["vocab", "--input", str(corpus), "--out-dir", str(root / "voc"),
                 "--seed", "3"]) == 0
    vocab = root / "voc" / "vocab.json"
    assert main(["preprocess", "--input", str(corpus), "--vocab", str(vocab),
                 "--out-dir", str(root / "pre"), "--seed", "3", "--context-len", "64",
                 "--dump-sessions"]) == 0
    assert main(["train", "--dataset", str(root / "pre"), "--vocab", str(vocab),
                 "--out-dir", str(root / "trn"), "--seed", "3", *MODEL_FLAGS,
                 "--epochs", "1", "--batch-size", "4", "--grad-accum", "2",
                 "--optimizer", "adamw", "--lr", "2e-3"]) == 0
    checkpoint = root / "trn" / "checkpoints" / "final.alck"
    assert main(["eval", "--checkpoint", str(checkpoint), "--vocab", str(vocab),
                 "--dataset", str(root / "pre" / "test.altk"), "--out-dir", str(root / "evl"),
                 "--accuracy-events", "40", "--rouge-sessions", "4",
                 "--strategy", "greedy", "--seed", "3"]) == 0
    assert main(["score", "--checkpoint", str(checkpoint), "--vocab", str(vocab),
                 "--input", str(corpus), "--out-dir", str(root / "scr"),
                 "--max-sessions", "4", "--seed", "3"]) == 0
    assert main(["sample", "--checkpoint", str(checkpoint), "--vocab", str(vocab),
                 "--input", str(corpus), "--rows", "3", "--strategy", "greedy",
                 "--out-dir", str(root / "smp"), "--seed", "3"]) == 0
    return root


def test_all_artifacts_exist(pipeline):
    expected = [
        "synth/corpus.csv", "synth/synth_summary.json",
        "voc/vocab.json", "voc/vocab_summary.json",
        "pre/train.altk", "pre/val.altk", "pre/test.altk", "pre/manifest.json",
        "pre/sessions.txt",
        "trn/checkpoints/final.alck", "trn/checkpoints/epoch_001.alck",
        "trn/loss_trace.csv", "trn/loss_curve.png", "trn/train_summary.json",
        "evl/eval_report.json", "evl/perplexity.png", "evl/accuracy.png", "evl/rouge1.png",
        "scr/entropy.csv", "scr/entropy.txt", "scr/entropy.png",
        "smp/sampled_rows.txt",
    ]
    for rel in expected:
        assert (pipeline / rel).exists(), rel


def test_artifacts_embed_run_config(pipeline):
    report = json.loads((pipeline / "evl" / "eval_report.json").read_text())
    assert report["run"]["command"] == "eval"
    assert report["run"]["seed"] == 3
    assert report["run"]["config"]["strategy"] == "greedy"
    trace = (pipeline / "trn" / "loss_trace.csv").read_text().splitlines()
    assert trace[0].startswith("# tracelm")
    assert trace[1] == "# seed=3"


def test_score_renders_dash_for_first_row(pipeline):
    table = (pipeline / "scr" / "entropy.txt").read_text()
    first_data_row = table.splitlines()[3]
    assert first_data_row.rstrip().endswith("-")
    csv_lines = (pipeline / "scr" / "entropy.csv").read_text().splitlines()
    header_idx = next(i for i, l in enumerate(csv_lines) if l.startswith("session_id"))
    assert csv_lines[header_idx + 1].endswith(",")  # empty entropy cell


def test_eval_report_contents(pipeline):
    report = json.loads((pipeline / "evl" / "eval_report.json").read_text())
    for field in ("METRIC_NAME", "PAT_ID", "AT_BIN"):
        assert report["perplexity"][field] >= 1.0
    acc = report["next_action_accuracy"]
    assert acc["All"] <= min(acc["M"], acc["P"], acc["A"]) + 1e-12
    assert set(report["rouge1"]) >= {"M", "P", "A", "All"}


def test_rerun_reproduces_identical_bytes(pipeline, tmp_path):
    spec_path = pipeline / "proc.json"
    assert main(["synth", "--process", str(spec_path), "--clinicians", "8",
                 "--events-per-clinician", "150", "--out-dir", str(tmp_path / "synth2"),
                 "--seed", "3"]) == 0
    assert (tmp_path / "synth2" / "corpus.csv").read_bytes() == \
        (pipeline / "synth" / "corpus.csv").read_bytes()
    corpus = pipeline / "synth" / "corpus.csv"
    assert main(["vocab", "--input", str(corpus), "--out-dir", str(tmp_path / "voc2"),
                 "--seed", "3"]) == 0
    assert (tmp_path / "voc2" / "vocab.json").read_bytes() == \
        (pipeline / "voc" / "vocab.json").read_bytes()


def test_train_rerun_bitwise_identical(pipeline, tmp_path):
    vocab = pipeline / "voc" / "vocab.json"
    argv = ["train", "--dataset", str(pipeline / "pre"), "--vocab", str(vocab),
            "--seed", "3", *MODEL_FLAGS, "--epochs", "1", "--batch-size", "4",
            "--grad-accum", "2", "--optimizer", "adamw", "--lr", "2e-3",
            "--deterministic"]
    assert main(argv + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(argv + ["--out-dir", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "checkpoints" / "final.alck").read_bytes() == \
        (tmp_path / "b" / "checkpoints" / "final.alck").read_bytes()
    assert (tmp_path / "a" / "loss_trace.csv").read_bytes() == \
        (tmp_path / "b" / "loss_trace.csv").read_bytes()


def test_unknown_subcommand_exit_2(capsys):
    assert main(["frobnicate"]) == EXIT_USAGE


def test_missing_input_exit_3(tmp_path):
    assert main(["ingest", "--input", str(tmp_path / "nope.csv"),
                 "--out-dir", str(tmp_path)]) == EXIT_MISSING_INPUT


def test_hash_mismatch_exit_4(pipeline, tmp_path):
    # Vocabulary built from a different corpus: the checkpoint must be refused.
    other_spec = tmp_path / "other.json"
    other_spec.write_text(demo_spec(n=7, seed=9).to_json())
    assert main(["synth", "--process", str(other_spec), "--clinicians", "4",
                 "--events-per-clinician", "80", "--out-dir", str(tmp_path / "s"),
                 "--seed", "9"]) == 0
    assert main(["vocab", "--input", str(tmp_path / "s" / "corpus.csv"),
                 "--out-dir", str(tmp_path / "v"), "--seed", "9"]) == 0
    rc = main(["eval", "--checkpoint", str(pipeline / "trn" / "checkpoints" / "final.alck"),
               "--vocab", str(tmp_path / "v" / "vocab.json"),
               "--dataset", str(pipeline / "pre" / "test.altk"),
               "--out-dir", str(tmp_path / "e")])
    assert rc == EXIT_HASH_MISMATCH


def test_malformed_csv_exit_5(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("USER_ID,METRIC_NAME,ACCESS_TIME\nu,a,1\n")
    assert main(["ingest", "--input", str(bad), "--out-dir", str(tmp_path)]) == EXIT_BAD_DATA


def test_run_config_file_and_overrides(tmp_path):
    config_path = tmp_path / "run.json"
    config_path.write_text(json.dumps({"seed": 11, "epochs": 2, "strategy": "greedy"}))
    config = load_run_config(config_path)
    assert (config.seed, config.epochs, config.strategy) == (11, 2, "greedy")
    defaults = RunConfig()
    assert (defaults.shift_gap_s, defaults.session_gap_s) == (21_600, 300)
    assert (defaults.patient_cap, defaults.batch_size) == (128, 2)
    assert (defaults.grad_accum, defaults.epochs) == (4, 5)


def test_run_config_rejects_unknown_keys(tmp_path):
    config_path = tmp_path / "run.json"
    config_path.write_text(json.dumps({"learning_rate": 1.0}))
    with pytest.raises(Exception):
        load_run_config(config_path)


def test_out_dir_env_var(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("TRACELM_OUT_DIR", str(tmp_path / "envout"))
    corpus = pipeline / "synth" / "corpus.csv"
    assert main(["ingest", "--input", str(corpus)]) == 0
    assert (tmp_path / "envout" / "canonical.csv").exists()


def test_config_file_feeds_subcommand(pipeline, tmp_path):
    config_path = tmp_path / "run.json"
    config_path.write_text(json.dumps({"seed": 3, "strategy": "greedy"}))
    corpus = pipeline / "synth" / "corpus.csv"
    assert main(["ingest", "--input", str(corpus), "--config", str(config_path),
                 "--out-dir", str(tmp_path / "ing")]) == 0
    summary = json.loads((tmp_path / "ing" / "ingest_summary.json").read_text())
    assert summary["run"]["seed"] == 3
