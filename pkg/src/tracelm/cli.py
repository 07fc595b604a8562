"""Subcommand front-end wiring the pipeline end to end.

Subcommands: ingest, preprocess, vocab, train, eval, score, sample, synth.
A JSON run configuration provides defaults; explicit flags win. Every
artifact embeds the configuration and seed that produced it, and re-running
with identical inputs reproduces identical bytes.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .eval import (
    emit_entropy_report,
    next_action_accuracy,
    per_field_perplexity,
    rouge_eval,
)
from .ingest import (
    AuditRowError,
    AuditSchemaError,
    ClinicianStream,
    audit_csv_text,
    parse_audit_csv,
)
from .model import (
    DecodeStrategy,
    VocabMismatchError,
    generate_rows,
    init_model,
    load_checkpoint,
    preset_config,
    preset_names,
)
from .model.checkpoint import CheckpointError
from .model.transformer import ModelState
from .optim import SOPHIA_DEFAULTS
from .report import (
    save_accuracy_bars,
    save_entropy_profile,
    save_loss_curve,
    save_perplexity_bars,
)
from .sessionize import (
    OOV_PATIENT_INDEX,
    PATIENT_CAP,
    SESSION_GAP_SECONDS,
    SHIFT_GAP_SECONDS,
    DEFAULT_QUANTIZER,
    Session,
    preprocess_stream,
    write_session_dump,
)
from .synth import ProcessSpec, ProcessSpecError, generate_plan, true_entropy_rate, is_irreducible
from .trainer import (
    DatasetError,
    SplitSpec,
    TrainConfig,
    load_dataset,
    save_dataset,
    stratified_split,
    train,
    write_loss_trace,
)
from .vocab import (
    VocabError,
    build_vocab,
    decode_tokens,
    encode_session,
    load_vocab,
    save_vocab,
)

OUT_DIR_ENV = "TRACELM_OUT_DIR"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_HASH_MISMATCH = 4
EXIT_BAD_DATA = 5


class CliError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    """Declarative defaults for the whole pipeline (production-scale values)."""

    seed: int = 0
    deterministic: bool = False
    # preprocessing
    shift_gap_s: int = SHIFT_GAP_SECONDS
    session_gap_s: int = SESSION_GAP_SECONDS
    patient_cap: int = PATIENT_CAP
    # clinician split
    train_frac: float = 0.70
    val_frac: float = 0.15
    test_frac: float = 0.15
    # model
    preset: str = "gpt2-3layer"
    context_len: int = 1024
    d_model: int | None = None
    n_heads: int | None = None
    d_ff: int | None = None
    # training
    batch_size: int = 2
    grad_accum: int = 4
    epochs: int = 5
    optimizer: str = "sophia"
    lr: float = 3e-4
    warmup_steps: int = 100
    weight_decay: float | None = None
    hessian_interval: int = SOPHIA_DEFAULTS["hessian_interval"]
    # decoding / evaluation
    strategy: str = "contrastive"
    top_k: int = 5
    alpha: float = 0.6
    temperature: float = 1.0
    accuracy_events: int = 0
    rouge_sessions: int = 0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_run_config(path: str | Path) -> RunConfig:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(EXIT_MISSING_INPUT, f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_BAD_DATA, f"config file is not valid JSON: {exc}")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(payload) - known
    if unknown:
        raise CliError(EXIT_BAD_DATA, f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**payload)


def _apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    updates = {}
    for name in (f.name for f in dataclasses.fields(RunConfig)):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    if getattr(args, "deterministic", False):
        updates["deterministic"] = True
    return dataclasses.replace(config, **updates)


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    base = load_run_config(args.config) if args.config else RunConfig()
    return _apply_overrides(base, args)


def _header_lines(command: str, config: RunConfig) -> list[str]:
    compact = json.dumps(config.as_dict(), sort_keys=True, separators=(",", ":"))
    return [f"tracelm {__version__} {command}", f"seed={config.seed}", f"config={compact}"]


def _run_block(command: str, config: RunConfig) -> dict:
    return {"tool": f"tracelm {__version__}", "command": command, "seed": config.seed,
            "config": config.as_dict()}


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(args: argparse.Namespace) -> Path:
    if getattr(args, "out_dir", None):
        directory = Path(args.out_dir)
    else:
        directory = Path(os.environ.get(OUT_DIR_ENV, "."))
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def _read_file(path: str | Path, what: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CliError(EXIT_MISSING_INPUT, f"{what} not found: {path}")


def _read_streams(path: str | Path):
    return parse_audit_csv(_read_file(path, "input CSV"))


def _load_vocab_file(path: str | Path):
    return load_vocab(_read_file(path, "vocab file"))


def _strategy_from(config: RunConfig) -> DecodeStrategy:
    return DecodeStrategy(
        kind=config.strategy, k=config.top_k, temperature=config.temperature, alpha=config.alpha
    )


def _split_sessions_by_user(streams, config: RunConfig, max_rows: int | None):
    per_user: dict[str, list] = {}
    for stream in streams:
        per_user[stream.user_id] = preprocess_stream(
            stream,
            shift_gap_s=config.shift_gap_s,
            session_gap_s=config.session_gap_s,
            patient_cap=config.patient_cap,
            max_rows=max_rows,
        )
    return per_user


def _split_spec(config: RunConfig) -> SplitSpec:
    return SplitSpec(
        train_frac=config.train_frac,
        val_frac=config.val_frac,
        test_frac=config.test_frac,
        seed=config.seed,
    )


# ---------------------------------------------------------------------------
# subcommand handlers ---------------------------------------------------------


def _cmd_ingest(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = _out_dir(args)
    streams = _read_streams(args.input)
    (out / "canonical.csv").write_text(audit_csv_text(streams), encoding="utf-8")
    summary = {
        "run": _run_block("ingest", config),
        "clinicians": len(streams),
        "events": sum(len(s.events) for s in streams),
        "output": "canonical.csv",
    }
    _write_json(out / "ingest_summary.json", summary)
    print(f"ingest: {summary['clinicians']} clinicians, {summary['events']} events -> {out}")
    return EXIT_OK


def _cmd_vocab(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = _out_dir(args)
    streams = _read_streams(args.input)
    per_user = _split_sessions_by_user(streams, config, max_rows=None)
    split = stratified_split(sorted(per_user), _split_spec(config))
    train_sessions = [s for user in split.train for s in per_user[user]]
    vocab = build_vocab(train_sessions)
    with open(out / "vocab.json", "w", encoding="utf-8") as handle:
        save_vocab(vocab, handle)
    _write_json(
        out / "vocab_summary.json",
        {
            "run": _run_block("vocab", config),
            "hash": f"{vocab.hash:016x}",
            "metric_name_tokens": vocab.field("METRIC_NAME").size,
            "global_size": vocab.size,
            "train_clinicians": len(split.train),
        },
    )
    print(f"vocab: {vocab.size} global tokens (hash {vocab.hash:016x}) -> {out / 'vocab.json'}")
    return EXIT_OK


def _cmd_preprocess(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = _out_dir(args)
    vocab = _load_vocab_file(args.vocab)
    streams = _read_streams(args.input)
    max_rows = (config.context_len - 1) // 3
    per_user = _split_sessions_by_user(streams, config, max_rows=max_rows)
    users = sorted(per_user)
    split = stratified_split(users, _split_spec(config))
    user_index = {user: i for i, user in enumerate(users)}

    counts = {}
    for part, members in (("train", split.train), ("val", split.val), ("test", split.test)):
        sequences = []
        for user in sorted(members):
            for session in per_user[user]:
                tokenized = encode_session(session, vocab)
                sequences.append((user_index[user], tokenized.ids))
        save_dataset(out / f"{part}.altk", sequences, vocab.hash)
        counts[part] = len(sequences)
    if args.dump_sessions:
        with open(out / "sessions.txt", "w", encoding="utf-8") as handle:
            for user in users:
                write_session_dump(per_user[user], handle)
    manifest = {
        "run": _run_block("preprocess", config),
        "vocab_hash": f"{vocab.hash:016x}",
        "max_rows_per_chunk": max_rows,
        "users": users,
        "split": {"train": sorted(split.train), "val": sorted(split.val), "test": sorted(split.test)},
        "chunks": counts,
    }
    _write_json(out / "manifest.json", manifest)
    print(
        "preprocess: chunks "
        + ", ".join(f"{part}={counts[part]}" for part in ("train", "val", "test"))
        + f" -> {out}"
    )
    return EXIT_OK


def _model_from_config(config: RunConfig, vocab_size: int, vocab_hash: int) -> ModelState:
    model_config = preset_config(
        config.preset,
        vocab_size=vocab_size,
        context_len=config.context_len,
        d_model=config.d_model,
        n_heads=config.n_heads,
        d_ff=config.d_ff,
        seed=config.seed,
    )
    return init_model(model_config, vocab_hash=vocab_hash)


def _cmd_train(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = _out_dir(args)
    vocab = _load_vocab_file(args.vocab)
    dataset_dir = Path(args.dataset)
    train_path = dataset_dir / "train.altk" if dataset_dir.is_dir() else dataset_dir
    if not train_path.exists():
        raise CliError(EXIT_MISSING_INPUT, f"training dataset not found: {train_path}")
    _, train_seqs = load_dataset(train_path, expected_vocab_hash=vocab.hash)
    val_seqs = None
    val_path = dataset_dir / "val.altk" if dataset_dir.is_dir() else None
    if val_path is not None and val_path.exists():
        _, val_seqs = load_dataset(val_path, expected_vocab_hash=vocab.hash)

    state = _model_from_config(config, vocab.size, vocab.hash)
    train_config = TrainConfig(
        batch_size=config.batch_size,
        grad_accum=config.grad_accum,
        epochs=config.epochs,
        optimizer=config.optimizer,
        lr=config.lr,
        warmup_steps=config.warmup_steps,
        weight_decay=config.weight_decay,
        hessian_interval=config.hessian_interval,
        shuffle_seed=config.seed,
    )
    result = train(
        state,
        vocab,
        [ids for _, ids in train_seqs],
        train_config,
        val_sequences=[ids for _, ids in val_seqs] if val_seqs else None,
        checkpoint_dir=out / "checkpoints",
        log=print,
    )
    with open(out / "loss_trace.csv", "w", encoding="utf-8") as handle:
        write_loss_trace(result, handle, _header_lines("train", config))
    save_loss_curve(result, out / "loss_curve.png", alpha=train_config.ewma_alpha)
    _write_json(
        out / "train_summary.json",
        {
            "run": _run_block("train", config),
            "model": dataclasses.asdict(state.config),
            "n_params": state.n_params,
            "effective_batch": train_config.effective_batch,
            "steps": len(result.steps),
            "final_raw_loss": result.raw_loss[-1] if result.raw_loss else None,
            "final_ewma_loss": result.ewma_loss[-1] if result.ewma_loss else None,
            "val_loss": result.val_loss,
            "checkpoint": "checkpoints/final.alck",
        },
    )
    print(f"train: {len(result.steps)} steps -> {out}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = _out_dir(args)
    vocab = _load_vocab_file(args.vocab)
    state = load_checkpoint(args.checkpoint, expected_vocab_hash=vocab.hash)
    _, sequences = load_dataset(args.dataset, expected_vocab_hash=vocab.hash)
    ids = [seq for _, seq in sequences]
    report: dict = {"run": _run_block("eval", config)}

    perplexity = per_field_perplexity(state, vocab, ids)
    report["perplexity"] = perplexity
    report["cross_entropy"] = {k: float(np.log(v)) for k, v in perplexity.items()}
    save_perplexity_bars(perplexity, out / "perplexity.png")

    strategy = _strategy_from(config)
    rng = np.random.default_rng(config.seed)
    if config.accuracy_events:
        accuracy = next_action_accuracy(
            state, vocab, ids, strategy, rng, max_events=config.accuracy_events
        )
        report["next_action_accuracy"] = accuracy.as_dict() | {"n_events": accuracy.n_events}
        save_accuracy_bars(accuracy.as_dict(), out / "accuracy.png", "next-action accuracy")
    if config.rouge_sessions:
        rouge = rouge_eval(
            state, vocab, ids, strategy=strategy, rng=rng, max_sessions=config.rouge_sessions
        )
        report["rouge1"] = rouge.as_dict() | {"n_sessions": rouge.n_sessions}
        save_accuracy_bars(
            {k: v["f1"] for k, v in rouge.as_dict().items() if isinstance(v, dict)},
            out / "rouge1.png",
            "ROUGE-1 F1",
        )
    _write_json(out / "eval_report.json", report)
    ppl = ", ".join(f"{k}={v:.4f}" for k, v in perplexity.items())
    print(f"eval: perplexity {ppl} -> {out}")
    return EXIT_OK


def _cmd_score(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = _out_dir(args)
    vocab = _load_vocab_file(args.vocab)
    state = load_checkpoint(args.checkpoint, expected_vocab_hash=vocab.hash)
    streams = _read_streams(args.input)
    per_user = _split_sessions_by_user(streams, config, max_rows=None)
    sessions = [s for user in sorted(per_user) for s in per_user[user]]
    if args.max_sessions:
        sessions = sessions[: args.max_sessions]
    with open(out / "entropy.csv", "w", encoding="utf-8") as csv_handle, \
            open(out / "entropy.txt", "w", encoding="utf-8") as text_handle:
        report = emit_entropy_report(
            state, vocab, sessions, csv_handle, DEFAULT_QUANTIZER, text_handle,
            _header_lines("score", config),
        )
    save_entropy_profile(report, out / "entropy.png")
    scored = sum(len(s.rows) - 1 for s in report.sessions)
    print(f"score: {len(report.sessions)} sessions, {scored} scored rows -> {out}")
    return EXIT_OK


def _cmd_sample(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = _out_dir(args)
    vocab = _load_vocab_file(args.vocab)
    state = load_checkpoint(args.checkpoint, expected_vocab_hash=vocab.hash)
    streams = _read_streams(args.input)
    per_user = _split_sessions_by_user(streams, config, max_rows=None)
    sessions = [s for user in sorted(per_user) for s in per_user[user]]
    if not sessions:
        raise CliError(EXIT_BAD_DATA, "no sessions in the prompt input")
    prompt_session = sessions[args.session_index]
    prompt_rows = args.prompt_rows or max(1, len(prompt_session.rows) // 2)
    prompt_rows = min(prompt_rows, len(prompt_session.rows))
    prompt = encode_session(
        Session(rows=prompt_session.rows[:prompt_rows], provenance=prompt_session.provenance),
        vocab,
    )
    strategy = _strategy_from(config)
    rng = np.random.default_rng(config.seed)
    rows = generate_rows(state, vocab, prompt.ids, args.rows, strategy, rng)
    generated = decode_tokens(
        tuple([prompt.ids[0]] + [t for row in rows for t in row]), vocab
    )
    buffer = io.StringIO()
    for line in _header_lines("sample", config):
        buffer.write(f"# {line}\n")
    buffer.write("metric_name\tpat_index\tat_label\n")
    for row in generated.rows:
        label = DEFAULT_QUANTIZER.label(row.delta_bin)
        patient = "OOV" if row.patient_index == OOV_PATIENT_INDEX else str(row.patient_index)
        buffer.write(f"{row.metric_name}\t{patient}\t{label}\n")
    text = buffer.getvalue()
    (out / "sampled_rows.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _cmd_synth(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = _out_dir(args)
    spec = ProcessSpec.from_json(_read_file(args.process, "process spec"))
    plans = generate_plan(spec, args.clinicians, args.events_per_clinician, config.seed)
    csv_text = audit_csv_text(
        [ClinicianStream(user_id=p.user_id, events=p.events) for p in plans]
    )
    (out / "corpus.csv").write_text(csv_text, encoding="utf-8")
    summary = {
        "run": _run_block("synth", config),
        "clinicians": len(plans),
        "events": sum(len(p.events) for p in plans),
        "sessions": sum(p.n_sessions for p in plans),
        "action_entropy_rate_nats": (
            true_entropy_rate(spec) if is_irreducible(spec.transitions) else None
        ),
    }
    _write_json(out / "synth_summary.json", summary)
    print(
        f"synth: {summary['events']} events over {summary['clinicians']} clinicians -> {out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tracelm",
        description="Tabular LMs over audit-event streams: preprocess, train, score entropy.",
    )
    parser.add_argument("--version", action="version", version=f"tracelm {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    def common(p: argparse.ArgumentParser, model_flags: bool = False) -> None:
        p.add_argument("--config", help="run configuration JSON; flags override")
        p.add_argument("--seed", type=int, help="root seed recorded in all artifacts")
        p.add_argument("--deterministic", action="store_true",
                       help="force single-worker deterministic mode")
        p.add_argument("--out-dir", help=f"output directory (default ${OUT_DIR_ENV} or .)")
        if model_flags:
            p.add_argument("--preset", choices=preset_names(), help="model preset")
            p.add_argument("--context-len", type=int, dest="context_len")
            p.add_argument("--d-model", type=int, dest="d_model")
            p.add_argument("--n-heads", type=int, dest="n_heads")
            p.add_argument("--d-ff", type=int, dest="d_ff")

    def strategy_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--strategy", choices=("greedy", "topk", "contrastive"))
        p.add_argument("--k", type=int, dest="top_k", help="candidate count for topk/contrastive")
        p.add_argument("--alpha", type=float, help="contrastive degeneration weight")
        p.add_argument("--temperature", type=float)

    p = sub.add_parser("ingest", help="validate and canonicalize a raw audit CSV")
    p.add_argument("--input", required=True)
    common(p)
    p.set_defaults(handler=_cmd_ingest)

    p = sub.add_parser("vocab", help="build the global vocabulary from the training split")
    p.add_argument("--input", required=True)
    common(p)
    p.set_defaults(handler=_cmd_vocab)

    p = sub.add_parser("preprocess", help="sessionize, tokenize and write split datasets")
    p.add_argument("--input", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--dump-sessions", action="store_true", help="also write sessions.txt")
    common(p, model_flags=True)
    p.set_defaults(handler=_cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a tokenized dataset")
    p.add_argument("--dataset", required=True, help="dataset directory or train .altk file")
    p.add_argument("--vocab", required=True)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--grad-accum", type=int, dest="grad_accum")
    p.add_argument("--epochs", type=int)
    p.add_argument("--optimizer", choices=("sophia", "adamw"))
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    common(p, model_flags=True)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", help="perplexity (always), accuracy and ROUGE (on request)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--accuracy-events", type=int, dest="accuracy_events")
    p.add_argument("--rouge-sessions", type=int, dest="rouge_sessions")
    strategy_flags(p)
    common(p)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("score", help="per-row entropy report for raw audit sessions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--max-sessions", type=int, default=0)
    common(p)
    p.set_defaults(handler=_cmd_score)

    p = sub.add_parser("sample", help="generate audit rows from a prompt session")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True, help="raw CSV providing the prompt session")
    p.add_argument("--rows", type=int, default=10)
    p.add_argument("--session-index", type=int, default=0)
    p.add_argument("--prompt-rows", type=int, default=0)
    strategy_flags(p)
    common(p)
    p.set_defaults(handler=_cmd_sample)

    p = sub.add_parser("synth", help="generate a synthetic corpus from a process spec")
    p.add_argument("--process", required=True, help="process spec JSON")
    p.add_argument("--clinicians", type=int, default=8)
    p.add_argument("--events-per-clinician", type=int, default=2000)
    common(p)
    p.set_defaults(handler=_cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return args.handler(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (VocabMismatchError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_HASH_MISMATCH
    except (
        AuditSchemaError,
        AuditRowError,
        VocabError,
        CheckpointError,
        DatasetError,
        ProcessSpecError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_DATA


if __name__ == "__main__":
    raise SystemExit(main())
