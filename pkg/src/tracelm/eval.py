"""Evaluation: per-field perplexity, next-action accuracy, ROUGE-1, and
per-row entropy reports rendered as CSV plus an aligned text table."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Hashable, Sequence

import numpy as np

from .model.decoding import GREEDY, DecodeStrategy, decode_row, generate_rows
from .model.transformer import (
    ModelState,
    check_vocab,
    evaluate_loss,
    forward,
    pad_batch,
    per_row_entropy,
)
from .sessionize import OOV_PATIENT_INDEX, QuantizerSpec, DEFAULT_QUANTIZER, Session
from .vocab import FIELD_ORDER, GlobalVocab, TokenizedSession, encode_session

FIELD_SHORT = {"METRIC_NAME": "M", "PAT_ID": "P", "AT_BIN": "A"}


def _ids_of(item) -> tuple[int, ...]:
    if isinstance(item, TokenizedSession):
        return item.ids
    return tuple(int(t) for t in item)


def per_field_perplexity(
    state: ModelState,
    vocab: GlobalVocab,
    sequences: Sequence,
    batch_size: int = 8,
) -> dict[str, float]:
    """exp(mean NLL) per field over all predicted positions."""
    check_vocab(state, vocab)
    ids = [_ids_of(s) for s in sequences]
    if not ids:
        raise ValueError("cannot evaluate an empty dataset")
    sums = {name: 0.0 for name in FIELD_ORDER}
    counts = {name: 0 for name in FIELD_ORDER}
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        breakdown = evaluate_loss(state, vocab, pad_batch([list(s) for s in chunk]))
        for name in FIELD_ORDER:
            sums[name] += breakdown.field_sum[name]
            counts[name] += breakdown.field_count[name]
    out = {}
    for name in FIELD_ORDER:
        if counts[name] == 0:
            raise ValueError(f"dataset has no predicted {name} positions")
        out[name] = math.exp(sums[name] / counts[name])
    return out


@dataclass
class AccuracyReport:
    per_field: dict[str, float]
    all_fields: float
    n_events: int

    def as_dict(self) -> dict[str, float]:
        out = {FIELD_SHORT[name]: self.per_field[name] for name in FIELD_ORDER}
        out["All"] = self.all_fields
        return out


def next_action_accuracy(
    state: ModelState,
    vocab: GlobalVocab,
    sessions: Sequence,
    strategy: DecodeStrategy = GREEDY,
    rng: np.random.Generator | None = None,
    max_events: int | None = None,
) -> AccuracyReport:
    """Teacher-forced per-event accuracy for every row beyond a session's first.

    Greedy decoding is evaluated from a single forward pass per session; the
    sampling strategies re-decode each event from its ground-truth prefix.
    """
    check_vocab(state, vocab)
    hits = {name: 0 for name in FIELD_ORDER}
    all_hits = 0
    n_events = 0
    supports = {
        name: np.asarray(vocab.prediction_support(name), dtype=np.int64) for name in FIELD_ORDER
    }
    for item in sessions:
        ids = np.asarray(_ids_of(item), dtype=np.int64)
        n_rows = (ids.size - 1) // 3
        if n_rows < 2:
            continue
        if strategy.kind == "greedy":
            logits = forward(state, ids)
            predicted = np.empty(ids.size, dtype=np.int64)
            for fidx, name in enumerate(FIELD_ORDER):
                sup = supports[name]
                positions = np.arange(1 + fidx, ids.size, 3)
                rows = logits[positions - 1][:, sup]
                predicted[positions] = sup[np.argmax(rows, axis=1)]
            for r in range(1, n_rows):
                if max_events is not None and n_events >= max_events:
                    break
                base = 1 + 3 * r
                row_ok = True
                for fidx, name in enumerate(FIELD_ORDER):
                    ok = predicted[base + fidx] == ids[base + fidx]
                    hits[name] += int(ok)
                    row_ok &= bool(ok)
                all_hits += int(row_ok)
                n_events += 1
        else:
            for r in range(1, n_rows):
                if max_events is not None and n_events >= max_events:
                    break
                decoded = decode_row(state, vocab, ids[: 1 + 3 * r], strategy, rng)
                truth = tuple(ids[1 + 3 * r : 4 + 3 * r])
                row_ok = True
                for fidx, name in enumerate(FIELD_ORDER):
                    ok = decoded[fidx] == truth[fidx]
                    hits[name] += int(ok)
                    row_ok &= bool(ok)
                all_hits += int(row_ok)
                n_events += 1
        if max_events is not None and n_events >= max_events:
            break
    if n_events == 0:
        raise ValueError("no events beyond session-first rows to score")
    return AccuracyReport(
        per_field={name: hits[name] / n_events for name in FIELD_ORDER},
        all_fields=all_hits / n_events,
        n_events=n_events,
    )


@dataclass(frozen=True)
class RougeScore:
    recall: float
    precision: float
    f1: float


def rouge1(candidate: Sequence[Hashable], reference: Sequence[Hashable]) -> RougeScore:
    """Clipped unigram overlap; zero scores for empty sides."""
    cand_counts = Counter(candidate)
    ref_counts = Counter(reference)
    matches = sum(min(count, ref_counts[token]) for token, count in cand_counts.items())
    recall = matches / len(reference) if reference else 0.0
    precision = matches / len(candidate) if candidate else 0.0
    f1 = (2 * precision * recall / (precision + recall)) if (precision + recall) > 0 else 0.0
    return RougeScore(recall=recall, precision=precision, f1=f1)


@dataclass
class RougeReport:
    per_field: dict[str, RougeScore]
    all_fields: RougeScore
    n_sessions: int

    def as_dict(self) -> dict[str, dict[str, float]]:
        out = {
            FIELD_SHORT[name]: vars(self.per_field[name]) for name in FIELD_ORDER
        }
        out["All"] = vars(self.all_fields)
        return out


def rouge_eval(
    state: ModelState,
    vocab: GlobalVocab,
    sessions: Sequence,
    prompt_fraction: float = 0.5,
    strategy: DecodeStrategy = GREEDY,
    rng: np.random.Generator | None = None,
    max_sessions: int | None = None,
) -> RougeReport:
    """Prompt with the leading rows, generate the rest, score unigram overlap.

    The prompt is the first ``ceil(R * prompt_fraction)`` rows; the generation
    target length equals the reference remainder. Per-field scores compare the
    field's token subsequences; All compares the full interleaved sequences.
    Sessions with fewer than 2 rows are skipped.
    """
    check_vocab(state, vocab)
    if not 0.0 < prompt_fraction < 1.0:
        raise ValueError("prompt_fraction must be in (0, 1)")
    acc: dict[str, list[RougeScore]] = {name: [] for name in FIELD_ORDER}
    acc_all: list[RougeScore] = []
    for item in sessions:
        if max_sessions is not None and len(acc_all) >= max_sessions:
            break
        ids = _ids_of(item)
        n_rows = (len(ids) - 1) // 3
        if n_rows < 2:
            continue
        n_prompt = min(max(1, math.ceil(n_rows * prompt_fraction)), n_rows - 1)
        prompt = ids[: 1 + 3 * n_prompt]
        reference = ids[1 + 3 * n_prompt :]
        generated_rows = generate_rows(
            state, vocab, prompt, n_rows - n_prompt, strategy, rng
        )
        generated = [token for row in generated_rows for token in row]
        for fidx, name in enumerate(FIELD_ORDER):
            acc[name].append(rouge1(generated[fidx::3], reference[fidx::3]))
        acc_all.append(rouge1(generated, reference))
    if not acc_all:
        raise ValueError("no sessions with at least 2 rows to score")

    def mean(scores: list[RougeScore]) -> RougeScore:
        return RougeScore(
            recall=float(np.mean([s.recall for s in scores])),
            precision=float(np.mean([s.precision for s in scores])),
            f1=float(np.mean([s.f1 for s in scores])),
        )

    return RougeReport(
        per_field={name: mean(acc[name]) for name in FIELD_ORDER},
        all_fields=mean(acc_all),
        n_sessions=len(acc_all),
    )


# ---------------------------------------------------------------------------
# per-row entropy report -------------------------------------------------------


@dataclass(frozen=True)
class EntropyRow:
    metric_name: str
    patient_index: int
    at_label: str
    entropy: float | None


@dataclass
class SessionEntropy:
    session_id: str
    rows: list[EntropyRow] = field(default_factory=list)

    @property
    def mean_entropy(self) -> float:
        values = [r.entropy for r in self.rows if r.entropy is not None]
        return float(np.mean(values)) if values else float("nan")


@dataclass
class EntropyReport:
    sessions: list[SessionEntropy] = field(default_factory=list)


def _patient_cell(index: int) -> str:
    return "OOV" if index == OOV_PATIENT_INDEX else str(index)


def score_sessions(
    state: ModelState,
    vocab: GlobalVocab,
    sessions: Sequence[Session],
    quantizer: QuantizerSpec = DEFAULT_QUANTIZER,
) -> EntropyReport:
    """Per-row cross-entropies for whole sessions, first rows unscored."""
    report = EntropyReport()
    for session in sessions:
        tokenized = encode_session(session, vocab)
        entropies = per_row_entropy(state, vocab, tokenized.ids)
        entry = SessionEntropy(session_id=str(session.provenance))
        for row, value in zip(session.rows, entropies):
            entry.rows.append(
                EntropyRow(
                    metric_name=row.metric_name,
                    patient_index=row.patient_index,
                    at_label=quantizer.label(row.delta_bin),
                    entropy=value,
                )
            )
        report.sessions.append(entry)
    return report


def emit_entropy_report(
    state: ModelState,
    vocab: GlobalVocab,
    sessions: Sequence[Session],
    csv_sink: IO[str],
    quantizer: QuantizerSpec = DEFAULT_QUANTIZER,
    text_sink: IO[str] | None = None,
    header_lines: Sequence[str] = (),
) -> EntropyReport:
    """Score sessions and write the CSV (and, optionally, the aligned table)."""
    report = score_sessions(state, vocab, sessions, quantizer)
    write_entropy_csv(report, csv_sink, header_lines)
    if text_sink is not None:
        text_sink.write(render_entropy_table(report))
    return report


def write_entropy_csv(
    report: EntropyReport, sink: IO[str], header_lines: Sequence[str] = ()
) -> None:
    """CSV with an empty entropy cell for each session's first row."""
    for line in header_lines:
        sink.write(f"# {line}\n")
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(
        ("session_id", "row_index", "metric_name", "pat_index", "at_label", "entropy_nats")
    )
    for session in report.sessions:
        for index, row in enumerate(session.rows):
            writer.writerow(
                (
                    session.session_id,
                    index,
                    row.metric_name,
                    _patient_cell(row.patient_index),
                    row.at_label,
                    "" if row.entropy is None else f"{row.entropy:.6f}",
                )
            )


def render_entropy_table(report: EntropyReport) -> str:
    """Aligned text tables, one per session, mirroring the CSV contents."""
    blocks: list[str] = []
    headers = ("METRIC_NAME", "PAT_ID", "AT", "Row Entropy")
    for session in report.sessions:
        rows = [
            (
                row.metric_name,
                _patient_cell(row.patient_index),
                row.at_label,
                "-" if row.entropy is None else f"{row.entropy:.3f}",
            )
            for row in session.rows
        ]
        widths = [
            max(len(headers[col]), *(len(r[col]) for r in rows)) if rows else len(headers[col])
            for col in range(4)
        ]
        lines = [f"session {session.session_id}"]
        lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
        lines.append("  ".join("-" * w for w in widths))
        for r in rows:
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"
