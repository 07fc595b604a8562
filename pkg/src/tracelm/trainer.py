"""Clinician-stratified splitting, the accumulating train loop, and traces.

Chunks (not whole sessions) are the shuffled training unit. Each optimizer
step consumes ``grad_accum`` micro-batches of ``batch_size`` chunks; the
recorded raw loss of a step is the mean of its micro-batch losses, smoothed
into an EWMA trace for reporting.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from .model.checkpoint import (
    CheckpointError,
    read_container,
    save_checkpoint,
    state_from_container,
    write_container,
)
from .model.transformer import ModelState, evaluate_loss, loss_and_grads, pad_batch
from .optim import OptimState, estimate_hessian_diag, init_optim, lr_schedule
from .vocab import GlobalVocab, TokenizedSession


class SplitError(ValueError):
    """Raised when a split specification cannot be satisfied."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; the last epoch checkpoint is still on disk."""


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.70
    val_frac: float = 0.15
    test_frac: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise SplitError(f"split fractions sum to {total}, expected 1")
        if min(self.train_frac, self.val_frac, self.test_frac) < 0:
            raise SplitError("split fractions must be nonnegative")


@dataclass(frozen=True)
class Split:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


def stratified_split(clinician_ids: Sequence[str], spec: SplitSpec) -> Split:
    """Disjoint, exhaustive clinician split with floor-sized val/test.

    Val and test get ``floor(n * frac)`` clinicians each; the remainder goes
    to train. Assignment follows one seeded shuffle of the sorted ids.
    """
    ids = sorted(set(clinician_ids))
    if len(ids) != len(clinician_ids):
        raise SplitError("clinician ids must be unique")
    if len(ids) < 3:
        raise SplitError(f"need at least 3 clinicians to split, got {len(ids)}")
    n_val = math.floor(len(ids) * spec.val_frac)
    n_test = math.floor(len(ids) * spec.test_frac)
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return Split(
        val=tuple(shuffled[:n_val]),
        test=tuple(shuffled[n_val : n_val + n_test]),
        train=tuple(shuffled[n_val + n_test :]),
    )


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2
    grad_accum: int = 4
    epochs: int = 5
    optimizer: str = "sophia"
    lr: float = 3e-4
    warmup_steps: int = 100
    lr_min_frac: float = 0.1
    weight_decay: float | None = None  # None = optimizer default
    hessian_interval: int = 10
    shuffle_seed: int = 0
    ewma_alpha: float = 0.01
    checkpoint_every: int = 1  # epochs

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.grad_accum < 1 or self.epochs < 1:
            raise ValueError("batch_size, grad_accum and epochs must be >= 1")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accum


def ewma(values: Sequence[float], alpha: float = 0.01) -> list[float]:
    """Exponentially weighted smoothing: s_0 = x_0, s_t = (1-a) s_{t-1} + a x_t."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if len(values) == 0:
        raise ValueError("cannot smooth an empty series")
    out = [float(values[0])]
    for x in values[1:]:
        out.append((1.0 - alpha) * out[-1] + alpha * float(x))
    return out


@dataclass
class TrainResult:
    state: ModelState
    steps: list[int] = field(default_factory=list)
    raw_loss: list[float] = field(default_factory=list)
    ewma_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    epochs_completed: int = 0


def _sequence_ids(item) -> tuple[int, ...]:
    if isinstance(item, TokenizedSession):
        return item.ids
    return tuple(int(t) for t in item)


def _micro_batches(order: np.ndarray, batch_size: int) -> Iterable[np.ndarray]:
    for start in range(0, order.size, batch_size):
        yield order[start : start + batch_size]


def _corpus_loss(state: ModelState, vocab: GlobalVocab, sequences: list[tuple[int, ...]], batch_size: int) -> float:
    total = 0.0
    count = 0
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start : start + batch_size]
        breakdown = evaluate_loss(state, vocab, pad_batch([list(s) for s in chunk]))
        total += sum(breakdown.field_sum.values())
        count += breakdown.total_count
    if count == 0:
        raise ValueError("corpus has no predicted positions")
    return total / count


def train(
    state: ModelState,
    vocab: GlobalVocab,
    train_sequences: Sequence,
    config: TrainConfig,
    val_sequences: Sequence | None = None,
    checkpoint_dir: str | Path | None = None,
    log=None,
) -> TrainResult:
    """Epoch loop with per-epoch seeded shuffles and gradient accumulation.

    Mutates ``state`` in place and also returns it. Writes one checkpoint per
    ``checkpoint_every`` epochs plus ``final.alck`` when a directory is given;
    a non-finite loss aborts immediately, leaving the last epoch checkpoint.
    """
    sequences = [_sequence_ids(s) for s in train_sequences]
    if not sequences:
        raise ValueError("no training sequences")
    held_out = [_sequence_ids(s) for s in val_sequences] if val_sequences else None

    overrides = {"hessian_interval": config.hessian_interval} if config.optimizer == "sophia" else {}
    if config.weight_decay is not None:
        overrides["weight_decay"] = config.weight_decay
    opt = init_optim(config.optimizer, state.params, lr=config.lr, **overrides)

    micro_per_epoch = math.ceil(len(sequences) / config.batch_size)
    steps_per_epoch = math.ceil(micro_per_epoch / config.grad_accum)
    total_steps = steps_per_epoch * config.epochs
    hess_rng = np.random.default_rng(np.random.SeedSequence(entropy=config.shuffle_seed, spawn_key=(0xE5,)))

    result = TrainResult(state=state)
    smoothed: float | None = None
    directory = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if directory is not None:
        directory.mkdir(parents=True, exist_ok=True)

    global_step = 0
    for epoch in range(config.epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=config.shuffle_seed, spawn_key=(epoch,))
        )
        order = rng.permutation(len(sequences))
        micro_iter = iter(list(_micro_batches(order, config.batch_size)))
        exhausted = False
        while not exhausted:
            group: list[np.ndarray] = []
            for _ in range(config.grad_accum):
                nxt = next(micro_iter, None)
                if nxt is None:
                    exhausted = True
                    break
                group.append(nxt)
            if not group:
                break
            global_step += 1
            opt.lr = lr_schedule(
                global_step, total_steps, config.lr, config.warmup_steps, config.lr_min_frac
            )
            acc: dict[str, np.ndarray] | None = None
            micro_losses: list[float] = []
            first_tokens: np.ndarray | None = None
            for indices in group:
                tokens = pad_batch([list(sequences[i]) for i in indices])
                if first_tokens is None:
                    first_tokens = tokens
                breakdown, grads = loss_and_grads(state, vocab, tokens)
                micro_losses.append(breakdown.loss)
                if acc is None:
                    acc = grads
                else:
                    for name in acc:
                        acc[name] += grads[name]
            assert acc is not None and first_tokens is not None
            if len(group) > 1:
                inv = 1.0 / len(group)
                for name in acc:
                    acc[name] *= inv
            raw = float(np.mean(micro_losses))
            if not math.isfinite(raw):
                raise TrainingDivergedError(f"non-finite loss at step {global_step}")
            if config.optimizer == "sophia" and (global_step - 1) % config.hessian_interval == 0:
                estimate_hessian_diag(state, vocab, first_tokens, hess_rng, opt)
            _optim_step(state.params, acc, opt)
            smoothed = raw if smoothed is None else (
                (1.0 - config.ewma_alpha) * smoothed + config.ewma_alpha * raw
            )
            result.steps.append(global_step)
            result.raw_loss.append(raw)
            result.ewma_loss.append(smoothed)

        result.epochs_completed = epoch + 1
        if held_out:
            result.val_loss.append(_corpus_loss(state, vocab, held_out, config.batch_size))
        if directory is not None and (epoch + 1) % config.checkpoint_every == 0:
            # epoch checkpoints are resumable: they carry the optimizer state
            save_training_checkpoint(state, opt, directory / f"epoch_{epoch + 1:03d}.alck")
        if log is not None:
            val_part = f" val={result.val_loss[-1]:.4f}" if held_out else ""
            log(f"epoch {epoch + 1}/{config.epochs} loss={result.ewma_loss[-1]:.4f}{val_part}")

    if directory is not None:
        save_checkpoint(state, directory / "final.alck")
    return result


def _optim_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], opt: OptimState) -> None:
    from .optim import adamw_step, sophia_step

    if opt.kind == "adamw":
        adamw_step(params, grads, opt)
    else:
        sophia_step(params, grads, opt)


def save_training_checkpoint(
    state: ModelState, opt: OptimState, sink: IO[bytes] | str | Path
) -> None:
    """Model plus optimizer state in one container (resumable checkpoint).

    Optimizer tensors share the model's named-tensor table under an
    ``optim.`` prefix; plain :func:`load_checkpoint` still reads the model.
    """
    if isinstance(sink, (str, Path)):
        with open(sink, "wb") as handle:
            save_training_checkpoint(state, opt, handle)
        return
    from dataclasses import asdict

    header = {
        "config": asdict(state.config),
        "vocab_hash": f"{state.vocab_hash:016x}",
        "optimizer": {
            "kind": opt.kind,
            "lr": opt.lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "weight_decay": opt.weight_decay,
            "rho": opt.rho,
            "hessian_interval": opt.hessian_interval,
            "step": opt.step,
            "last_hessian_step": opt.last_hessian_step,
        },
    }
    tensors = dict(state.params)
    for name, tensor in opt.m.items():
        tensors[f"optim.m.{name}"] = tensor
    for name, tensor in opt.second.items():
        tensors[f"optim.second.{name}"] = tensor
    write_container(sink, header, tensors)


def load_training_checkpoint(
    source: IO[bytes] | str | Path | bytes,
    expected_vocab_hash: int | None = None,
) -> tuple[ModelState, OptimState]:
    """Inverse of :func:`save_training_checkpoint`."""
    header, tensors = read_container(source)
    state = state_from_container(header, tensors, expected_vocab_hash)
    meta = header.get("optimizer")
    if meta is None:
        raise CheckpointError("checkpoint carries no optimizer state")
    opt = OptimState(
        kind=meta["kind"],
        lr=meta["lr"],
        beta1=meta["beta1"],
        beta2=meta["beta2"],
        eps=meta["eps"],
        weight_decay=meta["weight_decay"],
        rho=meta["rho"],
        hessian_interval=meta["hessian_interval"],
        step=meta["step"],
        last_hessian_step=meta["last_hessian_step"],
        m={k[len("optim.m."):]: t for k, t in tensors.items() if k.startswith("optim.m.")},
        second={
            k[len("optim.second."):]: t
            for k, t in tensors.items()
            if k.startswith("optim.second.")
        },
    )
    if opt.m.keys() != state.params.keys() or opt.second.keys() != state.params.keys():
        raise CheckpointError("optimizer tensors do not mirror the model parameters")
    return state, opt


def write_loss_trace(result: TrainResult, sink: IO[str], header_lines: Sequence[str] = ()) -> None:
    """Loss trace CSV: ``step,raw_loss,ewma_loss`` after ``#`` header lines."""
    for line in header_lines:
        sink.write(f"# {line}\n")
    sink.write("step,raw_loss,ewma_loss\n")
    for step, raw, smooth in zip(result.steps, result.raw_loss, result.ewma_loss):
        sink.write(f"{step},{raw!r},{smooth!r}\n")


# ---------------------------------------------------------------------------
# tokenized dataset container -------------------------------------------------

DATASET_MAGIC = b"ALTK"
DATASET_VERSION = 1


class DatasetError(RuntimeError):
    """Corrupt or incompatible tokenized dataset file."""


def save_dataset(
    sink: IO[bytes] | str | Path,
    sequences: Sequence[tuple[int, Sequence[int]]],
    vocab_hash: int,
) -> None:
    """Write ``(clinician_index, token ids)`` pairs in the binary layout."""
    if isinstance(sink, (str, Path)):
        with open(sink, "wb") as handle:
            save_dataset(handle, sequences, vocab_hash)
        return
    sink.write(DATASET_MAGIC)
    sink.write(struct.pack("<I", DATASET_VERSION))
    sink.write(struct.pack("<Q", vocab_hash))
    sink.write(struct.pack("<Q", len(sequences)))
    for clinician, ids in sequences:
        arr = np.asarray(ids, dtype="<u4")
        sink.write(struct.pack("<II", clinician, arr.size))
        sink.write(arr.tobytes())


def load_dataset(
    source: IO[bytes] | str | Path | bytes,
    expected_vocab_hash: int | None = None,
) -> tuple[int, list[tuple[int, np.ndarray]]]:
    if isinstance(source, (str, Path)):
        with open(source, "rb") as handle:
            return load_dataset(handle, expected_vocab_hash)
    if isinstance(source, bytes):
        return load_dataset(io.BytesIO(source), expected_vocab_hash)

    def read(n: int, what: str) -> bytes:
        data = source.read(n)
        if len(data) != n:
            raise DatasetError(f"truncated dataset while reading {what}")
        return data

    if read(4, "magic") != DATASET_MAGIC:
        raise DatasetError("bad magic; not a tokenized dataset")
    (version,) = struct.unpack("<I", read(4, "version"))
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    (vocab_hash,) = struct.unpack("<Q", read(8, "vocab hash"))
    if expected_vocab_hash is not None and vocab_hash != expected_vocab_hash:
        raise DatasetError(
            f"dataset built for vocab {vocab_hash:016x}, expected {expected_vocab_hash:016x}"
        )
    (count,) = struct.unpack("<Q", read(8, "sequence count"))
    sequences: list[tuple[int, np.ndarray]] = []
    for _ in range(count):
        clinician, length = struct.unpack("<II", read(8, "sequence header"))
        raw = read(4 * length, "sequence ids")
        sequences.append((clinician, np.frombuffer(raw, dtype="<u4").astype(np.int64)))
    return vocab_hash, sequences
