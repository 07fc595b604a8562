"""Per-field vocabularies concatenated into one global token space.

Global id layout: 4 specials in [0, 4), then the METRIC_NAME block, the fixed
129-token PAT_ID block (-1, 0..127) and the 5-token AT_BIN block, each
contiguous at its offset. A tokenized session is ``[BOS, (MN, PID, AT) * R]``,
so position p >= 1 carries field (p - 1) % 3.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

from .sessionize import (
    NO_PATIENT_INDEX,
    OOV_PATIENT_INDEX,
    QUANTIZER_BINS,
    Session,
    SessionKey,
    SessionRow,
)

VOCAB_VERSION = 1

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
UNK_MN_TOKEN = "<unk_mn>"
PAT_OOV_TOKEN = "<pat_oov>"
SPECIAL_TOKENS = (PAD_TOKEN, BOS_TOKEN, UNK_MN_TOKEN, PAT_OOV_TOKEN)
PAD_ID, BOS_ID, UNK_MN_ID, PAT_OOV_ID = range(4)

FIELD_METRIC_NAME = "METRIC_NAME"
FIELD_PAT_ID = "PAT_ID"
FIELD_AT_BIN = "AT_BIN"
FIELD_ORDER = (FIELD_METRIC_NAME, FIELD_PAT_ID, FIELD_AT_BIN)

# Specials that may legally stand in for a block token at encode time.
FIELD_FALLBACK_SPECIAL = {
    FIELD_METRIC_NAME: UNK_MN_ID,
    FIELD_PAT_ID: PAT_OOV_ID,
    FIELD_AT_BIN: None,
}

PAT_ID_TOKENS = tuple(str(i) for i in range(-1, 128))
AT_BIN_TOKENS = tuple(str(i) for i in range(QUANTIZER_BINS))

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    value = _FNV_OFFSET
    for byte in data:
        value = ((value ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return value


class VocabError(ValueError):
    """Raised for malformed vocabularies or token layouts."""


class TokenLayoutError(VocabError):
    """A token id violates the positional field layout; carries the position."""

    def __init__(self, position: int, message: str) -> None:
        super().__init__(f"position {position}: {message}")
        self.position = position


def field_of(position: int) -> str:
    """Field carried by token position ``position`` (>= 1; 0 is BOS)."""
    if position < 1:
        raise TokenLayoutError(position, "position 0 is BOS and carries no field")
    return FIELD_ORDER[(position - 1) % 3]


@dataclass(frozen=True)
class FieldVocab:
    name: str
    tokens: tuple[str, ...]
    offset: int

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabError(f"{self.name} tokens are not unique")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def contains_id(self, global_id: int) -> bool:
        return self.offset <= global_id < self.offset + self.size

    def global_id(self, token: str) -> int | None:
        try:
            return self.offset + self.tokens.index(token)
        except ValueError:
            return None

    def token_of(self, global_id: int) -> str:
        if not self.contains_id(global_id):
            raise VocabError(f"id {global_id} outside {self.name} block")
        return self.tokens[global_id - self.offset]


@dataclass(frozen=True)
class GlobalVocab:
    specials: tuple[str, ...]
    fields: tuple[FieldVocab, ...]
    hash: int

    @property
    def size(self) -> int:
        last = self.fields[-1]
        return last.offset + last.size

    def field(self, name: str) -> FieldVocab:
        for fv in self.fields:
            if fv.name == name:
                return fv
        raise VocabError(f"unknown field {name}")

    def prediction_support(self, name: str) -> tuple[int, ...]:
        """Global ids a model may predict at a position of field ``name``.

        This is the field block plus its fallback special (so every
        encodable session stays finitely scorable).
        """
        fv = self.field(name)
        ids = list(range(fv.offset, fv.offset + fv.size))
        special = FIELD_FALLBACK_SPECIAL[name]
        if special is not None:
            ids.append(special)
        return tuple(ids)

    def _metric_lookup(self) -> dict[str, int]:
        fv = self.field(FIELD_METRIC_NAME)
        return {token: fv.offset + i for i, token in enumerate(fv.tokens)}


@dataclass(frozen=True)
class TokenizedSession:
    ids: tuple[int, ...]
    provenance: SessionKey

    @property
    def n_rows(self) -> int:
        return (len(self.ids) - 1) // 3


def _canonical_payload(specials: Sequence[str], fields: Sequence[FieldVocab]) -> dict:
    return {
        "version": VOCAB_VERSION,
        "specials": list(specials),
        "fields": [{"name": fv.name, "tokens": list(fv.tokens)} for fv in fields],
    }


def _payload_hash(payload: dict) -> int:
    canonical = json.dumps(payload, ensure_ascii=False, separators=(",", ":"), sort_keys=True)
    return fnv1a64(canonical.encode("utf-8"))


def _assemble(metric_tokens: Sequence[str]) -> GlobalVocab:
    offset = len(SPECIAL_TOKENS)
    fields = []
    for name, tokens in (
        (FIELD_METRIC_NAME, tuple(metric_tokens)),
        (FIELD_PAT_ID, PAT_ID_TOKENS),
        (FIELD_AT_BIN, AT_BIN_TOKENS),
    ):
        fields.append(FieldVocab(name=name, tokens=tokens, offset=offset))
        offset += len(tokens)
    payload = _canonical_payload(SPECIAL_TOKENS, fields)
    return GlobalVocab(specials=SPECIAL_TOKENS, fields=tuple(fields), hash=_payload_hash(payload))


def build_vocab(sessions: Iterable[Session]) -> GlobalVocab:
    """Build the global vocabulary from training sessions.

    METRIC_NAME tokens are the distinct action names, sorted lexicographically
    for reproducibility; PAT_ID and AT_BIN are fixed closed sets.
    """
    names: set[str] = set()
    for session in sessions:
        for row in session.rows:
            names.add(row.metric_name)
    if not names:
        raise VocabError("cannot build a vocabulary from an empty corpus")
    return _assemble(sorted(names))


def encode_session(session: Session, vocab: GlobalVocab) -> TokenizedSession:
    """Tokenize a session as ``[BOS, (MN, PID, AT) * R]``.

    Unknown action names map to the UNK special; out-of-cap patients map to
    the patient OOV special.
    """
    metric_ids = vocab._metric_lookup()
    pid_field = vocab.field(FIELD_PAT_ID)
    at_field = vocab.field(FIELD_AT_BIN)
    ids = [BOS_ID]
    for row in session.rows:
        ids.append(metric_ids.get(row.metric_name, UNK_MN_ID))
        if row.patient_index == OOV_PATIENT_INDEX:
            ids.append(PAT_OOV_ID)
        elif NO_PATIENT_INDEX <= row.patient_index < pid_field.size - 1:
            # PID block tokens are "-1","0",..,"127"; index i sits at offset+i+1.
            ids.append(pid_field.offset + row.patient_index + 1)
        else:
            raise VocabError(f"patient index {row.patient_index} outside -1..{pid_field.size - 2}")
        if not 0 <= row.delta_bin < at_field.size:
            raise VocabError(f"delta bin {row.delta_bin} outside 0..{at_field.size - 1}")
        ids.append(at_field.offset + row.delta_bin)
    return TokenizedSession(ids=tuple(ids), provenance=session.provenance)


def decode_tokens(
    ids: Sequence[int],
    vocab: GlobalVocab,
    provenance: SessionKey | None = None,
) -> Session:
    """Inverse of :func:`encode_session` for layout-respecting id sequences."""
    if len(ids) == 0 or ids[0] != BOS_ID:
        raise TokenLayoutError(0, "sequence must start with BOS")
    if (len(ids) - 1) % 3 != 0:
        raise TokenLayoutError(len(ids) - 1, "sequence has a partial trailing row")
    mn_field = vocab.field(FIELD_METRIC_NAME)
    pid_field = vocab.field(FIELD_PAT_ID)
    at_field = vocab.field(FIELD_AT_BIN)
    rows: list[SessionRow] = []
    for start in range(1, len(ids), 3):
        mn_id, pid_id, at_id = ids[start], ids[start + 1], ids[start + 2]
        if mn_id == UNK_MN_ID:
            name = UNK_MN_TOKEN
        elif mn_field.contains_id(mn_id):
            name = mn_field.token_of(mn_id)
        else:
            raise TokenLayoutError(start, f"id {mn_id} not a METRIC_NAME token")
        if pid_id == PAT_OOV_ID:
            patient = OOV_PATIENT_INDEX
        elif pid_field.contains_id(pid_id):
            patient = int(pid_field.token_of(pid_id))
        else:
            raise TokenLayoutError(start + 1, f"id {pid_id} not a PAT_ID token")
        if not at_field.contains_id(at_id):
            raise TokenLayoutError(start + 2, f"id {at_id} not an AT_BIN token")
        rows.append(
            SessionRow(
                metric_name=name,
                patient_index=patient,
                delta_bin=at_id - at_field.offset,
            )
        )
    key = provenance or SessionKey("decoded", 0, 0)
    return Session(rows=tuple(rows), provenance=key)


def vocab_to_json(vocab: GlobalVocab) -> str:
    payload = _canonical_payload(vocab.specials, vocab.fields)
    payload["hash"] = f"{vocab.hash:016x}"
    return json.dumps(payload, ensure_ascii=False, indent=2) + "\n"


def save_vocab(vocab: GlobalVocab, sink: IO[str]) -> None:
    sink.write(vocab_to_json(vocab))


def load_vocab(source: str | IO[str]) -> GlobalVocab:
    text = source if isinstance(source, str) else source.read()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise VocabError(f"vocab file is not valid JSON: {exc}") from exc
    for key in ("version", "specials", "fields", "hash"):
        if key not in payload:
            raise VocabError(f"vocab file missing {key!r}")
    if payload["version"] != VOCAB_VERSION:
        raise VocabError(f"unsupported vocab version {payload['version']}")
    specials = tuple(payload["specials"])
    if specials != SPECIAL_TOKENS:
        raise VocabError(f"unexpected specials {specials}")
    offset = len(specials)
    fields: list[FieldVocab] = []
    for entry in payload["fields"]:
        fields.append(FieldVocab(name=entry["name"], tokens=tuple(entry["tokens"]), offset=offset))
        offset += len(entry["tokens"])
    if tuple(fv.name for fv in fields) != FIELD_ORDER:
        raise VocabError("field order must be METRIC_NAME, PAT_ID, AT_BIN")
    if fields[1].tokens != PAT_ID_TOKENS:
        raise VocabError("PAT_ID block must be the fixed -1..127 set")
    if fields[2].tokens != AT_BIN_TOKENS:
        raise VocabError("AT_BIN block must be the fixed 5-bin set")
    expected = _payload_hash(_canonical_payload(specials, fields))
    stored = int(payload["hash"], 16)
    if stored != expected:
        raise VocabError(
            f"vocab hash mismatch: stored {stored:016x}, recomputed {expected:016x}"
        )
    return GlobalVocab(specials=specials, fields=tuple(fields), hash=expected)
