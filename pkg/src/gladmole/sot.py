"""Serialized-output-training (SOT) transcripts.

All speakers' words are concatenated into one token stream, ordered by
speaker start time, with a speaker-change token (``$`` by default) between
consecutive speakers::

    hello world $ good morning
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

from .errors import InvalidInputError, MalformedSequenceError

DEFAULT_SEPARATOR = "$"


@dataclass(frozen=True)
class SpeakerUtterance:
    words: Tuple[str, ...]
    start_time: float = 0.0

    def __post_init__(self):
        words = self.words
        if isinstance(words, str):
            words = words.split()
        words = tuple(words)
        object.__setattr__(self, "words", words)
        if not words:
            raise InvalidInputError("speaker utterance has no words")
        for w in words:
            if not isinstance(w, str) or not w or any(c.isspace() for c in w):
                raise InvalidInputError(f"invalid word token {w!r}")
        if not (math.isfinite(self.start_time) and self.start_time >= 0):
            raise InvalidInputError(f"start_time must be finite and >= 0, got {self.start_time}")


@dataclass(frozen=True)
class SotSequence:
    tokens: Tuple[str, ...]
    separator: str = DEFAULT_SEPARATOR

    @classmethod
    def from_text(cls, text: str, separator: str = DEFAULT_SEPARATOR) -> "SotSequence":
        return cls(tokens=tuple(text.split()), separator=separator)

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def __str__(self) -> str:
        return self.text

    def is_well_formed(self) -> bool:
        t, sep = self.tokens, self.separator
        if not t or t[0] == sep or t[-1] == sep:
            return False
        return not any(a == sep and b == sep for a, b in zip(t, t[1:]))


def serialize(utts: Sequence[SpeakerUtterance], separator: str = DEFAULT_SEPARATOR) -> SotSequence:
    """Join utterances in start-time order with one separator between speakers.

    Equal start times keep their input order.
    """
    if not utts:
        raise InvalidInputError("cannot serialize an empty utterance list")
    if not separator or any(c.isspace() for c in separator):
        raise InvalidInputError(f"invalid separator {separator!r}")
    for u in utts:
        if separator in u.words:
            raise InvalidInputError(f"word sequence {' '.join(u.words)!r} contains the separator")
    ordered = sorted(utts, key=lambda u: u.start_time)  # sorted() is stable
    tokens: List[str] = []
    for i, u in enumerate(ordered):
        if i:
            tokens.append(separator)
        tokens.extend(u.words)
    return SotSequence(tokens=tuple(tokens), separator=separator)


def _split(seq: SotSequence) -> List[List[str]]:
    segments: List[List[str]] = [[]]
    for tok in seq.tokens:
        if tok == seq.separator:
            segments.append([])
        else:
            segments[-1].append(tok)
    return segments


def deserialize(seq: SotSequence, strict: bool = True) -> List[List[str]]:
    """Split an SOT sequence back into per-speaker word lists.

    Strict mode raises :class:`MalformedSequenceError` on an empty sequence
    or on leading, trailing or doubled separators.  Lenient mode drops the
    empty segments instead (see :func:`deserialize_lenient` for the count).
    """
    if not strict:
        return deserialize_lenient(seq)[0]
    if not seq.tokens:
        raise MalformedSequenceError("empty SOT sequence")
    segments = _split(seq)
    if not segments[0]:
        raise MalformedSequenceError("SOT sequence starts with a separator")
    if not segments[-1]:
        raise MalformedSequenceError("SOT sequence ends with a separator")
    if any(not s for s in segments):
        raise MalformedSequenceError("SOT sequence has adjacent separators")
    return segments


def deserialize_lenient(seq: SotSequence) -> Tuple[List[List[str]], int]:
    """Lenient split: returns ``(segments, dropped_empty_segments)``.

    A sequence without any tokens yields no segments and no warning.
    """
    if not seq.tokens:
        return [], 0
    segments = _split(seq)
    kept = [s for s in segments if s]
    return kept, len(segments) - len(kept)


# --------------------------------------------------------------------------
# JSONL records
#
# reference:  {"id": ..., "speakers": [{"words": "a b" | ["a", "b"], "start": 0.0}, ...],
#              "ratio": 0.25}
# hypothesis: {"id": ..., "sot": "a b $ c"}


@dataclass(frozen=True)
class ReferenceRecord:
    id: str
    speakers: Tuple[SpeakerUtterance, ...]
    ratio: Optional[float] = None

    def word_sequences(self) -> List[List[str]]:
        """Speaker word lists in chronological order."""
        ordered = sorted(self.speakers, key=lambda u: u.start_time)
        return [list(u.words) for u in ordered]

    def to_json(self) -> dict:
        obj = {
            "id": self.id,
            "speakers": [{"words": " ".join(u.words), "start": u.start_time} for u in self.speakers],
        }
        if self.ratio is not None:
            obj["ratio"] = self.ratio
        return obj


def reference_from_json(obj: dict) -> ReferenceRecord:
    try:
        rid = str(obj["id"])
        speakers = tuple(
            SpeakerUtterance(words=s["words"], start_time=float(s.get("start", 0.0)))
            for s in obj["speakers"]
        )
    except (KeyError, TypeError, AttributeError) as exc:
        raise InvalidInputError(f"bad reference record: {exc!r}") from None
    if not speakers:
        raise InvalidInputError(f"reference {rid} has no speakers")
    ratio = obj.get("ratio")
    return ReferenceRecord(id=rid, speakers=speakers, ratio=None if ratio is None else float(ratio))


def _iter_jsonl(lines: Iterable[str], what: str):
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            yield json.loads(line)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{what} line {lineno}: {exc}") from None


def read_references(path) -> List[ReferenceRecord]:
    with open(path, encoding="utf-8") as fh:
        return [reference_from_json(o) for o in _iter_jsonl(fh, "reference")]


def read_hypotheses(path) -> dict:
    """Map utterance id to raw SOT text."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for obj in _iter_jsonl(fh, "hypothesis"):
            try:
                hid, text = str(obj["id"]), obj["sot"]
            except (KeyError, TypeError) as exc:
                raise InvalidInputError(f"bad hypothesis record: {exc!r}") from None
            if hid in out:
                raise InvalidInputError(f"duplicate hypothesis id {hid}")
            out[hid] = str(text)
    return out


def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=False))
            fh.write("\n")
