"""Word error rate, permutation-invariant WER and overlap-aware WER."""

from __future__ import annotations

import enum
from decimal import ROUND_HALF_UP, Decimal
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import IdMismatchError, InvalidInputError
from .sot import DEFAULT_SEPARATOR, ReferenceRecord, SotSequence, deserialize_lenient

#: Largest speaker-segment count accepted by :func:`pi_wer`.
MAX_SEGMENTS = 6


class OverlapBand(str, enum.Enum):
    NONE = "none"
    LOW = "low"
    MID = "mid"
    HIGH = "high"


OVERLAP_BANDS = (OverlapBand.LOW, OverlapBand.MID, OverlapBand.HIGH)


def bucket_assign(ratio: float) -> OverlapBand:
    """Map an overlap ratio to its band: (0, .2] low, (.2, .5] mid, (.5, 1] high."""
    if not (0.0 <= ratio <= 1.0):  # also rejects NaN
        raise InvalidInputError(f"overlap ratio must lie in [0, 1], got {ratio}")
    if ratio == 0.0:
        return OverlapBand.NONE
    if ratio <= 0.2:
        return OverlapBand.LOW
    if ratio <= 0.5:
        return OverlapBand.MID
    return OverlapBand.HIGH


@dataclass(frozen=True)
class EditCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        """Error ratio (not percent); inf when errors occur against no reference words."""
        if self.ref_words == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return self.errors / self.ref_words

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_words + other.ref_words,
        )

    def to_json(self) -> dict:
        return {"sub": self.substitutions, "del": self.deletions, "ins": self.insertions,
                "ref_words": self.ref_words, "errors": self.errors}


def word_edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> EditCounts:
    """Levenshtein alignment over words with unit costs.

    Among minimal alignments the backtrace prefers match/substitution, then
    deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        r = ref[i - 1]
        for j in range(1, m + 1):
            diag = cost[i - 1, j - 1] + (r != hyp[j - 1])
            cost[i, j] = min(diag, cost[i - 1, j] + 1, cost[i, j - 1] + 1)
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(s), d, ins, n)


def pi_wer(refs: Sequence[Sequence[str]], hyp_segments: Sequence[Sequence[str]]) -> EditCounts:
    """Edit counts under the speaker assignment with the fewest total errors.

    The shorter side is padded with empty segments, so a missing speaker
    costs pure deletions and a hallucinated one pure insertions.  The
    optimal bijection is found as a linear assignment on the pairwise error
    matrix.
    """
    if not refs:
        raise InvalidInputError("pi_wer needs at least one reference segment")
    k = max(len(refs), len(hyp_segments))
    if k > MAX_SEGMENTS:
        raise InvalidInputError(
            f"{k} speaker segments exceed the limit of {MAX_SEGMENTS} for permutation search"
        )
    refs = list(refs) + [[]] * (k - len(refs))
    hyps = list(hyp_segments) + [[]] * (k - len(hyp_segments))
    pair = [[word_edit_distance(r, h) for h in hyps] for r in refs]
    errors = np.array([[c.errors for c in row] for row in pair])
    rows, cols = linear_sum_assignment(errors)
    total = EditCounts()
    for r, c in zip(rows, cols):
        total = total + pair[r][c]
    return total


def oa_wer(band_wers: Mapping) -> float:
    """Mean of the low, mid and high band WERs."""
    values = []
    for band in OVERLAP_BANDS:
        if band in band_wers:
            v = band_wers[band]
        elif band.value in band_wers:
            v = band_wers[band.value]
        else:
            raise InvalidInputError(f"missing WER for overlap band {band.value!r}")
        if v is None:
            raise InvalidInputError(f"missing WER for overlap band {band.value!r}")
        values.append(float(v))
    return sum(values) / 3.0


def _pooled(counts: List[EditCounts]) -> Optional[float]:
    if not counts:
        return None
    total = sum(counts, EditCounts())
    return total.wer


@dataclass
class WerReport:
    per_utterance: Dict[str, EditCounts]
    bands: Dict[str, str]
    pooled: float
    per_band: Dict[str, Optional[float]]
    oa_wer: Optional[float]
    warnings: List[str] = field(default_factory=list)
    malformed_hypotheses: int = 0

    def to_json(self) -> dict:
        """JSON form; WER values are percentages at full precision."""
        pct = lambda v: None if v is None else 100.0 * v  # noqa: E731
        return {
            "units": "percent",
            "pooled": pct(self.pooled),
            "per_band": {b.value: pct(self.per_band.get(b.value)) for b in OVERLAP_BANDS},
            "oa_wer": pct(self.oa_wer),
            "warnings": list(self.warnings),
            "malformed_hypotheses": self.malformed_hypotheses,
            "utterances": {
                uid: dict(c.to_json(), band=self.bands[uid])
                for uid, c in self.per_utterance.items()
            },
        }

    def table(self) -> str:
        """Fixed-width table, one decimal place, laid out like a WER results row."""
        def fmt(v):
            return "  -  " if v is None else f"{round_percent(100.0 * v):5.1f}"

        head = f"{'':8}{'Overall':>8} |{'low':>6}{'mid':>6}{'high':>6} |{'OA-WER':>7}"
        row = (f"{'WER(%)':8}{fmt(self.pooled):>8} |"
               + "".join(f"{fmt(self.per_band.get(b.value)):>6}" for b in OVERLAP_BANDS)
               + f" |{fmt(self.oa_wer):>7}")
        lines = [head, row]
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines)


def score_corpus(refs: Sequence[ReferenceRecord], hyps: Mapping[str, str],
                 separator: str = DEFAULT_SEPARATOR) -> WerReport:
    """Score a corpus of SOT hypotheses against multi-speaker references.

    WERs are pooled (total errors over total reference words), overall and
    per overlap band.  Hypotheses are parsed leniently; every dropped empty
    segment is counted as a warning.  OA-WER is omitted, with a warning,
    when a band has no utterances.
    """
    ref_ids = [r.id for r in refs]
    if len(set(ref_ids)) != len(ref_ids):
        raise InvalidInputError("duplicate reference ids")
    missing = set(ref_ids) - set(hyps)
    extra = set(hyps) - set(ref_ids)
    if missing or extra:
        raise IdMismatchError(missing, extra)

    per_utt: Dict[str, EditCounts] = {}
    bands: Dict[str, str] = {}
    warnings: List[str] = []
    malformed = 0
    by_band: Dict[str, List[EditCounts]] = {b.value: [] for b in OVERLAP_BANDS}
    for rec in refs:
        if rec.ratio is None:
            raise InvalidInputError(f"reference {rec.id} has no overlap ratio")
        band = bucket_assign(rec.ratio).value
        seq = SotSequence.from_text(hyps[rec.id], separator)
        segments, dropped = deserialize_lenient(seq)
        if dropped:
            malformed += 1
            warnings.append(f"{rec.id}: malformed hypothesis, dropped {dropped} empty segment(s)")
        counts = pi_wer(rec.word_sequences(), segments)
        per_utt[rec.id] = counts
        bands[rec.id] = band
        if band in by_band:
            by_band[band].append(counts)

    per_band = {b: _pooled(c) for b, c in by_band.items()}
    empty = [b for b, v in per_band.items() if v is None]
    if empty:
        warnings.append("OA-WER omitted: no utterances in band(s) " + ", ".join(empty))
        oa = None
    else:
        oa = oa_wer(per_band)
    pooled = _pooled(list(per_utt.values())) or 0.0
    return WerReport(per_utterance=per_utt, bands=bands, pooled=pooled, per_band=per_band,
                     oa_wer=oa, warnings=warnings, malformed_hypotheses=malformed)


def round_percent(value: float) -> float:
    """Round a percentage to one decimal, half away from zero."""
    return float(Decimal(repr(value)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))
