"""Metadata-only simulation of multi-talker mixtures.

No audio is touched: a mixture is a list of (utterance id, offset) pairs
together with its overlap ratio, the share of the mixture's span during
which at least two speakers are active.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import InfeasibleError, InvalidInputError
from .metrics import OVERLAP_BANDS, OverlapBand, bucket_assign

MAX_SPEAKERS = 3
MAX_ATTEMPTS = 1000
# consecutive utterance pairs that may fail to reach a band before giving up
MAX_PAIR_FAILURES = 50

#: Reference training-set composition (hours and utterance counts).
REFERENCE_COMPOSITION_HOURS = {"1mix": 692.1, "low": 181.5, "mid": 275.5, "high": 202.5}
REFERENCE_COMPOSITION_COUNTS = {"1mix": 202472, "low": 39413, "mid": 59983, "high": 45423}
REFERENCE_TOTAL_HOURS = 1351.6
REFERENCE_TOTAL_COUNT = 347291


@dataclass(frozen=True)
class UtteranceMeta:
    id: str
    duration: float
    word_count: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.duration) and self.duration > 0):
            raise InvalidInputError(f"utterance {self.id}: duration must be positive, got {self.duration}")
        if self.word_count < 0:
            raise InvalidInputError(f"utterance {self.id}: negative word count")


@dataclass(frozen=True)
class MixtureSpec:
    id: str
    components: Tuple[Tuple[str, float], ...]
    total_duration: float
    overlap_ratio: float
    band: OverlapBand

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "components": [{"utt": u, "offset": o} for u, o in self.components],
            "ratio": self.overlap_ratio,
            "band": self.band.value,
            "total_duration": self.total_duration,
        }


def overlap_ratio(intervals: Sequence[Tuple[float, float]]) -> float:
    """Time covered by two or more intervals, divided by the overall span."""
    if not intervals:
        raise InvalidInputError("need at least one interval")
    events = []
    for start, end in intervals:
        if not (math.isfinite(start) and math.isfinite(end)) or end <= start:
            raise InvalidInputError(f"degenerate interval ({start}, {end})")
        events.append((start, 1))
        events.append((end, -1))
    # ends sort before starts at equal times so touching intervals do not overlap
    events.sort(key=lambda e: (e[0], e[1]))
    span = max(e for _, e in intervals) - min(s for s, _ in intervals)
    active = 0
    overlap = 0.0
    prev = events[0][0]
    for t, delta in events:
        if active >= 2:
            overlap += t - prev
        active += delta
        prev = t
    return min(1.0, overlap / span)


def mixture_from_offsets(utts: Sequence[UtteranceMeta], offsets: Sequence[float],
                         mixture_id: str = "") -> MixtureSpec:
    """Build a mixture with explicit offsets (first must be 0, non-decreasing)."""
    if len(utts) != len(offsets) or not utts:
        raise InvalidInputError("need one offset per utterance")
    if offsets[0] != 0:
        raise InvalidInputError("first speaker must start at offset 0")
    if any(b < a for a, b in zip(offsets, offsets[1:])):
        raise InvalidInputError("offsets must be non-decreasing")
    intervals = [(o, o + u.duration) for u, o in zip(utts, offsets)]
    ratio = overlap_ratio(intervals) if len(utts) > 1 else 0.0
    return MixtureSpec(
        id=mixture_id,
        components=tuple((u.id, float(o)) for u, o in zip(utts, offsets)),
        total_duration=max(end for _, end in intervals),
        overlap_ratio=ratio,
        band=bucket_assign(ratio),
    )


def _draw_offsets(utts: Sequence[UtteranceMeta], rng: np.random.Generator) -> List[float]:
    offsets = [0.0]
    for prev in utts[:-1]:
        lo = offsets[-1]
        # uniform on (lo, lo + prev.duration]
        offsets.append(lo + prev.duration * (1.0 - rng.random()))
    return offsets


def make_mixture(utts: Sequence[UtteranceMeta], rng: np.random.Generator,
                 target_band: Optional[OverlapBand] = None, mixture_id: str = "",
                 max_attempts: int = MAX_ATTEMPTS) -> MixtureSpec:
    """Mix 1 to 3 utterances with random chronological offsets.

    Each later speaker starts strictly after, and no later than the end of,
    the previous one.  With ``target_band`` the offsets are redrawn until the
    mixture lands in that band.
    """
    if not 1 <= len(utts) <= MAX_SPEAKERS:
        raise InvalidInputError(f"a mixture takes 1 to {MAX_SPEAKERS} utterances, got {len(utts)}")
    if target_band is not None:
        target_band = OverlapBand(target_band)
    for _ in range(max_attempts):
        spec = mixture_from_offsets(utts, _draw_offsets(utts, rng), mixture_id)
        if target_band is None or spec.band == target_band:
            return spec
    raise InfeasibleError(
        f"no offsets reached band {target_band.value!r} in {max_attempts} attempts "
        f"(durations {[u.duration for u in utts]})",
        band=target_band.value,
    )


def build_manifest(corpus: Sequence[UtteranceMeta], composition: Mapping[str, float],
                   single_talker_hours: float, rng: np.random.Generator) -> List[MixtureSpec]:
    """Assemble single-talker entries and band-targeted two-talker mixtures.

    Single-talker entries are drawn without replacement until their summed
    duration reaches ``single_talker_hours``.  For each band in
    ``composition`` (hours per band) two distinct utterances are paired at
    random (utterances may recur across mixtures) and mixed into that band
    until its summed mixture duration reaches the target.  Every target is
    met or exceeded by less than one entry.
    """
    targets = {}
    for band, hours in composition.items():
        band = OverlapBand(band)
        if band == OverlapBand.NONE:
            raise InvalidInputError("two-talker composition cannot target band 'none'")
        if not hours >= 0:
            raise InvalidInputError(f"target hours for {band.value} must be >= 0")
        targets[band] = float(hours) * 3600.0
    if not single_talker_hours >= 0:
        raise InvalidInputError("single-talker hours must be >= 0")

    manifest: List[MixtureSpec] = []
    n = len(corpus)

    single_target = single_talker_hours * 3600.0
    achieved = 0.0
    if single_target > 0:
        order = rng.permutation(n)
        for idx in order:
            if achieved >= single_target:
                break
            spec = mixture_from_offsets([corpus[idx]], [0.0], f"mix{len(manifest):07d}")
            manifest.append(spec)
            achieved += spec.total_duration
        if achieved < single_target:
            raise InfeasibleError(
                f"1mix: corpus holds {achieved / 3600:.3f} h, {single_talker_hours} h requested",
                band="1mix",
            )

    for band in OVERLAP_BANDS:
        target = targets.get(band, 0.0)
        if target <= 0:
            continue
        if n < 2:
            raise InfeasibleError(f"{band.value}: two-talker mixtures need at least 2 utterances",
                                  band=band.value)
        achieved = 0.0
        failures = 0
        while achieved < target:
            i, j = rng.choice(n, size=2, replace=False)
            try:
                spec = make_mixture([corpus[i], corpus[j]], rng, band, f"mix{len(manifest):07d}")
            except InfeasibleError:
                failures += 1
                if failures >= MAX_PAIR_FAILURES:
                    raise InfeasibleError(
                        f"{band.value}: {failures} consecutive pairs could not reach the band; "
                        f"short by {(target - achieved) / 3600:.3f} h",
                        band=band.value,
                    ) from None
                continue
            failures = 0
            manifest.append(spec)
            achieved += spec.total_duration
    return manifest


def summarize_manifest(manifest: Sequence[MixtureSpec]) -> Dict[str, Dict[str, float]]:
    """Entry counts and hours per column (1mix, low, mid, high, total)."""
    cols = {"1mix": [0, 0.0]}
    cols.update({b.value: [0, 0.0] for b in OVERLAP_BANDS})
    for spec in manifest:
        key = "1mix" if len(spec.components) == 1 else spec.band.value
        if key not in cols:  # multi-talker mixture with zero overlap
            cols[key] = [0, 0.0]
        cols[key][0] += 1
        cols[key][1] += spec.total_duration / 3600.0
    summary = {k: {"utterances": c, "hours": h} for k, (c, h) in cols.items()}
    summary["total"] = {
        "utterances": sum(v["utterances"] for v in summary.values()),
        "hours": sum(v["hours"] for v in summary.values()),
    }
    return summary


def format_composition(summary: Mapping[str, Mapping[str, float]]) -> str:
    """Two-row table: utterance counts and hours per column."""
    cols = ["1mix", "low", "mid", "high", "total"]
    labels = ["1mix", "Low", "Mid", "High", "Total"]
    head = f"{'':10}" + "".join(f"{lab:>10}" for lab in labels)
    utt = f"{'Utt.':10}" + "".join(f"{int(summary[c]['utterances']):>10d}" for c in cols)
    dur = f"{'Dur.(hrs)':10}" + "".join(f"{summary[c]['hours']:>10.1f}" for c in cols)
    return "\n".join([head, utt, dur])


def read_corpus(path) -> List[UtteranceMeta]:
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                corpus.append(UtteranceMeta(id=str(obj["id"]), duration=float(obj["duration"]),
                                            word_count=int(obj.get("word_count", 0))))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InvalidInputError(f"corpus line {lineno}: {exc}") from None
    return corpus


def parse_composition(text: str) -> Dict[str, float]:
    """Parse ``"low:181.5,mid:275.5,high:202.5"``."""
    out: Dict[str, float] = {}
    if not text.strip():
        return out
    for item in text.split(","):
        try:
            band, hours = item.split(":")
            out[OverlapBand(band.strip().lower()).value] = float(hours)
        except ValueError:
            raise InvalidInputError(f"bad composition item {item!r}; expected band:hours") from None
    return out
