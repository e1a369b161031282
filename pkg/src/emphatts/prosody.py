"""Phoneme-level prosody containers, emphasis spans and masks, and the
variance-based emphasis feature math (emphasized-region mean minus sentence
mean, percentile-normalized into [0, 2]).

Everything here is a pure function over immutable inputs.
"""

from dataclasses import dataclass, field

import numpy as np

MIN_STATS_UTTERANCES = 20


class ProsodyError(ValueError):
    """Raised for invalid prosody structures or degenerate statistics."""


@dataclass(frozen=True)
class PhonemeSequence:
    """Phoneme ids plus inclusive (start, end) boundaries of each word.

    Words must tile the sequence: contiguous, non-overlapping, covering all
    phonemes.
    """

    ids: tuple = ()
    word_boundaries: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        object.__setattr__(
            self, "word_boundaries", tuple((int(s), int(e)) for s, e in self.word_boundaries)
        )
        if len(self.ids) < 1:
            raise ProsodyError("phoneme sequence must contain at least one phoneme")
        expected_start = 0
        for start, end in self.word_boundaries:
            if start != expected_start or end < start:
                raise ProsodyError(
                    f"word boundaries {self.word_boundaries} do not tile the sequence"
                )
            expected_start = end + 1
        if expected_start != len(self.ids):
            raise ProsodyError(
                f"word boundaries cover {expected_start} phonemes, sequence has {len(self.ids)}"
            )

    def __len__(self):
        return len(self.ids)

    @property
    def n_words(self):
        return len(self.word_boundaries)


@dataclass(frozen=True)
class EmphasisSpan:
    """Inclusive phoneme range of the emphasized word."""

    word_index: int
    start: int
    end: int

    def validate(self, phonemes: PhonemeSequence):
        if not 0 <= self.start <= self.end < len(phonemes):
            raise ProsodyError(
                f"span [{self.start}, {self.end}] outside sequence of length {len(phonemes)}"
            )
        if not 0 <= self.word_index < phonemes.n_words:
            raise ProsodyError(f"span word index {self.word_index} out of range")
        if phonemes.word_boundaries[self.word_index] != (self.start, self.end):
            raise ProsodyError(
                f"span [{self.start}, {self.end}] does not match word "
                f"{self.word_index} boundary {phonemes.word_boundaries[self.word_index]}"
            )


@dataclass(frozen=True)
class EmphasisMask:
    """0/1 indicator per position, at phoneme or frame resolution."""

    values: np.ndarray
    resolution: str = "phoneme"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if not np.all((vals == 0) | (vals == 1)):
            raise ProsodyError("mask values must be 0 or 1")
        if self.resolution not in ("phoneme", "frame"):
            raise ProsodyError(f"unknown mask resolution {self.resolution!r}")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)


def span_to_mask(span, length: int) -> EmphasisMask:
    """Phoneme-level mask with ones exactly inside the (inclusive) span."""
    values = np.zeros(length, dtype=np.float32)
    if span is not None:
        if not 0 <= span.start <= span.end < length:
            raise ProsodyError(f"span [{span.start}, {span.end}] outside length {length}")
        values[span.start : span.end + 1] = 1.0
    return EmphasisMask(values, "phoneme")


def expand_mask_to_frames(mask: EmphasisMask, durations) -> EmphasisMask:
    """Repeat each phoneme's mask bit `durations[i]` times."""
    durations = np.asarray(durations, dtype=np.int64)
    if mask.resolution != "phoneme":
        raise ProsodyError("expected a phoneme-level mask")
    if len(durations) != len(mask):
        raise ProsodyError(
            f"{len(durations)} durations for mask of length {len(mask)}"
        )
    if durations.size and durations.min() < 1:
        raise ProsodyError("durations must be >= 1")
    return EmphasisMask(np.repeat(mask.values, durations), "frame")


@dataclass(frozen=True)
class ProsodyTargets:
    """Per-phoneme pitch/energy in standardized units and integer frame counts."""

    pitch: np.ndarray
    energy: np.ndarray
    duration: np.ndarray

    def __post_init__(self):
        pitch = np.asarray(self.pitch, dtype=np.float64)
        energy = np.asarray(self.energy, dtype=np.float64)
        duration = np.asarray(self.duration, dtype=np.int64)
        if not (len(pitch) == len(energy) == len(duration)):
            raise ProsodyError("pitch, energy and duration must have equal length")
        if not (np.all(np.isfinite(pitch)) and np.all(np.isfinite(energy))):
            raise ProsodyError("prosody targets must be finite")
        if duration.size and duration.min() < 1:
            raise ProsodyError("every phoneme duration must be >= 1 frame")
        object.__setattr__(self, "pitch", pitch)
        object.__setattr__(self, "energy", energy)
        object.__setattr__(self, "duration", duration)

    def __len__(self):
        return len(self.pitch)


@dataclass(frozen=True)
class NormalizationStats:
    """5th/95th corpus percentiles of the raw variance features."""

    pitch_p5: float
    pitch_p95: float
    dur_p5: float
    dur_p95: float

    def __post_init__(self):
        if not (self.pitch_p5 < self.pitch_p95 and self.dur_p5 < self.dur_p95):
            raise ProsodyError("normalization rejected: p5 must be strictly below p95")

    @property
    def dur_unit(self) -> float:
        """Frames per normalized duration-variance unit."""
        return (self.dur_p95 - self.dur_p5) / 2.0

    def to_dict(self):
        return {
            "pitch_p5": self.pitch_p5,
            "pitch_p95": self.pitch_p95,
            "dur_p5": self.dur_p5,
            "dur_p95": self.dur_p95,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["pitch_p5"], d["pitch_p95"], d["dur_p5"], d["dur_p95"])


@dataclass(frozen=True)
class VarianceFeatures:
    """Raw and normalized emphasis variance scalars plus broadcast tracks.

    Tracks hold the normalized scalar inside the span and exactly 0 outside.
    """

    w_pitch: float
    s_pitch: float
    w_dur: float
    s_dur: float
    raw_pitch_var: float
    raw_dur_var: float
    norm_pitch_var: float
    norm_dur_var: float
    pitch_track: np.ndarray = field(repr=False)
    dur_track: np.ndarray = field(repr=False)


def normalize_to_range(raw: float, p5: float, p95: float) -> float:
    """Affine percentile map into [0, 2], clamped at the ends."""
    if not p5 < p95:
        raise ProsodyError("normalization rejected: p5 must be strictly below p95")
    return float(min(2.0, max(0.0, 2.0 * (raw - p5) / (p95 - p5))))


def fit_normalization_stats(raw_pitch_vars, raw_dur_vars) -> NormalizationStats:
    """Fit 5th/95th percentiles (numpy linear interpolation convention)."""
    pitch = np.asarray(raw_pitch_vars, dtype=np.float64)
    dur = np.asarray(raw_dur_vars, dtype=np.float64)
    if len(pitch) < MIN_STATS_UTTERANCES or len(dur) < MIN_STATS_UTTERANCES:
        raise ProsodyError(
            f"need at least {MIN_STATS_UTTERANCES} utterances to fit normalization stats"
        )
    p5, p95 = np.percentile(pitch, [5.0, 95.0])
    d5, d95 = np.percentile(dur, [5.0, 95.0])
    if p5 >= p95 or d5 >= d95:
        raise ProsodyError("normalization rejected: degenerate variance distribution")
    return NormalizationStats(float(p5), float(p95), float(d5), float(d95))


def compute_variance_features(
    targets: ProsodyTargets, span: EmphasisSpan, stats: NormalizationStats
) -> VarianceFeatures:
    """Emphasized-region means minus sentence means, normalized into [0, 2]
    and broadcast over the span."""
    n = len(targets)
    if n == 0:
        raise ProsodyError("cannot compute variance features of an empty sequence")
    if not 0 <= span.start <= span.end < n:
        raise ProsodyError(f"span [{span.start}, {span.end}] outside sequence of length {n}")
    sl = slice(span.start, span.end + 1)
    w_pitch = float(np.mean(targets.pitch[sl]))
    s_pitch = float(np.mean(targets.pitch))
    w_dur = float(np.mean(targets.duration[sl].astype(np.float64)))
    s_dur = float(np.mean(targets.duration.astype(np.float64)))
    raw_pitch = w_pitch - s_pitch
    raw_dur = w_dur - s_dur
    norm_pitch = normalize_to_range(raw_pitch, stats.pitch_p5, stats.pitch_p95)
    norm_dur = normalize_to_range(raw_dur, stats.dur_p5, stats.dur_p95)
    pitch_track = np.zeros(n, dtype=np.float64)
    dur_track = np.zeros(n, dtype=np.float64)
    pitch_track[sl] = norm_pitch
    dur_track[sl] = norm_dur
    return VarianceFeatures(
        w_pitch=w_pitch,
        s_pitch=s_pitch,
        w_dur=w_dur,
        s_dur=s_dur,
        raw_pitch_var=raw_pitch,
        raw_dur_var=raw_dur,
        norm_pitch_var=norm_pitch,
        norm_dur_var=norm_dur,
        pitch_track=pitch_track,
        dur_track=dur_track,
    )
