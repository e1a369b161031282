"""Deterministic synthetic corpus: a toy phonetic language with per-emotion
prosody rules and one emphasized word per utterance, giving the model a
learnable emotion/emphasis-to-prosody mapping with known ground truth.

Every utterance is derived from its own RNG stream (seed, uid), so generation
is reproducible record by record and safe to parallelize.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .numerics import TensorFormatError, read_tensor_from
from .prosody import (
    EmphasisSpan,
    PhonemeSequence,
    ProsodyTargets,
    fit_normalization_stats,
)

EMOTIONS = ("neutral", "angry", "happy", "sad", "surprise")
N_EMOTIONS = len(EMOTIONS)

SCHEMA_VERSION = 1

# sub-stream selectors under the corpus seed
_STREAM_TABLES = 0
_STREAM_UTTERANCE = 1


class CorpusError(ValueError):
    """Raised for malformed corpus files or invalid generator configs."""


def emotion_id(name: str) -> int:
    try:
        return EMOTIONS.index(name)
    except ValueError:
        raise CorpusError(f"unknown emotion {name!r}, expected one of {EMOTIONS}") from None


@dataclass(frozen=True)
class EmotionRule:
    """Additive/multiplicative prosody effects of one emotion.

    `end_rise` is a linear pitch ramp over the final word, reaching its full
    value at the last phoneme (a rising contour, mean end_rise/2 on the word).
    """

    pitch_offset: float = 0.0
    pitch_slope: float = 0.0
    duration_scale: float = 1.0
    energy_offset: float = 0.0
    end_rise: float = 0.0

    def __post_init__(self):
        if not 0.5 <= self.duration_scale <= 2.0:
            raise CorpusError(f"duration_scale {self.duration_scale} outside [0.5, 2.0]")


@dataclass(frozen=True)
class EmphasisRule:
    """Prosody boost inside the emphasized word."""

    pitch_boost: float = 0.7
    duration_boost: float = 1.4
    energy_boost: float = 0.4

    def __post_init__(self):
        if self.pitch_boost <= 0:
            raise CorpusError("pitch_boost must be positive")
        if self.duration_boost <= 1:
            raise CorpusError("duration_boost must exceed 1")


def default_emotion_rules() -> dict:
    return {
        "neutral": EmotionRule(),
        "angry": EmotionRule(pitch_offset=0.8, duration_scale=0.9),
        "happy": EmotionRule(pitch_offset=0.5, pitch_slope=0.01),
        "sad": EmotionRule(pitch_offset=-0.6, duration_scale=1.3),
        "surprise": EmotionRule(pitch_offset=0.2, end_rise=1.0),
    }


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    vocab_size: int = 32
    n_speakers: int = 4
    min_words: int = 3
    max_words: int = 6
    min_phonemes_per_word: int = 2
    max_phonemes_per_word: int = 4
    n_mel: int = 20
    noise_std: float = 0.05
    emotion_rules: dict = field(default_factory=default_emotion_rules)
    emphasis_rule: EmphasisRule = field(default_factory=EmphasisRule)

    def __post_init__(self):
        if set(self.emotion_rules) != set(EMOTIONS):
            raise CorpusError(f"emotion_rules must define exactly {EMOTIONS}")
        if self.min_words < 2:
            raise CorpusError("min_words must be >= 2 so emphasis is discriminable")

    @property
    def max_phonemes(self) -> int:
        return self.max_words * self.max_phonemes_per_word

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["emotion_rules"] = {k: dataclasses.asdict(v) for k, v in self.emotion_rules.items()}
        d["emphasis_rule"] = dataclasses.asdict(self.emphasis_rule)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["emotion_rules"] = {
            k: EmotionRule(**v) for k, v in d.get("emotion_rules", {}).items()
        }
        d["emphasis_rule"] = EmphasisRule(**d["emphasis_rule"])
        return cls(**d)


@dataclass(frozen=True)
class Utterance:
    id: int
    phonemes: PhonemeSequence
    speaker_id: int
    emotion: int
    span: EmphasisSpan
    targets: ProsodyTargets
    mel: np.ndarray

    def __post_init__(self):
        self.span.validate(self.phonemes)
        if self.mel.shape[0] != int(self.targets.duration.sum()):
            raise CorpusError(
                f"utterance {self.id}: mel has {self.mel.shape[0]} frames, "
                f"durations sum to {int(self.targets.duration.sum())}"
            )

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]


class _Tables:
    """Seed-derived lookup tables shared by all utterances of a corpus."""

    def __init__(self, config: GeneratorConfig):
        rng = np.random.default_rng([config.seed, _STREAM_TABLES])
        v = config.vocab_size
        self.base_pitch = rng.normal(0.0, 0.3, size=v)
        self.base_energy = rng.normal(0.0, 0.3, size=v)
        self.base_dur = rng.integers(2, 5, size=v)  # 2..4 frames per phoneme
        # mel = fixed linear map of [one-hot phoneme | pitch | energy]
        self.mel_map = rng.normal(0.0, 0.5, size=(config.n_mel, v + 2))
        self.texture_period = rng.uniform(4.0, 24.0, size=config.n_mel)
        self.texture_phase = rng.uniform(0.0, 2.0 * np.pi, size=config.n_mel)


_TABLE_CACHE: dict = {}


def _tables_for(config: GeneratorConfig) -> _Tables:
    key = json.dumps(config.to_dict(), sort_keys=True)
    if key not in _TABLE_CACHE:
        _TABLE_CACHE[key] = _Tables(config)
    return _TABLE_CACHE[key]


def generate_utterance(config: GeneratorConfig, uid: int) -> Utterance:
    """Generate one utterance from the (seed, uid) RNG stream.

    Emotion is uid-round-robin (keeps splits balanced); everything else is
    drawn from the stream. Pitch/energy get gaussian noise, durations do not.
    """
    tables = _tables_for(config)
    rng = np.random.default_rng([config.seed, _STREAM_UTTERANCE, uid])
    emotion = uid % N_EMOTIONS
    rule = config.emotion_rules[EMOTIONS[emotion]]
    emph = config.emphasis_rule

    n_words = int(rng.integers(config.min_words, config.max_words + 1))
    word_lens = rng.integers(
        config.min_phonemes_per_word, config.max_phonemes_per_word + 1, size=n_words
    )
    boundaries = []
    start = 0
    for length in word_lens:
        boundaries.append((start, start + int(length) - 1))
        start += int(length)
    n = start
    ids = rng.integers(0, config.vocab_size, size=n)
    phonemes = PhonemeSequence(tuple(ids.tolist()), tuple(boundaries))

    speaker = int(rng.integers(0, config.n_speakers))
    span_word = int(rng.integers(0, n_words))
    span = EmphasisSpan(span_word, *boundaries[span_word])
    in_span = np.zeros(n, dtype=bool)
    in_span[span.start : span.end + 1] = True

    positions = np.arange(n)
    pitch = tables.base_pitch[ids] + rule.pitch_offset + rule.pitch_slope * positions
    f_start, f_end = boundaries[-1]
    pitch[f_start : f_end + 1] += np.linspace(0.0, rule.end_rise, f_end - f_start + 1)
    pitch[in_span] += emph.pitch_boost
    pitch += rng.normal(0.0, config.noise_std, size=n)

    dur_scale = np.where(in_span, rule.duration_scale * emph.duration_boost, rule.duration_scale)
    duration = np.maximum(1, np.rint(tables.base_dur[ids] * dur_scale)).astype(np.int64)

    energy = tables.base_energy[ids] + rule.energy_offset
    energy[in_span] += emph.energy_boost
    energy += rng.normal(0.0, config.noise_std, size=n)

    targets = ProsodyTargets(pitch, energy, duration)
    mel = _render_mel(config, tables, ids, targets)
    return Utterance(uid, phonemes, speaker, emotion, span, targets, mel)


def _render_mel(config, tables, ids, targets) -> np.ndarray:
    """Pseudo-spectrogram: linear map of per-frame features plus a fixed
    sinusoidal frame-position texture. Not acoustically meaningful."""
    frame_phoneme = np.repeat(np.arange(len(ids)), targets.duration)
    feats = np.zeros((len(frame_phoneme), config.vocab_size + 2))
    feats[np.arange(len(frame_phoneme)), ids[frame_phoneme]] = 1.0
    feats[:, -2] = targets.pitch[frame_phoneme]
    feats[:, -1] = targets.energy[frame_phoneme]
    mel = feats @ tables.mel_map.T
    frames = np.arange(len(frame_phoneme))[:, None]
    mel += 0.3 * np.sin(2.0 * np.pi * frames / tables.texture_period + tables.texture_phase)
    return mel.astype(np.float32)


def _record_path(out_dir, uid: int) -> str:
    return os.path.join(out_dir, f"u{uid:06d}.rec")


def save_utterance(path, utt: Utterance):
    """One record file: a JSON metadata line, then the mel tensor."""
    meta = {
        "id": utt.id,
        "speaker": utt.speaker_id,
        "emotion": utt.emotion,
        "ids": list(utt.phonemes.ids),
        "word_boundaries": [list(b) for b in utt.phonemes.word_boundaries],
        "span": {"word_index": utt.span.word_index, "start": utt.span.start, "end": utt.span.end},
        "pitch": utt.targets.pitch.tolist(),
        "energy": utt.targets.energy.tolist(),
        "durations": utt.targets.duration.tolist(),
    }
    header = json.dumps({"shape": list(utt.mel.shape), "dtype": "f32"})
    try:
        with open(path, "wb") as f:
            f.write(json.dumps(meta).encode("ascii") + b"\n")
            f.write(header.encode("ascii") + b"\n")
            f.write(utt.mel.astype("<f4").tobytes())
    except OSError as e:
        raise CorpusError(f"cannot write record {path}: {e}") from e


def load_utterance(path) -> Utterance:
    try:
        with open(path, "rb") as f:
            line = f.readline()
            if not line.endswith(b"\n"):
                raise CorpusError(f"{path}: corrupt record header: missing newline")
            try:
                meta = json.loads(line.decode("ascii"))
            except (ValueError, UnicodeDecodeError) as e:
                raise CorpusError(f"{path}: corrupt record header: {e}") from e
            try:
                mel = read_tensor_from(f, expect_eof=True)
            except TensorFormatError as e:
                raise CorpusError(f"{path}: {e}") from e
    except OSError as e:
        raise CorpusError(f"cannot read record {path}: {e}") from e
    try:
        phonemes = PhonemeSequence(
            tuple(meta["ids"]), tuple(tuple(b) for b in meta["word_boundaries"])
        )
        span = EmphasisSpan(meta["span"]["word_index"], meta["span"]["start"], meta["span"]["end"])
        targets = ProsodyTargets(
            np.array(meta["pitch"], dtype=np.float64),
            np.array(meta["energy"], dtype=np.float64),
            np.array(meta["durations"], dtype=np.int64),
        )
        return Utterance(meta["id"], phonemes, meta["speaker"], meta["emotion"], span, targets, mel)
    except KeyError as e:
        raise CorpusError(f"{path}: corrupt record header: missing field {e}") from e


def raw_variances(utt: Utterance):
    """(raw pitch variance, raw duration variance) of one utterance."""
    sl = slice(utt.span.start, utt.span.end + 1)
    pitch = float(np.mean(utt.targets.pitch[sl]) - np.mean(utt.targets.pitch))
    dur = float(
        np.mean(utt.targets.duration[sl].astype(np.float64))
        - np.mean(utt.targets.duration.astype(np.float64))
    )
    return pitch, dur


def generate_corpus(config: GeneratorConfig, n_train: int, n_val: int, out_dir) -> dict:
    """Write train/val record files plus manifest.json; returns the manifest.

    Emotions are balanced (+-1) inside each split and ids are disjoint across
    splits. Normalization stats are fit on the train split only.
    """
    if n_train <= 0 or n_val <= 0:
        raise CorpusError("n_train and n_val must be positive")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise CorpusError(f"cannot create corpus directory {out_dir}: {e}") from e
    train_ids = list(range(n_train))
    val_ids = list(range(n_train, n_train + n_val))
    pitch_vars, dur_vars = [], []
    for uid in train_ids + val_ids:
        utt = generate_utterance(config, uid)
        save_utterance(_record_path(out_dir, uid), utt)
        if uid < n_train:
            p, d = raw_variances(utt)
            pitch_vars.append(p)
            dur_vars.append(d)
    stats = fit_normalization_stats(pitch_vars, dur_vars)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "n_train": n_train,
        "n_val": n_val,
        "splits": {"train": train_ids, "val": val_ids},
        "stats": stats.to_dict(),
    }
    try:
        with open(os.path.join(out_dir, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise CorpusError(f"cannot write manifest in {out_dir}: {e}") from e
    return manifest


def load_manifest(path) -> dict:
    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except OSError as e:
        raise CorpusError(f"cannot read manifest {manifest_path}: {e}") from e
    except ValueError as e:
        raise CorpusError(f"{manifest_path}: corrupt manifest: {e}") from e
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise CorpusError(
            f"{manifest_path}: unsupported schema version {version!r}, expected {SCHEMA_VERSION}"
        )
    return manifest


def load_corpus(path, split=None):
    """Load (manifest, utterances). `split` restricts to 'train' or 'val'."""
    manifest = load_manifest(path)
    if split is None:
        uids = manifest["splits"]["train"] + manifest["splits"]["val"]
    else:
        uids = manifest["splits"][split]
    utterances = [load_utterance(_record_path(path, uid)) for uid in uids]
    return manifest, utterances
