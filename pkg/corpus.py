"""
Weak-label corpus builder for emomine
Scores subtitle cues, labels them by polarity thresholds, subsamples neutrals
and cuts the matching audio out of each movie
"""

import csv
import io
import json
import logging
import os
import wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from emomine_errors import DataError
from sentiment import DEFAULT_ALPHA, SentimentLexicon, score_text
from srt_parser import CueFilterPolicy, SubtitleCue, filter_cues, parse_srt

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ["source_id", "start_ms", "end_ms", "label", "score", "audio_path", "text"]
MANIFEST_NAME = "manifest.csv"
SUMMARY_NAME = "corpus_summary.json"
SEGMENTS_DIR = "segments"
MIN_SAMPLE_RATE = 16000
PCM16_SCALE = 32768.0


class UnsupportedFormat(DataError):
    """WAV is not mono 16-bit PCM at a usable sample rate"""


class CorruptHeader(DataError):
    """WAV header could not be read"""


class OutOfRange(DataError):
    """Cut window starts beyond the end of the audio"""


class EmptyCorpusOutput(DataError):
    """Corpus build produced no segment at all"""


class WeakLabel(str, Enum):
    """Label derived from subtitle sentiment"""
    POSITIVE = "positive"
    NEGATIVE = "negative"
    NEUTRAL = "neutral"


class LabelingPolicy(BaseModel):
    """Polarity thresholds and neutral subsampling"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    positive_threshold: float = Field(default=0.7, description="Scores strictly above are positive")
    negative_threshold: float = Field(default=-0.6, description="Scores strictly below are negative")
    neutral_band: float = Field(default=0.05, ge=0.0, description="Half-width of the neutral region around 0")
    # None: mean of the positive and negative counts
    neutral_sample_count: Optional[int] = Field(default=None, ge=0)
    rng_seed: int = Field(default=0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def check_regions(self):
        if not self.negative_threshold < 0 < self.positive_threshold:
            raise ValueError("need negative_threshold < 0 < positive_threshold")
        if self.neutral_band >= min(self.positive_threshold, abs(self.negative_threshold)):
            raise ValueError("neutral_band must be smaller than both thresholds")
        return self


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Mono samples in [-1, 1]"""
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        if self.sample_rate_hz < MIN_SAMPLE_RATE:
            raise UnsupportedFormat(f"sample rate {self.sample_rate_hz} Hz is below {MIN_SAMPLE_RATE} Hz")
        if self.samples.ndim != 1:
            raise UnsupportedFormat("audio must be mono")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_ms(self) -> int:
        return len(self.samples) * 1000 // self.sample_rate_hz


@dataclass(frozen=True)
class LabeledSegment:
    """A mined utterance with its weak label"""
    source_id: str
    start_ms: int
    end_ms: int
    label: WeakLabel
    score: float
    text: str
    audio_path: str = ""

    @property
    def file_name(self) -> str:
        return f"{self.source_id}_{self.start_ms}_{self.end_ms}.wav"

    def to_row(self) -> "ManifestRow":
        return ManifestRow(
            source_id=self.source_id,
            start_ms=self.start_ms,
            end_ms=self.end_ms,
            label=self.label.value,
            score=self.score,
            audio_path=self.audio_path,
            text=self.text,
        )


@dataclass(frozen=True)
class ManifestRow:
    """One manifest line; label is free text so target-domain manifests share the format"""
    source_id: str
    start_ms: int
    end_ms: int
    label: str
    score: float
    audio_path: str
    text: str


@dataclass(frozen=True)
class MoviePair:
    """Subtitle + audio input for one movie"""
    srt_path: str
    wav_path: str
    source_id: str


@dataclass
class CorpusManifest:
    """Rows of a corpus plus the directory their audio paths are relative to"""
    rows: List[ManifestRow]
    root: Path

    def counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for row in self.rows:
            counts[row.label] = counts.get(row.label, 0) + 1
        return dict(sorted(counts.items()))

    def audio_file(self, row: ManifestRow) -> Path:
        return self.root / row.audio_path

    def write_csv(self, path: Path):
        """Write the manifest; text is always quoted, score has 6 decimals"""
        lines = [",".join(MANIFEST_HEADER)]
        for row in self.rows:
            lines.append(",".join([
                _csv_field(row.source_id),
                str(row.start_ms),
                str(row.end_ms),
                _csv_field(row.label),
                f"{row.score:.6f}",
                _csv_field(row.audio_path),
                _csv_field(row.text, force_quote=True),
            ]))
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write("\n".join(lines) + "\n")


def _csv_field(value: str, force_quote: bool = False) -> str:
    if force_quote or any(ch in value for ch in ',"\n\r'):
        return '"' + value.replace('"', '""') + '"'
    return value


def read_manifest(path) -> CorpusManifest:
    """Load a manifest CSV; audio paths resolve against its directory"""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != MANIFEST_HEADER:
                raise DataError(f"{path}: unexpected manifest header {reader.fieldnames}")
            rows = [
                ManifestRow(
                    source_id=r["source_id"],
                    start_ms=int(r["start_ms"]),
                    end_ms=int(r["end_ms"]),
                    label=r["label"],
                    score=float(r["score"]),
                    audio_path=r["audio_path"],
                    text=r["text"],
                )
                for r in reader
            ]
    except (OSError, ValueError, KeyError, TypeError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"{path}: cannot read manifest: {e}") from e
    return CorpusManifest(rows=rows, root=path.parent)


def assign_label(score: float, policy: LabelingPolicy) -> Optional[WeakLabel]:
    """Positive above, negative below the thresholds, neutral near zero, otherwise None"""
    if score > policy.positive_threshold:
        return WeakLabel.POSITIVE
    if score < policy.negative_threshold:
        return WeakLabel.NEGATIVE
    if abs(score) <= policy.neutral_band:
        return WeakLabel.NEUTRAL
    return None


def subsample_neutral(candidates: List[LabeledSegment], policy: LabelingPolicy,
                      count: Optional[int] = None) -> List[LabeledSegment]:
    """Seeded uniform subset of the neutral candidates, original order kept

    `count` overrides policy.neutral_sample_count; one of them must be set.
    """
    if count is None:
        count = policy.neutral_sample_count
    if count is None:
        raise ValueError("neutral sample count is not resolved")
    if count >= len(candidates):
        return list(candidates)
    rng = np.random.default_rng(policy.rng_seed)
    picked = np.sort(rng.choice(len(candidates), size=count, replace=False))
    return [candidates[i] for i in picked]


def read_wav(raw: bytes) -> AudioBuffer:
    """Decode mono 16-bit PCM WAV bytes into samples scaled by 1/32768"""
    try:
        with wave.open(io.BytesIO(raw), "rb") as wav:
            channels = wav.getnchannels()
            width = wav.getsampwidth()
            rate = wav.getframerate()
            n_frames = wav.getnframes()
            data = wav.readframes(n_frames)
    except wave.Error as e:
        if "format" in str(e).lower():
            raise UnsupportedFormat(f"not PCM: {e}") from e
        raise CorruptHeader(str(e)) from e
    except (EOFError, ValueError, OSError) as e:
        raise CorruptHeader(f"truncated or invalid RIFF header: {e}") from e

    if channels != 1:
        raise UnsupportedFormat(f"{channels} channels, only mono is supported")
    if width != 2:
        raise UnsupportedFormat(f"{8 * width}-bit samples, only 16-bit is supported")

    data = data[: len(data) - len(data) % 2]
    samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / PCM16_SCALE
    return AudioBuffer(samples=samples, sample_rate_hz=rate)


def read_wav_file(path) -> AudioBuffer:
    with open(path, "rb") as f:
        return read_wav(f.read())


def write_wav(path, audio: AudioBuffer):
    """Write mono 16-bit PCM"""
    pcm = np.clip(np.round(audio.samples * PCM16_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(audio.sample_rate_hz)
        wav.writeframes(pcm.tobytes())


def cut_segment(audio: AudioBuffer, start_ms: int, end_ms: int) -> AudioBuffer:
    """Samples [floor(start*fs/1000), floor(end*fs/1000)), truncated at the audio end"""
    if not 0 <= start_ms < end_ms:
        raise ValueError(f"invalid window {start_ms}..{end_ms} ms")
    fs = audio.sample_rate_hz
    first = start_ms * fs // 1000
    last = end_ms * fs // 1000
    if first >= len(audio.samples):
        raise OutOfRange(f"start {start_ms} ms is beyond the audio end ({audio.duration_ms} ms)")
    return AudioBuffer(samples=audio.samples[first:last].copy(), sample_rate_hz=fs)


def _collect_candidates(pair: MoviePair, lexicon: SentimentLexicon, cue_policy: CueFilterPolicy,
                        labeling_policy: LabelingPolicy, alpha: float) -> List[LabeledSegment]:
    """Parse, filter, score and label one movie's subtitles"""
    try:
        with open(pair.srt_path, "rb") as f:
            cues = parse_srt(f.read(), source=pair.srt_path)
    except (OSError, DataError) as e:
        logger.warning("[CORPUS] %s: skipping subtitles: %s", pair.source_id, e)
        return []

    segments = []
    for cue in filter_cues(cues, cue_policy):
        score = score_text(cue.text, lexicon, alpha)
        label = assign_label(score, labeling_policy)
        if label is None:
            continue
        segments.append(LabeledSegment(
            source_id=pair.source_id,
            start_ms=cue.start_ms,
            end_ms=cue.end_ms,
            label=label,
            score=score,
            text=cue.text,
        ))
    logger.info("[CORPUS] %s: %d of %d cues labeled", pair.source_id, len(segments), len(cues))
    return segments


def _write_segments(pair: MoviePair, segments: List[LabeledSegment], segments_dir: Path) -> List[LabeledSegment]:
    """Cut and write one WAV per segment of a movie"""
    if not segments:
        return []
    try:
        audio = read_wav_file(pair.wav_path)
    except (OSError, DataError) as e:
        logger.warning("[CORPUS] %s: skipping audio %s: %s", pair.source_id, pair.wav_path, e)
        return []

    written = []
    for segment in segments:
        try:
            piece = cut_segment(audio, segment.start_ms, segment.end_ms)
        except OutOfRange as e:
            logger.warning("[CORPUS] %s: dropping cue at %d ms: %s", pair.source_id, segment.start_ms, e)
            continue
        write_wav(segments_dir / segment.file_name, piece)
        written.append(replace(segment, audio_path=f"{SEGMENTS_DIR}/{segment.file_name}"))
    return written


def _sort_key(segment: LabeledSegment) -> Tuple[str, int, int]:
    return segment.source_id, segment.start_ms, segment.end_ms


def resolve_neutral_count(segments: Sequence[LabeledSegment], policy: LabelingPolicy) -> int:
    if policy.neutral_sample_count is not None:
        return policy.neutral_sample_count
    positives = sum(1 for s in segments if s.label == WeakLabel.POSITIVE)
    negatives = sum(1 for s in segments if s.label == WeakLabel.NEGATIVE)
    return (positives + negatives + 1) // 2


def build_corpus(pairs: List[MoviePair], lexicon: SentimentLexicon, cue_policy: CueFilterPolicy,
                 labeling_policy: LabelingPolicy, out_dir, alpha: float = DEFAULT_ALPHA,
                 workers: int = 1) -> CorpusManifest:
    """Mine labeled utterances from movies and write segments plus manifest

    Per-movie work runs on `workers` threads; neutral subsampling and manifest
    assembly are a single ordered reduction.
    """
    source_ids = [p.source_id for p in pairs]
    if len(set(source_ids)) != len(source_ids):
        raise ValueError("source_id values must be unique across input pairs")

    out_dir = Path(out_dir)
    segments_dir = out_dir / SEGMENTS_DIR
    os.makedirs(segments_dir, exist_ok=True)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        per_movie = list(pool.map(
            lambda p: _collect_candidates(p, lexicon, cue_policy, labeling_policy, alpha), pairs
        ))

    candidates = sorted((s for movie in per_movie for s in movie), key=_sort_key)
    unique: List[LabeledSegment] = []
    seen = set()
    for segment in candidates:
        key = _sort_key(segment)
        if key in seen:
            logger.warning("[CORPUS] %s: duplicate cue timing %d-%d ms ignored", *key)
            continue
        seen.add(key)
        unique.append(segment)

    neutrals = [s for s in unique if s.label == WeakLabel.NEUTRAL]
    polar = [s for s in unique if s.label != WeakLabel.NEUTRAL]
    neutral_count = resolve_neutral_count(polar, labeling_policy)
    kept_neutrals = subsample_neutral(neutrals, labeling_policy, count=neutral_count)
    logger.info("[CORPUS] Neutral subsample: %d of %d candidates", len(kept_neutrals), len(neutrals))

    selected = sorted(polar + kept_neutrals, key=_sort_key)
    by_source: Dict[str, List[LabeledSegment]] = {}
    for segment in selected:
        by_source.setdefault(segment.source_id, []).append(segment)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        written = list(pool.map(
            lambda p: _write_segments(p, by_source.pop(p.source_id, []), segments_dir), pairs
        ))

    final = sorted((s for movie in written for s in movie), key=_sort_key)
    if not final:
        raise EmptyCorpusOutput("corpus build produced zero segments")

    manifest = CorpusManifest(rows=[s.to_row() for s in final], root=out_dir)
    manifest.write_csv(out_dir / MANIFEST_NAME)
    _write_summary(out_dir / SUMMARY_NAME, manifest, len(pairs))
    logger.info("[CORPUS] Wrote %d segments: %s", len(final), manifest.counts())
    return manifest


def _write_summary(path: Path, manifest: CorpusManifest, movies: int):
    counts = manifest.counts()
    positives = counts.get(WeakLabel.POSITIVE.value, 0)
    negatives = counts.get(WeakLabel.NEGATIVE.value, 0)
    summary = {
        "movies": movies,
        "segments": len(manifest.rows),
        "counts": counts,
        # Thresholds are tuned to keep this near 1; it is reported, not enforced
        "positive_negative_ratio": (positives / negatives) if negatives else None,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
