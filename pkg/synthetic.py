"""
Synthetic data for emomine
Noisy tone utterances with class-specific frequencies, and demo movie WAV + SRT pairs
"""

import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from corpus import AudioBuffer, MoviePair, write_wav
from features import StftConfig, stft_bands
from srt_parser import SubtitleCue, serialize_srt
from transfer_eval import LabeledExample

Frequencies = Union[float, Sequence[float]]

# Pretraining classes sit in well separated bands; the target task reuses them
PRETRAIN_TONES: Dict[str, Frequencies] = {"positive": 1200.0, "negative": 300.0, "neutral": 3000.0}
TARGET_TONES: Dict[str, Frequencies] = {
    "happy": 1200.0,
    "angry": 300.0,
    "neutral": 3000.0,
    "sad": (300.0, 3000.0),
}


def tone_utterance(freqs: Frequencies, seconds: float, rng: np.random.Generator, sample_rate_hz: int = 16000,
                   snr_db: float = 10.0, amplitude: float = 0.3, jitter: float = 0.03) -> AudioBuffer:
    """Sum of sines at slightly jittered frequencies plus white noise at snr_db"""
    freqs = [freqs] if isinstance(freqs, (int, float)) else list(freqs)
    n = int(round(seconds * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    signal = np.zeros(n)
    for f in freqs:
        f_actual = f * (1.0 + rng.uniform(-jitter, jitter))
        signal += amplitude * np.sin(2 * math.pi * f_actual * t + rng.uniform(0, 2 * math.pi))
    power = float(np.mean(signal ** 2))
    noise = rng.normal(0.0, math.sqrt(power / 10 ** (snr_db / 10.0)), size=n)
    return AudioBuffer(samples=np.clip(signal + noise, -1.0, 1.0), sample_rate_hz=sample_rate_hz)


def tone_corpus(class_tones: Dict[str, Frequencies], per_class: int, seed: int,
                stft: Optional[StftConfig] = None, seconds: Tuple[float, float] = (0.5, 1.0),
                snr_db: float = 10.0, sample_rate_hz: int = 16000) -> List[LabeledExample]:
    """Labeled spectrograms, interleaved by class, reproducible from seed"""
    stft = stft or StftConfig()
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(per_class):
        for label, freqs in class_tones.items():
            audio = tone_utterance(freqs, rng.uniform(*seconds), rng, sample_rate_hz, snr_db)
            examples.append(LabeledExample(spectrogram=stft_bands(audio, stft), label=label, key=f"{label}_{i}"))
    return examples


def write_demo_movie(out_dir, source_id: str, lines: Sequence[str], seed: int = 0, sample_rate_hz: int = 16000,
                     cue_ms: int = 1500, gap_ms: int = 500) -> MoviePair:
    """Write `<source_id>.wav` and `<source_id>.srt` with one tone-filled cue per line"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    cues = []
    start = gap_ms
    for index, text in enumerate(lines, 1):
        cues.append(SubtitleCue(index=index, start_ms=start, end_ms=start + cue_ms, text=text))
        start += cue_ms + gap_ms

    total = np.zeros(start * sample_rate_hz // 1000)
    for cue in cues:
        tone = tone_utterance(rng.uniform(200, 2000), cue_ms / 1000, rng, sample_rate_hz)
        first = cue.start_ms * sample_rate_hz // 1000
        total[first: first + len(tone.samples)] = tone.samples

    wav_path = out_dir / f"{source_id}.wav"
    srt_path = out_dir / f"{source_id}.srt"
    write_wav(wav_path, AudioBuffer(samples=total, sample_rate_hz=sample_rate_hz))
    srt_path.write_bytes(serialize_srt(cues))
    return MoviePair(srt_path=str(srt_path), wav_path=str(wav_path), source_id=source_id)
