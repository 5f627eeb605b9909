"""
SubRip subtitle parser for emomine
Turns .srt bytes into timed cues and applies the phrase length filters
"""

import logging
import re
from dataclasses import dataclass
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from emomine_errors import DataError

logger = logging.getLogger(__name__)

TIMESTAMP_RE = re.compile(
    r"^\s*(\d+):(\d{1,2}):(\d{1,2})[,.](\d{1,3})\s*-->\s*(\d+):(\d{1,2}):(\d{1,2})[,.](\d{1,3})",
    re.ASCII,
)
TAG_RE = re.compile(r"<.*?>", re.DOTALL)
WHITESPACE_RE = re.compile(r"\s+")
BLOCK_SPLIT_RE = re.compile(r"\n[ \t]*\n")


class NotUtf8(DataError):
    """Subtitle bytes are not valid UTF-8"""


class EmptyFile(DataError):
    """No parseable cue in the whole file"""


@dataclass(frozen=True)
class SubtitleCue:
    """One timed subtitle phrase"""
    index: int
    start_ms: int
    end_ms: int
    text: str

    @property
    def duration_ms(self) -> int:
        return self.end_ms - self.start_ms


@dataclass(frozen=True)
class SrtWarning:
    """Diagnostic for a block that was skipped"""
    source: str
    block: int
    reason: str

    def to_dict(self):
        return {"source": self.source, "block": self.block, "reason": self.reason}


class CueFilterPolicy(BaseModel):
    """Length filters applied to cue text before sentiment scoring"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    max_chars: int = Field(default=100, ge=1, description="Cues longer than this are dropped")
    min_words: int = Field(default=4, ge=1, description="Cues with fewer words are dropped")


def normalize_text(lines: List[str]) -> str:
    """Strip markup tags, join lines and collapse whitespace"""
    joined = " ".join(lines)
    joined = TAG_RE.sub("", joined)
    return WHITESPACE_RE.sub(" ", joined).strip()


def _timestamp_to_ms(hours: str, minutes: str, seconds: str, millis: str) -> int:
    # "5" after the separator means 500 ms, as players read it
    millis = millis.ljust(3, "0")
    return ((int(hours) * 60 + int(minutes)) * 60 + int(seconds)) * 1000 + int(millis)


def format_timestamp(ms: int) -> str:
    """Render milliseconds as HH:MM:SS,mmm"""
    hours, rest = divmod(ms, 3_600_000)
    minutes, rest = divmod(rest, 60_000)
    seconds, millis = divmod(rest, 1000)
    return f"{hours:02d}:{minutes:02d}:{seconds:02d},{millis:03d}"


def _parse_block(block: str) -> Tuple[Optional[SubtitleCue], Optional[str]]:
    """Parse one blank-line separated block; returns (cue, None) or (None, reason)"""
    lines = [line.strip() for line in block.split("\n")]
    lines = [line for line in lines if line]
    if len(lines) < 2:
        return None, "block has fewer than two lines"

    if not (lines[0].isascii() and lines[0].isdigit()):
        return None, f"invalid cue index {lines[0][:20]!r}"
    index = int(lines[0])
    if index < 1:
        return None, f"cue index {index} is not positive"

    match = TIMESTAMP_RE.match(lines[1])
    if not match:
        return None, f"invalid timestamp line {lines[1][:40]!r}"
    groups = match.groups()
    start_ms = _timestamp_to_ms(*groups[:4])
    end_ms = _timestamp_to_ms(*groups[4:])
    if end_ms <= start_ms:
        return None, f"end {end_ms} ms is not after start {start_ms} ms"

    text = normalize_text(lines[2:])
    if not text:
        return None, "empty cue text"
    return SubtitleCue(index=index, start_ms=start_ms, end_ms=end_ms, text=text), None


def parse_srt_with_warnings(raw: bytes, source: str = "<bytes>") -> Tuple[List[SubtitleCue], List[SrtWarning]]:
    """Parse SRT bytes, returning cues in file order plus one warning per skipped block

    Raises:
        NotUtf8: the bytes do not decode as UTF-8
        EmptyFile: no block yielded a cue
    """
    try:
        content = raw.decode("utf-8-sig")
    except UnicodeDecodeError as e:
        raise NotUtf8(f"{source}: not valid UTF-8 at byte {e.start}") from e

    content = content.replace("\r\n", "\n").replace("\r", "\n")

    cues: List[SubtitleCue] = []
    warnings: List[SrtWarning] = []
    blocks = [b for b in BLOCK_SPLIT_RE.split(content) if b.strip()]
    for ordinal, block in enumerate(blocks, 1):
        cue, reason = _parse_block(block)
        if cue is None:
            warnings.append(SrtWarning(source=source, block=ordinal, reason=reason))
        else:
            cues.append(cue)

    for warning in warnings:
        logger.warning("[SRT] %s block %d skipped: %s", warning.source, warning.block, warning.reason)

    if not cues:
        raise EmptyFile(f"{source}: no parseable subtitle cue")
    return cues, warnings


def parse_srt(raw: bytes, source: str = "<bytes>") -> List[SubtitleCue]:
    """Parse SRT bytes into an ordered list of cues"""
    cues, _ = parse_srt_with_warnings(raw, source)
    return cues


def serialize_srt(cues: List[SubtitleCue]) -> bytes:
    """Write cues back out as canonical SRT"""
    blocks = []
    for cue in cues:
        blocks.append(
            f"{cue.index}\n{format_timestamp(cue.start_ms)} --> {format_timestamp(cue.end_ms)}\n{cue.text}\n"
        )
    return "\n".join(blocks).encode("utf-8")


def character_count(text: str) -> int:
    return len(text)


def word_count(text: str) -> int:
    """Number of space separated tokens in normalized text"""
    if not text:
        return 0
    return len(text.split(" "))


def filter_cues(cues: List[SubtitleCue], policy: CueFilterPolicy) -> List[SubtitleCue]:
    """Keep cues with at most max_chars characters and at least min_words words"""
    kept = [
        cue for cue in cues
        if character_count(cue.text) <= policy.max_chars and word_count(cue.text) >= policy.min_words
    ]
    logger.debug("[SRT] Filter kept %d of %d cues", len(kept), len(cues))
    return kept
