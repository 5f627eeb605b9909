"""
Lexicon sentiment scorer for emomine
Bag-of-words valence sum squashed into (-1, 1), used to weakly label subtitle phrases
"""

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Union

from emomine_errors import DataError

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 15.0
MAX_VALENCE = 4.0
TOKEN_RE = re.compile(r"[^\W_]+")


class MalformedLine(DataError):
    """A lexicon line could not be parsed"""

    def __init__(self, line_num: int, message: str):
        super().__init__(f"line {line_num}: {message}")
        self.line_num = line_num


class EmptyLexicon(DataError):
    """Lexicon file holds no entries"""


@dataclass(frozen=True)
class SentimentLexicon:
    """Immutable token -> valence map"""
    entries: Dict[str, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, token: str) -> bool:
        return token in self.entries

    def valence(self, token: str) -> float:
        return self.entries[token]

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "SentimentLexicon":
        """Load a lexicon from a TSV file on disk"""
        with open(path, "rb") as f:
            return load_lexicon(f.read())


def load_lexicon(raw: bytes) -> SentimentLexicon:
    """Parse `token<TAB>valence` lines; `#` lines and blank lines are skipped

    Duplicate tokens keep the last occurrence and log a warning.
    """
    try:
        content = raw.decode("utf-8-sig")
    except UnicodeDecodeError as e:
        raise MalformedLine(content_line_of(raw, e.start), "not valid UTF-8") from e

    entries: Dict[str, float] = {}
    for line_num, line in enumerate(content.splitlines(), 1):
        line = line.strip()

        # Skip empty lines and comments
        if not line or line.startswith("#"):
            continue

        fields = line.split("\t")
        if len(fields) != 2:
            raise MalformedLine(line_num, f"expected 2 tab-separated fields, got {len(fields)}")

        token = fields[0].strip().lower()
        if not token or any(ch.isspace() for ch in token):
            raise MalformedLine(line_num, f"invalid token {fields[0]!r}")

        try:
            valence = float(fields[1])
        except ValueError:
            raise MalformedLine(line_num, f"non-numeric valence {fields[1]!r}")
        if not math.isfinite(valence) or abs(valence) > MAX_VALENCE:
            raise MalformedLine(line_num, f"valence {valence} outside [-{MAX_VALENCE}, {MAX_VALENCE}]")

        if token in entries:
            logger.warning("[LEXICON] Line %d: duplicate token %r, keeping last value %s", line_num, token, valence)
        entries[token] = valence

    if not entries:
        raise EmptyLexicon("lexicon contains no entries")

    logger.info("[LEXICON] Loaded %d entries", len(entries))
    return SentimentLexicon(entries=entries)


def content_line_of(raw: bytes, offset: int) -> int:
    """1-based line number of a byte offset"""
    return raw.count(b"\n", 0, offset) + 1


def tokenize(text: str) -> List[str]:
    """Lowercase and split on anything that is not a letter or digit"""
    return TOKEN_RE.findall(text.lower())


def normalize(total: float, alpha: float = DEFAULT_ALPHA) -> float:
    """Map a valence sum into (-1, 1)"""
    return total / math.sqrt(total * total + alpha)


def score_text(text: str, lexicon: SentimentLexicon, alpha: float = DEFAULT_ALPHA) -> float:
    """Polarity of a phrase in [-1, 1]; 0.0 when no token matches"""
    matched = [lexicon.entries[tok] for tok in tokenize(text) if tok in lexicon.entries]
    if not matched:
        return 0.0
    return normalize(math.fsum(matched), alpha)


def score_many(texts: Iterable[str], lexicon: SentimentLexicon, alpha: float = DEFAULT_ALPHA) -> List[float]:
    return [score_text(text, lexicon, alpha) for text in texts]
