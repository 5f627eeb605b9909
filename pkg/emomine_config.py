"""
Pipeline configuration for emomine
YAML file loaded through OmegaConf, command-line overrides merged in, then
validated strictly by pydantic
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from yaml import YAMLError

from corpus import LabelingPolicy, MoviePair
from emomine_errors import ConfigError
from features import StftConfig
from neural import TrainConfig
from sentiment import DEFAULT_ALPHA
from srt_parser import CueFilterPolicy
from transfer_eval import SplitSpec

logger = logging.getLogger(__name__)


class InputPair(BaseModel):
    """One movie: subtitle file, audio file and an identifier"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    srt: str = Field(..., min_length=1)
    wav: str = Field(..., min_length=1)
    source_id: str = Field(..., min_length=1)

    @field_validator("source_id")
    def source_id_is_filename_safe(cls, v):
        if any(ch in v for ch in '/\\,"\n') or v.strip() != v:
            raise ValueError(f"source_id {v!r} must be usable in a file name")
        return v


class PipelineConfig(BaseModel):
    """Every knob of every stage; unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    lexicon: str = Field(..., min_length=1, description="Path of the token<TAB>valence lexicon")
    out_dir: str = Field(default="emomine_out")
    inputs: List[InputPair] = Field(default_factory=list)
    workers: int = Field(default=1, ge=1)
    sentiment_alpha: float = Field(default=DEFAULT_ALPHA, gt=0)
    cue_filter: CueFilterPolicy = Field(default_factory=CueFilterPolicy)
    labeling: LabelingPolicy = Field(default_factory=LabelingPolicy)
    stft: StftConfig = Field(default_factory=StftConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    split: SplitSpec = Field(default_factory=SplitSpec)

    @field_validator("inputs")
    def unique_source_ids(cls, v):
        ids = [pair.source_id for pair in v]
        if len(set(ids)) != len(ids):
            raise ValueError("source_id values must be unique")
        return v

    def movie_pairs(self) -> List[MoviePair]:
        return [MoviePair(srt_path=p.srt, wav_path=p.wav, source_id=p.source_id) for p in self.inputs]

    def echo(self) -> Dict[str, Any]:
        """Plain dict for run reports"""
        return self.model_dump(mode="json")


def _resolve(base: Path, value: str) -> str:
    path = Path(value).expanduser()
    return str(path if path.is_absolute() else (base / path))


def load_config(path, overrides: Optional[Sequence[str]] = None) -> PipelineConfig:
    """Load YAML, merge `key=value` overrides, validate

    Relative paths in the file resolve against the config file's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        conf = OmegaConf.load(path)
        if overrides:
            conf = OmegaConf.merge(conf, OmegaConf.from_dotlist(list(overrides)))
        data = OmegaConf.to_container(conf, resolve=True)
    except (OmegaConfBaseException, YAMLError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")

    base = path.resolve().parent
    if isinstance(data.get("lexicon"), str):
        data["lexicon"] = _resolve(base, data["lexicon"])
    if isinstance(data.get("out_dir"), str):
        data["out_dir"] = _resolve(base, data["out_dir"])
    for pair in data.get("inputs") or []:
        if isinstance(pair, dict):
            for key in ("srt", "wav"):
                if isinstance(pair.get(key), str):
                    pair[key] = _resolve(base, pair[key])

    try:
        config = PipelineConfig(**data)
    except (ValidationError, TypeError) as e:
        raise ConfigError(f"{path}: invalid configuration:\n{e}") from e
    logger.debug("[CONFIG] Loaded %s with %d input pairs", path, len(config.inputs))
    return config
