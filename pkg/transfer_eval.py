"""
Training orchestration and evaluation for emomine
Pretraining on weak labels, softmax head replacement, fine-tuning with early
stopping, metrics, and the binary / multi-class comparison tasks
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import psutil
from pydantic import BaseModel, ConfigDict, Field
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support
from sklearn.model_selection import train_test_split

from corpus import WeakLabel, read_manifest
from emomine_errors import DataError
from features import Spectrogram, feature_path_for, read_feature_cache
from neural import (
    AdamState,
    DimensionMismatch,
    GruParams,
    NonFiniteLoss,
    TrainConfig,
    TrainRun,
    dataset_loss,
    init_head,
    init_params,
    load_params,
    predict_proba,
    save_params,
    train_epoch,
)

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8
SIDECAR_SUFFIX = ".json"


class EmptyCorpus(DataError):
    """No training examples"""


class SingleClassCorpus(DataError):
    """Training examples cover fewer than two classes"""


class EmptyEvalSet(DataError):
    """Nothing to evaluate"""


class LabelSpaceError(DataError):
    """Example label is not part of the model's label space"""


@dataclass(frozen=True)
class LabelSpace:
    """Ordered class names; position is the class index"""
    names: Tuple[str, ...]

    def __post_init__(self):
        if not self.names or any(not n for n in self.names):
            raise ValueError("label names must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate label names: {self.names}")

    @property
    def size(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise LabelSpaceError(f"label {name!r} not in {list(self.names)}")


PRETRAIN_LABELS = LabelSpace(tuple(label.value for label in WeakLabel))
FINETUNE_LABELS = LabelSpace(("angry", "happy", "sad", "neutral"))


class SplitSpec(BaseModel):
    """Held-out fraction for early stopping"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    validation_fraction: float = Field(default=0.10, gt=0.0, lt=0.5)
    rng_seed: int = Field(default=0, ge=0, lt=2**32)


@dataclass(frozen=True, eq=False)
class LabeledExample:
    """Spectrogram with a class name"""
    spectrogram: Spectrogram
    label: str
    key: str = ""


@dataclass(eq=False)
class Standardizer:
    """Per-band zero mean / unit variance, fitted on a training split"""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, examples: Sequence[LabeledExample]) -> "Standardizer":
        frames = np.concatenate([e.spectrogram.frames for e in examples], axis=0)
        std = frames.std(axis=0)
        std[std < STD_FLOOR] = 1.0
        return cls(mean=frames.mean(axis=0), std=std)

    def apply(self, spec: Spectrogram) -> Spectrogram:
        if spec.n_bands != self.mean.shape[0]:
            raise DimensionMismatch(f"spectrogram has {spec.n_bands} bands, model was trained on {self.mean.shape[0]}")
        return Spectrogram(values=(spec.frames - self.mean) / self.std, valid_frames=spec.valid_frames)

    def to_dict(self) -> Dict[str, List[float]]:
        return {"feature_mean": self.mean.tolist(), "feature_std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Standardizer":
        return cls(mean=np.asarray(data["feature_mean"], dtype=np.float64),
                   std=np.asarray(data["feature_std"], dtype=np.float64))


@dataclass(eq=False)
class EmotionModel:
    """GRU parameters with the label space and feature statistics they were trained with"""
    params: GruParams
    labels: LabelSpace
    standardizer: Standardizer

    def __post_init__(self):
        if self.params.n_classes != self.labels.size:
            raise ValueError(f"head has {self.params.n_classes} classes, label space has {self.labels.size}")

    def predict_proba(self, examples: Sequence[LabeledExample]) -> np.ndarray:
        return predict_proba(self.params, [self.standardizer.apply(e.spectrogram) for e in examples])

    def predict(self, examples: Sequence[LabeledExample]) -> np.ndarray:
        return self.predict_proba(examples).argmax(axis=1)

    def save(self, path):
        """EMOG tensor file plus a JSON sidecar with labels and standardization"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_params(path, self.params)
        sidecar = {"labels": list(self.labels.names), **self.standardizer.to_dict()}
        with open(sidecar_path(path), "w", encoding="utf-8") as f:
            json.dump(sidecar, f, indent=2)

    @classmethod
    def load(cls, path) -> "EmotionModel":
        path = Path(path)
        params = load_params(path)
        try:
            with open(sidecar_path(path), "r", encoding="utf-8") as f:
                sidecar = json.load(f)
            return cls(params=params, labels=LabelSpace(tuple(sidecar["labels"])),
                       standardizer=Standardizer.from_dict(sidecar))
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"{sidecar_path(path)}: unusable model sidecar: {e}") from e


def sidecar_path(model_path) -> Path:
    model_path = Path(model_path)
    return model_path.with_name(model_path.name + SIDECAR_SUFFIX)


@dataclass
class MetricsReport:
    """Accuracy, macro F1, per-class rates and the confusion matrix (rows = true class)"""
    labels: Tuple[str, ...]
    accuracy: float
    macro_f1: float
    precision: List[float]
    recall: List[float]
    f1: List[float]
    support: List[int]
    confusion: List[List[int]]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "labels": list(self.labels),
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class": {
                name: {"precision": p, "recall": r, "f1": f, "support": s}
                for name, p, r, f, s in zip(self.labels, self.precision, self.recall, self.f1, self.support)
            },
            "confusion": self.confusion,
        }


def compute_metrics(y_true: Sequence[int], y_pred: Sequence[int], labels: LabelSpace) -> MetricsReport:
    """Metrics from class indices

    Macro F1 averages the classes seen in the truth or the predictions; a
    class that is never predicted scores F1 = 0.
    """
    if len(y_true) == 0:
        raise EmptyEvalSet("no examples to evaluate")
    indices = list(range(labels.size))
    cm = confusion_matrix(y_true, y_pred, labels=indices)
    precision, recall, f1, support = precision_recall_fscore_support(
        y_true, y_pred, labels=indices, zero_division=0
    )
    present = sorted(set(int(i) for i in y_true) | set(int(i) for i in y_pred))
    return MetricsReport(
        labels=labels.names,
        accuracy=float(np.trace(cm)) / float(cm.sum()),
        macro_f1=float(np.mean(f1[present])),
        precision=[float(v) for v in precision],
        recall=[float(v) for v in recall],
        f1=[float(v) for v in f1],
        support=[int(v) for v in support],
        confusion=cm.astype(int).tolist(),
    )


def evaluate(model: EmotionModel, examples: Sequence[LabeledExample]) -> MetricsReport:
    if not examples:
        raise EmptyEvalSet("no examples to evaluate")
    y_true = [model.labels.index(e.label) for e in examples]
    y_pred = model.predict(examples).tolist()
    report = compute_metrics(y_true, y_pred, model.labels)
    logger.info("[EVAL] %d examples: accuracy %.4f, macro F1 %.4f", len(examples), report.accuracy, report.macro_f1)
    return report


def split_indices(labels: Sequence[str], split: SplitSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded stratified train/validation partition, both sides sorted

    Falls back to an unstratified split when some class is too small to stratify.
    """
    indices = np.arange(len(labels))
    try:
        train_idx, val_idx = train_test_split(
            indices, test_size=split.validation_fraction, random_state=split.rng_seed, stratify=list(labels)
        )
    except ValueError:
        logger.warning("[TRAIN] Classes too small to stratify, using an unstratified split")
        try:
            train_idx, val_idx = train_test_split(
                indices, test_size=split.validation_fraction, random_state=split.rng_seed
            )
        except ValueError as e:
            raise EmptyCorpus(f"{len(labels)} examples cannot be split: {e}") from e
    return np.sort(train_idx), np.sort(val_idx)


def _check_examples(examples: Sequence[LabeledExample], labels: LabelSpace):
    if not examples:
        raise EmptyCorpus("no training examples")
    for e in examples:
        labels.index(e.label)
    if len({e.label for e in examples}) < 2:
        raise SingleClassCorpus(f"only class {examples[0].label!r} present")


def _to_dataset(model: EmotionModel, examples: Sequence[LabeledExample]) -> List[Tuple[Spectrogram, int]]:
    return [(model.standardizer.apply(e.spectrogram), model.labels.index(e.label)) for e in examples]


def fit(model: EmotionModel, train: Sequence[LabeledExample], val: Sequence[LabeledExample],
        cfg: TrainConfig) -> Tuple[EmotionModel, TrainRun]:
    """Train every parameter; stop after `patience` epochs without a lower
    validation loss and return the best epoch's parameters"""
    train_set = _to_dataset(model, train)
    val_set = _to_dataset(model, val)
    params = model.params.copy()
    run = TrainRun(optimizer=AdamState.for_params(params), best_params=params.copy())

    for epoch in range(cfg.max_epochs):
        started = time.perf_counter()
        params, run.optimizer, train_loss = train_epoch(params, run.optimizer, train_set, cfg)
        val_loss = dataset_loss(params, val_set)
        if not math.isfinite(val_loss):
            raise NonFiniteLoss(f"non-finite validation loss in epoch {epoch}")
        predictions = predict_proba(params, [spec for spec, _ in val_set]).argmax(axis=1)
        val_accuracy = float(np.mean(predictions == np.array([label for _, label in val_set])))
        run.history.append({
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_accuracy": val_accuracy,
            "seconds": time.perf_counter() - started,
        })
        logger.debug("[TRAIN] epoch %d: train %.4f, val %.4f, val acc %.3f", epoch, train_loss, val_loss, val_accuracy)

        if val_loss < run.best_val_loss:
            run.best_val_loss = val_loss
            run.best_epoch = epoch
            run.best_params = params.copy()
            run.epochs_since_improvement = 0
        else:
            run.epochs_since_improvement += 1
            if run.epochs_since_improvement >= cfg.patience:
                run.stopped_early = True
                break

    logger.info("[TRAIN] Best epoch %d of %d (val loss %.4f)", run.best_epoch, len(run.history), run.best_val_loss)
    return EmotionModel(params=run.best_params, labels=model.labels, standardizer=model.standardizer), run


def _fit_new_model(train: Sequence[LabeledExample], val: Sequence[LabeledExample], labels: LabelSpace,
                   cfg: TrainConfig) -> Tuple[EmotionModel, TrainRun]:
    standardizer = Standardizer.fit(train)
    params = init_params(cfg.rng_seed, train[0].spectrogram.n_bands, cfg.hidden_size, labels.size)
    return fit(EmotionModel(params=params, labels=labels, standardizer=standardizer), train, val, cfg)


def split_examples(examples: Sequence[LabeledExample], split: SplitSpec):
    train_idx, val_idx = split_indices([e.label for e in examples], split)
    return [examples[i] for i in train_idx], [examples[i] for i in val_idx]


def train_from_scratch(examples: Sequence[LabeledExample], labels: LabelSpace, cfg: TrainConfig,
                       split: SplitSpec) -> Tuple[EmotionModel, TrainRun]:
    """Fresh model on `labels`; standardization from the training split only"""
    _check_examples(examples, labels)
    train, val = split_examples(examples, split)
    return _fit_new_model(train, val, labels, cfg)


def pretrain(examples: Sequence[LabeledExample], cfg: TrainConfig, split: SplitSpec) -> Tuple[EmotionModel, TrainRun]:
    """Train the 3-class weak-label model"""
    logger.info("[TRAIN] Pretraining on %d weakly labeled utterances", len(examples))
    return train_from_scratch(examples, PRETRAIN_LABELS, cfg, split)


def replace_head(model: EmotionModel, labels: LabelSpace, rng_seed: int) -> EmotionModel:
    """Copy the GRU tensors, start a fresh Glorot head for `labels`"""
    tensors = {name: t.copy() for name, t in model.params.items()}
    rng = np.random.default_rng(rng_seed)
    tensors["head_W"], tensors["head_b"] = init_head(rng, 2 * model.params.hidden_size, labels.size)
    return EmotionModel(params=GruParams(tensors), labels=labels, standardizer=model.standardizer)


def finetune(model: EmotionModel, examples: Sequence[LabeledExample], cfg: TrainConfig,
             split: SplitSpec) -> Tuple[EmotionModel, TrainRun]:
    """Train all layers on target data, keeping the model's feature statistics"""
    _check_examples(examples, model.labels)
    train, val = split_examples(examples, split)
    logger.info("[TRAIN] Fine-tuning on %d target utterances", len(train))
    return fit(model, train, val, cfg)


def epochs_to_accuracy(run: TrainRun, target: float) -> Optional[int]:
    """Number of epochs until validation accuracy first reaches target, or None"""
    for entry in run.history:
        if entry["val_accuracy"] >= target:
            return entry["epoch"] + 1
    return None


@dataclass
class BinaryCorpora:
    """Mined weak-label examples plus target-domain train and test sets"""
    mined: List[LabeledExample]
    target_train: List[LabeledExample]
    target_test: List[LabeledExample]


@dataclass
class TaskReport:
    """Two arms of a comparison: baseline and the augmented / transferred model"""
    task: str
    arms: Dict[str, MetricsReport]
    runs: Dict[str, TrainRun] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"task": self.task, "metrics": {arm: m.to_dict() for arm, m in self.arms.items()}}


def relabel_mined(mined: Sequence[LabeledExample], positive_class: str, negative_class: str) -> List[LabeledExample]:
    """Mined positives become the positive emotion, negatives the negative one; neutrals are dropped"""
    mapping = {WeakLabel.POSITIVE.value: positive_class, WeakLabel.NEGATIVE.value: negative_class}
    return [LabeledExample(e.spectrogram, mapping[e.label], e.key) for e in mined if e.label in mapping]


def run_binary_task(positive_class: str, negative_class: str, corpora: BinaryCorpora, cfg: TrainConfig,
                    split: SplitSpec) -> TaskReport:
    """Two-class task trained without (baseline) and with (augmented) mined samples

    Both arms share the target validation split so early stopping judges the
    target domain; mined samples only join the training side.
    """
    labels = LabelSpace((positive_class, negative_class))
    target_train = [e for e in corpora.target_train if e.label in labels]
    target_test = [e for e in corpora.target_test if e.label in labels]
    _check_examples(target_train, labels)
    train, val = split_examples(target_train, split)

    baseline_model, baseline_run = _fit_new_model(train, val, labels, cfg)
    extra = relabel_mined(corpora.mined, positive_class, negative_class)
    if not extra:
        logger.warning("[TRAIN] No mined positive/negative samples, augmented arm equals baseline")
    augmented_model, augmented_run = _fit_new_model(train + extra, val, labels, cfg)

    return TaskReport(
        task=f"{positive_class}_vs_{negative_class}",
        arms={"baseline": evaluate(baseline_model, target_test), "augmented": evaluate(augmented_model, target_test)},
        runs={"baseline": baseline_run, "augmented": augmented_run},
    )


def run_transfer_task(mined: Sequence[LabeledExample], target_train: Sequence[LabeledExample],
                      target_test: Sequence[LabeledExample], cfg: TrainConfig, split: SplitSpec,
                      labels: LabelSpace = FINETUNE_LABELS,
                      pretrain_cfg: Optional[TrainConfig] = None) -> TaskReport:
    """Multi-class comparison: from scratch vs pretrain, replace head, fine-tune"""
    baseline_model, baseline_run = train_from_scratch(target_train, labels, cfg, split)
    pretrained, pretrain_run = pretrain(mined, pretrain_cfg or cfg, split)
    tuned, finetune_run = finetune(replace_head(pretrained, labels, cfg.rng_seed), target_train, cfg, split)
    return TaskReport(
        task="multiclass",
        arms={"baseline": evaluate(baseline_model, target_test), "transfer": evaluate(tuned, target_test)},
        runs={"baseline": baseline_run, "pretrain": pretrain_run, "finetune": finetune_run},
    )


def load_examples(manifest_path) -> List[LabeledExample]:
    """Examples for every manifest row from the .feat file next to its WAV"""
    manifest = read_manifest(manifest_path)
    examples, missing = [], []
    for row in manifest.rows:
        feat = feature_path_for(manifest.audio_file(row))
        if not feat.exists():
            missing.append(str(feat))
            continue
        examples.append(LabeledExample(spectrogram=read_feature_cache(feat), label=row.label, key=row.audio_path))
    if missing:
        raise DataError(f"{len(missing)} feature files missing (run featurize first), e.g. {missing[0]}")
    return examples


def resource_snapshot() -> Dict[str, float]:
    """Process memory and host info for run reports"""
    process = psutil.Process()
    return {
        "rss_mb": process.memory_info().rss / 1024 ** 2,
        "cpu_count": psutil.cpu_count() or 0,
        "system_memory_percent": psutil.virtual_memory().percent,
    }


def run_to_dict(run: TrainRun) -> Dict[str, Any]:
    return {
        "best_epoch": run.best_epoch,
        "best_val_loss": run.best_val_loss,
        "stopped_early": run.stopped_early,
        "epochs": run.history,
    }


def write_run_report(out_dir, task: str, seed: int, config: Dict[str, Any], runs: Dict[str, TrainRun],
                     metrics: Dict[str, MetricsReport], timings: Dict[str, float]) -> Path:
    """JSON report `<task>_<seed>.report.json`"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{task}_{seed}.report.json"
    report = {
        "task": task,
        "seed": seed,
        "config": config,
        "runs": {name: run_to_dict(run) for name, run in runs.items()},
        "metrics": {name: m.to_dict() for name, m in metrics.items()},
        "timings_seconds": timings,
        "resources": resource_snapshot(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
    logger.info("[EVAL] Report written to %s", path)
    return path
