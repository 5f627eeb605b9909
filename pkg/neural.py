"""
Bi-directional GRU classifier for emomine
Gated recurrences in both time directions, temporal mean pooling, softmax head,
hand-written backpropagation through time and an Adam trainer. Everything runs
in float64 on numpy.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from emomine_errors import DataError, NumericalError
from features import Spectrogram

logger = logging.getLogger(__name__)

DIRECTIONS = ("fw", "bw")
GATE_TENSORS = ("Uz", "Ur", "Uh", "Wz", "Wr", "Wh")
# Fixed order used by the model file, the optimizer and the gradient check
TENSOR_ORDER = tuple(f"{d}_{g}" for d in DIRECTIONS for g in GATE_TENSORS) + ("head_W", "head_b")
HEAD_TENSORS = ("head_W", "head_b")

LOG_EPS = 1e-12
MODEL_MAGIC = b"EMOG"
MODEL_VERSION = 1
MODEL_HEADER = struct.Struct("<4sIIII")
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_FLOOR = 1e-6


class DimensionMismatch(DataError):
    """Spectrogram width does not match the model input"""


class NonFiniteInput(DataError):
    """NaN or infinity in the input frames"""


class BadClassIndex(DataError):
    """Class index outside 0..C-1"""


class NonFiniteLoss(NumericalError):
    """Training produced a NaN or infinite loss"""


class CorruptModel(DataError):
    """Model file is unreadable"""


class TrainConfig(BaseModel):
    """Optimizer and early-stopping settings"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(default=1e-3, ge=0.0)
    adam_beta1: float = Field(default=0.9, gt=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, gt=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    batch_size: int = Field(default=16, ge=1)
    max_epochs: int = Field(default=100, ge=1)
    patience: int = Field(default=10, ge=1)
    grad_clip_norm: float = Field(default=5.0, gt=0.0)
    rng_seed: int = Field(default=0, ge=0)
    hidden_size: int = Field(default=32, ge=1)

    @model_validator(mode="after")
    def check_patience(self):
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        return self


class GruParams:
    """All trainable tensors, keyed by TENSOR_ORDER names

    Input matrices are B x H, recurrent matrices H x H, head_W is 2H x C and
    head_b has C entries. Gradients use the same container.
    """

    def __init__(self, tensors: Dict[str, np.ndarray]):
        missing = [name for name in TENSOR_ORDER if name not in tensors]
        if missing:
            raise ValueError(f"missing tensors: {missing}")
        self.tensors = {name: np.asarray(tensors[name], dtype=np.float64) for name in TENSOR_ORDER}
        self._check_shapes()

    def _check_shapes(self):
        b, h = self.tensors["fw_Uz"].shape
        c = self.tensors["head_b"].shape[0]
        for d in DIRECTIONS:
            for g in ("Uz", "Ur", "Uh"):
                if self.tensors[f"{d}_{g}"].shape != (b, h):
                    raise DimensionMismatch(f"{d}_{g} has shape {self.tensors[f'{d}_{g}'].shape}, expected {(b, h)}")
            for g in ("Wz", "Wr", "Wh"):
                if self.tensors[f"{d}_{g}"].shape != (h, h):
                    raise DimensionMismatch(f"{d}_{g} has shape {self.tensors[f'{d}_{g}'].shape}, expected {(h, h)}")
        if self.tensors["head_W"].shape != (2 * h, c):
            raise DimensionMismatch(f"head_W has shape {self.tensors['head_W'].shape}, expected {(2 * h, c)}")

    @property
    def input_dim(self) -> int:
        return self.tensors["fw_Uz"].shape[0]

    @property
    def hidden_size(self) -> int:
        return self.tensors["fw_Uz"].shape[1]

    @property
    def n_classes(self) -> int:
        return self.tensors["head_b"].shape[0]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name in TENSOR_ORDER:
            yield name, self.tensors[name]

    def direction(self, d: str) -> Tuple[np.ndarray, ...]:
        return tuple(self.tensors[f"{d}_{g}"] for g in GATE_TENSORS)

    def copy(self) -> "GruParams":
        return GruParams({name: t.copy() for name, t in self.tensors.items()})

    def zeros_like(self) -> "GruParams":
        return GruParams({name: np.zeros_like(t) for name, t in self.tensors.items()})

    def scaled(self, factor: float) -> "GruParams":
        return GruParams({name: t * factor for name, t in self.tensors.items()})

    def global_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(t * t)) for t in self.tensors.values()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors.values())


@dataclass
class GruState:
    """Cached forward pass over a padded batch (N examples, T steps)

    s_fw / s_bw are the per-step states, z / r / h the gate activations and
    prev the state each step consumed, all N x T x H per direction. Padded
    steps hold zeros.
    """
    inputs: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray
    s_fw: np.ndarray
    s_bw: np.ndarray
    gates: Dict[str, Dict[str, np.ndarray]]
    pooled: np.ndarray
    probabilities: np.ndarray


@dataclass
class AdamState:
    """First/second moment estimates plus step and epoch counters"""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    epochs_completed: int = 0

    @classmethod
    def for_params(cls, params: GruParams) -> "AdamState":
        return cls(
            m={name: np.zeros_like(t) for name, t in params.items()},
            v={name: np.zeros_like(t) for name, t in params.items()},
        )


@dataclass
class TrainRun:
    """Epoch history and early-stopping bookkeeping"""
    optimizer: AdamState
    history: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    best_params: Optional[GruParams] = None
    epochs_since_improvement: int = 0
    stopped_early: bool = False


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form stays finite for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def init_params(rng_seed: int, input_dim: int, hidden_size: int, n_classes: int) -> GruParams:
    """Glorot-uniform input and head matrices, orthogonal recurrent matrices, zero bias"""
    if min(input_dim, hidden_size, n_classes) < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(rng_seed)
    tensors: Dict[str, np.ndarray] = {}
    input_limit = math.sqrt(6.0 / (input_dim + hidden_size))
    for d in DIRECTIONS:
        for g in ("Uz", "Ur", "Uh"):
            tensors[f"{d}_{g}"] = rng.uniform(-input_limit, input_limit, size=(input_dim, hidden_size))
        for g in ("Wz", "Wr", "Wh"):
            tensors[f"{d}_{g}"] = orthogonal(rng, hidden_size)
    tensors["head_W"], tensors["head_b"] = init_head(rng, 2 * hidden_size, n_classes)
    return GruParams(tensors)


def init_head(rng: np.random.Generator, width: int, n_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    limit = math.sqrt(6.0 / (width + n_classes))
    return rng.uniform(-limit, limit, size=(width, n_classes)), np.zeros(n_classes)


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    """Q of a Gaussian matrix with column signs fixed by diag(R)"""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def _stack_batch(params: GruParams, specs: Sequence[Spectrogram]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad valid frames into N x T x B with a 0/1 step mask"""
    if not specs:
        raise ValueError("empty batch")
    lengths = np.array([s.valid_frames for s in specs])
    t_max = int(lengths.max())
    inputs = np.zeros((len(specs), t_max, params.input_dim))
    for i, spec in enumerate(specs):
        if spec.n_bands != params.input_dim:
            raise DimensionMismatch(f"spectrogram has {spec.n_bands} bands, model expects {params.input_dim}")
        frames = spec.frames
        if not np.all(np.isfinite(frames)):
            raise NonFiniteInput(f"example {i} contains non-finite values")
        inputs[i, : spec.valid_frames] = frames
    mask = (np.arange(t_max)[None, :] < lengths[:, None]).astype(np.float64)
    return inputs, mask, lengths


def _run_direction(params: GruParams, d: str, inputs: np.ndarray, mask: np.ndarray) -> Dict[str, np.ndarray]:
    """One recurrence; bw walks time backwards so s_{T+1} = 0 per example"""
    uz, ur, uh, wz, wr, wh = params.direction(d)
    n, t_max, _ = inputs.shape
    h_dim = uz.shape[1]
    xz, xr, xh = inputs @ uz, inputs @ ur, inputs @ uh

    cache = {key: np.zeros((n, t_max, h_dim)) for key in ("s", "prev", "z", "r", "h")}
    state = np.zeros((n, h_dim))
    steps = range(t_max - 1, -1, -1) if d == "bw" else range(t_max)
    for t in steps:
        prev = state
        z = sigmoid(xz[:, t] + prev @ wz)
        r = sigmoid(xr[:, t] + prev @ wr)
        h = np.tanh(xh[:, t] + (prev * r) @ wh)
        state = mask[:, t, None] * ((1.0 - z) * h + z * prev)
        cache["prev"][:, t] = prev
        cache["z"][:, t] = z
        cache["r"][:, t] = r
        cache["h"][:, t] = h
        cache["s"][:, t] = state
    return cache


def forward_batch(params: GruParams, specs: Sequence[Spectrogram]) -> GruState:
    """Forward pass over a batch of variable-length spectrograms"""
    inputs, mask, lengths = _stack_batch(params, specs)
    gates = {d: _run_direction(params, d, inputs, mask) for d in DIRECTIONS}
    states = np.concatenate([gates["fw"]["s"], gates["bw"]["s"]], axis=-1)
    # Padded steps are already zero, so the sum only sees valid frames
    pooled = states.sum(axis=1) / lengths[:, None]
    probabilities = softmax(pooled @ params["head_W"] + params["head_b"])
    return GruState(
        inputs=inputs,
        mask=mask,
        lengths=lengths,
        s_fw=gates["fw"]["s"],
        s_bw=gates["bw"]["s"],
        gates=gates,
        pooled=pooled,
        probabilities=probabilities,
    )


def forward(params: GruParams, spec: Spectrogram) -> Tuple[GruState, np.ndarray]:
    """Single-example forward; the state keeps a batch axis of size 1"""
    state = forward_batch(params, [spec])
    return state, state.probabilities[0]


def predict_proba(params: GruParams, specs: Sequence[Spectrogram], batch_size: int = 64) -> np.ndarray:
    """Class probabilities, N x C"""
    chunks = [
        forward_batch(params, specs[i: i + batch_size]).probabilities
        for i in range(0, len(specs), batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def _check_classes(true_classes: Sequence[int], n_classes: int) -> np.ndarray:
    labels = np.asarray(true_classes)
    if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= n_classes):
        raise BadClassIndex(f"class index outside 0..{n_classes - 1}: {true_classes}")
    return labels.astype(np.int64)


def loss(probabilities: np.ndarray, true_class: int) -> float:
    """Cross-entropy -ln(max(p[true], 1e-12))"""
    probabilities = np.asarray(probabilities)
    if not 0 <= true_class < probabilities.shape[-1]:
        raise BadClassIndex(f"class {true_class} outside 0..{probabilities.shape[-1] - 1}")
    return float(-math.log(max(float(probabilities[true_class]), LOG_EPS)))


def _backward_direction(params: GruParams, d: str, cache: Dict[str, np.ndarray], inputs: np.ndarray,
                        mask: np.ndarray, d_states: np.ndarray, grads: Dict[str, np.ndarray]):
    """Reverse-mode pass through one recurrence, accumulating into grads"""
    _, _, _, wz, wr, wh = params.direction(d)
    n, t_max, h_dim = d_states.shape
    prev_all, z_all, r_all, h_all = cache["prev"], cache["z"], cache["r"], cache["h"]
    da_z = np.zeros((n, t_max, h_dim))
    da_r = np.zeros((n, t_max, h_dim))
    da_h = np.zeros((n, t_max, h_dim))

    carry = np.zeros((n, h_dim))
    # Undo the processing order: fw ran 0..T-1, bw ran T-1..0
    steps = range(t_max) if d == "bw" else range(t_max - 1, -1, -1)
    for t in steps:
        g = (d_states[:, t] + carry) * mask[:, t, None]
        prev, z, r, h = prev_all[:, t], z_all[:, t], r_all[:, t], h_all[:, t]

        d_prev = g * z
        dz = g * (prev - h)
        dah = g * (1.0 - z) * (1.0 - h * h)
        d_gated = dah @ wh.T
        d_prev += d_gated * r
        dar = d_gated * prev * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        d_prev += dar @ wr.T + daz @ wz.T

        da_z[:, t], da_r[:, t], da_h[:, t] = daz, dar, dah
        carry = d_prev

    b_dim = inputs.shape[-1]
    x_flat = inputs.reshape(-1, b_dim)
    prev_flat = prev_all.reshape(-1, h_dim)
    gated_flat = (prev_all * r_all).reshape(-1, h_dim)
    for gate, da, source in (("z", da_z, prev_flat), ("r", da_r, prev_flat), ("h", da_h, gated_flat)):
        da_flat = da.reshape(-1, h_dim)
        grads[f"{d}_U{gate}"] += x_flat.T @ da_flat
        grads[f"{d}_W{gate}"] += source.T @ da_flat


def backward_batch(params: GruParams, state: GruState, true_classes: Sequence[int]) -> Tuple[np.ndarray, GruParams]:
    """Per-example losses and the gradient of their sum"""
    labels = _check_classes(true_classes, params.n_classes)
    n = labels.shape[0]
    if n != state.probabilities.shape[0]:
        raise ValueError("label count does not match the batch")

    p_true = state.probabilities[np.arange(n), labels]
    losses = -np.log(np.maximum(p_true, LOG_EPS))

    d_logits = state.probabilities.copy()
    d_logits[np.arange(n), labels] -= 1.0
    # Where the clamp is active the loss is flat in the logits
    d_logits[p_true < LOG_EPS] = 0.0

    grads = {name: np.zeros_like(t) for name, t in params.items()}
    grads["head_W"] = state.pooled.T @ d_logits
    grads["head_b"] = d_logits.sum(axis=0)

    d_pooled = d_logits @ params["head_W"].T
    d_states = (d_pooled / state.lengths[:, None])[:, None, :] * state.mask[:, :, None]
    h_dim = params.hidden_size
    _backward_direction(params, "fw", state.gates["fw"], state.inputs, state.mask, d_states[..., :h_dim], grads)
    _backward_direction(params, "bw", state.gates["bw"], state.inputs, state.mask, d_states[..., h_dim:], grads)
    return losses, GruParams(grads)


def backward(params: GruParams, state: GruState, spec: Spectrogram, true_class: int) -> GruParams:
    """Analytic gradient of loss(forward(params, spec), true_class)"""
    if state.inputs.shape[0] != 1 or state.lengths[0] != spec.valid_frames:
        raise ValueError("state was not produced by forward on this spectrogram")
    _, grads = backward_batch(params, state, [true_class])
    return grads


def batch_loss_and_gradients(params: GruParams, specs: Sequence[Spectrogram],
                             true_classes: Sequence[int]) -> Tuple[np.ndarray, GruParams]:
    """Forward + backward on a batch; gradient is summed over examples"""
    state = forward_batch(params, specs)
    return backward_batch(params, state, true_classes)


def clip_global_norm(grads: GruParams, max_norm: float) -> Tuple[GruParams, float]:
    norm = grads.global_norm()
    if norm > max_norm:
        return grads.scaled(max_norm / norm), norm
    return grads, norm


def adam_step(params: GruParams, grads: GruParams, state: AdamState, cfg: TrainConfig) -> GruParams:
    """One bias-corrected Adam update; returns new params and advances state in place"""
    state.step += 1
    correction1 = 1.0 - cfg.adam_beta1 ** state.step
    correction2 = 1.0 - cfg.adam_beta2 ** state.step
    updated = {}
    for name, value in params.items():
        g = grads[name]
        state.m[name] = cfg.adam_beta1 * state.m[name] + (1.0 - cfg.adam_beta1) * g
        state.v[name] = cfg.adam_beta2 * state.v[name] + (1.0 - cfg.adam_beta2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        updated[name] = value - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return GruParams(updated)


def train_epoch(params: GruParams, optimizer_state: AdamState, dataset: Sequence[Tuple[Spectrogram, int]],
                cfg: TrainConfig) -> Tuple[GruParams, AdamState, float]:
    """One shuffled pass of mini-batch Adam with global-norm clipping

    The shuffle is seeded with cfg.rng_seed + the epoch counter kept in the
    optimizer state, so a run is reproducible from its seed.
    """
    if not dataset:
        raise ValueError("empty training set")
    epoch = optimizer_state.epochs_completed
    order = np.random.default_rng(cfg.rng_seed + epoch).permutation(len(dataset))

    total = 0.0
    for start in range(0, len(order), cfg.batch_size):
        batch = [dataset[i] for i in order[start: start + cfg.batch_size]]
        specs = [spec for spec, _ in batch]
        labels = [label for _, label in batch]
        try:
            losses, grads = batch_loss_and_gradients(params, specs, labels)
        except DataError as e:
            raise type(e)(f"epoch {epoch}, batch at {start}: {e}") from e

        batch_loss = float(losses.sum())
        if not math.isfinite(batch_loss):
            raise NonFiniteLoss(f"non-finite loss in epoch {epoch}, batch at {start}")
        total += batch_loss

        grads, _ = clip_global_norm(grads.scaled(1.0 / len(batch)), cfg.grad_clip_norm)
        params = adam_step(params, grads, optimizer_state, cfg)

    optimizer_state.epochs_completed += 1
    return params, optimizer_state, total / len(dataset)


def dataset_loss(params: GruParams, dataset: Sequence[Tuple[Spectrogram, int]], batch_size: int = 64) -> float:
    """Mean cross-entropy without updating anything"""
    total = 0.0
    for start in range(0, len(dataset), batch_size):
        batch = dataset[start: start + batch_size]
        state = forward_batch(params, [spec for spec, _ in batch])
        labels = _check_classes([label for _, label in batch], params.n_classes)
        p_true = state.probabilities[np.arange(len(batch)), labels]
        total += float(np.sum(-np.log(np.maximum(p_true, LOG_EPS))))
    return total / len(dataset)


def gradient_check(seed: int, frames: int = 7, bands: int = 5, hidden: int = 4, classes: int = 3,
                   step: float = 1e-4, corrupt_tensor: Optional[str] = None) -> Dict[str, float]:
    """Max relative error per tensor between backward() and central differences

    Relative error is |a - n| / max(|a| + |n|, 1e-6). corrupt_tensor adds 1 to
    the first analytic entry of that tensor, for exercising the failure path.
    """
    rng = np.random.default_rng(seed)
    base = init_params(seed, bands, hidden, classes)
    params = GruParams({name: t + rng.normal(0.0, 0.3, size=t.shape) for name, t in base.items()})
    spec = Spectrogram(values=rng.normal(size=(frames, bands)), valid_frames=frames)
    label = int(rng.integers(classes))

    state, _ = forward(params, spec)
    analytic = backward(params, state, spec, label)
    if corrupt_tensor is not None:
        if corrupt_tensor not in TENSOR_ORDER:
            raise ValueError(f"unknown tensor {corrupt_tensor!r}")
        analytic[corrupt_tensor].flat[0] += 1.0

    def loss_at() -> float:
        return loss(forward(params, spec)[1], label)

    errors = {}
    for name, tensor in params.items():
        worst = 0.0
        for idx in np.ndindex(tensor.shape):
            original = tensor[idx]
            tensor[idx] = original + step
            plus = loss_at()
            tensor[idx] = original - step
            minus = loss_at()
            tensor[idx] = original
            numeric = (plus - minus) / (2.0 * step)
            a = analytic[name][idx]
            worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), GRADCHECK_FLOOR))
        errors[name] = worst
    return errors


def save_params(path, params: GruParams):
    """EMOG header (magic, version, B, H, C) then tensors in TENSOR_ORDER as float64"""
    with open(path, "wb") as f:
        f.write(MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, params.input_dim, params.hidden_size, params.n_classes))
        for _, tensor in params.items():
            f.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def _tensor_shapes(b: int, h: int, c: int) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    for d in DIRECTIONS:
        for g in ("Uz", "Ur", "Uh"):
            shapes[f"{d}_{g}"] = (b, h)
        for g in ("Wz", "Wr", "Wh"):
            shapes[f"{d}_{g}"] = (h, h)
    shapes["head_W"] = (2 * h, c)
    shapes["head_b"] = (c,)
    return shapes


def load_params(path) -> GruParams:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CorruptModel(f"{path}: {e}") from e
    if len(raw) < MODEL_HEADER.size:
        raise CorruptModel(f"{path}: truncated header")
    magic, version, b, h, c = MODEL_HEADER.unpack_from(raw)
    if magic != MODEL_MAGIC or version != MODEL_VERSION:
        raise CorruptModel(f"{path}: bad magic or version")

    shapes = _tensor_shapes(b, h, c)
    expected = MODEL_HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(raw) != expected:
        raise CorruptModel(f"{path}: size {len(raw)} does not match dims ({b}, {h}, {c})")

    tensors = {}
    offset = MODEL_HEADER.size
    for name in TENSOR_ORDER:
        count = int(np.prod(shapes[name]))
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shapes[name]).copy()
        offset += 8 * count
    return GruParams(tensors)
