"""A from-scratch MLP classifier trained with Adam and replay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Batch
from .samplers import Policy
from .streams import Dataset, StreamPlan

HIDDEN = (250, 250)
FLUSH_BELOW = 1e-30


class NumericError(ArithmeticError):
    pass


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # (fan_in, fan_out) per layer
    biases: list[np.ndarray]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def arrays(self) -> list[np.ndarray]:
        """Weights and biases interleaved: w0, b0, w1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scratch: list[np.ndarray] = field(default_factory=list, repr=False)

    @classmethod
    def zeros_like(cls, params: MlpParams, **hyper) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **hyper)


@dataclass
class TrainConfig:
    batch_size: int = 10
    replay_steps: int = 5
    replay_batch_size: Optional[int] = None  # defaults to batch_size
    seed: int = 0
    dtype: str = "float32"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.replay_steps < 1:
            raise ValueError("batch_size and replay_steps must be >= 1")


def mlp_init(input_dim: int, class_count: int, rng: np.random.Generator,
             hidden=HIDDEN, dtype="float32") -> MlpParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero."""
    if input_dim < 1 or class_count < 1:
        raise ValueError("dimensions must be >= 1")
    sizes = [input_dim, *hidden, class_count]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(weights, biases)


def forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return logits and the per-layer inputs (post-ReLU activations)."""
    x = np.asarray(x, dtype=params.dtype)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ValueError(f"expected input of shape (n, {params.weights[0].shape[0]}), got {x.shape}")
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0)
            acts.append(h)
    return h, acts


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(params: MlpParams, x: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradients, ordered like ``params.arrays()``."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = params.weights[-1].shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    logits, acts = forward(params, x)
    n = len(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float((log_norm - z[rows, labels]).mean())

    delta = np.exp(z - log_norm[:, None])
    delta[rows, labels] -= 1
    delta /= n
    grads: list[np.ndarray] = []
    for i in range(len(params.weights) - 1, -1, -1):
        grads.append(delta.sum(axis=0))
        grads.append(acts[i].T @ delta)
        if i:
            delta = (delta @ params.weights[i].T) * (acts[i] > 0)
    grads.reverse()
    return loss, grads


def adam_step(params: MlpParams, grads: list[np.ndarray], state: AdamState) -> None:
    """In-place bias-corrected Adam update of ``params`` and ``state``."""
    arrays = params.arrays()
    if len(grads) != len(arrays):
        raise ValueError("gradient list does not match parameters")
    for g, p in zip(grads, arrays):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        # any NaN/inf entry makes the sum non-finite
        if not np.isfinite(g.sum(dtype=np.float64)):
            raise NumericError("non-finite gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    # lr * m_hat / (sqrt(v_hat) + eps), with both bias corrections folded
    # into the step size and eps.
    step = state.lr * np.sqrt(1 - b2 ** state.t) / (1 - b1 ** state.t)
    eps_hat = state.eps * np.sqrt(1 - b2 ** state.t)
    if len(state.scratch) != len(arrays):
        state.scratch = [np.empty_like(p) for p in arrays]
    for p, g, m, v, tmp in zip(arrays, grads, state.m, state.v, state.scratch):
        m *= b1
        np.multiply(g, 1 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1 - b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp += eps_hat
        np.divide(m, tmp, out=tmp)
        tmp *= step
        p -= tmp
    if state.t % 64 == 0:
        # Moments of rarely-active weights decay into subnormal floats, which
        # are ~50x slower. Below FLUSH_BELOW they move a weight by < lr * 1e-22.
        for arr in (*state.m, *state.v):
            arr[np.abs(arr) < FLUSH_BELOW] = 0


@dataclass
class TrainResult:
    params: MlpParams
    policy: Policy
    adam: AdamState
    steps: int = 0
    losses: list[float] = field(default_factory=list)


def train_with_replay(params: MlpParams, stream: StreamPlan, policy: Policy,
                      cfg: TrainConfig, rng: Optional[np.random.Generator] = None) -> TrainResult:
    """One pass over the stream; every batch is replayed ``cfg.replay_steps`` times.

    Each repetition pairs the incoming batch with a fresh sample from memory.
    The memory is updated with the batch only after its repetitions.
    """
    if len(stream) == 0:
        raise ValueError("empty stream")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    adam = AdamState.zeros_like(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    k = cfg.replay_batch_size or cfg.batch_size
    dtype = params.dtype
    losses = []
    for batch in stream.batches:
        x_new, y_new = batch.arrays(dtype)
        for _ in range(cfg.replay_steps):
            replay = policy.buffer.sample_replay_batch(k, rng)
            if len(replay):
                x_mem, y_mem = replay.arrays(dtype)
                x, y = np.concatenate([x_new, x_mem]), np.concatenate([y_new, y_mem])
            else:
                x, y = x_new, y_new
            loss, grads = loss_and_grads(params, x, y)
            adam_step(params, grads, adam)
            losses.append(loss)
        for inst in batch:
            policy.observe(inst)
    return TrainResult(params, policy, adam, adam.t, losses)


def predict(params: MlpParams, x: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class id."""
    out = []
    for start in range(0, len(x), chunk):
        logits, _ = forward(params, x[start:start + chunk])
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(params: MlpParams, test_set: Dataset,
             merge_map: Optional[dict[int, int]] = None) -> float:
    """Test accuracy; ``merge_map`` must match the one the test labels carry."""
    if merge_map is not None or test_set.merge_map is not None:
        if merge_map != test_set.merge_map:
            raise ValueError("test set merge_map differs from the training merge_map")
    if len(test_set) == 0:
        raise ValueError("empty test set")
    pred = predict(params, test_set.features)
    return float((pred == test_set.labels).mean())
