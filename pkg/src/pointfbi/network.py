"""PointNet-style classifier: shared per-point MLP, pooling bottleneck, MLP head."""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from . import tensor as T
from .data import Dataset, PointCloud
from .errors import ContractError, FormatError
from .tensor import Graph, Tensor

logger = logging.getLogger(__name__)

POOLING_MODES = ("max", "max_mean_concat")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 3
    featurizer: tuple[int, ...] = (64, 64, 64)
    head: tuple[int, ...] = (32, 6)
    pooling: str = "max"

    def __post_init__(self):
        object.__setattr__(self, "featurizer", tuple(int(w) for w in self.featurizer))
        object.__setattr__(self, "head", tuple(int(w) for w in self.head))
        if self.pooling not in POOLING_MODES:
            raise ContractError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if not self.featurizer or not self.head:
            raise ContractError("featurizer and head need at least one layer each")
        if min(self.featurizer + self.head) < 1 or self.input_dim < 1:
            raise ContractError("layer widths must be positive")

    @property
    def n_features(self) -> int:
        return self.featurizer[-1]

    @property
    def n_classes(self) -> int:
        return self.head[-1]

    @property
    def head_input(self) -> int:
        return 2 * self.n_features if self.pooling == "max_mean_concat" else self.n_features

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.featurizer]
        shapes = list(zip(dims[:-1], dims[1:]))
        dims = [self.head_input, *self.head]
        return shapes + list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class TrainInfo:
    epochs: int = 0
    seed: int = 0
    lr: float = 0.0
    augment_rotations: bool = False
    test_accuracy: float = float("nan")
    losses: tuple[float, ...] = field(default=(), compare=False)


@dataclass(frozen=True, eq=False)
class ModelBundle:
    config: ModelConfig
    weights: tuple[tuple[np.ndarray, np.ndarray], ...]
    info: TrainInfo = TrainInfo()

    def __post_init__(self):
        shapes = self.config.layer_shapes()
        if len(self.weights) != len(shapes):
            raise ContractError(f"config expects {len(shapes)} layers, got {len(self.weights)}")
        frozen = []
        for (w, b), (fan_in, fan_out) in zip(self.weights, shapes):
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ContractError(
                    f"layer weight {w.shape}/bias {b.shape} does not match ({fan_in}, {fan_out})"
                )
            w.flags.writeable = False
            b.flags.writeable = False
            frozen.append((w, b))
        object.__setattr__(self, "weights", tuple(frozen))

    @property
    def n_featurizer_layers(self) -> int:
        return len(self.config.featurizer)


def init_weights(config: ModelConfig, seed: int = 0) -> ModelBundle:
    """Glorot-uniform matrices, zero biases."""
    rng = np.random.default_rng(seed)
    weights = []
    for fan_in, fan_out in config.layer_shapes():
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return ModelBundle(config, tuple(weights), TrainInfo(seed=seed))


@dataclass(frozen=True)
class ForwardResult:
    features: Tensor  # [..., N, F] pre-bottleneck
    global_features: Tensor  # [..., F] or [..., 2F]
    logits: Tensor  # [..., C]
    argmax: np.ndarray  # winning point per feature, [..., F]


def forward_tensors(model: ModelBundle, x: Tensor, params: Sequence[tuple[Tensor, Tensor]] | None = None) -> ForwardResult:
    """Run the network on ``x`` of shape ``[N, D]`` or ``[B, N, D]``.

    ``params`` overrides the bundle weights with tensors (used in training
    so gradients reach them).
    """
    cfg = model.config
    if x.shape[-1] != cfg.input_dim:
        raise ContractError(f"input has {x.shape[-1]} coordinates, model expects {cfg.input_dim}")
    if params is None:
        params = [(Tensor._wrap(w, False), Tensor._wrap(b, False)) for w, b in model.weights]
    n_feat = len(cfg.featurizer)

    h = x
    for w, b in params[:n_feat]:
        h = T.relu(T.add(T.matmul(h, w), b))
    features = h

    pooled, argmax = T.max_pool_points(features)
    if cfg.pooling == "max_mean_concat":
        pooled = T.concat([pooled, T.mean_pool_points(features)])

    h = pooled
    if h.ndim == 1:
        h = _as_row(h)
    head = params[n_feat:]
    for i, (w, b) in enumerate(head):
        h = T.add(T.matmul(h, w), b)
        if i < len(head) - 1:
            h = T.relu(h)
    logits = _from_row(h) if pooled.ndim == 1 else h
    return ForwardResult(features, pooled, logits, argmax)


def _as_row(t: Tensor) -> Tensor:
    # 1-D vector -> [1, F] so matmul sees a matrix; recorded so gradients flow
    return T._result("row", (t,), t.data[None, :], lambda g: (g[0],))


def _from_row(t: Tensor) -> Tensor:
    return T._result("unrow", (t,), t.data[0], lambda g: (g[None, :],))


def _points_of(pc) -> np.ndarray:
    return pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)


def forward(model: ModelBundle, pc: PointCloud | np.ndarray) -> ForwardResult:
    return forward_tensors(model, Tensor(_points_of(pc)))


def features(model: ModelBundle, pc: PointCloud | np.ndarray) -> np.ndarray:
    """Pre-bottleneck feature matrix ``[N, F]`` (no pooling or head evaluated)."""
    h = _points_of(pc)
    for w, b in model.weights[: model.n_featurizer_layers]:
        h = np.maximum(h @ w + b, 0.0)
    return h


def logits(model: ModelBundle, points: np.ndarray) -> np.ndarray:
    return forward_tensors(model, Tensor(points)).logits.numpy()


def predict(model: ModelBundle, points: np.ndarray | PointCloud) -> np.ndarray:
    """Predicted class for one cloud ``[N, 3]`` or a stack ``[B, N, 3]``."""
    return np.argmax(logits(model, _points_of(points)), axis=-1)


def accuracy(model: ModelBundle, dataset: Dataset, batch_size: int = 64) -> float:
    if len(dataset) == 0:
        raise ContractError("empty dataset")
    pts, labels = dataset.stacked(), dataset.labels
    preds = np.concatenate([predict(model, pts[i : i + batch_size]) for i in range(0, len(pts), batch_size)])
    return float(np.mean(preds == labels))


def random_rotations(rng: np.random.Generator, count: int) -> np.ndarray:
    return Rotation.random(count, random_state=rng).as_matrix()


def train(
    config: ModelConfig,
    dataset: Dataset,
    epochs: int = 50,
    lr: float = 1e-3,
    seed: int = 0,
    *,
    test: Dataset | None = None,
    batch_size: int = 32,
    augment_rotations: bool = False,
) -> ModelBundle:
    """Minibatch Adam on softmax cross-entropy.

    Everything random (initialization, shuffling, augmentation) derives from
    ``seed``, so equal arguments produce bit-identical weights.
    """
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    if epochs < 1:
        raise ContractError(f"epochs must be >= 1, got {epochs}")
    pts, labels = dataset.stacked(), dataset.labels
    if np.any(labels < 0) or np.any(labels >= config.n_classes):
        raise ContractError("dataset labels fall outside the model's classes")

    model = init_weights(config, seed)
    rng = np.random.default_rng([seed, 1])
    params = [np.array(w) for layer in model.weights for w in layer]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    losses = []

    for epoch in range(epochs):
        order = rng.permutation(len(pts))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            batch = pts[idx]
            if augment_rotations:
                batch = np.einsum("bij,bnj->bni", random_rotations(rng, len(idx)), batch)
            with Graph() as g:
                tparams = [Tensor(p, requires_grad=True) for p in params]
                pairs = list(zip(tparams[0::2], tparams[1::2]))
                out = forward_tensors(model, Tensor(batch), pairs)
                loss = T.softmax_cross_entropy(out.logits, labels[idx])
            grads = g.backward(loss)
            epoch_loss += loss.item() * len(idx)
            step += 1
            for i, tp in enumerate(tparams):
                grad = grads[tp.id].data
                m[i] = beta1 * m[i] + (1 - beta1) * grad
                v[i] = beta2 * v[i] + (1 - beta2) * grad * grad
                m_hat = m[i] / (1 - beta1**step)
                v_hat = v[i] / (1 - beta2**step)
                params[i] = params[i] - lr * m_hat / (np.sqrt(v_hat) + eps)
        losses.append(epoch_loss / len(pts))
        logger.info("epoch %d loss %.4f", epoch + 1, losses[-1])

    weights = tuple(zip(params[0::2], params[1::2]))
    trained = ModelBundle(config, weights)
    acc = accuracy(trained, test) if test is not None and len(test) else float("nan")
    info = TrainInfo(epochs, seed, lr, augment_rotations, acc, tuple(losses))
    return replace(trained, info=info)


# -- PCXW weight files -----------------------------------------------------------

MAGIC = b"PCXW"
VERSION = 1


def dumps_model(model: ModelBundle) -> bytes:
    """Serialize to the PCXW layout (all integers and floats little-endian).

    magic "PCXW", u32 version, u32 input_dim, u32 n + n*u32 featurizer widths,
    u32 n + n*u32 head widths, u8 pooling (0 max, 1 max_mean_concat),
    u8 augment flag, u32 epochs, i64 seed, f64 lr, f64 test accuracy, then
    for each layer in order the row-major f64 weight matrix and f64 bias.
    """
    cfg, info = model.config, model.info
    parts = [MAGIC, struct.pack("<II", VERSION, cfg.input_dim)]
    for widths in (cfg.featurizer, cfg.head):
        parts.append(struct.pack(f"<I{len(widths)}I", len(widths), *widths))
    parts.append(
        struct.pack(
            "<BBIqdd",
            POOLING_MODES.index(cfg.pooling),
            int(info.augment_rotations),
            info.epochs,
            info.seed,
            info.lr,
            info.test_accuracy,
        )
    )
    for w, b in model.weights:
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError(f"truncated file reading {what}", self.pos)
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def array(self, shape: tuple[int, ...], what: str) -> np.ndarray:
        count = int(np.prod(shape))
        if self.pos + 8 * count > len(self.buf):
            raise FormatError(f"truncated file reading {what}", self.pos)
        arr = np.frombuffer(self.buf, dtype="<f8", count=count, offset=self.pos).reshape(shape)
        self.pos += 8 * count
        return arr.astype(np.float64)


def loads_model(buf: bytes) -> ModelBundle:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic", 0)
    r.pos = 4
    (version,) = r.take("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    (input_dim,) = r.take("<I", "input_dim")
    widths = []
    for what in ("featurizer", "head"):
        at = r.pos
        (count,) = r.take("<I", f"{what} layer count")
        if count == 0 or count > 1024:
            raise FormatError(f"implausible {what} layer count {count}", at)
        widths.append(r.take(f"<{count}I", f"{what} widths"))
    at = r.pos
    pooling, augment, epochs, seed, lr, acc = r.take("<BBIqdd", "training metadata")
    if pooling >= len(POOLING_MODES):
        raise FormatError(f"unknown pooling code {pooling}", at)
    try:
        cfg = ModelConfig(input_dim, widths[0], widths[1], POOLING_MODES[pooling])
    except ContractError as exc:
        raise FormatError(f"invalid config ({exc})", 8) from None
    weights = []
    for i, (fan_in, fan_out) in enumerate(cfg.layer_shapes()):
        w = r.array((fan_in, fan_out), f"layer {i} weights")
        b = r.array((fan_out,), f"layer {i} bias")
        weights.append((w, b))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    info = TrainInfo(epochs, seed, lr, bool(augment), acc)
    return ModelBundle(cfg, tuple(weights), info)


def save_model(model: ModelBundle, path: str | os.PathLike) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path: str | os.PathLike) -> ModelBundle:
    return loads_model(Path(path).read_bytes())
