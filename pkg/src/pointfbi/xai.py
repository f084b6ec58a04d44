"""Per-point influence estimators.

The feature-norm estimators (:func:`fbi`, :func:`fbi_p`) and
:func:`critical_points` read the pre-bottleneck feature matrix only. The
gradient estimators run the network backwards through the bottleneck.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import network
from . import tensor as T
from .data import PointCloud
from .errors import ContractError
from .network import ModelBundle
from .tensor import Graph, Tensor

METHODS = ("fbi", "fbi_p", "critical", "gradient", "intgrad", "random")
P_RANGE = (0.25, 8.0)


@dataclass(frozen=True, eq=False)
class InfluenceMap:
    scores: np.ndarray
    method: str

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        s.flags.writeable = False
        object.__setattr__(self, "scores", s)

    def __len__(self) -> int:
        return len(self.scores)

    def ranking(self) -> np.ndarray:
        """Point indices from most to least influential; ties keep the lower index first."""
        return np.argsort(-self.scores, kind="stable")

    def top(self, count: int) -> np.ndarray:
        return self.ranking()[:count]


def _matrix(f) -> np.ndarray:
    f = f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)
    if f.ndim != 2:
        raise ContractError(f"feature matrix must be N x F, got shape {f.shape}")
    return f


def fbi(features) -> InfluenceMap:
    """L1 norm of each point's pre-bottleneck feature row."""
    return InfluenceMap(np.abs(_matrix(features)).sum(axis=1), "fbi")


def fbi_p(features, p: float) -> InfluenceMap:
    """L^p norm of each feature row, for ``p`` in [0.25, 8]."""
    if not P_RANGE[0] <= p <= P_RANGE[1]:
        raise ContractError(f"p must lie in [{P_RANGE[0]}, {P_RANGE[1]}], got {p}")
    if p == 1:
        return InfluenceMap(fbi(features).scores, "fbi_p")
    a = np.abs(_matrix(features))
    return InfluenceMap((a**p).sum(axis=1) ** (1.0 / p), "fbi_p")


def critical_winners(features) -> np.ndarray:
    """Per feature, the index of the point strictly above all others, or -1 on a tie."""
    f = _matrix(features)
    top = f.max(axis=0)
    at_top = f == top
    unique = at_top.sum(axis=0) == 1
    return np.where(unique, np.argmax(at_top, axis=0), -1)


def critical_points(features) -> InfluenceMap:
    """1 for points that strictly win at least one feature column, 0 otherwise."""
    f = _matrix(features)
    winners = critical_winners(f)
    scores = np.zeros(len(f))
    scores[winners[winners >= 0]] = 1.0
    return InfluenceMap(scores, "critical")


def critical_set(features) -> np.ndarray:
    return np.flatnonzero(critical_points(features).scores)


def _points(pc) -> np.ndarray:
    return pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)


def input_gradient(model: ModelBundle, pc, target: int | None = None) -> tuple[np.ndarray, int]:
    """d logit[target] / d points, shape ``[N, 3]``; target defaults to the predicted class."""
    with Graph() as g:
        x = Tensor(_points(pc), requires_grad=True)
        out = network.forward_tensors(model, x)
        if target is None:
            target = int(np.argmax(out.logits.data))
        root = T.take(out.logits, target)
    return g.backward(root)[x.id].numpy(), target


def gradient_saliency(model: ModelBundle, pc) -> InfluenceMap:
    """Euclidean norm of the predicted-class logit gradient at every point."""
    grad, _ = input_gradient(model, pc)
    return InfluenceMap(np.sqrt((grad**2).sum(axis=1)), "gradient")


def integrated_attributions(model: ModelBundle, pc, steps: int = 20, chunk: int = 50) -> tuple[np.ndarray, int]:
    """Signed per-coordinate integrated-gradients attributions ``[N, 3]`` and the target class.

    The path starts from every point collapsed onto the centroid and uses a
    midpoint Riemann sum with ``steps`` evaluations.
    """
    if steps < 2:
        raise ContractError(f"steps must be >= 2, got {steps}")
    x = _points(pc)
    baseline = np.broadcast_to(x.mean(axis=0), x.shape)
    target = int(np.argmax(network.logits(model, x)))
    delta = x - baseline
    alphas = (np.arange(steps) + 0.5) / steps
    total = np.zeros_like(x)
    for start in range(0, steps, chunk):
        a = alphas[start : start + chunk]
        path = baseline[None] + a[:, None, None] * delta[None]
        with Graph() as g:
            xp = Tensor(path, requires_grad=True)
            out = network.forward_tensors(model, xp)
            root = T.sum_all(T.take(out.logits, target))
        total += g.backward(root)[xp.id].data.sum(axis=0)
    return total / steps * delta, target


def integrated_gradients(model: ModelBundle, pc, steps: int = 20) -> InfluenceMap:
    attr, _ = integrated_attributions(model, pc, steps)
    return InfluenceMap(np.abs(attr.sum(axis=1)), "intgrad")


def random_ranking(n: int, seed: int = 0) -> InfluenceMap:
    """Scores form a seeded random permutation of 1..n."""
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    return InfluenceMap(rng.permutation(n) + 1.0, "random")


def explain(model: ModelBundle, pc, method: str, *, p: float = 1.0, steps: int = 20, seed: int = 0) -> InfluenceMap:
    """Dispatch to an estimator by name."""
    if method == "fbi":
        return fbi(network.features(model, pc))
    if method == "fbi_p":
        return fbi_p(network.features(model, pc), p)
    if method == "critical":
        return critical_points(network.features(model, pc))
    if method == "gradient":
        return gradient_saliency(model, pc)
    if method == "intgrad":
        return integrated_gradients(model, pc, steps)
    if method == "random":
        return random_ranking(len(_points(pc)), seed)
    raise ContractError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
