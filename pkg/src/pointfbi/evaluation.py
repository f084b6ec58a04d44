"""Dataset-level studies: perturbation AUC, timing, rotation deviation, outlier share, smoothness."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import network, xai
from .data import Dataset, KnnGraph, PointCloud, add_global_outliers, rotate
from .errors import ContractError
from .network import ModelBundle
from .xai import InfluenceMap

logger = logging.getLogger(__name__)

DEFAULT_RATIOS = tuple(round(0.1 * i, 1) for i in range(1, 10))
DEFAULT_ANGLES = tuple(math.radians(a) for a in range(30, 181, 30))
DEFAULT_AXES = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
SEVERITIES = (1, 2, 3, 4, 5)
FBI_GUARD = 1e-9

Estimator = Callable[[ModelBundle, PointCloud], InfluenceMap]


def _map(fn, items, jobs: int = 1) -> list:
    items = list(items)
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# -- perturbation test --------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationCurve:
    drop_ratios: tuple[float, ...]
    accuracies: tuple[float, ...]
    method: str = ""

    def __post_init__(self):
        if len(self.drop_ratios) != len(self.accuracies) or not self.drop_ratios:
            raise ContractError("drop_ratios and accuracies must be non-empty and equally long")

    @property
    def auc(self) -> float:
        return curve_auc(self.drop_ratios, self.accuracies)


def curve_auc(ratios: Sequence[float], accuracies: Sequence[float]) -> float:
    """Trapezoidal area under accuracy(ratio), divided by the ratio span, in percent."""
    r = np.asarray(ratios, dtype=np.float64)
    a = np.asarray(accuracies, dtype=np.float64)
    if len(r) == 1:
        return 100.0 * float(a[0])
    area = float(np.sum((a[1:] + a[:-1]) * np.diff(r)) / 2.0)
    return 100.0 * area / float(r[-1] - r[0])


def drop_count(ratio: float, n: int) -> int:
    """ceil(ratio * n), guarding against float noise such as 0.3 * 100 = 30.000000000000004."""
    return math.ceil(round(ratio * n, 9))


def resolve_estimator(method: str | Estimator, *, p: float = 1.0, steps: int = 20, seed: int = 0):
    """Return ``fn(model, pc, index) -> InfluenceMap``.

    The random baseline draws a distinct seeded permutation per cloud index.
    """
    if callable(method):
        return lambda model, pc, i: method(model, pc)
    if method == "random":
        return lambda model, pc, i: xai.random_ranking(pc.n, seed * 1_000_003 + i)
    if method not in xai.METHODS:
        raise ContractError(f"unknown method {method!r}; valid methods: {', '.join(xai.METHODS)}")
    return lambda model, pc, i: xai.explain(model, pc, method, p=p, steps=steps)


def perturbation_test(
    model: ModelBundle,
    dataset: Dataset,
    method: str | Estimator,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    *,
    p: float = 1.0,
    steps: int = 20,
    seed: int = 0,
    jobs: int = 1,
) -> PerturbationCurve:
    """Remove the top-ranked ``ceil(ratio * N)`` points of each cloud and reclassify the rest.

    The influence map is computed once on the full cloud. Accuracy is the
    fraction of clouds still classified as their label.
    """
    ratios = tuple(float(r) for r in ratios)
    if not ratios:
        raise ContractError("need at least one drop ratio")
    if any(not 0 <= r < 1 for r in ratios):
        raise ContractError(f"drop ratios must lie in [0, 1), got {ratios}")
    if len(dataset) == 0:
        raise ContractError("empty dataset")
    for pc in dataset:
        if pc.n < drop_count(max(ratios), pc.n) + 4:
            raise ContractError(f"cloud with {pc.n} points is too small for ratio {max(ratios)}")
    estimate = resolve_estimator(method, p=p, steps=steps, seed=seed)
    orders = _map(lambda item: estimate(model, item[1], item[0]).ranking(), enumerate(dataset), jobs)
    labels = dataset.labels

    accuracies = []
    for ratio in ratios:
        remaining = []
        for pc, order in zip(dataset, orders):
            keep = np.sort(order[drop_count(ratio, pc.n) :])
            remaining.append(pc.points[keep])
        accuracies.append(float(np.mean(_classify(model, remaining) == labels)))
    name = method if isinstance(method, str) else getattr(method, "__name__", "custom")
    return PerturbationCurve(ratios, tuple(accuracies), name)


def _classify(model: ModelBundle, clouds: list[np.ndarray], batch_size: int = 64) -> np.ndarray:
    preds = np.empty(len(clouds), dtype=np.intp)
    by_size: dict[int, list[int]] = {}
    for i, c in enumerate(clouds):
        by_size.setdefault(len(c), []).append(i)
    for idx in by_size.values():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            preds[chunk] = network.predict(model, np.stack([clouds[i] for i in chunk]))
    return preds


# -- timing -----------------------------------------------------------------------------


@dataclass(frozen=True)
class TimingResult:
    medians: dict[str, float]  # seconds per call

    def speedup(self, method: str, reference: str = "fbi") -> float:
        return self.medians[method] / self.medians[reference]


def _loops_for(fn, target: float) -> int:
    loops = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(loops):
            fn()
        if time.perf_counter() - t0 >= target or loops >= 1 << 20:
            return loops
        loops *= 2


def median_time(fn: Callable[[], object], repeats: int = 20, warmup: int = 3, target: float = 0.002) -> float:
    """Median seconds per call over ``repeats`` samples, each sample averaging enough loops to last ``target`` seconds."""
    for _ in range(warmup):
        fn()
    loops = _loops_for(fn, target)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(loops):
            fn()
        samples.append((time.perf_counter() - t0) / loops)
    return float(np.median(samples))


def timing_bench(
    model: ModelBundle,
    pc: PointCloud,
    methods: Iterable[str] = ("fbi", "critical", "gradient", "intgrad"),
    repeats: int = 20,
    *,
    steps: int = 20,
) -> TimingResult:
    """Median wall-clock per method.

    ``fbi`` and ``critical`` are timed on a feature matrix computed once up
    front; ``gradient`` and ``intgrad`` include their forward and backward
    passes.
    """
    if repeats < 20:
        raise ContractError(f"repeats must be >= 20, got {repeats}")
    feats = network.features(model, pc)
    calls = {
        "fbi": lambda: xai.fbi(feats),
        "critical": lambda: xai.critical_points(feats),
        "gradient": lambda: xai.gradient_saliency(model, pc),
        "intgrad": lambda: xai.integrated_gradients(model, pc, steps),
        "random": lambda: xai.random_ranking(pc.n),
    }
    medians = {}
    for m in methods:
        if m not in calls:
            raise ContractError(f"cannot time method {m!r}")
        medians[m] = median_time(calls[m], repeats)
    return TimingResult(medians)


# -- rotation deviation -------------------------------------------------------------


@dataclass(frozen=True)
class RotationResult:
    delta: float  # percent
    n_points: int
    n_excluded: int

    @property
    def excluded_fraction(self) -> float:
        total = self.n_points + self.n_excluded
        return self.n_excluded / total if total else 0.0

    @property
    def warning(self) -> bool:
        return self.excluded_fraction > 0.01


def rotation_deviation(
    model: ModelBundle,
    dataset: Dataset,
    angles: Sequence[float] = DEFAULT_ANGLES,
    axes: Sequence[Sequence[float]] = DEFAULT_AXES,
    *,
    jobs: int = 1,
) -> RotationResult:
    """Mean relative per-point FBI change under rotation, in percent.

    Averaged over points, clouds and every (axis, angle) pair. Points whose
    clean FBI is below 1e-9 are excluded and counted.
    """

    def one(pc):
        clean = xai.fbi(network.features(model, pc)).scores
        ok = clean >= FBI_GUARD
        devs = []
        for axis in axes:
            for angle in angles:
                rotated = xai.fbi(network.features(model, rotate(pc, axis, angle))).scores
                devs.append(np.abs(rotated[ok] - clean[ok]) / clean[ok])
        excluded = int((~ok).sum()) * len(devs)
        return float(np.sum(devs)), sum(d.size for d in devs), excluded

    parts = _map(one, dataset, jobs)
    total = sum(p[0] for p in parts)
    count = sum(p[1] for p in parts)
    excluded = sum(p[2] for p in parts)
    result = RotationResult(100.0 * total / count if count else 0.0, count, excluded)
    if result.warning:
        logger.warning("%.2f%% of points excluded from delta (clean FBI < %g)", 100 * result.excluded_fraction, FBI_GUARD)
    return result


# -- outlier influence ------------------------------------------------------------------


def outlier_ratio(scores: Sequence[float], mask: Sequence[bool]) -> float:
    """Share of the total score mass held by masked points (0 when nothing is masked)."""
    s = np.asarray(scores, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if s.shape != m.shape:
        raise ContractError("scores and mask differ in length")
    if not m.any():
        return 0.0
    total = s.sum()
    if total == 0:
        raise ContractError("total influence is zero; ratio undefined")
    return float(s[m].sum() / total)


def outlier_fraction(model: ModelBundle, corrupted: Dataset, *, jobs: int = 1) -> float:
    """Mean FBI share of flagged outliers over the dataset, in percent."""
    for pc in corrupted:
        if pc.outlier_mask is None:
            raise ContractError("every cloud needs an outlier_mask")
    ratios = _map(lambda pc: outlier_ratio(xai.fbi(network.features(model, pc)).scores, pc.outlier_mask), corrupted, jobs)
    return 100.0 * float(np.mean(ratios))


def corrupt(dataset: Dataset, severity: int, seed: int = 0) -> Dataset:
    return Dataset([add_global_outliers(pc, severity, seed * 1_000_003 + i) for i, pc in enumerate(dataset)])


@dataclass(frozen=True)
class OutlierStudy:
    by_severity: dict[int, float]  # percent
    accuracy_by_severity: dict[int, float]

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.by_severity.values())))


def outlier_study(model: ModelBundle, dataset: Dataset, severities: Sequence[int] = SEVERITIES,
                  seed: int = 0, *, jobs: int = 1) -> OutlierStudy:
    by_sev, acc = {}, {}
    for s in severities:
        corrupted = corrupt(dataset, s, seed)
        by_sev[s] = outlier_fraction(model, corrupted, jobs=jobs)
        acc[s] = network.accuracy(model, corrupted)
    return OutlierStudy(by_sev, acc)


# -- gradient sparsity and smoothness ----------------------------------------------------------


def zero_gradient_count(model: ModelBundle, pc: PointCloud, threshold: float = 1e-12) -> int:
    """Number of points whose gradient saliency is below ``threshold``."""
    if model.config.pooling != "max":
        raise ContractError("zero-gradient count assumes pure max pooling; model uses " + model.config.pooling)
    return int((xai.gradient_saliency(model, pc).scores < threshold).sum())


@dataclass(frozen=True)
class Smoothness:
    tv: float
    max_jump: float


def smoothness_tv(influence: InfluenceMap | Sequence[float], graph: KnnGraph) -> Smoothness:
    """Mean and max absolute difference of min-max normalized scores across graph edges."""
    s = influence.scores if isinstance(influence, InfluenceMap) else np.asarray(influence, dtype=np.float64)
    if len(s) != graph.n:
        raise ContractError(f"map has {len(s)} scores but graph has {graph.n} nodes")
    lo, hi = s.min(), s.max()
    norm = np.zeros_like(s) if hi == lo else (s - lo) / (hi - lo)
    jumps = np.abs(norm[graph.edges[:, 0]] - norm[graph.edges[:, 1]])
    if jumps.size == 0:
        return Smoothness(0.0, 0.0)
    return Smoothness(float(jumps.mean()), float(jumps.max()))


# -- reports ------------------------------------------------------------------------------------


@dataclass
class AnalysisReport:
    delta: float | None = None
    r_fraction: float | None = None
    zero_grad_count: int | None = None
    smoothness_tv: float | None = None
    extra: dict[str, float] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float]]:
        rows = [(k, getattr(self, k)) for k in ("delta", "r_fraction", "zero_grad_count", "smoothness_tv")]
        return [(k, v) for k, v in rows if v is not None] + list(self.extra.items())


def write_curve_csv(curve: PerturbationCurve, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ratio", "accuracy"])
        for r, a in zip(curve.drop_ratios, curve.accuracies):
            w.writerow([f"{r:.6f}", f"{a:.6f}"])


def write_report_csv(rows: Iterable[tuple[str, float]], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, value in rows:
            w.writerow([name, f"{float(value):.6f}"])
