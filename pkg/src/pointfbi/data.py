"""Point clouds: synthetic primitives, rigid transforms, outliers, KNN graphs and file I/O."""

from __future__ import annotations

import math
import os
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError

CLASSES = ("sphere", "cube", "cone", "cylinder", "torus", "pyramid")
MIN_POINTS = 4
MIN_GENERATED_POINTS = 64
JITTER_SIGMA = 0.01
JITTER_CLIP = 0.02
OUTLIERS_PER_SEVERITY = 10


@dataclass(frozen=True, eq=False)
class PointCloud:
    """``N x 3`` coordinates with an optional class label and outlier mask."""

    points: np.ndarray
    label: int | None = None
    outlier_mask: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ContractError(f"points must be N x 3, got shape {pts.shape}")
        if len(pts) < MIN_POINTS:
            raise ContractError(f"a point cloud needs at least {MIN_POINTS} points, got {len(pts)}")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.outlier_mask is not None:
            mask = np.array(self.outlier_mask, dtype=bool)
            if mask.shape != (len(pts),):
                raise ContractError(f"outlier_mask has length {mask.size}, expected {len(pts)}")
            mask.flags.writeable = False
            object.__setattr__(self, "outlier_mask", mask)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n(self) -> int:
        return len(self.points)

    def with_points(self, points: np.ndarray) -> PointCloud:
        return PointCloud(points, self.label, self.outlier_mask)

    def subset(self, keep: np.ndarray) -> PointCloud:
        mask = None if self.outlier_mask is None else self.outlier_mask[keep]
        return PointCloud(self.points[keep], self.label, mask)


def normalize_points(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    radius = np.sqrt((centered**2).sum(axis=1)).max()
    if radius == 0:
        raise ContractError("cannot normalize a cloud whose points all coincide")
    return centered / radius


def normalize(pc: PointCloud) -> PointCloud:
    """Center at the centroid and scale so the farthest point has norm 1."""
    return pc.with_points(normalize_points(pc.points))


# -- primitive surface samplers (all return raw, unnormalized samples) --------


def _sample_sphere(rng, n):
    # antipodal pairs: each point is uniform, and the sample centroid stays at
    # the center so normalization does not skew the radii
    v = rng.normal(size=((n + 1) // 2, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.vstack([v, -v])[rng.permutation(2 * len(v))[:n]]


def _sample_cube(rng, n):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    for a in range(3):
        sel = axis == a
        others = [d for d in range(3) if d != a]
        pts[sel, a] = sign[sel]
        pts[np.ix_(sel, others)] = uv[sel]
    return pts


def _disk(rng, n, radius):
    r = radius * np.sqrt(rng.uniform(size=n))
    t = rng.uniform(0, 2 * np.pi, size=n)
    return r * np.cos(t), r * np.sin(t)


def _sample_cone(rng, n, radius=1.0, height=2.0):
    lateral = np.pi * radius * math.hypot(radius, height)
    base = np.pi * radius**2
    on_side = rng.uniform(size=n) < lateral / (lateral + base)
    pts = np.empty((n, 3))
    k = int(on_side.sum())
    # lateral area below height z grows like (1 - z/h)^2 measured from the apex
    s = np.sqrt(rng.uniform(size=k))  # distance fraction from apex
    t = rng.uniform(0, 2 * np.pi, size=k)
    pts[on_side] = np.column_stack([radius * s * np.cos(t), radius * s * np.sin(t), height * (1 - s)])
    x, y = _disk(rng, n - k, radius)
    pts[~on_side] = np.column_stack([x, y, np.zeros(n - k)])
    return pts - [0, 0, height / 2]


def _sample_cylinder(rng, n, radius=1.0, height=2.0):
    lateral = 2 * np.pi * radius * height
    caps = 2 * np.pi * radius**2
    on_side = rng.uniform(size=n) < lateral / (lateral + caps)
    pts = np.empty((n, 3))
    k = int(on_side.sum())
    t = rng.uniform(0, 2 * np.pi, size=k)
    pts[on_side] = np.column_stack(
        [radius * np.cos(t), radius * np.sin(t), rng.uniform(-height / 2, height / 2, size=k)]
    )
    x, y = _disk(rng, n - k, radius)
    z = np.where(rng.uniform(size=n - k) < 0.5, -height / 2, height / 2)
    pts[~on_side] = np.column_stack([x, y, z])
    return pts


def _sample_torus(rng, n, major=1.0, minor=0.35):
    # rejection on the tube angle: area element is proportional to major + minor*cos(phi)
    out = np.empty((0, 2))
    while len(out) < n:
        phi = rng.uniform(0, 2 * np.pi, size=2 * n)
        accept = rng.uniform(size=2 * n) < (major + minor * np.cos(phi)) / (major + minor)
        theta = rng.uniform(0, 2 * np.pi, size=2 * n)
        out = np.vstack([out, np.column_stack([theta, phi])[accept]])
    theta, phi = out[:n, 0], out[:n, 1]
    ring = major + minor * np.cos(phi)
    return np.column_stack([ring * np.cos(theta), ring * np.sin(theta), minor * np.sin(phi)])


def _sample_pyramid(rng, n, half=1.0, height=1.5):
    apex = np.array([0.0, 0.0, height])
    corners = np.array([[-half, -half, 0], [half, -half, 0], [half, half, 0], [-half, half, 0]], dtype=float)
    tris = [(corners[i], corners[(i + 1) % 4], apex) for i in range(4)]
    tris += [(corners[0], corners[1], corners[2]), (corners[0], corners[2], corners[3])]
    tris = np.array(tris)
    areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    which = rng.choice(len(tris), size=n, p=areas / areas.sum())
    u, v = rng.uniform(size=(2, n))
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    a, b, c = tris[which, 0], tris[which, 1], tris[which, 2]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a) - [0, 0, height / 3]


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cone": _sample_cone,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
    "pyramid": _sample_pyramid,
}


def class_index(name: str | int) -> int:
    if isinstance(name, (int, np.integer)):
        if not 0 <= name < len(CLASSES):
            raise ContractError(f"unknown class id {name}")
        return int(name)
    try:
        return CLASSES.index(name)
    except ValueError:
        raise ContractError(f"unknown class {name!r}; expected one of {', '.join(CLASSES)}") from None


def rotation_matrix(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues' formula for a rotation of ``angle`` radians about a unit ``axis``."""
    k = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(k)
    if norm == 0:
        raise ContractError("rotation axis must be nonzero")
    if abs(norm - 1.0) > 1e-9:
        raise ContractError(f"rotation axis must be a unit vector, |axis| = {norm!r}")
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def rotate(pc: PointCloud, axis: Sequence[float], angle: float) -> PointCloud:
    return pc.with_points(pc.points @ rotation_matrix(axis, angle).T)


def generate_shape(class_id: str | int, n_points: int = 256, seed: int = 0) -> PointCloud:
    """Sample ``n_points`` on the surface of a primitive, labeled with its class index.

    The primitive is scaled by a random factor in [0.7, 1.0] and rotated
    about z by a random angle, normalized, jittered by clipped Gaussian noise
    and normalized again. Identical arguments give identical clouds.
    """
    label = class_index(class_id)
    if n_points < MIN_GENERATED_POINTS:
        raise ContractError(f"n_points must be at least {MIN_GENERATED_POINTS}, got {n_points}")
    rng = np.random.default_rng(seed)
    pts = _SAMPLERS[CLASSES[label]](rng, n_points)
    pts = pts * rng.uniform(0.7, 1.0)
    pts = pts @ rotation_matrix((0.0, 0.0, 1.0), rng.uniform(0, 2 * np.pi)).T
    pts = normalize_points(pts)
    jitter = rng.normal(scale=JITTER_SIGMA, size=pts.shape)
    length = np.linalg.norm(jitter, axis=1, keepdims=True)
    jitter *= np.minimum(1.0, JITTER_CLIP / np.maximum(length, 1e-300))
    return PointCloud(normalize_points(pts + jitter), label)


def add_global_outliers(pc: PointCloud, severity: int, seed: int = 0) -> PointCloud:
    """Append ``10 * severity`` far-field points and flag them in ``outlier_mask``.

    Points are drawn uniformly from the part of the cube [-1, 1]^3 lying
    outside the unit ball, so they sit beyond every point of a normalized
    cloud. The result is not re-normalized.
    """
    if not 1 <= severity <= 5:
        raise ContractError(f"severity must be in 1..5, got {severity}")
    rng = np.random.default_rng(seed)
    count = OUTLIERS_PER_SEVERITY * severity
    extra = np.empty((0, 3))
    while len(extra) < count:
        cand = rng.uniform(-1.0, 1.0, size=(2 * count, 3))
        extra = np.vstack([extra, cand[np.linalg.norm(cand, axis=1) > 1.0]])
    extra = extra[:count]
    old_mask = pc.outlier_mask if pc.outlier_mask is not None else np.zeros(pc.n, dtype=bool)
    return PointCloud(
        np.vstack([pc.points, extra]),
        pc.label,
        np.concatenate([old_mask, np.ones(count, dtype=bool)]),
    )


# -- KNN graph -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KnnGraph:
    k: int
    neighbors: np.ndarray  # N x k point indices, nearest first
    edges: np.ndarray  # E x 2 undirected pairs with i < j
    h: float
    connected: bool

    @property
    def n(self) -> int:
        return len(self.neighbors)


def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def build_knn_graph(pc: PointCloud | np.ndarray, k: int = 8) -> KnnGraph:
    """Exact brute-force Euclidean KNN graph.

    Neighbor lists exclude the point itself; distance ties go to the lower
    index. ``h`` is the largest point-to-neighbor distance and
    ``connected`` reports whether the undirected graph has one component.
    """
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    n = len(pts)
    if not 1 <= k < n:
        raise ContractError(f"k must satisfy 1 <= k < N={n}, got {k}")
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    np.fill_diagonal(d2, np.inf)
    nbrs = np.argsort(d2, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    cols = nbrs.ravel()
    h = float(np.sqrt(d2[rows, cols].max()))

    pairs = np.sort(np.column_stack([rows, cols]), axis=1)
    edges = np.unique(pairs, axis=0)

    parent = list(range(n))
    components = n
    for i, j in edges:
        ri, rj = _find(parent, i), _find(parent, j)
        if ri != rj:
            parent[ri] = rj
            components -= 1
    return KnnGraph(k, nbrs, edges, h, components == 1)


# -- file formats ----------------------------------------------------------------


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(int)


def scalar_colors(scalar: Sequence[float]) -> np.ndarray:
    """Min-max normalize to t in [0, 1] and blend blue (t=0) to red (t=1).

    A constant input maps to t = 1 everywhere.
    """
    s = np.asarray(scalar, dtype=np.float64)
    lo, hi = s.min(), s.max()
    t = np.ones_like(s) if hi == lo else (s - lo) / (hi - lo)
    red = _round_half_up(255 * t)
    blue = _round_half_up(255 * (1 - t))
    return np.column_stack([red, np.zeros_like(red), blue])


def write_ply(pc: PointCloud, scalar: Sequence[float], path: str | os.PathLike) -> None:
    """Write an ASCII PLY with per-vertex colors encoding ``scalar``."""
    scalar = np.asarray(scalar, dtype=np.float64)
    if scalar.shape != (pc.n,):
        raise ContractError(f"scalar has {scalar.size} values for {pc.n} points")
    colors = scalar_colors(scalar)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {pc.n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    lines += [
        f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}"
        for (x, y, z), (r, g, b) in zip(pc.points.tolist(), colors.tolist())
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def write_xyz(pc: PointCloud, path: str | os.PathLike) -> None:
    Path(path).write_text("".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pc.points.tolist()))


def read_xyz(path: str | os.PathLike, label: int | None = None) -> PointCloud:
    """Parse whitespace-separated ``x y z`` lines. Blank lines are not allowed."""
    text = Path(path).read_text()
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if len(fields) != 3:
            raise ParseError(f"expected 3 values, found {len(fields)}", lineno)
        try:
            rows.append([float(v) for v in fields])
        except ValueError:
            raise ParseError(f"non-numeric value in {line.strip()!r}", lineno) from None
    if not rows:
        raise ParseError("empty point file", 1)
    if len(rows) < MIN_POINTS:
        raise ParseError(f"need at least {MIN_POINTS} points, found {len(rows)}", len(rows))
    return PointCloud(np.array(rows), label)


# -- datasets ----------------------------------------------------------------------

TRAIN_SEED_OFFSET = 0
TEST_SEED_OFFSET = 5_000_000


def cloud_seed(base_seed: int, split: str, class_id: int, index: int) -> int:
    """Per-cloud seed; train and test ranges never overlap for index < 100000."""
    offset = {"train": TRAIN_SEED_OFFSET, "test": TEST_SEED_OFFSET}[split]
    return base_seed * 10_000_000 + offset + class_id * 100_000 + index


@dataclass
class Dataset:
    clouds: list[PointCloud] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.clouds)

    def __iter__(self) -> Iterator[PointCloud]:
        return iter(self.clouds)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.clouds[i])
        return self.clouds[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([pc.label for pc in self.clouds], dtype=np.intp)

    def stacked(self) -> np.ndarray:
        sizes = {pc.n for pc in self.clouds}
        if len(sizes) != 1:
            raise ContractError("clouds differ in size and cannot be stacked")
        return np.stack([pc.points for pc in self.clouds])


def make_dataset(per_class: int, n_points: int = 256, seed: int = 0, split: str = "train") -> Dataset:
    """Class-balanced synthetic dataset, ordered class by class."""
    clouds = [
        generate_shape(c, n_points, cloud_seed(seed, split, c, i))
        for c in range(len(CLASSES))
        for i in range(per_class)
    ]
    return Dataset(clouds)


def save_dataset(root: str | os.PathLike, per_class: int, n_points: int = 256, seed: int = 0,
                 test_per_class: int | None = None) -> dict[str, int]:
    """Write ``root/<split>/<class>/<seed>.xyz`` for the train and test splits."""
    if test_per_class is None:
        test_per_class = max(1, per_class // 5)
    counts = {}
    for split, count in (("train", per_class), ("test", test_per_class)):
        for c, name in enumerate(CLASSES):
            folder = Path(root) / split / name
            folder.mkdir(parents=True, exist_ok=True)
            for i in range(count):
                s = cloud_seed(seed, split, c, i)
                write_xyz(generate_shape(c, n_points, s), folder / f"{s}.xyz")
        counts[split] = count * len(CLASSES)
    return counts


def load_dataset(root: str | os.PathLike, split: str) -> Dataset:
    folder = Path(root) / split
    if not folder.is_dir():
        raise FileNotFoundError(f"no {split!r} split under {root}")
    clouds = []
    for c, name in enumerate(CLASSES):
        files = sorted((folder / name).glob("*.xyz"), key=lambda p: int(p.stem))
        clouds += [read_xyz(f, label=c) for f in files]
    if not clouds:
        raise FileNotFoundError(f"no .xyz files under {folder}")
    return Dataset(clouds)
