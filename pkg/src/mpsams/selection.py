"""Masked patches selection.

Patches are compared through a row-softmaxed covariance matrix, the rows of
that matrix are split into two clusters, the smaller cluster is taken to be
the lesion, and patches are ordered lesion-first for masking.
"""

from __future__ import annotations

import csv
import io
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .patching import BACKGROUND, LESION, MaskPlan, PatchGrid, PatchSet, patchify

Method = Literal["kmeans", "hierarchical", "tsne_kmeans", "dbscan"]
METHODS: tuple[str, ...] = ("kmeans", "hierarchical", "tsne_kmeans", "dbscan")

# incremented on every clustering call; the pipeline uses it to prove that
# random-selection arms never touch the clustering path
CALL_COUNTS: Counter = Counter()

KMEANS_MAX_ITER = 100
INIT_RETRIES = 3


class ClusteringDegenerateError(RuntimeError):
    """Two non-empty clusters could not be formed."""


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    degenerate: bool = False

    @property
    def N(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ClusterAssignment:
    assignment: np.ndarray
    method: str
    iterations: int
    converged: bool
    seed: int

    @property
    def sizes(self) -> tuple[int, int]:
        return int(np.sum(self.assignment == 0)), int(np.sum(self.assignment == 1))


@dataclass(frozen=True)
class LesionLabeling:
    lesion_cluster: int
    labels: tuple[str, ...]
    lesion_count: int

    @property
    def lesion_mask(self) -> np.ndarray:
        return np.array([lab == LESION for lab in self.labels])


def patch_covariance(patches: np.ndarray) -> np.ndarray:
    """Covariance between patches, taken over pixel positions.

    Every pixel position is centered on its mean across patches (the mean
    patch is subtracted), so a patch's brightness relative to the rest of the
    image survives; centering each patch on its own mean would erase it and
    make flat lesion interiors indistinguishable from background. The sum is
    normalized by ``length - 1``.
    """
    x = np.asarray(patches, dtype=np.float64)
    xc = x - x.mean(axis=0, keepdims=True)
    return xc @ xc.T / max(x.shape[1] - 1, 1)


def patch_similarity(patches: PatchSet | np.ndarray) -> SimilarityMatrix:
    vectors = patches.patches if isinstance(patches, PatchSet) else np.asarray(patches)
    N = vectors.shape[0]
    if N < 2:
        raise ValueError(f"need at least 2 patches, got {N}")
    if not np.all(np.isfinite(vectors)):
        raise ValueError("patch vectors contain non-finite values")
    cov = patch_covariance(vectors)
    scale = max(1.0, float(np.max(np.abs(vectors))) ** 2)
    if float(np.max(np.abs(cov))) <= 1e-12 * scale:
        return SimilarityMatrix(np.full((N, N), 1.0 / N), degenerate=True)
    z = cov - cov.max(axis=1, keepdims=True)
    e = np.exp(z)
    return SimilarityMatrix(e / e.sum(axis=1, keepdims=True))


def _features(sim) -> np.ndarray:
    return np.asarray(sim.values if isinstance(sim, SimilarityMatrix) else sim, dtype=np.float64)


def _anchor_rows(x: np.ndarray) -> tuple[int, int]:
    """Indices of the most and least outlying rows.

    The mean squared distance from row i to all rows equals
    ``|x_i - centroid|^2`` plus a constant, so ranking by distance to the
    centroid is the same ranking at O(N) cost.
    """
    d = np.sum((x - x.mean(axis=0)) ** 2, axis=1)
    return int(np.argmax(d)), int(np.argmin(d))


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int):
    assign = None
    for it in range(1, max_iter + 1):
        # squared distances to the two centers; ties go to cluster 0
        d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d, axis=1)
        if assign is not None and np.array_equal(new, assign):
            return assign, it, True
        assign = new
        if np.all(assign == assign[0]):
            return assign, it, False
        centers = np.stack([x[assign == k].mean(axis=0) for k in (0, 1)])
    return assign, max_iter, False


def kmeans2(x: np.ndarray, seed: int = 0, max_iter: int = KMEANS_MAX_ITER) -> tuple[np.ndarray, int, bool]:
    """Two-way k-means with data-anchored initialization.

    Cluster 0 starts at the most outlying row (the lesion candidate) and
    cluster 1 at the least outlying row. If a run ends with an empty cluster,
    the two starting centers are jittered with seed-derived noise and the run
    is retried up to ``INIT_RETRIES`` times.
    """
    x = np.asarray(x, dtype=np.float64)
    N = x.shape[0]
    if N < 2:
        raise ClusteringDegenerateError("need at least 2 rows")
    hi, lo = _anchor_rows(x)
    if N == 2:
        assign = np.zeros(2, dtype=np.int64)
        assign[1 - hi] = 1
        return assign, 0, True
    base = x[[hi, lo]]
    spread = float(np.std(x)) or 1.0
    for attempt in range(INIT_RETRIES + 1):
        centers = base.copy()
        if attempt:
            rng = np.random.default_rng([seed, attempt])
            centers += rng.normal(scale=0.5 * spread, size=centers.shape)
        assign, iters, converged = _lloyd(x, centers, max_iter)
        if 0 < int(assign.sum()) < N:
            return assign.astype(np.int64), iters, converged
    raise ClusteringDegenerateError(f"k-means could not form two clusters after {INIT_RETRIES} retries")


def _orient(labels: np.ndarray, anchor: int) -> np.ndarray:
    """Relabel a 2-way partition so the anchor row sits in cluster 0."""
    labels = np.asarray(labels, dtype=np.int64)
    return labels if labels[anchor] == 0 else 1 - labels


def _hierarchical(x: np.ndarray) -> np.ndarray:
    from scipy.cluster.hierarchy import fcluster, linkage

    z = linkage(x, method="ward")
    labels = fcluster(z, 2, criterion="maxclust") - 1
    if len(np.unique(labels)) < 2:
        raise ClusteringDegenerateError("hierarchical clustering produced a single cluster")
    return _orient(labels, _anchor_rows(x)[0])


def _tsne_kmeans(x: np.ndarray, seed: int) -> tuple[np.ndarray, int, bool]:
    from sklearn.manifold import TSNE

    N = x.shape[0]
    # perplexity must stay below the sample count
    perplexity = min(10.0, max(1.0, (N - 1) / 3))
    emb = TSNE(n_components=2, perplexity=perplexity, max_iter=500, random_state=seed, init="pca").fit_transform(x)
    assign, iters, converged = kmeans2(emb, seed)
    return _orient(assign, _anchor_rows(x)[0]), iters, converged


def _dbscan(x: np.ndarray) -> np.ndarray:
    from scipy.spatial.distance import pdist
    from sklearn.cluster import DBSCAN

    eps = 0.5 * float(np.median(pdist(x)))
    if eps <= 0:
        raise ClusteringDegenerateError("all rows coincide")
    raw = DBSCAN(eps=eps, min_samples=4).fit_predict(x)
    ids, counts = np.unique(raw[raw >= 0], return_counts=True)
    if len(ids) < 2:
        raise ClusteringDegenerateError(f"DBSCAN found {len(ids)} cluster(s)")
    keep = ids[np.argsort(-counts, kind="stable")[:2]]
    centers = np.stack([x[raw == k].mean(axis=0) for k in keep])
    d = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
    labels = np.where(raw == keep[0], 0, np.where(raw == keep[1], 1, np.argmin(d, axis=1)))
    return _orient(labels, _anchor_rows(x)[0])


def cluster_patches(sim: SimilarityMatrix | np.ndarray, method: str = "kmeans", seed: int = 0) -> ClusterAssignment:
    """Split patches into two clusters using their similarity rows as features.

    A plain ``(N, d)`` array is accepted too, which the benchmark uses.
    """
    CALL_COUNTS[method] += 1
    x = _features(sim)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need an (N >= 2, d) feature array, got shape {x.shape}")
    if method == "kmeans":
        assign, iters, converged = kmeans2(x, seed)
    elif method == "hierarchical":
        assign, iters, converged = _hierarchical(x), 1, True
    elif method == "tsne_kmeans":
        assign, iters, converged = _tsne_kmeans(x, seed)
    elif method == "dbscan":
        assign, iters, converged = _dbscan(x), 1, True
    else:
        raise ValueError(f"unknown clustering method {method!r}")
    if not 0 < int(assign.sum()) < len(assign):
        raise ClusteringDegenerateError(f"{method} produced an empty cluster")
    return ClusterAssignment(assign, method, iters, converged, seed)


def label_lesion_cluster(assign: ClusterAssignment, patches: PatchSet | np.ndarray | None = None) -> LesionLabeling:
    """Label the smaller cluster as lesion.

    On equal sizes the cluster whose patches have the higher mean pixel
    variance wins; without ``patches`` the tie goes to cluster 0.
    """
    a = np.asarray(assign.assignment)
    sizes = [int(np.sum(a == k)) for k in (0, 1)]
    if min(sizes) == 0:
        raise ValueError("both clusters must be non-empty")
    if sizes[0] != sizes[1]:
        lesion = int(np.argmin(sizes))
    elif patches is not None:
        vectors = patches.patches if isinstance(patches, PatchSet) else np.asarray(patches)
        var = np.var(np.asarray(vectors, dtype=np.float64), axis=1)
        lesion = 0 if var[a == 0].mean() >= var[a == 1].mean() else 1
    else:
        lesion = 0
    labels = tuple(LESION if k == lesion else BACKGROUND for k in a)
    return LesionLabeling(lesion, labels, sizes[lesion])


def order_patches(labeling: LesionLabeling, sim: SimilarityMatrix, grid: PatchGrid | None = None, seed: int = 0) -> MaskPlan:
    """Lesion patches first, each group by descending mean similarity to the lesion members."""
    s = _features(sim)
    lesion = labeling.lesion_mask
    if s.shape[0] != len(lesion):
        raise ValueError(f"labeling covers {len(lesion)} patches but similarity has {s.shape[0]}")
    score = s[:, lesion].mean(axis=1)
    idx = np.arange(len(lesion))
    # lexsort: last key is primary
    order = np.lexsort((idx, -score, ~lesion))
    return MaskPlan(order, labeling.labels, n=None, seed=seed, grid=grid)


def make_mask_plan(plan: MaskPlan, n: int) -> MaskPlan:
    if not 0 <= n <= plan.N:
        raise ValueError(f"n={n} outside [0, {plan.N}]")
    return plan.with_n(n)


def mps_plan(image: np.ndarray, patch_size: int, n: int | None = None, method: str = "kmeans", seed: int = 0) -> MaskPlan:
    """Full selection path for one image: patchify, similarity, cluster, label, order."""
    ps = patchify(image, patch_size)
    sim = patch_similarity(ps)
    assign = cluster_patches(sim, method, seed)
    labeling = label_lesion_cluster(assign, ps)
    plan = order_patches(labeling, sim, grid=ps.grid, seed=seed)
    return plan if n is None else make_mask_plan(plan, n)


def random_plan(grid: PatchGrid, n: int | None, seed) -> MaskPlan:
    """Seeded uniformly random ordering; every patch is labeled background."""
    order = np.random.default_rng(seed).permutation(grid.N)
    return MaskPlan(order, (BACKGROUND,) * grid.N, n=n, seed=seed if isinstance(seed, int) else 0, grid=grid)


# --------------------------------------------------------------------------
# clustering benchmark


def bench_rows(N: int, dim: int, rng: np.random.Generator, lesion_fraction: float = 0.1,
               separation: float = 8.0, radius: float = 1.0, intrinsic_dim: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Two linearly separable point clouds standing in for similarity profiles.

    Each cloud varies mostly inside a random ``intrinsic_dim``-dimensional
    subspace, so distance-based methods behave as they would on low-rank
    profiles. Returns the rows and the boolean lesion ground truth.
    """
    n_lesion = max(1, int(round(lesion_fraction * N)))
    truth = np.zeros(N, dtype=bool)
    truth[rng.choice(N, n_lesion, replace=False)] = True
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    basis = np.linalg.qr(rng.normal(size=(dim, intrinsic_dim)))[0]
    z = rng.uniform(-1, 1, size=(N, intrinsic_dim)) * (radius / math.sqrt(intrinsic_dim))
    rows = z @ basis.T + rng.normal(scale=0.01 * radius, size=(N, dim))
    rows[truth] += separation * radius * direction
    return rows, truth


@dataclass
class BenchCell:
    method: str
    patch_count: int
    trial: int
    wall_time_seconds: float
    lesion_recall: float
    status: str = "ok"  # ok | timed_out | failed


@dataclass
class BenchReport:
    cells: list[BenchCell] = field(default_factory=list)
    slopes: dict[str, float | None] = field(default_factory=dict)

    def median_times(self, method: str) -> dict[int, float]:
        out: dict[int, list[float]] = {}
        for c in self.cells:
            if c.method == method and c.status == "ok":
                out.setdefault(c.patch_count, []).append(c.wall_time_seconds)
        return {n: float(np.median(t)) for n, t in sorted(out.items())}

    def mean_recall(self, method: str) -> float:
        vals = [c.lesion_recall for c in self.cells if c.method == method and c.status == "ok"]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "patch_count", "trial", "wall_time_seconds", "lesion_recall", "status"])
        for c in self.cells:
            w.writerow([c.method, c.patch_count, c.trial, f"{c.wall_time_seconds:.9f}", f"{c.lesion_recall:.6f}", c.status])
        return buf.getvalue()


def loglog_slope(times: dict[int, float]) -> float | None:
    """Least-squares slope of log(time) against log(size); None below two sizes."""
    if len(times) < 2:
        return None
    n = np.log(np.array(list(times.keys()), dtype=float))
    t = np.log(np.array(list(times.values()), dtype=float))
    return float(np.polyfit(n, t, 1)[0])


def _timed(fn, min_time: float) -> float:
    """Mean seconds per call, repeating short calls until ``min_time`` has elapsed."""
    reps, total = 0, 0.0
    while True:
        t0 = time.perf_counter()
        fn()
        total += time.perf_counter() - t0
        reps += 1
        if total >= min_time:
            return total / reps


def cluster_bench(
    patch_counts: Sequence[int],
    methods: Sequence[str] = ("kmeans", "hierarchical"),
    trials: int = 3,
    seed: int = 0,
    dim: int = 64,
    budget_seconds: float = 60.0,
    min_time: float = 0.05,
) -> BenchReport:
    """Time each clustering method on synthetic rows of growing size.

    Sizes are processed in ascending order. Once a call exceeds
    ``budget_seconds`` the method is marked timed out for that and every
    larger size.
    """
    sizes = list(patch_counts)
    if sizes != sorted(sizes):
        raise ValueError("patch_counts must be ascending")
    report = BenchReport()
    for mi, method in enumerate(methods):
        timed_out = False
        for N in sizes:
            for trial in range(trials):
                if timed_out:
                    report.cells.append(BenchCell(method, N, trial, float("nan"), float("nan"), "timed_out"))
                    continue
                rng = np.random.default_rng([seed, N, trial])
                rows, truth = bench_rows(N, dim, rng)
                try:
                    assign = cluster_patches(rows, method, seed + trial)
                except ClusteringDegenerateError:
                    report.cells.append(BenchCell(method, N, trial, float("nan"), 0.0, "failed"))
                    continue
                lesion = label_lesion_cluster(assign, rows).lesion_mask
                recall = float(np.sum(lesion & truth) / np.sum(truth))
                elapsed = _timed(lambda: cluster_patches(rows, method, seed + trial), min_time)
                status = "ok"
                if elapsed > budget_seconds:
                    timed_out, status = True, "timed_out"
                report.cells.append(BenchCell(method, N, trial, elapsed, recall, status))
        report.slopes[method] = loglog_slope(report.median_times(method))
    return report
