"""Evaluation battery: K-means clustering accuracy over repeated seeds,
reconstruction fidelity (RMSE%, SSIM), the class-centroid distance matrix
normalized to the extreme-grade distance, a 2D PCA projection for
plotting, and the cross-validated pipeline that ties them together.

Clustering accuracy for K=2 is the best agreement over the two
cluster-to-label mappings, in percent; it is reported as mean and
population standard deviation over kmeans runs with seeds 0..n-1.
RMSE% is sqrt(mean squared error) on the [0, 1] intensity scale times
100.  SSIM uses 7x7x7 uniform windows on the [0, 255] scale, averaged
over the valid (fully inside) region, with the standard constants
C1=(0.01*255)^2 and C2=(0.03*255)^2.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .cae import Model, NetworkSpec, build
from .errors import DataError, UsageError
from .train import (
    TrainCase,
    TrainConfig,
    fit,
    group_kfold,
    select_training_extremes,
)
from .volio import CaseRecord, Volume, read_volume

KMEANS_MAX_ITER = 300
SSIM_WINDOW = 7
SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------


def kmeans(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Lloyd's algorithm with k-means++ initialization.

    Deterministic in (points, k, seed).  Assignment ties break to the
    lowest cluster index.  An empty cluster is re-seeded with the point
    farthest from its assigned centroid (lowest index on ties).  Stops
    when assignments stabilize or after 300 iterations.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise UsageError(f"points must be 2-D, got shape {points.shape}")
    n = points.shape[0]
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    if n < k:
        raise DataError(f"{n} points for k={k}")
    if not np.isfinite(points).all():
        raise DataError("non-finite point coordinates")

    rng = np.random.Generator(np.random.PCG64(seed))
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    for j in range(1, k):
        d2 = np.min(
            ((points[:, None, :] - centers[None, :j, :]) ** 2).sum(axis=2), axis=1
        )
        total = float(d2.sum())
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers[j] = points[idx]

    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        own = d2[np.arange(n), new_assign]
        stolen: set[int] = set()
        for j in range(k):
            if not (new_assign == j).any():
                order = np.argsort(-own, kind="stable")
                pick = next(int(i) for i in order if int(i) not in stolen)
                stolen.add(pick)
                new_assign[pick] = j
                centers[j] = points[pick]
                own[pick] = 0.0
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = points[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return assign


def clustering_accuracy(assignments, labels, k: int = 2) -> float:
    """Best-of-two-mappings agreement between clusters and binary labels,
    as a percentage."""
    if k != 2:
        raise UsageError("clustering accuracy is defined here for K=2 only")
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    if assignments.shape != labels.shape or assignments.size == 0:
        raise UsageError("assignments and labels must be same-length, nonempty")
    for name, arr in (("assignments", assignments), ("labels", labels)):
        if not np.isin(arr, (0, 1)).all():
            raise UsageError(f"{name} must be binary for K=2")
    direct = float((assignments == labels).mean())
    return 100.0 * max(direct, 1.0 - direct)


def evaluate_with_seeds(
    points: np.ndarray, labels, n_seeds: int = 10
) -> tuple[float, float, list[float]]:
    """Clustering accuracy over kmeans seeds 0..n_seeds-1.

    Returns (mean, population std, per-seed values)."""
    if n_seeds < 1:
        raise UsageError(f"n_seeds must be >= 1, got {n_seeds}")
    values = [
        clustering_accuracy(kmeans(points, 2, seed), labels)
        for seed in range(n_seeds)
    ]
    arr = np.array(values)
    return float(arr.mean()), float(arr.std()), values


def format_accuracy(mean: float, std: float) -> str:
    """Render an accuracy pair in the published style, e.g. 81.5(±2.76)."""
    return f"{mean:.1f}(±{std:.2f})"


# ---------------------------------------------------------------------------
# reconstruction metrics
# ---------------------------------------------------------------------------


def rmse_percent(x: Volume, x_hat: Volume) -> float:
    """Root mean squared error on the [0, 1] scale, in percent."""
    if x.dims != x_hat.dims:
        raise UsageError(f"dims mismatch: {x.dims} vs {x_hat.dims}")
    a = x.voxels.astype(np.float64) / 255.0
    b = x_hat.voxels.astype(np.float64) / 255.0
    return 100.0 * float(np.sqrt(np.mean((a - b) ** 2)))


def ssim(x: Volume, x_hat: Volume) -> float:
    """Mean local SSIM over sliding 7x7x7 windows (valid region only)."""
    if x.dims != x_hat.dims:
        raise UsageError(f"dims mismatch: {x.dims} vs {x_hat.dims}")
    if any(d < SSIM_WINDOW for d in x.dims):
        raise UsageError(
            f"dims {x.dims} smaller than SSIM window {SSIM_WINDOW}"
        )
    a = x.voxels.astype(np.float64)
    b = x_hat.voxels.astype(np.float64)

    def win_mean(arr):
        return uniform_filter(arr, size=SSIM_WINDOW)

    mu_a = win_mean(a)
    mu_b = win_mean(b)
    aa = win_mean(a * a)
    bb = win_mean(b * b)
    ab = win_mean(a * b)
    r = SSIM_WINDOW // 2
    crop = (slice(r, s - r) for s in x.dims)
    sl = tuple(crop)
    mu_a, mu_b = mu_a[sl], mu_b[sl]
    var_a = aa[sl] - mu_a * mu_a
    var_b = bb[sl] - mu_b * mu_b
    cov = ab[sl] - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# centroid distances and projection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CentroidMatrix:
    """Symmetric class-centroid distance matrix with unit normalization."""

    classes: tuple[int, ...]
    matrix: np.ndarray
    normalize_pair: tuple[int, int]

    def entry(self, class_a: int, class_b: int) -> float:
        ia = self.classes.index(class_a)
        ib = self.classes.index(class_b)
        return float(self.matrix[ia, ib])


def centroid_matrix(
    by_class: dict[int, np.ndarray], normalize_pair: tuple[int, int] = (0, 4)
) -> CentroidMatrix:
    """Euclidean distances between class-mean embeddings, scaled so the
    ``normalize_pair`` entry is exactly 1."""
    classes = tuple(sorted(by_class))
    if len(classes) < 2:
        raise UsageError("need at least 2 classes")
    centroids = []
    for label in classes:
        arr = np.asarray(by_class[label], dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise DataError(f"class {label} has no embeddings")
        centroids.append(arr.mean(axis=0))
    cent = np.stack(centroids)
    diff = cent[:, None, :] - cent[None, :, :]
    mat = np.sqrt((diff**2).sum(axis=2))
    a, b = normalize_pair
    if a not in classes or b not in classes:
        raise UsageError(f"normalize pair {normalize_pair} not among {classes}")
    ref = mat[classes.index(a), classes.index(b)]
    if ref == 0.0:
        raise DataError(f"zero distance between normalization classes {a} and {b}")
    mat = mat / ref
    return CentroidMatrix(classes, mat, (a, b))


def project_2d(points: np.ndarray) -> np.ndarray:
    """Project embeddings onto their top-2 principal components.

    Centered SVD; component signs fixed so each component's largest
    loading is positive.  Identical points map to the origin; rank-1
    data gets a zero second coordinate.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2:
        raise UsageError(f"need >= 2 points, got shape {points.shape}")
    centered = points - points.mean(axis=0)
    if not centered.any():
        return np.zeros((points.shape[0], 2))
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for j in range(comps.shape[0]):
        lead = np.argmax(np.abs(comps[j]))
        if comps[j, lead] < 0.0:
            comps[j] = -comps[j]
    proj = centered @ comps.T
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((proj.shape[0], 1))])
    return proj


# ---------------------------------------------------------------------------
# cross-validated pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Evaluation protocol: network, training schedule, CV layout."""

    network: NetworkSpec
    train: TrainConfig
    k_folds: int = 5
    fold_seed: int = 0
    init_seed: int = 0
    n_seeds: int = 10
    extreme_low: int = 0
    extreme_high: int = 4

    def __post_init__(self):
        if self.k_folds < 2:
            raise UsageError(f"k_folds must be >= 2, got {self.k_folds}")
        if self.n_seeds < 1:
            raise UsageError(f"n_seeds must be >= 1, got {self.n_seeds}")


@dataclass(frozen=True)
class EmbeddingSet:
    """Embeddings with their case identities and labels."""

    case_ids: tuple[str, ...]
    labels: tuple[int, ...]
    vectors: np.ndarray


@dataclass(frozen=True)
class FoldReport:
    fold: int
    accuracy_mean: float
    accuracy_std: float
    accuracy_values: tuple[float, ...]
    rmse_percent: float
    ssim: float


@dataclass(frozen=True)
class FoldArtifacts:
    """Everything a fold produced beyond its metric summary."""

    fold: int
    model: Model
    trace: tuple
    train_extremes: EmbeddingSet
    val_extremes: EmbeddingSet
    val_all: EmbeddingSet
    centroids: CentroidMatrix


@dataclass(frozen=True)
class EvalReport:
    """Cross-validated metric summary (accuracy pooled over fold*seed)."""

    folds: tuple[FoldReport, ...]
    clustering_accuracy_mean: float
    clustering_accuracy_std: float
    rmse_percent: float
    ssim: float
    centroids: CentroidMatrix

    def __post_init__(self):
        if not 0.0 <= self.clustering_accuracy_mean <= 100.0:
            raise DataError(
                f"accuracy mean {self.clustering_accuracy_mean} outside [0, 100]"
            )
        if self.clustering_accuracy_std < 0.0:
            raise DataError("negative accuracy std")


def _remap_extreme(label: int, low: int, high: int) -> int:
    return 0 if label == low else 1


def _eval_fold(
    model: Model,
    train_ext: list[CaseRecord],
    val_recs,
    volumes: dict,
    low: int,
    high: int,
    n_seeds: int,
    fold_idx: int,
    trace,
) -> tuple[FoldReport, FoldArtifacts]:
    def embed(recs, remap: bool) -> EmbeddingSet:
        ids, labels, vecs = [], [], []
        for r in recs:
            ids.append(r.subject_id)
            labels.append(
                _remap_extreme(r.class_label, low, high) if remap else r.class_label
            )
            vecs.append(model.encode(volumes[r.volume_path]))
        return EmbeddingSet(tuple(ids), tuple(labels), np.stack(vecs))

    val_ext_recs = [r for r in val_recs if r.class_label in (low, high)]
    # train_ext labels were already remapped to {0, 1} by the selection
    train_extremes = embed(train_ext, remap=False)
    val_extremes = embed(val_ext_recs, remap=True)
    acc_mean, acc_std, acc_vals = evaluate_with_seeds(
        val_extremes.vectors, val_extremes.labels, n_seeds
    )

    rmses, ssims = [], []
    ids, labels, vecs = [], [], []
    for r in val_recs:
        vol = volumes[r.volume_path]
        z, recon = model.forward(vol)
        rmses.append(rmse_percent(vol, recon))
        ssims.append(ssim(vol, recon))
        ids.append(r.subject_id)
        labels.append(r.class_label)
        vecs.append(z)
    val_all = EmbeddingSet(tuple(ids), tuple(labels), np.stack(vecs))
    by_class: dict[int, list[np.ndarray]] = {}
    for label, vec in zip(val_all.labels, val_all.vectors):
        by_class.setdefault(label, []).append(vec)
    cent = centroid_matrix(
        {lab: np.stack(v) for lab, v in by_class.items()}, (low, high)
    )

    report = FoldReport(
        fold=fold_idx,
        accuracy_mean=acc_mean,
        accuracy_std=acc_std,
        accuracy_values=tuple(acc_vals),
        rmse_percent=float(np.mean(rmses)),
        ssim=float(np.mean(ssims)),
    )
    artifacts = FoldArtifacts(
        fold=fold_idx,
        model=model,
        trace=tuple(trace),
        train_extremes=train_extremes,
        val_extremes=val_extremes,
        val_all=val_all,
        centroids=cent,
    )
    return report, artifacts


def evaluate_models(
    records: list[CaseRecord],
    models: list[Model],
    *,
    k_folds: int,
    fold_seed: int,
    n_seeds: int = 10,
    extreme_low: int = 0,
    extreme_high: int = 4,
    traces=None,
    log=None,
) -> tuple[EvalReport, list[FoldArtifacts]]:
    """Evaluate one already-trained model per fold.

    Per fold: K-means accuracy on held-out extreme-grade embeddings over
    ``n_seeds`` seeds, RMSE%/SSIM over all held-out reconstructions, and
    the grade-centroid matrix.  The summary pools accuracy over
    fold x seed, averages RMSE%/SSIM over folds, and averages the
    normalized centroid matrices entrywise.
    """
    split = group_kfold(records, k_folds, fold_seed)
    if len(models) != k_folds:
        raise UsageError(f"{len(models)} models for {k_folds} folds")
    if traces is None:
        traces = [()] * k_folds
    volumes = {r.volume_path: read_volume(r.volume_path) for r in records}
    low, high = extreme_low, extreme_high

    fold_reports: list[FoldReport] = []
    artifacts: list[FoldArtifacts] = []
    matrices: list[np.ndarray] = []
    classes_ref: tuple[int, ...] | None = None

    for fold_idx, (train_recs, val_recs) in enumerate(split):
        train_ext = select_training_extremes(list(train_recs), low, high)
        rep, art = _eval_fold(
            models[fold_idx],
            train_ext,
            val_recs,
            volumes,
            low,
            high,
            n_seeds,
            fold_idx,
            traces[fold_idx],
        )
        if classes_ref is None:
            classes_ref = art.centroids.classes
        elif art.centroids.classes != classes_ref:
            raise DataError(
                f"fold {fold_idx} classes {art.centroids.classes} != {classes_ref}"
            )
        matrices.append(art.centroids.matrix)
        fold_reports.append(rep)
        artifacts.append(art)
        if log:
            log(
                f"fold {fold_idx}: accuracy "
                f"{format_accuracy(rep.accuracy_mean, rep.accuracy_std)}, "
                f"rmse% {rep.rmse_percent:.2f}, ssim {rep.ssim:.4f}"
            )

    pooled = np.array([v for f in fold_reports for v in f.accuracy_values])
    mean_matrix = np.mean(matrices, axis=0)
    report = EvalReport(
        folds=tuple(fold_reports),
        clustering_accuracy_mean=float(pooled.mean()),
        clustering_accuracy_std=float(pooled.std()),
        rmse_percent=float(np.mean([f.rmse_percent for f in fold_reports])),
        ssim=float(np.mean([f.ssim for f in fold_reports])),
        centroids=CentroidMatrix(classes_ref, mean_matrix, (low, high)),
    )
    return report, artifacts


def run_pipeline(
    records: list[CaseRecord], cfg: PipelineConfig, log=None
) -> tuple[EvalReport, list[FoldArtifacts]]:
    """Train per fold on extreme grades, then run the fold evaluation.

    Fold f trains from initialization seed ``init_seed + f`` with
    optimization seed ``train.rng_seed + f``.
    """
    split = group_kfold(records, cfg.k_folds, cfg.fold_seed)
    volumes = {r.volume_path: read_volume(r.volume_path) for r in records}
    models, traces = [], []
    for fold_idx, (train_recs, _) in enumerate(split):
        if log:
            log(f"fold {fold_idx}: training on {len(train_recs)} cases")
        train_ext = select_training_extremes(
            list(train_recs), cfg.extreme_low, cfg.extreme_high
        )
        traincases = [
            TrainCase(r.subject_id, r.class_label, volumes[r.volume_path])
            for r in train_ext
        ]
        model = build(cfg.network, cfg.init_seed + fold_idx)
        fold_train_cfg = dataclasses.replace(
            cfg.train, rng_seed=cfg.train.rng_seed + fold_idx
        )
        model, trace = fit(model, traincases, fold_train_cfg)
        models.append(model)
        traces.append(trace)
    return evaluate_models(
        records,
        models,
        k_folds=cfg.k_folds,
        fold_seed=cfg.fold_seed,
        n_seeds=cfg.n_seeds,
        extreme_low=cfg.extreme_low,
        extreme_high=cfg.extreme_high,
        traces=traces,
        log=log,
    )


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------


def write_report(report: EvalReport, path) -> None:
    """Per-fold rows plus a summary row as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["fold", "accuracy_mean", "accuracy_std", "rmse_percent", "ssim"]
        )
        for f in report.folds:
            writer.writerow(
                [
                    f.fold,
                    f"{f.accuracy_mean:.6g}",
                    f"{f.accuracy_std:.6g}",
                    f"{f.rmse_percent:.6g}",
                    f"{f.ssim:.6g}",
                ]
            )
        writer.writerow(
            [
                "summary",
                f"{report.clustering_accuracy_mean:.6g}",
                f"{report.clustering_accuracy_std:.6g}",
                f"{report.rmse_percent:.6g}",
                f"{report.ssim:.6g}",
            ]
        )


def write_seed_accuracies(report: EvalReport, path) -> None:
    """Per-seed accuracy values as CSV (fold, seed, accuracy)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "seed", "accuracy"])
        for f in report.folds:
            for seed, value in enumerate(f.accuracy_values):
                writer.writerow([f.fold, seed, f"{value:.6g}"])


def write_projection(embedding_set: EmbeddingSet, path) -> None:
    """2D PCA coordinates as CSV (case_id, label, u, v)."""
    coords = project_2d(embedding_set.vectors)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "label", "u", "v"])
        for cid, label, (u, v) in zip(
            embedding_set.case_ids, embedding_set.labels, coords
        ):
            writer.writerow([cid, label, f"{u:.10g}", f"{v:.10g}"])


def write_centroid_matrix(cent: CentroidMatrix, path) -> None:
    """Normalized centroid distances as CSV with a class header row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class"] + [str(c) for c in cent.classes])
        for label, row in zip(cent.classes, cent.matrix):
            writer.writerow([label] + [f"{v:.6g}" for v in row])


def format_summary(rows: dict[str, EvalReport]) -> str:
    """Plain-text metric table, one row per labeled report."""
    lines = [f"{'model':<12} {'accuracy':>14} {'rmse%':>8} {'ssim':>8}"]
    for name, report in rows.items():
        acc = format_accuracy(
            report.clustering_accuracy_mean, report.clustering_accuracy_std
        )
        lines.append(
            f"{name:<12} {acc:>14} {report.rmse_percent:>8.2f} {report.ssim:>8.4f}"
        )
    return "\n".join(lines)
