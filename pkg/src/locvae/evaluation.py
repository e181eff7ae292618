"""Reconstruction fidelity, per-dimension locality, latent classification, and figure data."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import rankdata

from . import retrieval
from . import tensor as T
from .data import Dataset
from .losses import entropy_from_raw
from .model import LocVAE
from .tensor import Tensor

SSIM_WINDOW = 7
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PERTURBATION_WIDTH = 3.0
METRICS_FIELDS = ["variant", "rmse", "ssim", "entropy", "auc"]


@dataclass
class MetricsRow:
    variant: str
    rmse: float
    ssim: float
    entropy: float
    auc: float

    def __post_init__(self):
        if self.rmse < 0 or not -1 <= self.ssim <= 1 or not 0 <= self.auc <= 1:
            raise ValueError(f"metrics out of range: {self}")

    def as_list(self) -> list:
        return [self.variant, repr(self.rmse), repr(self.ssim), repr(self.entropy), repr(self.auc)]


@dataclass
class LocalityReport:
    variant: str
    per_dim: np.ndarray  # mean entropy per latent dimension
    per_fold: list[np.ndarray] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_dim))

    def quartiles(self) -> tuple[float, float, float]:
        q1, med, q3 = np.percentile(self.per_dim, [25, 50, 75])
        return float(q1), float(med), float(q3)


# ---------------------------------------------------------------------------
# (a) reconstruction


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def rmse(x, x_hat) -> float:
    x, x_hat = _check_pair(x, x_hat)
    return float(np.sqrt(np.mean((x - x_hat) ** 2)))


def ssim3d(x, y, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over every full ``window``^3 cube (uniform weights, L = 1).

    Variances use the sample (n - 1) normalisation.
    """
    x, y = _check_pair(x, y)
    if x.ndim != 3 or min(x.shape) < window:
        raise ValueError(f"volume {x.shape} is smaller than the {window}^3 window")
    axes = (-3, -2, -1)
    wx = sliding_window_view(x, (window,) * 3)
    wy = sliding_window_view(y, (window,) * 3)
    n = window**3
    mx, my = wx.mean(axis=axes), wy.mean(axis=axes)
    cov_norm = n / (n - 1)
    vx = cov_norm * ((wx * wx).mean(axis=axes) - mx * mx)
    vy = cov_norm * ((wy * wy).mean(axis=axes) - my * my)
    vxy = cov_norm * ((wx * wy).mean(axis=axes) - mx * my)
    num = (2 * mx * my + SSIM_C1) * (2 * vxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# (b) locality


def _perturbation_pairs(mu: np.ndarray, sigma: np.ndarray, dims, width: float) -> np.ndarray:
    codes = []
    for j in dims:
        step = np.zeros_like(mu)
        step[j] = width * sigma[j]
        codes.extend([mu + step, mu - step])
    return np.stack(codes)


def locality_entropies(model: LocVAE, mu: np.ndarray, sigma: np.ndarray, width: float = PERTURBATION_WIDTH) -> np.ndarray:
    """(n_volumes, d') entropies of |decode(mu + w sigma_j e_j) - decode(mu - w sigma_j e_j)|."""
    n, d = mu.shape
    out = np.empty((n, d))
    with T.no_grad():
        for i in range(n):
            pairs = model.decode(_perturbation_pairs(mu[i], sigma[i], range(d), width)).data
            raw = np.abs(pairs[0::2] - pairs[1::2])
            out[i] = entropy_from_raw(Tensor(raw)).entropy.data
    return out


def locality_entropy(model: LocVAE, volume, dim: int, width: float = PERTURBATION_WIDTH) -> float:
    """Entropy of the +-3 sigma difference image of one latent dimension at z = mu."""
    d = model.config.latent_dim
    if not 0 <= dim < d:
        raise ValueError(f"dim {dim} outside [0, {d})")
    mu, sigma = retrieval.encode_means(model, np.asarray(volume)[None])
    with T.no_grad():
        pair = model.decode(_perturbation_pairs(mu[0], sigma[0], [dim], width)).data
    raw = np.abs(pair[0] - pair[1])[None]
    return float(entropy_from_raw(Tensor(raw)).entropy.data[0])


# ---------------------------------------------------------------------------
# (c) classification


def auc_score(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted one half; ``labels`` are 0/1."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    center: np.ndarray
    scale: np.ndarray
    iterations: int

    def decision(self, X) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.center) / self.scale
        return Z @ self.weights + self.bias


def fit_logistic(X, y, l2: float = 1e-4, tol: float = 1e-6, max_iter: int = 10_000) -> LogisticModel:
    """Full-batch gradient descent on the mean log-loss plus ``l2/2 |w|^2``.

    Features are standardised with the training statistics; the step size is
    the inverse Lipschitz constant of the gradient.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise ValueError("logistic regression needs both classes in the training set")
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = np.hstack([(X - center) / scale, np.ones((len(X), 1))])
    n, p = Z.shape
    lipschitz = 0.25 * np.linalg.eigvalsh(Z.T @ Z / n).max() + l2
    lr = 1.0 / lipschitz
    reg = np.full(p, l2)
    reg[-1] = 0.0
    theta = np.zeros(p)
    it = 0
    for it in range(1, max_iter + 1):
        s = Z @ theta
        prob = np.exp(-np.logaddexp(0.0, -s))
        grad = Z.T @ (prob - y) / n + reg * theta
        if np.linalg.norm(grad) < tol:
            break
        theta -= lr * grad
    return LogisticModel(theta[:-1], float(theta[-1]), center, scale, it)


def fit_logistic_auc(train_X, train_y, test_X, test_y) -> float:
    if len(np.unique(test_y)) < 2:
        raise ValueError("test set needs both classes")
    clf = fit_logistic(train_X, train_y)
    return auc_score(clf.decision(test_X), test_y)


# ---------------------------------------------------------------------------
# figure data


def mean_difference_map(volumes: np.ndarray, labels) -> np.ndarray:
    """Voxel-wise mean over AD volumes minus mean over CN volumes."""
    labels = np.asarray(labels)
    ad, cn = labels == "AD", labels == "CN"
    if not ad.any() or not cn.any():
        raise ValueError("both AD and CN volumes are required")
    return volumes[ad].mean(axis=0) - volumes[cn].mean(axis=0)


def dataset_mean_difference(dataset: Dataset) -> np.ndarray:
    return mean_difference_map(dataset.stack(dataset.records), [r.label for r in dataset.records])


def discriminative_dim(mu: np.ndarray, labels) -> int:
    """Latent dimension with the largest |mean mu_AD - mean mu_CN|."""
    labels = np.asarray(labels)
    if mu.shape[1] == 1:
        return 0
    gap = np.abs(mu[labels == "AD"].mean(axis=0) - mu[labels == "CN"].mean(axis=0))
    return int(np.argmax(gap))


def saliency_map(model: LocVAE, reference: retrieval.Index, volume) -> tuple[int, np.ndarray]:
    """(dim, map): the AD/CN-discriminative dimension of ``reference`` and its
    +-3 sigma difference field for ``volume``."""
    labels = [e.label for e in reference.entries]
    dim = discriminative_dim(reference.matrix, labels)
    mu, sigma = retrieval.encode_means(model, np.asarray(volume)[None])
    return dim, retrieval.saliency_field(model, mu[0], sigma[0], dim, PERTURBATION_WIDTH)


def mass_centroid(field: np.ndarray) -> np.ndarray:
    w = np.asarray(field, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return (np.array(w.shape) - 1) / 2.0
    grids = np.meshgrid(*(np.arange(s) for s in w.shape), indexing="ij")
    return np.array([(g * w).sum() / total for g in grids])


def centroid_in_lesion(field: np.ndarray, record) -> bool:
    lo, hi = record.lesion_bbox()
    c = mass_centroid(field)
    return bool(np.all(c >= lo) and np.all(c <= hi))


# ---------------------------------------------------------------------------
# per-variant cross-validated evaluation


@dataclass
class FoldResult:
    fold: int
    rmse: float
    ssim: float
    entropy_per_dim: np.ndarray
    auc: float
    saliency_dim: int
    saliency_hits: int
    saliency_total: int


@dataclass
class VariantEvaluation:
    metrics: MetricsRow
    locality: LocalityReport
    folds: list[FoldResult]

    @property
    def saliency_hit_rate(self) -> float:
        hits = sum(f.saliency_hits for f in self.folds)
        total = sum(f.saliency_total for f in self.folds)
        return hits / total if total else float("nan")


def fold_dir(variant_dir, fold: int) -> Path:
    return Path(variant_dir) / f"fold_{fold}"


def evaluate_fold(model: LocVAE, train_index: retrieval.Index, dataset: Dataset, fold: int, n_trials: int, seed: int) -> FoldResult:
    """Metrics on the held-out scans of ``fold``; only held-out volumes are read."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    _, held = dataset.split(fold)
    volumes = dataset.stack(held)
    mu, sigma = retrieval.encode_means(model, volumes)

    rng = np.random.default_rng(np.random.SeedSequence([seed, fold]))
    rmses, ssims = [], []
    for _ in range(n_trials):
        z = mu + rng.standard_normal(mu.shape) * sigma
        with T.no_grad():
            recon = np.concatenate([model.decode(z[i : i + 32]).data for i in range(0, len(z), 32)])
        rmses.append(np.mean([rmse(v, r) for v, r in zip(volumes, recon)]))
        ssims.append(np.mean([ssim3d(v, r) for v, r in zip(volumes, recon)]))

    ent = locality_entropies(model, mu, sigma)
    labels = np.array([r.label == "AD" for r in held], dtype=np.int64)
    auc = fit_logistic_auc(train_index.matrix, train_index.labels(), mu, labels)

    dim = discriminative_dim(train_index.matrix, [e.label for e in train_index.entries])
    hits = total = 0
    for i, r in enumerate(held):
        if r.is_ad:
            total += 1
            hits += centroid_in_lesion(retrieval.saliency_field(model, mu[i], sigma[i], dim, PERTURBATION_WIDTH), r)
    return FoldResult(fold, float(np.mean(rmses)), float(np.mean(ssims)), ent.mean(axis=0), auc, dim, hits, total)


def evaluate_variant(variant: str, variant_dir, dataset: Dataset, n_trials: int = 10, seed: int = 0) -> VariantEvaluation:
    """Average fold metrics of the checkpoints in ``variant_dir/fold_<k>/``."""
    results = []
    for fold in range(dataset.folds.k):
        d = fold_dir(variant_dir, fold)
        ckpt, idx = d / "checkpoint.lvae", d / "train_index.lidx"
        if not ckpt.exists() or not idx.exists():
            raise FileNotFoundError(f"missing checkpoint or training index for fold {fold} in {variant_dir}")
        model = LocVAE.load(ckpt)
        results.append(evaluate_fold(model, retrieval.read_index(idx), dataset, fold, n_trials, seed))
    return summarize(variant, results)


def summarize(variant: str, results: list[FoldResult]) -> VariantEvaluation:
    per_dim = np.mean([r.entropy_per_dim for r in results], axis=0)
    row = MetricsRow(
        variant,
        float(np.mean([r.rmse for r in results])),
        float(np.mean([r.ssim for r in results])),
        float(np.mean([r.entropy_per_dim.mean() for r in results])),
        float(np.mean([r.auc for r in results])),
    )
    return VariantEvaluation(row, LocalityReport(variant, per_dim, [r.entropy_per_dim for r in results]), results)


# ---------------------------------------------------------------------------
# CSV emission


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_FIELDS)
        for r in rows:
            w.writerow(r.as_list())


def write_locality_csv(path, reports: list[LocalityReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "dim", "entropy"])
        for rep in reports:
            for j, e in enumerate(rep.per_dim):
                w.writerow([rep.variant, j, repr(float(e))])


def write_boxplot_csv(path, reports: list[LocalityReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "min", "q1", "median", "q3", "max"])
        for rep in reports:
            q1, med, q3 = rep.quartiles()
            w.writerow([rep.variant, repr(float(rep.per_dim.min())), repr(q1), repr(med), repr(q3), repr(float(rep.per_dim.max()))])


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        return [
            MetricsRow(r["variant"], float(r["rmse"]), float(r["ssim"]), float(r["entropy"]), float(r["auc"]))
            for r in csv.DictReader(fh)
        ]
