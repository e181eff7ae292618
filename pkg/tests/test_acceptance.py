"""Acceptance checks. Each test records a PASS/FAIL line shown in the terminal summary.

The compare-based checks (4-7, 10) train both variants on the full desk dataset twice,
so this module dominates the suite's runtime.
"""
import csv
import hashlib
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import entropy as scipy_entropy

from locvae import cli, losses, retrieval
from locvae import tensor as T
from locvae.data import DatasetManifest, build_dataset
from locvae.evaluation import auc_score, read_metrics_csv
from locvae.model import LatentDistribution, LocVAE, ModelConfig
from locvae.retrieval import Index, IndexEntry
from locvae.tensor import Tensor
from oracles import brute_force_knn, central_difference, kl_monte_carlo, loss_gradient_sample, pair_count_auc, relative_error

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"

OPS = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: T.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (3, 4)]),
    "square": (T.square, [(3, 4)]),
    "abs": (T.abs, [(3, 4)]),
    "exp": (T.exp, [(3, 4)]),
    "log": (T.log, [(3, 4)]),
    "relu": (T.relu, [(3, 4)]),
    "sigmoid": (T.sigmoid, [(3, 4)]),
    "xlogx": (T.xlogx, [(3, 4)]),
    "sum": (lambda a: T.sum(a, axis=1), [(3, 4)]),
    "mean": (T.mean, [(3, 4)]),
    "sum_per_sample": (T.sum_per_sample, [(2, 3, 4)]),
    "sum_per_sample_exact": (lambda a: T.sum_per_sample(a, exact=True), [(2, 3, 4)]),
    "reshape": (lambda a: T.reshape(a, (4, 3)), [(3, 4)]),
    "normalize_per_sample": (T.normalize_per_sample, [(2, 6)]),
    "conv3d": (lambda x, w, b: T.conv3d(x, w, b, stride=2, padding=1), [(1, 2, 5, 5, 5), (3, 2, 3, 3, 3), (3,)]),
    "conv3d_transpose": (lambda x, w, b: T.conv3d_transpose(x, w, b, padding=1), [(1, 3, 3, 3, 3), (3, 2, 3, 3, 3), (2,)]),
    "avg_pool3d": (lambda a: T.avg_pool3d(a, 2), [(1, 2, 4, 4, 4)]),
    "upsample_nearest3d": (lambda a: T.upsample_nearest3d(a, 2), [(1, 2, 2, 2, 2)]),
}
POSITIVE_INPUTS = {"log", "xlogx", "normalize_per_sample"}
KINKED = {"abs", "relu"}


def op_inputs(name, shapes, r):
    if name in POSITIVE_INPUTS:
        return [r.uniform(0.2, 2.0, s) for s in shapes]
    xs = [r.standard_normal(s) for s in shapes]
    if name in KINKED:
        # keep samples away from the kink so the finite difference is valid
        xs = [x + 0.2 * np.sign(x) for x in xs]
    return xs


def op_error(name, seed):
    fn, shapes = OPS[name]
    r = np.random.default_rng(seed)
    params = [T.parameter(x) for x in op_inputs(name, shapes, r)]
    out = fn(*params)
    w = r.standard_normal(out.shape)
    T.sum(T.mul(out, Tensor(w))).backward()
    worst = 0.0
    for p in params:
        f = lambda: float(np.sum(fn(*[Tensor(q.data) for q in params]).data * w))  # noqa: E731
        worst = max(worst, relative_error(p.grad, central_difference(f, p.data)))
    return worst


def test_criterion_01_gradient_checks(verdict):
    start = time.perf_counter()
    per_op = {name: max(op_error(name, s) for s in range(10)) for name in OPS}
    end_to_end = []
    for seed in range(10):
        a, n = loss_gradient_sample(seed, n_params=30)
        end_to_end.append(relative_error(a, n))
    elapsed = time.perf_counter() - start
    worst_op = max(per_op, key=per_op.get)
    ok = per_op[worst_op] < 1e-4 and max(end_to_end) < 1e-3 and elapsed < 120
    verdict(1, ok, f"worst op {worst_op} rel={per_op[worst_op]:.1e} (<1e-4), "
                   f"loss rel={max(end_to_end):.1e} (<1e-3), {len(OPS)} ops x10 + 10 losses in {elapsed:.0f}s (<120s)")
    assert ok


def test_criterion_02_kl_against_monte_carlo(verdict):
    rng = np.random.default_rng(20)
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 9))
        mu, sigma = rng.normal(0, 1.5, d), rng.uniform(0.2, 2.5, d)
        closed = losses.kl_divergence(LatentDistribution(Tensor(mu[None]), Tensor(sigma[None]))).item()
        mc = kl_monte_carlo(mu, sigma, 1_000_000, rng)
        worst = max(worst, abs(mc - closed) / closed)
    ok = worst < 0.01
    verdict(2, ok, f"worst relative gap {worst:.2e} over 20 distributions (<1e-2)")
    assert ok


def test_criterion_03_entropy_bounds_and_oracles(verdict):
    rng = np.random.default_rng(30)
    in_bounds, worst = True, 0.0
    for _ in range(50):
        raw = rng.uniform(size=(2, 16, 16, 16)) ** rng.uniform(1, 20)
        raw[raw < rng.uniform(0, 0.5)] = 0.0
        got = losses.entropy_from_raw(Tensor(raw)).entropy.data
        for i in range(2):
            in_bounds &= 0.0 <= got[i] <= np.log(raw[i].size)
            worst = max(worst, abs(got[i] - scipy_entropy(raw[i].ravel())))
    # difference images from a real decoder, perturbed along each latent dimension
    m = LocVAE(ModelConfig(), seed=3)
    z = rng.standard_normal((4, 8))
    for dim in range(8):
        diff = losses.difference_image(m, z, dim, 1.0)
        for i in range(4):
            h = diff.entropy.data[i]
            in_bounds &= 0.0 <= h <= np.log(4096)
            worst = max(worst, abs(h - scipy_entropy(np.abs(diff.raw.data[i]).ravel())))
    uniform = losses.entropy_from_raw(Tensor(np.full((1, 16, 16, 16), 0.37))).entropy.data[0]
    one = np.zeros((1, 16, 16, 16))
    one[0, 5, 9, 2] = 0.4
    onehot = losses.entropy_from_raw(Tensor(one)).entropy.data[0]
    ok = in_bounds and uniform == np.log(4096) and onehot == 0.0 and worst <= 1e-10
    verdict(3, ok, f"bounds held={in_bounds}, uniform-ln N={uniform - np.log(4096):.1e}, "
                   f"one-hot={onehot + 0.0}, oracle gap {worst:.1e} (<=1e-10)")
    assert ok


@pytest.fixture(scope="module")
def compare_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    assert cli.main(["generate", "--config", str(DESK), "--out", str(root / "data")]) == 0
    times = []
    for name in ("run1", "run2"):
        start = time.perf_counter()
        assert cli.main(["compare", "--config", str(DESK), "--data", str(root / "data"), "--out", str(root / name)]) == 0
        times.append(time.perf_counter() - start)
    metrics = {r.variant: r for r in read_metrics_csv(root / "run1" / "metrics.csv")}
    return root, metrics, times


def test_criterion_04_locality_ordering(compare_runs, verdict):
    _, metrics, times = compare_runs
    gap = metrics["BetaVAE"].entropy - metrics["LocVAE"].entropy
    ok = gap >= 1.0 and times[0] < 3600
    verdict(4, ok, f"entropy BetaVAE={metrics['BetaVAE'].entropy:.3f} LocVAE={metrics['LocVAE'].entropy:.3f} "
                   f"gap={gap:.3f} (>=1.0), compare took {times[0] / 60:.1f} min (<60)")
    assert ok


def test_criterion_05_reconstruction_preserved(compare_runs, verdict):
    _, metrics, _ = compare_runs
    b, loc = metrics["BetaVAE"], metrics["LocVAE"]
    ratio = loc.rmse / b.rmse
    drop = b.ssim - loc.ssim
    ok = ratio <= 1.15 and drop <= 0.05
    verdict(5, ok, f"rmse {b.rmse:.4f} -> {loc.rmse:.4f} ratio={ratio:.3f} (<=1.15), "
                   f"ssim {b.ssim:.4f} -> {loc.ssim:.4f} drop={drop:.4f} (<=0.05)")
    assert ok


def test_criterion_06_diagnostic_information(compare_runs, verdict):
    _, metrics, _ = compare_runs
    b, loc = metrics["BetaVAE"].auc, metrics["LocVAE"].auc
    ok = b >= 0.85 and loc >= 0.85 and abs(b - loc) <= 0.05
    verdict(6, ok, f"auc BetaVAE={b:.3f} LocVAE={loc:.3f} (both >=0.85, |diff|={abs(b - loc):.3f} <=0.05)")
    assert ok


def test_criterion_07_saliency_alignment(compare_runs, verdict):
    root, _, _ = compare_runs
    with open(root / "run1" / "saliency.csv", newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["variant"] == "LocVAE"]
    hits, total = sum(int(r["hits"]) for r in rows), sum(int(r["total"]) for r in rows)
    rate = hits / total
    ok = rate >= 0.8
    verdict(7, ok, f"LocVAE centroid in lesion box on {hits}/{total} held-out AD scans = {rate:.2f} (>=0.80)")
    assert ok


def test_criterion_08_retrieval_exactness(verdict):
    r = np.random.default_rng(80)
    mismatches = 0
    for _ in range(100):
        n, d = int(r.integers(1, 80)), int(r.integers(1, 9))
        mus = r.integers(-2, 3, (n, d)).astype(float) if r.random() < 0.3 else r.standard_normal((n, d))
        idx = Index([IndexEntry(i // 3, i % 3, "CN" if i % 2 else "AD", mus[i]) for i in range(n)], d)
        q, k = r.standard_normal(d), int(r.integers(1, n + 5))
        got = [e.ref for e, _ in retrieval.query_mu(idx, q, k)]
        mismatches += got != brute_force_knn(idx.entries, q, k)
        j = int(r.integers(n))
        (hit, dist), *_ = retrieval.query_mu(idx, mus[j], 1)
        mismatches += dist != 0.0 or not np.array_equal(hit.mu, mus[j])
    # self-query through the encoder on real volumes
    ds = build_dataset(DatasetManifest(n_cn=3, n_ad=3, scans_per_subject=2, folds=2))
    m = LocVAE(ModelConfig(), seed=8)
    idx = retrieval.build_index(m, ds)
    for rec in ds.records:
        (hit, dist), *_ = retrieval.query(idx, m, ds.volume(rec), 1)
        mismatches += hit.ref != (rec.subject_id, rec.scan_id) or dist != 0.0
    ok = mismatches == 0
    verdict(8, ok, f"{mismatches} mismatches over 100 random indices and {len(ds)} encoder self-queries")
    assert ok


def test_criterion_09_auc_oracle(verdict):
    r = np.random.default_rng(90)
    mismatches = 0
    for i in range(50):
        n = int(r.integers(2, 120))
        labels = r.integers(0, 2, n)
        labels[:2] = [0, 1]
        # every third set is coarse so ties are common
        scores = r.integers(0, 5, n).astype(float) if i % 3 == 0 else r.standard_normal(n)
        mismatches += auc_score(scores, labels) != pair_count_auc(scores, labels)
    ok = mismatches == 0
    verdict(9, ok, f"{mismatches} inexact results over 50 score sets")
    assert ok


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def test_criterion_10_determinism(compare_runs, verdict):
    root, _, _ = compare_runs
    a, b = root / "run1", root / "run2"
    names = ["metrics.csv", "locality.csv"]
    names += sorted(str(p.relative_to(a)) for p in a.rglob("*") if p.suffix in (".lvae", ".lidx"))
    differing = [n for n in names if not (b / n).exists() or digest(a / n) != digest(b / n)]
    n_ckpt = sum(n.endswith(".lvae") for n in names)
    n_index = sum(n.endswith(".lidx") for n in names)
    ok = not differing and n_ckpt > 0 and n_index > 0
    verdict(10, ok, f"{len(names)} files compared ({n_ckpt} checkpoints, {n_index} indices), differing: {differing or 'none'}")
    assert ok
