"""Training objectives: reconstruction, KL, and the entropy-based local loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import LatentCode, LatentDistribution, LocVAE, reparameterize
from .tensor import Tensor


@dataclass(frozen=True)
class Hyperparameters:
    beta: float = 1.0
    gamma: float = 0.1
    phi_amplitude: float = 1.0
    local_dims_per_step: int = 1
    # "sum": each difference field is scaled by its own total.
    # "dataset_minmax": experimental; each voxel is first rescaled by
    # per-voxel bounds from ``voxel_range`` before the sum normalization.
    normalization: str = "sum"

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be nonnegative")
        if not self.phi_amplitude > 0:
            raise ValueError("phi_amplitude must be positive")
        if self.local_dims_per_step < 1:
            raise ValueError("local_dims_per_step must be >= 1")
        if self.normalization not in ("sum", "dataset_minmax"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    def check_latent_dim(self, latent_dim: int) -> None:
        if self.local_dims_per_step > latent_dim:
            raise ValueError(f"local_dims_per_step {self.local_dims_per_step} exceeds latent_dim {latent_dim}")


@dataclass
class DifferenceImage:
    raw: Tensor  # |x - x'|, (N, D, H, W)
    prob: Tensor  # per-sample unit-sum field
    entropy: Tensor  # (N,) nats


@dataclass
class LossBreakdown:
    # every term already carries its weight, so the fields sum to ``total``
    recon: float
    kl: float
    local: float
    total: float


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def reconstruction_loss(x, x_hat: Tensor) -> Tensor:
    """Mean squared error over all voxels (and the batch)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    _same_shape(x, x_hat)
    return T.mean(T.square(T.sub(x_hat, x)))


def kl_divergence(dist: LatentDistribution) -> Tensor:
    """KL(q || N(0, I)) summed over dimensions, averaged over the batch."""
    mu, sigma = dist.mu, dist.sigma
    n = mu.shape[0] if mu.data.ndim == 2 else 1
    log_sigma = T.mul(dist.logvar, 0.5) if dist.logvar is not None else T.log(sigma)
    terms = T.sub(T.add(T.square(mu), T.square(sigma)), T.add(T.mul(log_sigma, 2.0), 1.0))
    return T.mul(T.sum(terms), 0.5 / n)


def entropy_of_field(field: np.ndarray) -> float:
    """Entropy (nats) of a nonnegative field read as a distribution.

    Plain numpy, no graph; an all-zero field counts as uniform.
    """
    f = np.asarray(field, dtype=np.float64).ravel()
    total = f.sum()
    if total <= 0:
        return float(np.log(f.size))
    p = f / total
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def _onehot(n: int, latent_dim: int, dims, amplitude) -> np.ndarray:
    dims = np.broadcast_to(np.asarray(dims, dtype=np.int64), (n,))
    if np.any(dims < 0) or np.any(dims >= latent_dim):
        raise ValueError(f"perturbed dimension out of range [0, {latent_dim})")
    phi = np.zeros((n, latent_dim))
    phi[np.arange(n), dims] = np.broadcast_to(np.asarray(amplitude, dtype=np.float64), (n,))
    return phi


def entropy_from_raw(raw: Tensor, voxel_range: tuple[np.ndarray, np.ndarray] | None = None) -> DifferenceImage:
    field = raw
    if voxel_range is not None:
        lo, hi = voxel_range
        scale = np.where(hi > lo, 1.0 / np.maximum(hi - lo, 1e-12), 0.0)
        field = T.mul(raw, Tensor(np.broadcast_to(scale, raw.shape)))
    prob = T.normalize_per_sample(field)
    entropy = T.mul(T.sum_per_sample(T.xlogx(prob), exact=True), -1.0)
    return DifferenceImage(raw, prob, entropy)


def difference_image(
    model: LocVAE,
    z,
    dim,
    phi_amplitude,
    x: Tensor | None = None,
    voxel_range=None,
) -> DifferenceImage:
    """|decode(z) - decode(z + phi e_dim)| with its probability form and entropy.

    ``z`` may be a single code ``(d',)`` or a batch ``(N, d')``; ``dim`` and
    ``phi_amplitude`` are scalars or per-sample arrays.  Pass ``x`` to reuse
    an existing ``decode(z)``.
    """
    if isinstance(z, LatentCode):
        z = z.z
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.data.ndim == 1:
        z = T.reshape(z, (1, z.shape[0]))
    n, d = z.shape
    phi = _onehot(n, d, dim, phi_amplitude)
    if x is None:
        x = model.decode(z)
    x_pert = model.decode(T.add(z, Tensor(phi)))
    raw = T.abs(T.sub(x, x_pert))
    return entropy_from_raw(raw, voxel_range)


def pick_dims(rng: np.random.Generator, n: int, latent_dim: int, per_sample: int) -> np.ndarray:
    """(N, per_sample) distinct dimensions per sample, uniformly at random."""
    return np.stack([rng.choice(latent_dim, size=per_sample, replace=False) for _ in range(n)])


def local_loss(
    model: LocVAE,
    z,
    rng: np.random.Generator,
    hyp: Hyperparameters,
    x: Tensor | None = None,
    voxel_range=None,
) -> Tensor:
    """gamma * mean entropy of difference images over sampled dimensions."""
    if isinstance(z, LatentCode):
        z = z.z
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.data.ndim == 1:
        z = T.reshape(z, (1, z.shape[0]))
    n, d = z.shape
    hyp.check_latent_dim(d)
    dims = pick_dims(rng, n, d, hyp.local_dims_per_step)
    if hyp.gamma == 0:
        return Tensor(0.0)
    if x is None:
        x = model.decode(z)
    total = None
    for j in range(hyp.local_dims_per_step):
        diff = difference_image(model, z, dims[:, j], hyp.phi_amplitude, x=x, voxel_range=voxel_range)
        s = T.sum(diff.entropy)
        total = s if total is None else T.add(total, s)
    return T.mul(total, hyp.gamma / (n * hyp.local_dims_per_step))


def total_loss(
    x,
    model: LocVAE,
    rng: np.random.Generator,
    hyp: Hyperparameters,
    eps=None,
    voxel_range=None,
) -> tuple[Tensor, LossBreakdown]:
    """reconstruction + beta * KL (+ local loss for the LocVAE variant).

    One reparameterized sample per input drives both the reconstruction and
    the local term.
    """
    xt = model._as_batch(x)
    dist = model.encode(xt)
    code = reparameterize(dist, rng, eps=eps)
    x_hat = model.decode(code)
    target = T.reshape(xt, x_hat.shape)
    recon = reconstruction_loss(target, x_hat)
    kl = kl_divergence(dist)
    loss = T.add(recon, T.mul(kl, hyp.beta))
    local_value = 0.0
    if model.config.variant == "LocVAE":
        local = local_loss(model, code, rng, hyp, x=x_hat, voxel_range=voxel_range)
        loss = T.add(loss, local)
        local_value = local.item()
    breakdown = LossBreakdown(recon.item(), hyp.beta * kl.item(), local_value, loss.item())
    return loss, breakdown
