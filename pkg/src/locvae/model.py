"""Encoder/decoder pair shared by the three model variants."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers
from . import tensor as T
from .layers import Conv3d, ParameterRegistry, ResidualBlock, TransposedConv3d
from .tensor import Tensor

VARIANTS = ("BetaVAE", "BetaVAETW", "LocVAE")
VARIANT_LABELS = {"BetaVAE": "β-VAE", "BetaVAETW": "β-VAE (TW)", "LocVAE": "Loc-VAE"}
POOL = 2


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (16, 16, 16)
    stem_channels: int = 8
    stage_channels: tuple[int, ...] = (8, 8, 8)
    blocks_per_stage: tuple[int, ...] = (2, 2, 1)
    latent_grid: tuple[int, int, int] = (2, 2, 2)
    variant: str = "LocVAE"
    tied_weights: bool = True
    activation: str = "relu"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "stage_channels", tuple(int(v) for v in self.stage_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(int(v) for v in self.blocks_per_stage))
        object.__setattr__(self, "latent_grid", tuple(int(v) for v in self.latent_grid))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "LocVAE" and not self.tied_weights:
            raise ValueError("the LocVAE variant requires tied_weights = true")
        if self.variant == "BetaVAETW" and not self.tied_weights:
            raise ValueError("the BetaVAETW variant is defined by tied weights")
        if len(self.stage_channels) != len(self.blocks_per_stage) or not self.stage_channels:
            raise ValueError("stage_channels and blocks_per_stage must be non-empty and equally long")
        if min(self.blocks_per_stage) < 1 or self.stem_channels < 1 or min(self.stage_channels) < 1:
            raise ValueError("channel counts and block counts must be positive")
        if len(self.input_shape) != 3 or len(self.latent_grid) != 3:
            raise ValueError("input_shape and latent_grid must have three extents")
        factor = POOL ** len(self.stage_channels)
        for s, g in zip(self.input_shape, self.latent_grid):
            if s % factor:
                raise ValueError(f"input extent {s} is not divisible by the pooling factor {factor}")
            if s // factor != g:
                raise ValueError(f"latent_grid {self.latent_grid} inconsistent with input {self.input_shape}")
        if self.activation not in layers.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in ("sigmoid", "identity"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @classmethod
    def for_variant(cls, variant: str, **kwargs) -> "ModelConfig":
        return cls(variant=variant, tied_weights=variant != "BetaVAE", **kwargs)

    @property
    def latent_dim(self) -> int:
        return int(np.prod(self.latent_grid))

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def compression_ratio(self) -> float:
        return self.voxel_count / self.latent_dim

    @property
    def conv_layer_count(self) -> int:
        """Encoder convolutions: stem, two per block, projections, two heads."""
        return 1 + 2 * sum(self.blocks_per_stage) + len(self._projections()) + 2

    def _projections(self) -> list[int]:
        prev, out = self.stem_channels, []
        for s, c in enumerate(self.stage_channels):
            if c != prev:
                out.append(s)
            prev = c
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LatentDistribution:
    mu: Tensor
    sigma: Tensor
    logvar: Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must have equal shapes")
        if np.any(self.sigma.data <= 0):
            raise ValueError("sigma must be strictly positive")


@dataclass
class LatentCode:
    z: Tensor

    def __post_init__(self):
        if not np.all(np.isfinite(self.z.data)):
            raise ValueError("latent code has non-finite entries")


class LocVAE:
    """3D convolutional VAE; the variant decides weight tying, the loss decides locality."""

    def __init__(self, config: ModelConfig, seed: int | None = 0):
        self.config = config
        self.registry = reg = ParameterRegistry()
        act = config.activation

        self.stem = Conv3d(reg, "enc.stem", 1, config.stem_channels, k=3)
        self.stages: list[list[ResidualBlock]] = []
        prev = config.stem_channels
        for s, (c, nblocks) in enumerate(zip(config.stage_channels, config.blocks_per_stage)):
            blocks = []
            for b in range(nblocks):
                name = f"enc.s{s}.b{b}"
                proj = Conv3d(reg, f"{name}.proj", prev, c, k=1) if prev != c else None
                blocks.append(ResidualBlock(Conv3d(reg, f"{name}.conv_a", prev, c), Conv3d(reg, f"{name}.conv_b", c, c), proj, act))
                prev = c
            self.stages.append(blocks)
        self.mu_head = Conv3d(reg, "enc.mu_head", prev, 1, k=1)
        self.logvar_head = Conv3d(reg, "enc.logvar_head", prev, 1, k=1)

        tie = config.tied_weights
        self.dec_in = Conv3d(reg, "dec.input", 1, prev, k=1)
        self.dec_stages: list[list[ResidualBlock]] = []
        for s in reversed(range(len(self.stages))):
            blocks = []
            for b in reversed(range(len(self.stages[s]))):
                enc = self.stages[s][b]
                name = f"dec.s{s}.b{b}"
                proj = TransposedConv3d(reg, f"{name}.proj", enc.shortcut, tie) if enc.shortcut is not None else None
                blocks.append(
                    ResidualBlock(
                        TransposedConv3d(reg, f"{name}.conv_b", enc.second, tie),
                        TransposedConv3d(reg, f"{name}.conv_a", enc.first, tie),
                        proj,
                        act,
                    )
                )
            self.dec_stages.append(blocks)
        self.dec_out = TransposedConv3d(reg, "dec.output", self.stem, tie)

        if seed is not None:
            layers.init_parameters(reg, seed)

    # -- forward passes -----------------------------------------------------

    def _act(self, x: Tensor) -> Tensor:
        return layers.ACTIVATIONS[self.config.activation](x)

    def _as_batch(self, volume) -> Tensor:
        x = volume if isinstance(volume, Tensor) else Tensor(volume)
        shape = self.config.input_shape
        if x.shape == shape:
            return T.reshape(x, (1, 1) + shape)
        if x.data.ndim == 4 and x.shape[1:] == shape:
            return T.reshape(x, (x.shape[0], 1) + shape)
        if x.data.ndim == 5 and x.shape[1:] == (1,) + shape:
            return x
        raise ValueError(f"volume shape {x.shape} does not match input_shape {shape}")

    def encode(self, volume) -> LatentDistribution:
        x = self._as_batch(volume)
        n = x.shape[0]
        h = self._act(self.stem(x))
        for blocks in self.stages:
            h = T.avg_pool3d(h, POOL)
            for block in blocks:
                h = block(h)
        d = self.config.latent_dim
        mu = T.reshape(self.mu_head(h), (n, d))
        logvar = T.reshape(self.logvar_head(h), (n, d))
        sigma = T.exp(T.mul(logvar, 0.5))
        return LatentDistribution(mu, sigma, logvar)

    def decode(self, z) -> Tensor:
        """Latent codes ``(N, d')`` or ``(d',)`` to volumes ``(N, D, H, W)``."""
        if isinstance(z, LatentCode):
            z = z.z
        z = z if isinstance(z, Tensor) else Tensor(z)
        d = self.config.latent_dim
        if z.shape == (d,):
            z = T.reshape(z, (1, d))
        if z.data.ndim != 2 or z.shape[1] != d:
            raise ValueError(f"latent code shape {z.shape} does not match latent_dim {d}")
        n = z.shape[0]
        h = T.reshape(z, (n, 1) + self.config.latent_grid)
        h = self._act(self.dec_in(h))
        for blocks in self.dec_stages:
            for block in blocks:
                h = block(h)
            h = T.upsample_nearest3d(h, POOL)
        out = self.dec_out(h)
        if self.config.output_activation == "sigmoid":
            out = T.sigmoid(out)
        return T.reshape(out, (n,) + self.config.input_shape)

    def parameters(self) -> list[Tensor]:
        return self.registry.parameters()

    def zero_grad(self) -> None:
        self.registry.zero_grad()

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        layers.write_checkpoint(path, self.registry, {"model": self.config.to_dict()})

    @classmethod
    def load(cls, path: str | Path) -> "LocVAE":
        blob, arrays, aliases = layers.read_checkpoint(path)
        model = cls(ModelConfig.from_dict(blob["model"]), seed=None)
        if aliases != model.registry.aliases:
            raise layers.FormatError(f"{path}: tied-weight aliases do not match the model config")
        model.registry.load_state(arrays)
        return model


def reparameterize(dist: LatentDistribution, rng: np.random.Generator | None = None, eps=None) -> LatentCode:
    """z = mu + eps * sigma; ``eps`` is drawn from ``rng`` unless given."""
    if eps is None:
        eps = rng.standard_normal(dist.mu.shape)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), dist.mu.shape)
    return LatentCode(T.add(dist.mu, T.mul(dist.sigma, Tensor(eps))))


def reconstruct_expected(model: LocVAE, volume, rng: np.random.Generator, n_samples: int = 10) -> np.ndarray:
    """Voxel-wise mean of ``n_samples`` encode -> sample -> decode passes."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    with T.no_grad():
        dist = model.encode(volume)
        acc = None
        for _ in range(n_samples):
            x = model.decode(reparameterize(dist, rng)).data
            acc = x.copy() if acc is None else acc + x
    out = acc / n_samples
    shape = volume.shape if isinstance(volume, Tensor) else np.shape(volume)
    return out[0] if tuple(shape) == model.config.input_shape else out
