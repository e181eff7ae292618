"""Per-fold optimisation loop, Adam/SGD, checkpointing and loss logging."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, retrieval
from .data import Dataset, voxel_range
from .losses import Hyperparameters, total_loss
from .model import LocVAE, ModelConfig

log = logging.getLogger(__name__)

LOSS_FIELDS = ["step", "recon", "kl", "local", "total"]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, term: str, batch_ids):
        self.step, self.term, self.batch_ids = step, term, list(batch_ids)
        super().__init__(f"non-finite {term} loss at step {step}; batch scans {self.batch_ids}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.hyper.check_latent_dim(self.model.latent_dim)

    @property
    def variant(self) -> str:
        return self.model.variant

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction; ``params``/``grads`` are arrays."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def sgd_step(params, grads, lr: float) -> None:
    for p, g in zip(params, grads):
        p -= lr * g


def fold_seeds(seed: int, fold: int) -> tuple[int, np.random.Generator, np.random.Generator]:
    """Init seed, shuffle rng and sampling rng for one fold.

    Independent of the variant, so all variants of a fold start from the same
    initial parameters and see the same batch order.
    """
    init_ss, shuffle_ss, sample_ss = np.random.SeedSequence([seed, fold]).spawn(3)
    init_seed = int(init_ss.generate_state(1)[0])
    return init_seed, np.random.default_rng(shuffle_ss), np.random.default_rng(sample_ss)


class Trainer:
    def __init__(self, config: TrainConfig, model: LocVAE, sample_rng: np.random.Generator, voxel_bounds=None):
        self.config = config
        self.model = model
        self.rng = sample_rng
        self.voxel_bounds = voxel_bounds
        self.state = AdamState.zeros_like([p.data for p in model.parameters()])
        self.step_count = 0

    def step(self, batch: np.ndarray, batch_ids=()):
        cfg = self.config
        model = self.model
        loss, breakdown = total_loss(batch, model, self.rng, cfg.hyper, voxel_range=self.voxel_bounds)
        for term in ("recon", "kl", "local", "total"):
            if not np.isfinite(getattr(breakdown, term)):
                raise TrainingDiverged(self.step_count, term, batch_ids)
        model.zero_grad()
        loss.backward()
        params = model.parameters()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        if cfg.optimizer == "adam":
            adam_step([p.data for p in params], grads, self.state, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        else:
            sgd_step([p.data for p in params], grads, cfg.learning_rate)
        self.step_count += 1
        return breakdown


def train_fold(config: TrainConfig, dataset: Dataset, fold: int, out_dir) -> Path:
    """Train on every scan outside ``fold``; returns the checkpoint path.

    Writes into ``out_dir``: ``checkpoint.lvae``, ``loss.csv``,
    ``train_index.lidx`` (encoder means of the training scans, so later
    evaluation never has to read training volumes) and ``manifest.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_records, _ = dataset.split(fold)
    if not train_records:
        raise ValueError(f"fold {fold} leaves no training scans")
    init_seed, shuffle_rng, sample_rng = fold_seeds(config.seed, fold)
    model = LocVAE(config.model, seed=init_seed)
    volumes = dataset.stack(train_records)
    bounds = voxel_range(volumes) if config.hyper.normalization == "dataset_minmax" else None
    trainer = Trainer(config, model, sample_rng, bounds)
    ids = [f"{r.subject_id}:{r.scan_id}" for r in train_records]

    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_FIELDS)
        for epoch in range(config.epochs):
            order = shuffle_rng.permutation(len(train_records))
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                b = trainer.step(volumes[idx], [ids[i] for i in idx])
                writer.writerow([trainer.step_count, repr(b.recon), repr(b.kl), repr(b.local), repr(b.total)])
            log.info("fold %d %s epoch %d/%d total=%.5f", fold, config.variant, epoch + 1, config.epochs, b.total)

    ckpt = out / "checkpoint.lvae"
    model.save(ckpt)
    retrieval.write_index(out / "train_index.lidx", retrieval.build_index(model, dataset, train_records))
    manifest = {
        "command": "train",
        "fold": fold,
        "config": config.to_dict(),
        "seeds": {"base": config.seed, "init": init_seed},
        "train_scans": len(train_records),
        "tool_version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ckpt
