"""Experiment configuration: a flat INI file where every key is required."""
from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .data import DatasetManifest
from .losses import Hyperparameters
from .model import POOL, ModelConfig
from .trainer import TrainConfig

SECTIONS = {
    "data": tuple(DatasetManifest.__dataclass_fields__),
    "model": ("stem_channels", "stage_channels", "blocks_per_stage", "activation", "output_activation"),
    "train": ("epochs", "batch_size", "learning_rate", "optimizer", "adam_beta1", "adam_beta2", "adam_eps", "seed"),
    "loss": ("beta", "gamma", "phi_amplitude", "local_dims_per_step", "normalization"),
    "eval": ("trials", "seed"),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    trials: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("eval trials must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DatasetManifest
    model: dict
    train: dict
    loss: Hyperparameters
    eval: EvalConfig

    def model_config(self, variant: str) -> ModelConfig:
        # the latent grid follows from the volume shape and the number of pooling stages
        factor = POOL ** len(self.model["stage_channels"])
        grid = tuple(s // factor for s in self.data.shape)
        return ModelConfig.for_variant(variant, input_shape=self.data.shape, latent_grid=grid, **self.model)

    def train_config(self, variant: str) -> TrainConfig:
        return TrainConfig(hyper=self.loss, model=self.model_config(variant), **self.train)

    def to_dict(self) -> dict:
        cp = self.to_parser()
        return {s: dict(cp[s]) for s in cp.sections()}

    def to_parser(self) -> configparser.ConfigParser:
        cp = self.data.to_config()
        cp["model"] = {k: _fmt(v) for k, v in self.model.items()}
        cp["train"] = {k: _fmt(v) for k, v in self.train.items()}
        cp["loss"] = {k: _fmt(getattr(self.loss, k)) for k in SECTIONS["loss"]}
        cp["eval"] = {k: _fmt(getattr(self.eval, k)) for k in SECTIONS["eval"]}
        return cp


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, str):
        return v
    return repr(v)


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.split(","))


def _section(cp, name):
    if name not in cp:
        raise ConfigError(f"missing section [{name}]")
    sec = cp[name]
    missing = [k for k in SECTIONS[name] if k not in sec]
    if missing:
        raise ConfigError(f"[{name}] is missing required keys: {', '.join(missing)}")
    extra = sorted(set(sec) - set(SECTIONS[name]))
    if extra:
        raise ConfigError(f"[{name}] has unknown keys: {', '.join(extra)}")
    return sec


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    try:
        data = DatasetManifest.from_section(_section(cp, "data"))
        m = _section(cp, "model")
        model = {
            "stem_channels": int(m["stem_channels"]),
            "stage_channels": _ints(m["stage_channels"]),
            "blocks_per_stage": _ints(m["blocks_per_stage"]),
            "activation": m["activation"].strip(),
            "output_activation": m["output_activation"].strip(),
        }
        t = _section(cp, "train")
        train = {
            "epochs": int(t["epochs"]),
            "batch_size": int(t["batch_size"]),
            "learning_rate": float(t["learning_rate"]),
            "optimizer": t["optimizer"].strip(),
            "adam_beta1": float(t["adam_beta1"]),
            "adam_beta2": float(t["adam_beta2"]),
            "adam_eps": float(t["adam_eps"]),
            "seed": int(t["seed"]),
        }
        lo = _section(cp, "loss")
        loss = Hyperparameters(
            beta=float(lo["beta"]),
            gamma=float(lo["gamma"]),
            phi_amplitude=float(lo["phi_amplitude"]),
            local_dims_per_step=int(lo["local_dims_per_step"]),
            normalization=lo["normalization"].strip(),
        )
        e = _section(cp, "eval")
        ev = EvalConfig(trials=int(e["trials"]), seed=int(e["seed"]))
        cfg = ExperimentConfig(data, model, train, loss, ev)
        # validate the derived configs now rather than mid-run
        for variant in ("BetaVAE", "LocVAE"):
            cfg.train_config(variant)
    except ConfigError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def write_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        cfg.to_parser().write(fh)
