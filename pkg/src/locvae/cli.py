"""Command-line entry point: generate, train, eval, query, explain, compare."""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, evaluation, figures, retrieval
from .config import ConfigError, ExperimentConfig, load_config, write_config
from .data import Dataset, read_volume, write_dataset
from .layers import FormatError
from .model import VARIANTS, LocVAE, reconstruct_expected
from .trainer import TrainingDiverged, fold_seeds, train_fold

log = logging.getLogger("locvae")

EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 1, 2, 3
RUN_MANIFEST = "run_manifest.json"


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def usage_error(msg: str) -> CliError:
    return CliError(EXIT_USAGE, "usage", msg)


def validation_error(msg: str) -> CliError:
    return CliError(EXIT_VALIDATION, "validation", msg)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise usage_error(message)


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config: dict
    seeds: dict
    output_dir: str = "."  # outputs live next to the manifest
    tool_version: str = __version__
    extra: dict = field(default_factory=dict)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / RUN_MANIFEST
        body = {
            "command": self.command,
            "config_path": self.config_path,
            "config": self.config,
            "seeds": self.seeds,
            "output_dir": self.output_dir,
            "tool_version": self.tool_version,
            **self.extra,
        }
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return path


# ---------------------------------------------------------------------------
# input helpers


def _config(path) -> ExperimentConfig:
    if not Path(path).is_file():
        raise validation_error(f"config file {path} not found")
    try:
        return load_config(path)
    except ConfigError as exc:
        raise validation_error(f"{path}: {exc}") from exc


def _dataset(path, cfg: ExperimentConfig | None = None) -> Dataset:
    root = Path(path)
    if not (root / "manifest.ini").is_file() or not (root / "metadata.csv").is_file():
        raise validation_error(f"{root} is not a dataset directory (manifest.ini, metadata.csv)")
    try:
        ds = Dataset.load(root)
    except (KeyError, ValueError) as exc:
        raise validation_error(f"{root}: {exc}") from exc
    if cfg is not None and ds.manifest != cfg.data:
        raise validation_error(f"{root}/manifest.ini does not match the [data] section of the config")
    return ds


def _volume(path) -> np.ndarray:
    if not Path(path).is_file():
        raise validation_error(f"volume file {path} not found")
    try:
        return read_volume(path)
    except FormatError as exc:
        raise validation_error(str(exc)) from exc


def _model(path) -> LocVAE:
    if not Path(path).is_file():
        raise validation_error(f"checkpoint {path} not found")
    try:
        return LocVAE.load(path)
    except (FormatError, ValueError, KeyError) as exc:
        raise validation_error(f"{path}: {exc}") from exc


def _index(path) -> retrieval.Index:
    if not Path(path).is_file():
        raise validation_error(f"index {path} not found")
    try:
        return retrieval.read_index(path)
    except FormatError as exc:
        raise validation_error(str(exc)) from exc


def _check_shape(model: LocVAE, volume: np.ndarray, what: str) -> None:
    if volume.shape != model.config.input_shape:
        raise validation_error(f"{what} shape {volume.shape} does not match model input {model.config.input_shape}")


def worker_count() -> int:
    raw = os.environ.get("LOCVAE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise validation_error(f"LOCVAE_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise validation_error("LOCVAE_THREADS must be >= 1")
    return n


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = _config(args.config)
    out = Path(args.out)
    ds = write_dataset(out, cfg.data)
    RunManifest("generate", str(args.config), cfg.to_dict(), {"data": cfg.data.seed}).write(out)
    print(f"wrote {len(ds)} scans to {out}")
    return 0


def _check_fold(ds: Dataset, fold: int) -> None:
    if not 0 <= fold < ds.folds.k:
        raise validation_error(f"fold {fold} outside [0, {ds.folds.k})")


def cmd_train(args) -> int:
    cfg = _config(args.config)
    ds = _dataset(args.data, cfg)
    _check_fold(ds, args.fold)
    tc = cfg.train_config(args.variant)
    out = Path(args.out)
    ckpt = train_fold(tc, ds, args.fold, out)
    init_seed, _, _ = fold_seeds(tc.seed, args.fold)
    RunManifest(
        "train", str(args.config), cfg.to_dict(), {"train": tc.seed, "init": init_seed},
        extra={"variant": args.variant, "fold": args.fold},
    ).write(out)
    print(ckpt)
    return 0


def cmd_eval(args) -> int:
    ds = _dataset(args.data)
    root = Path(args.checkpoints)
    for fold in range(ds.folds.k):
        for name in ("checkpoint.lvae", "train_index.lidx"):
            if not (evaluation.fold_dir(root, fold) / name).is_file():
                raise validation_error(f"missing {evaluation.fold_dir(root, fold) / name}")
    if args.trials < 1:
        raise validation_error("--trials must be >= 1")
    variant = _model(evaluation.fold_dir(root, 0) / "checkpoint.lvae").config.variant
    res = evaluation.evaluate_variant(variant, root, ds, args.trials, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_metrics_csv(out / "metrics.csv", [res.metrics])
    evaluation.write_locality_csv(out / "locality.csv", [res.locality])
    RunManifest(
        "eval", None, {"checkpoints": str(root), "data": str(args.data), "trials": args.trials}, {"eval": args.seed},
    ).write(out)
    m = res.metrics
    print(f"{m.variant}: rmse={m.rmse:.4f} ssim={m.ssim:.4f} entropy={m.entropy:.3f} auc={m.auc:.3f}")
    return 0


def cmd_query(args) -> int:
    if args.k < 1:
        raise validation_error("--k must be >= 1")
    index = _index(args.index)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.index).parent / "checkpoint.lvae"
    model = _model(ckpt)
    if model.config.latent_dim != index.latent_dim:
        raise validation_error(f"index has {index.latent_dim} dims, model has {model.config.latent_dim}")
    vol = _volume(args.volume)
    _check_shape(model, vol, "query volume")
    print("subject_id,scan_id,label,distance")
    for entry, dist in retrieval.query(index, model, vol, args.k):
        print(f"{entry.subject_id},{entry.scan_id},{entry.label},{dist!r}")
    return 0


def cmd_explain(args) -> int:
    model = _model(args.checkpoint)
    vol, nb = _volume(args.volume), _volume(args.neighbor)
    _check_shape(model, vol, "query volume")
    _check_shape(model, nb, "neighbour volume")
    d = model.config.latent_dim
    if not 1 <= args.top <= d:
        raise validation_error(f"--top must lie in [1, {d}]")
    mu, _ = retrieval.encode_means(model, nb[None])
    neighbor = retrieval.IndexEntry(0, 0, "CN", mu[0])
    ranked = retrieval.explain(model, vol, neighbor, args.top)
    print("dim,contribution")
    for dim, contrib, _ in ranked:
        print(f"{dim},{contrib!r}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for dim, _, sal in ranked:
            figures.write_volume_slices(out, f"saliency_dim{dim}", figures.to_unit(sal))
        RunManifest(
            "explain", None, {"checkpoint": str(args.checkpoint), "volume": str(args.volume),
                              "neighbor": str(args.neighbor), "top": args.top}, {},
        ).write(out)
    return 0


# -- compare ------------------------------------------------------------------


def _fold_job(job):
    """Train and evaluate one (variant, fold); runs in a worker process."""
    cfg, data_root, variant, fold, out_root = job
    ds = Dataset.load(data_root)
    fdir = evaluation.fold_dir(Path(out_root) / variant, fold)
    train_fold(cfg.train_config(variant), ds, fold, fdir)
    model = LocVAE.load(fdir / "checkpoint.lvae")
    index = retrieval.read_index(fdir / "train_index.lidx")
    return variant, fold, evaluation.evaluate_fold(model, index, ds, fold, cfg.eval.trials, cfg.eval.seed)


def _run_jobs(jobs, workers: int):
    if workers == 1 or len(jobs) == 1:
        return [_fold_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_fold_job, jobs))


def _figure_scan(ds: Dataset):
    """First held-out AD scan of fold 0, used for every per-variant figure."""
    _, held = ds.split(0)
    for r in held:
        if r.is_ad:
            return r
    return held[0]


def write_compare_figures(out: Path, ds: Dataset, variants, cfg: ExperimentConfig) -> None:
    fig = out / "figures"
    figures.write_volume_slices(fig, "mean_difference", figures.to_unit(evaluation.dataset_mean_difference(ds), signed=True))
    rec = _figure_scan(ds)
    vol = ds.volume(rec)
    figures.write_volume_slices(fig, "input", vol)
    for variant in variants:
        fdir = evaluation.fold_dir(out / variant, 0)
        model = LocVAE.load(fdir / "checkpoint.lvae")
        rng = np.random.default_rng(np.random.SeedSequence([cfg.eval.seed, 0]))
        figures.write_volume_slices(fig, f"{variant}_reconstruction", reconstruct_expected(model, vol, rng, cfg.eval.trials))
        _, sal = evaluation.saliency_map(model, retrieval.read_index(fdir / "train_index.lidx"), vol)
        figures.write_volume_slices(fig, f"{variant}_saliency", figures.to_unit(sal))


def cmd_compare(args) -> int:
    cfg = _config(args.config)
    ds = _dataset(args.data, cfg)
    variants = list(dict.fromkeys(args.variants.split(",")))
    bad = [v for v in variants if v not in VARIANTS]
    if bad or not variants:
        raise validation_error(f"unknown variants {bad}; choose from {','.join(VARIANTS)}")
    workers = worker_count()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "experiment.ini", cfg)

    jobs = [(cfg, str(ds.root), v, f, str(out)) for v in variants for f in range(ds.folds.k)]
    results = {}
    for variant, fold, res in _run_jobs(jobs, workers):
        results[(variant, fold)] = res
    evals = [evaluation.summarize(v, [results[(v, f)] for f in range(ds.folds.k)]) for v in variants]

    evaluation.write_metrics_csv(out / "metrics.csv", [e.metrics for e in evals])
    evaluation.write_locality_csv(out / "locality.csv", [e.locality for e in evals])
    evaluation.write_boxplot_csv(out / "locality_quartiles.csv", [e.locality for e in evals])
    with open(out / "saliency.csv", "w") as fh:
        fh.write("variant,fold,dim,hits,total\n")
        for e in evals:
            for r in e.folds:
                fh.write(f"{e.metrics.variant},{r.fold},{r.saliency_dim},{r.saliency_hits},{r.saliency_total}\n")

    # whole-dataset index per variant, encoded with the fold-0 model
    for v in variants:
        model = LocVAE.load(evaluation.fold_dir(out / v, 0) / "checkpoint.lvae")
        retrieval.write_index(out / v / "index.lidx", retrieval.build_index(model, ds))
        shutil.copyfile(evaluation.fold_dir(out / v, 0) / "checkpoint.lvae", out / v / "checkpoint.lvae")

    write_compare_figures(out, ds, variants, cfg)
    RunManifest(
        "compare", str(args.config), cfg.to_dict(),
        {"data": cfg.data.seed, "train": cfg.train["seed"], "eval": cfg.eval.seed},
        extra={"variants": variants, "folds": ds.folds.k},
    ).write(out)
    for e in evals:
        m = e.metrics
        print(f"{m.variant}: rmse={m.rmse:.4f} ssim={m.ssim:.4f} entropy={m.entropy:.3f} auc={m.auc:.3f} "
              f"saliency={e.saliency_hit_rate:.2f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="locvae", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic phantom dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one variant on one fold")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--fold", type=int, required=True)
    t.add_argument("--variant", choices=VARIANTS, required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate the fold checkpoints of one variant")
    e.add_argument("--checkpoints", required=True, help="directory holding fold_<k>/ subdirectories")
    e.add_argument("--data", required=True)
    e.add_argument("--trials", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("query", help="k nearest scans of a volume")
    q.add_argument("--index", required=True)
    q.add_argument("--volume", required=True)
    q.add_argument("--k", type=int, required=True)
    q.add_argument("--checkpoint", help="model used to encode the query (default: checkpoint.lvae next to the index)")
    q.set_defaults(func=cmd_query)

    x = sub.add_parser("explain", help="latent dimensions separating a volume from a neighbour")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--volume", required=True)
    x.add_argument("--neighbor", required=True, help="LVOL file of the neighbour scan")
    x.add_argument("--top", type=int, required=True)
    x.add_argument("--out", help="write saliency slices here")
    x.set_defaults(func=cmd_explain)

    c = sub.add_parser("compare", help="train and evaluate every variant over every fold")
    c.add_argument("--config", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--variants", default=",".join(VARIANTS))
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except CliError as exc:
        code, kind, msg = exc.code, exc.kind, str(exc)
    except TrainingDiverged as exc:
        code, kind, msg = EXIT_RUNTIME, "diverged", str(exc)
    except OSError as exc:
        code, kind, msg = EXIT_RUNTIME, "io", str(exc)
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        code, kind, msg = EXIT_RUNTIME, "runtime", f"{type(exc).__name__}: {exc}"
    print(f"ERROR:{kind}:{' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
