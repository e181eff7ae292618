"""Synthetic phantom dataset, preprocessing, group k-fold splitting and volume IO.

A phantom is an ellipsoidal "brain" with a brighter core on a dark
background, plus a dark ventricle-like sphere whose radius carries the class
label (AD larger than CN).  Scans of one subject share geometry and differ by
a sub-voxel shift and noise.
"""
from __future__ import annotations

import configparser
import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import BadMagicError, FormatError, TruncatedFileError, UnsupportedVersionError

LABELS = ("CN", "AD")
VOLUME_MAGIC = b"LVOL"
VOLUME_VERSION = 1
VOLUME_HEADER_BYTES = 4 + 4 + 12


@dataclass(frozen=True)
class PhantomRecord:
    subject_id: int
    scan_id: int
    label: str
    lesion_center: tuple[int, int, int]
    lesion_radius: float
    noise_seed: int
    brain_axes: tuple[float, float, float] = (6.6, 7.0, 6.6)
    shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.05

    @property
    def is_ad(self) -> bool:
        return self.label == "AD"

    def lesion_bbox(self) -> tuple[np.ndarray, np.ndarray]:
        """Inclusive voxel bounds of the lesion sphere."""
        c = np.asarray(self.lesion_center, dtype=float)
        return np.floor(c - self.lesion_radius), np.ceil(c + self.lesion_radius)


@dataclass(frozen=True)
class DatasetManifest:
    seed: int = 2024
    n_cn: int = 60
    n_ad: int = 60
    scans_per_subject: int = 3
    shape: tuple[int, int, int] = (16, 16, 16)
    cn_radius: float = 2.0
    ad_radius: float = 4.0
    lesion_center: tuple[int, int, int] = (8, 8, 8)
    center_jitter: int = 1
    brain_axes: tuple[float, float, float] = (6.6, 7.0, 6.6)
    axes_jitter: float = 0.4
    scan_shift: float = 0.3
    noise_sigma: float = 0.05
    folds: int = 5

    def __post_init__(self):
        if self.n_cn < 0 or self.n_ad < 0 or self.scans_per_subject < 1:
            raise ValueError("subject and scan counts must be nonnegative / positive")
        if not 0 <= self.cn_radius < self.ad_radius:
            raise ValueError("AD lesion radius must exceed the CN radius")

    def to_config(self) -> configparser.ConfigParser:
        cp = configparser.ConfigParser()
        cp["data"] = {k: _fmt(v) for k, v in self.__dict__.items()}
        return cp

    @classmethod
    def from_section(cls, section) -> "DatasetManifest":
        ints = {"seed", "n_cn", "n_ad", "scans_per_subject", "center_jitter", "folds"}
        tuples_int = {"shape", "lesion_center"}
        kwargs = {}
        for key in cls.__dataclass_fields__:
            if key not in section:
                raise KeyError(f"[data] is missing required key {key!r}")
            raw = section[key]
            if key in ints:
                kwargs[key] = int(raw)
            elif key in tuples_int:
                kwargs[key] = tuple(int(v) for v in raw.split(","))
            elif key == "brain_axes":
                kwargs[key] = tuple(float(v) for v in raw.split(","))
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    return repr(v)


# ---------------------------------------------------------------------------
# generation


def _grid(shape):
    return np.meshgrid(*(np.arange(s, dtype=float) for s in shape), indexing="ij")


def _brain_radius(shape, axes, shift):
    g = _grid(shape)
    center = [(s - 1) / 2 + dz for s, dz in zip(shape, shift)]
    return np.sqrt(sum(((gi - c) / a) ** 2 for gi, c, a in zip(g, center, axes)))


def _lesion_distance(shape, center, shift):
    g = _grid(shape)
    return np.sqrt(sum((gi - (c + dz)) ** 2 for gi, c, dz in zip(g, center, shift)))


def check_lesion_fits(record: PhantomRecord, shape) -> None:
    if record.lesion_radius <= 0:
        return
    rho = _brain_radius(shape, record.brain_axes, (0, 0, 0))
    dist = _lesion_distance(shape, record.lesion_center, (0, 0, 0))
    inside_lesion = dist <= record.lesion_radius
    if not inside_lesion.any() or np.any(rho[inside_lesion] > 1.0):
        raise ValueError(f"lesion of subject {record.subject_id} does not fit inside the brain mask")


def generate_phantom(record: PhantomRecord, shape=(16, 16, 16)) -> np.ndarray:
    """Raw (unnormalized) phantom volume for one scan; deterministic."""
    shape = tuple(shape)
    check_lesion_fits(record, shape)
    a_min = min(record.brain_axes)
    rho = _brain_radius(shape, record.brain_axes, record.shift)
    brain = np.clip((1.0 - rho) * a_min + 0.5, 0.0, 1.0)
    core = np.clip((0.6 - rho) * a_min + 0.5, 0.0, 1.0)
    vol = 0.7 * brain + 0.3 * core
    if record.lesion_radius > 0:
        dist = _lesion_distance(shape, record.lesion_center, record.shift)
        lesion = np.clip(record.lesion_radius + 0.5 - dist, 0.0, 1.0)
        vol = vol * (1.0 - 0.8 * lesion)
    if record.noise_sigma > 0:
        vol = vol + np.random.default_rng(record.noise_seed).normal(0.0, record.noise_sigma, size=shape)
    return vol


def make_records(manifest: DatasetManifest) -> list[PhantomRecord]:
    """Subject-level geometry and scan-level seeds, all drawn from ``manifest.seed``."""
    rng = np.random.default_rng(manifest.seed)
    labels = ["CN"] * manifest.n_cn + ["AD"] * manifest.n_ad
    order = rng.permutation(len(labels))
    records = []
    for subject_id, idx in enumerate(order):
        label = labels[idx]
        j = manifest.center_jitter
        center = tuple(int(c + rng.integers(-j, j + 1)) for c in manifest.lesion_center)
        axes = tuple(float(a + rng.uniform(-manifest.axes_jitter, manifest.axes_jitter)) for a in manifest.brain_axes)
        radius = manifest.ad_radius if label == "AD" else manifest.cn_radius
        for scan_id in range(manifest.scans_per_subject):
            shift = tuple(float(v) for v in rng.uniform(-manifest.scan_shift, manifest.scan_shift, size=3))
            records.append(
                PhantomRecord(
                    subject_id=subject_id,
                    scan_id=scan_id,
                    label=label,
                    lesion_center=center,
                    lesion_radius=float(radius),
                    noise_seed=int(rng.integers(0, 2**31 - 1)),
                    brain_axes=axes,
                    shift=shift,
                    noise_sigma=manifest.noise_sigma,
                )
            )
    return records


def preprocess(volume: np.ndarray) -> np.ndarray:
    """Outlier exclusion (< 0 or > 4 std) then min-max to [0, 1].

    Min and max come from the inliers; outliers end up clamped at 0 or 1.
    """
    v = np.asarray(volume, dtype=np.float64)
    std = v.std()
    if std == 0:
        raise ValueError("cannot normalize a constant volume")
    inliers = v[(v >= 0) & (v <= 4.0 * std)]
    if inliers.size == 0 or inliers.max() == inliers.min():
        raise ValueError("no usable inlier range for min-max normalization")
    lo, hi = inliers.min(), inliers.max()
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldAssignment:
    k: int
    subject_fold: dict[int, int] = field(default_factory=dict)

    def fold_of(self, subject_id: int) -> int:
        return self.subject_fold[subject_id]

    def split(self, records, fold: int):
        """(train, held_out) record lists for ``fold``."""
        if not 0 <= fold < self.k:
            raise ValueError(f"fold {fold} outside [0, {self.k})")
        train = [r for r in records if self.subject_fold[r.subject_id] != fold]
        held = [r for r in records if self.subject_fold[r.subject_id] == fold]
        return train, held


def split_group_kfold(records, k: int, seed: int) -> FoldAssignment:
    """Shuffle subjects with ``seed`` and deal them round-robin into ``k`` folds."""
    subjects = sorted({r.subject_id for r in records})
    if k < 1 or k > len(subjects):
        raise ValueError(f"cannot split {len(subjects)} subjects into {k} folds")
    perm = np.random.default_rng(seed).permutation(len(subjects))
    return FoldAssignment(k, {subjects[p]: i % k for i, p in enumerate(perm)})


# ---------------------------------------------------------------------------
# volume files


def write_volume(path, volume: np.ndarray) -> None:
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim != 3:
        raise ValueError(f"volume must be 3-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("volume contains non-finite values")
    header = VOLUME_MAGIC + struct.pack("<I3I", VOLUME_VERSION, *v.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_volume(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise TruncatedFileError(f"{path}: file too short")
    if buf[:4] != VOLUME_MAGIC:
        raise BadMagicError(f"{path}: not an LVOL file")
    if len(buf) < VOLUME_HEADER_BYTES:
        raise TruncatedFileError(f"{path}: truncated header")
    version, d, h, w = struct.unpack("<I3I", buf[4:VOLUME_HEADER_BYTES])
    if version != VOLUME_VERSION:
        raise UnsupportedVersionError(f"{path}: LVOL version {version}")
    expected = VOLUME_HEADER_BYTES + 8 * d * h * w
    if len(buf) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(buf)}")
    if len(buf) > expected:
        raise FormatError(f"{path}: {len(buf) - expected} unexpected trailing bytes")
    return np.frombuffer(buf, dtype="<f8", offset=VOLUME_HEADER_BYTES).reshape(d, h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# dataset directories
#
#   <root>/manifest.ini      [data] section of DatasetManifest
#   <root>/metadata.csv      one row per scan
#   <root>/volumes/*.lvol    preprocessed volumes

METADATA_FIELDS = [
    "subject_id", "scan_id", "label", "fold", "lesion_z", "lesion_y", "lesion_x",
    "lesion_radius", "noise_seed", "file",
]


def volume_filename(record: PhantomRecord) -> str:
    return f"volumes/s{record.subject_id:04d}_{record.scan_id:02d}.lvol"


class Dataset:
    """Records plus lazily loaded volumes from a dataset directory.

    ``access_log`` records every (subject_id, scan_id) whose volume is read.
    """

    def __init__(self, root, records, folds: FoldAssignment, manifest: DatasetManifest | None = None, volumes=None):
        self.root = Path(root) if root is not None else None
        self.records = list(records)
        self.folds = folds
        self.manifest = manifest
        self._volumes = volumes
        self.access_log: list[tuple[int, int]] = []

    def __len__(self) -> int:
        return len(self.records)

    @property
    def shape(self):
        return self.manifest.shape if self.manifest is not None else self.volume(self.records[0]).shape

    def volume(self, record: PhantomRecord) -> np.ndarray:
        self.access_log.append((record.subject_id, record.scan_id))
        if self._volumes is not None:
            return self._volumes[(record.subject_id, record.scan_id)]
        return read_volume(self.root / volume_filename(record))

    def stack(self, records) -> np.ndarray:
        return np.stack([self.volume(r) for r in records]) if records else np.zeros((0,) + tuple(self.shape))

    def split(self, fold: int):
        return self.folds.split(self.records, fold)

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        cp = configparser.ConfigParser()
        if not cp.read(root / "manifest.ini"):
            raise FileNotFoundError(f"{root}/manifest.ini not found")
        manifest = DatasetManifest.from_section(cp["data"])
        by_key = {(r.subject_id, r.scan_id): r for r in make_records(manifest)}
        records, subject_fold = [], {}
        with open(root / "metadata.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                key = (int(row["subject_id"]), int(row["scan_id"]))
                if key not in by_key:
                    raise ValueError(f"metadata row {key} is not produced by the manifest")
                records.append(by_key[key])
                subject_fold[key[0]] = int(row["fold"])
        return cls(root, records, FoldAssignment(manifest.folds, subject_fold), manifest)


def build_dataset(manifest: DatasetManifest) -> Dataset:
    """In-memory preprocessed dataset (no files)."""
    records = make_records(manifest)
    volumes = {(r.subject_id, r.scan_id): preprocess(generate_phantom(r, manifest.shape)) for r in records}
    folds = split_group_kfold(records, manifest.folds, manifest.seed)
    return Dataset(None, records, folds, manifest, volumes)


def write_dataset(root, manifest: DatasetManifest) -> Dataset:
    root = Path(root)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    ds = build_dataset(manifest)
    with open(root / "manifest.ini", "w") as fh:
        manifest.to_config().write(fh)
    with open(root / "metadata.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METADATA_FIELDS)
        for r in ds.records:
            writer.writerow([
                r.subject_id, r.scan_id, r.label, ds.folds.fold_of(r.subject_id), *r.lesion_center,
                r.lesion_radius, r.noise_seed, volume_filename(r),
            ])
            write_volume(root / volume_filename(r), ds._volumes[(r.subject_id, r.scan_id)])
    return Dataset.load(root)


def voxel_range(volumes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel min and max over a stack of volumes."""
    return volumes.min(axis=0), volumes.max(axis=0)
