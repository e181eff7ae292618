"""Exact nearest-neighbour retrieval over encoder means, with per-dimension explanations."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .layers import BadMagicError, FormatError, TruncatedFileError, UnsupportedVersionError
from .model import LocVAE

INDEX_MAGIC = b"LIDX"
INDEX_VERSION = 1
_LABEL_CODES = {"CN": 0, "AD": 1}
_LABEL_NAMES = {v: k for k, v in _LABEL_CODES.items()}


@dataclass(frozen=True)
class IndexEntry:
    subject_id: int
    scan_id: int
    label: str
    mu: np.ndarray

    @property
    def ref(self) -> tuple[int, int]:
        return (self.subject_id, self.scan_id)


class Index:
    def __init__(self, entries=(), latent_dim: int | None = None):
        entries = list(entries)
        if latent_dim is None:
            latent_dim = len(entries[0].mu) if entries else 0
        for e in entries:
            if len(e.mu) != latent_dim:
                raise ValueError(f"entry {e.ref} has {len(e.mu)} dims, index has {latent_dim}")
        self.latent_dim = latent_dim
        self.entries = entries
        self._matrix = np.array([e.mu for e in entries], dtype=np.float64).reshape(len(entries), latent_dim)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def labels(self) -> np.ndarray:
        return np.array([_LABEL_CODES[e.label] for e in self.entries], dtype=np.int64)


def encode_means(model: LocVAE, volumes: np.ndarray, batch: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """(mu, sigma) arrays for a stack of volumes, without recording a graph."""
    mus, sigmas = [], []
    with T.no_grad():
        for i in range(0, len(volumes), batch):
            dist = model.encode(volumes[i : i + batch])
            mus.append(dist.mu.data)
            sigmas.append(dist.sigma.data)
    d = model.config.latent_dim
    if not mus:
        return np.zeros((0, d)), np.zeros((0, d))
    return np.concatenate(mus), np.concatenate(sigmas)


def build_index(model: LocVAE, dataset, records=None) -> Index:
    """One entry per scan, keyed by the encoder mean."""
    records = dataset.records if records is None else records
    if not records:
        return Index([], model.config.latent_dim)
    volumes = dataset.stack(records)
    if volumes.shape[1:] != model.config.input_shape:
        raise ValueError(f"scan shape {volumes.shape[1:]} incompatible with model input {model.config.input_shape}")
    mu, _ = encode_means(model, volumes)
    entries = [IndexEntry(r.subject_id, r.scan_id, r.label, mu[i].copy()) for i, r in enumerate(records)]
    return Index(entries, model.config.latent_dim)


def query_mu(index: Index, mu: np.ndarray, k: int) -> list[tuple[IndexEntry, float]]:
    """Exact k nearest entries by Euclidean distance; ties by (subject_id, scan_id)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        return []
    mu = np.asarray(mu, dtype=np.float64)
    dist = np.sqrt(np.sum((index.matrix - mu[None, :]) ** 2, axis=1))
    subj = np.array([e.subject_id for e in index.entries])
    scan = np.array([e.scan_id for e in index.entries])
    order = np.lexsort((scan, subj, dist))[:k]
    return [(index.entries[i], float(dist[i])) for i in order]


def query(index: Index, model: LocVAE, volume: np.ndarray, k: int) -> list[tuple[IndexEntry, float]]:
    mu, _ = encode_means(model, np.asarray(volume)[None])
    return query_mu(index, mu[0], k)


def saliency_field(model: LocVAE, mu: np.ndarray, sigma: np.ndarray, dim: int, width: float = 3.0) -> np.ndarray:
    """|decode(mu + w sigma_dim e_dim) - decode(mu - w sigma_dim e_dim)| for one code."""
    mu = np.asarray(mu, dtype=np.float64)
    step = np.zeros_like(mu)
    step[dim] = width * sigma[dim]
    with T.no_grad():
        pair = model.decode(np.stack([mu + step, mu - step])).data
    return np.abs(pair[0] - pair[1])


def explain(model: LocVAE, query_volume: np.ndarray, neighbor: IndexEntry, top_m: int):
    """Dimensions ranked by their share of the squared distance to ``neighbor``.

    Returns ``[(dim, contribution, saliency volume), ...]``; contributions
    over all dimensions sum to the squared distance.
    """
    d = model.config.latent_dim
    if not 1 <= top_m <= d:
        raise ValueError(f"top_m must lie in [1, {d}]")
    mu, sigma = encode_means(model, np.asarray(query_volume)[None])
    contrib = (mu[0] - np.asarray(neighbor.mu)) ** 2
    order = sorted(range(d), key=lambda j: (-contrib[j], j))[:top_m]
    return [(j, float(contrib[j]), saliency_field(model, mu[0], sigma[0], j)) for j in order]


def write_index(path, index: Index) -> None:
    parts = [INDEX_MAGIC, struct.pack("<III", INDEX_VERSION, index.latent_dim, len(index))]
    for e in index.entries:
        parts.append(struct.pack("<IIB", e.subject_id, e.scan_id, _LABEL_CODES[e.label]))
        parts.append(np.asarray(e.mu, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_index(path) -> Index:
    buf = Path(path).read_bytes()
    if buf[:4] != INDEX_MAGIC:
        raise BadMagicError(f"{path}: not an LIDX file")
    if len(buf) < 16:
        raise TruncatedFileError(f"{path}: truncated header")
    version, d, count = struct.unpack("<III", buf[4:16])
    if version != INDEX_VERSION:
        raise UnsupportedVersionError(f"{path}: LIDX version {version}")
    rec = 9 + 8 * d
    if len(buf) < 16 + rec * count:
        raise TruncatedFileError(f"{path}: expected {count} entries")
    if len(buf) > 16 + rec * count:
        raise FormatError(f"{path}: trailing bytes")
    entries = []
    for i in range(count):
        off = 16 + i * rec
        subject, scan, label = struct.unpack("<IIB", buf[off : off + 9])
        if label not in _LABEL_NAMES:
            raise FormatError(f"{path}: unknown label code {label}")
        mu = np.frombuffer(buf, dtype="<f8", count=d, offset=off + 9).astype(np.float64)
        entries.append(IndexEntry(subject, scan, _LABEL_NAMES[label], mu))
    return Index(entries, d)
