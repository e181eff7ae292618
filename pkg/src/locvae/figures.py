"""8-bit PGM slice images."""
from __future__ import annotations

from pathlib import Path

import numpy as np

PLANES = ("sagittal", "coronal", "transverse")


def mid_slices(volume: np.ndarray) -> dict[str, np.ndarray]:
    d, h, w = volume.shape
    return {
        "sagittal": volume[d // 2, :, :],
        "coronal": volume[:, h // 2, :],
        "transverse": volume[:, :, w // 2],
    }


def to_unit(field: np.ndarray, signed: bool = False) -> np.ndarray:
    """Rescale a map that is not already an intensity in [0, 1].

    Nonnegative maps are divided by their maximum; signed maps are centred so
    zero lands at mid-grey.
    """
    f = np.asarray(field, dtype=np.float64)
    peak = np.abs(f).max()
    if peak == 0:
        return np.full_like(f, 0.5 if signed else 0.0)
    return 0.5 + 0.5 * f / peak if signed else np.abs(f) / peak


def write_pgm(path, image: np.ndarray, scale: int = 8) -> None:
    """Binary P5 greyscale; [0, 1] maps linearly onto [0, 255]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    pix = np.round(img * 255.0).astype(np.uint8)
    if scale > 1:
        pix = pix.repeat(scale, axis=0).repeat(scale, axis=1)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)


def write_volume_slices(out_dir, stem: str, volume: np.ndarray, scale: int = 8) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for plane, img in mid_slices(volume).items():
        p = out_dir / f"{stem}_{plane}.pgm"
        write_pgm(p, img, scale)
        paths.append(p)
    return paths
