"""Fixed-length feature vectors per image.

Two supply paths: a self-contained extractor (8x8 grayscale bilinear
downsample + 8-bin per-channel color histograms, 88 dims, L2-normalized) so
the whole system runs without an external ML stack, and ingestion of a
precomputed matrix (e.g. CNN latents) from a binary file.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .store import Store

MAGIC = b"FMX1"
GRID = 8          # downsample grid is GRID x GRID
HIST_BINS = 8     # per color channel
FEATURE_DIM = GRID * GRID + 3 * HIST_BINS  # 88

BUILTIN = "builtin"
EXTERNAL = "external"

# Luma weights for the grayscale conversion, fixed for bit-stability.
LUMA = (0.299, 0.587, 0.114)


class FeatureError(ValueError):
    pass


class ExtractionError(FeatureError):
    def __init__(self, message: str, image_id: str = ""):
        super().__init__(message)
        self.image_id = image_id


def bilinear_downsample(gray: np.ndarray, size: int = GRID) -> np.ndarray:
    """Sample `gray` (H x W float) at `size` x `size` cell centers, bilinear."""
    h, w = gray.shape
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = gray[np.ix_(y0, x0)] * (1 - wx) + gray[np.ix_(y0, x1)] * wx
    bot = gray[np.ix_(y1, x0)] * (1 - wx) + gray[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def extract(image_bytes: bytes, image_id: str = "") -> np.ndarray:
    """88-dim descriptor: 64 downsample values + 24 histogram fractions, unit norm."""
    try:
        with Image.open(io.BytesIO(image_bytes)) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    except Exception as exc:
        raise ExtractionError(f"undecodable image: {exc}", image_id=image_id) from exc

    gray = rgb[:, :, 0] * LUMA[0] + rgb[:, :, 1] * LUMA[1] + rgb[:, :, 2] * LUMA[2]
    cells = bilinear_downsample(gray / 255.0).ravel()

    n_px = rgb.shape[0] * rgb.shape[1]
    hists = []
    for ch in range(3):
        bins = np.minimum(rgb[:, :, ch].astype(np.int64) // 32, HIST_BINS - 1)
        hists.append(np.bincount(bins.ravel(), minlength=HIST_BINS) / n_px)

    vec = np.concatenate([cells] + hists)
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec = vec / norm
    return vec.astype(np.float32)


def extract_for_store(store: Store) -> tuple[int, list[tuple[str, str]]]:
    """Run the built-in extractor over every non-deleted record with a readable uri."""
    done, failed = 0, []
    for record in store.records():
        try:
            data = Path(record.uri).read_bytes()
            store.set_feature(record.id, extract(data, record.id), source=BUILTIN)
            done += 1
        except (OSError, FeatureError) as exc:
            failed.append((record.id, str(exc)))
    return done, failed


# -- matrix file: magic | n u64 | D u32 | n * (id_len u16, id, D float32) ----

def write_matrix(path: str | Path, vectors: dict[str, np.ndarray]) -> int:
    ids = sorted(vectors)
    dims = {int(np.asarray(vectors[i]).shape[0]) for i in ids}
    if len(dims) > 1:
        raise FeatureError(f"mixed feature dimensions {sorted(dims)}")
    dim = dims.pop() if dims else 0
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QI", len(ids), dim))
        for image_id in ids:
            raw = image_id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.asarray(vectors[image_id], dtype="<f4").tobytes())
    return len(ids)


def read_matrix(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise FeatureError(f"{path}: not a feature matrix file")
        n, dim = struct.unpack("<QI", fh.read(12))
        vectors: dict[str, np.ndarray] = {}
        for _ in range(n):
            (id_len,) = struct.unpack("<H", fh.read(2))
            image_id = fh.read(id_len).decode("utf-8")
            row = np.frombuffer(fh.read(4 * dim), dtype="<f4").copy()
            if row.shape[0] != dim:
                raise FeatureError(f"{path}: truncated row for id {image_id!r}")
            vectors[image_id] = row
    return dim, vectors


@dataclass
class MatrixIngestReport:
    count: int = 0
    rejected: list[tuple[str, str]] = field(default_factory=list)


def ingest_matrix(store: Store, path: str | Path) -> MatrixIngestReport:
    """Attach a precomputed feature matrix to stored records.

    Rows with unknown ids or non-finite entries are rejected individually; a
    dimension conflicting with the store's existing collection is a hard error.
    """
    dim, vectors = read_matrix(path)
    if store.feature_dim is not None and dim != store.feature_dim:
        raise FeatureError(
            f"matrix dimension {dim} conflicts with the collection dimension "
            f"{store.feature_dim}"
        )
    report = MatrixIngestReport()
    for image_id in sorted(vectors):
        row = vectors[image_id]
        if image_id not in store:
            report.rejected.append((image_id, "unknown image id"))
            continue
        if not np.all(np.isfinite(row)):
            report.rejected.append((image_id, "non-finite entries"))
            continue
        store.set_feature(image_id, row, source=EXTERNAL)
        report.count += 1
    return report
