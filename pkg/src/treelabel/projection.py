"""2-D projections of feature vectors and the neighborhood-hit diagnostic.

PCA and an exact (O(n^2)) t-SNE are computed from scratch and cached per
(node, subset, method, seed, store version); the neighborhood hit of a point
is the fraction of its k nearest labeled neighbors in the plane sharing its
class, which flags boundary and mislabeled samples for the projection view.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CACHE_MAGIC = b"PRJ1"
METHODS = ("pca", "tsne")
SUBSETS = ("train", "val", "test", "unlabeled", "unlabeled+train", "all")


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class ProjectionPoint:
    image_id: str
    x: float
    y: float
    neighborhood_hit: float


@dataclass(frozen=True)
class ProjectionSet:
    node: str
    subset: str
    method: str
    seed: int
    store_version: int
    points: tuple[ProjectionPoint, ...]

    @property
    def key(self) -> tuple:
        return (self.node, self.subset, self.method, self.seed, self.store_version)

    def to_json(self) -> dict:
        return {
            "node": self.node,
            "subset": self.subset,
            "method": self.method,
            "seed": self.seed,
            "store_version": self.store_version,
            "points": [
                {
                    "image_id": p.image_id,
                    "x": p.x,
                    "y": p.y,
                    "neighborhood_hit": p.neighborhood_hit,
                }
                for p in self.points
            ],
        }


def cache_key_hash(node: str, subset: str, method: str, seed: int, store_version: int) -> str:
    raw = f"{node}|{subset}|{method}|{seed}|{store_version}".encode("utf-8")
    return hashlib.sha1(raw).hexdigest()


# -- PCA -----------------------------------------------------------------------

def pca(X: np.ndarray) -> np.ndarray:
    """Project onto the top-2 eigenvectors of the covariance matrix.

    Components are orthonormal with the sign convention that each one's
    largest-magnitude loading is positive; axis 1 carries at least as much
    variance as axis 2. All rows identical collapses to the origin.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3 or X.shape[1] < 2:
        raise ProjectionError("pca needs an n x D matrix with n >= 3, D >= 2")
    if not np.all(np.isfinite(X)):
        raise ProjectionError("pca input must be finite")
    centered = X - X.mean(axis=0)
    if np.allclose(centered, 0.0):
        log.warning("pca: all rows identical; projecting to the origin")
        return np.zeros((X.shape[0], 2))
    cov = centered.T @ centered / (X.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    comps = eigvecs[:, ::-1][:, :2].T  # rows = components, descending variance
    for i in range(2):
        if comps[i, np.argmax(np.abs(comps[i]))] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


# -- t-SNE ---------------------------------------------------------------------

def conditional_probs(sq_dists: np.ndarray, perplexity: float, tol: float = 1e-5):
    """Per-point conditional P via binary search on beta to hit log-perplexity."""
    n = sq_dists.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        beta, lo, hi = 1.0, 0.0, np.inf
        d = np.delete(sq_dists[i], i)
        for _ in range(200):
            w = np.exp(-d * beta)
            total = w.sum()
            if total <= 0:
                h = 0.0
                p = np.zeros_like(w)
            else:
                p = w / total
                nz = p[p > 0]
                h = float(-(nz * np.log(nz)).sum())
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        row = np.insert(p, i, 0.0)
        P[i] = row
    return P


def tsne(
    X: np.ndarray,
    perplexity: float = 30.0,
    iterations: int = 1000,
    seed: int = 0,
    learning_rate: float = 200.0,
    early_exaggeration: float = 12.0,
    exaggeration_until: int = 250,
    momentum_switch: int = 250,
    track_kl: bool = False,
):
    """Exact gradient descent on KL(P||Q) with a Student-t low-dim kernel.

    Symmetrized conditional P (binary-searched to the requested perplexity),
    x12 early exaggeration for the first 250 iterations, momentum 0.5
    switching to 0.8 at iteration 250. Deterministic in the seed.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n <= 3 * perplexity:
        raise ProjectionError(
            f"tsne needs n > 3*perplexity (n={n}, perplexity={perplexity})"
        )
    if not np.all(np.isfinite(X)):
        raise ProjectionError("tsne input must be finite")

    sq = np.sum(X * X, axis=1)
    sq_dists = np.maximum(sq[:, None] + sq[None, :] - 2 * (X @ X.T), 0.0)
    P = conditional_probs(sq_dists, perplexity)
    P = (P + P.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)

    rng = np.random.default_rng(seed)
    Y = rng.normal(scale=1e-4, size=(n, 2))
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl_history = []

    for it in range(iterations):
        Pe = P * early_exaggeration if it < exaggeration_until else P
        ysq = np.sum(Y * Y, axis=1)
        num = 1.0 / (1.0 + np.maximum(ysq[:, None] + ysq[None, :] - 2 * (Y @ Y.T), 0.0))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)

        PQ = (Pe - Q) * num
        grad = 4.0 * ((np.diag(PQ.sum(axis=1)) - PQ) @ Y)

        momentum = 0.5 if it < momentum_switch else 0.8
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        velocity = momentum * velocity - learning_rate * gains * grad
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)
        if track_kl:
            kl_history.append(float((P * np.log(P / Q)).sum()))

    if track_kl:
        return Y, kl_history
    return Y


# -- neighborhood hit ------------------------------------------------------------

def neighborhood_hit(
    points: np.ndarray,
    classes: list,
    labeled: list,
    ids: list,
    k: int = 6,
) -> np.ndarray:
    """Fraction of each point's k nearest labeled neighbors sharing its class.

    The candidate set is the labeled points (self excluded); a point's own
    class is its ground truth when labeled, else its predicted class.
    Distance ties break by image id; with no candidates the hit is 1.0, and a
    point with no class at all also gets 1.0 (nothing to contradict it).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    labeled_idx = [i for i in range(n) if labeled[i]]
    hits = np.ones(n)
    for i in range(n):
        own = classes[i]
        if own is None:
            continue
        candidates = [j for j in labeled_idx if j != i]
        if not candidates:
            continue
        dists = np.sqrt(((points[candidates] - points[i]) ** 2).sum(axis=1))
        order = sorted(range(len(candidates)), key=lambda m: (dists[m], ids[candidates[m]]))
        nearest = order[: min(k, len(order))]
        same = sum(1 for m in nearest if classes[candidates[m]] == own)
        hits[i] = same / len(nearest)
    return hits


# -- cache files: float32 coordinates keyed by a hash of the cache key ---------

def save_projection(path: str | Path, pset: ProjectionSet) -> None:
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        node_raw = pset.node.encode("utf-8")
        subset_raw = pset.subset.encode("utf-8")
        method_raw = pset.method.encode("utf-8")
        fh.write(
            struct.pack(
                "<HHHqqI",
                len(node_raw),
                len(subset_raw),
                len(method_raw),
                pset.seed,
                pset.store_version,
                len(pset.points),
            )
        )
        fh.write(node_raw + subset_raw + method_raw)
        for p in pset.points:
            raw = p.image_id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<fff", p.x, p.y, p.neighborhood_hit))


def load_projection(path: str | Path) -> ProjectionSet:
    with open(path, "rb") as fh:
        if fh.read(4) != CACHE_MAGIC:
            raise ProjectionError(f"{path}: not a projection cache file")
        node_len, subset_len, method_len, seed, version, count = struct.unpack(
            "<HHHqqI", fh.read(2 + 2 + 2 + 8 + 8 + 4)
        )
        node = fh.read(node_len).decode("utf-8")
        subset = fh.read(subset_len).decode("utf-8")
        method = fh.read(method_len).decode("utf-8")
        points = []
        for _ in range(count):
            (id_len,) = struct.unpack("<H", fh.read(2))
            image_id = fh.read(id_len).decode("utf-8")
            x, y, nh = struct.unpack("<fff", fh.read(12))
            points.append(ProjectionPoint(image_id, x, y, nh))
    return ProjectionSet(
        node=node,
        subset=subset,
        method=method,
        seed=seed,
        store_version=version,
        points=tuple(points),
    )
