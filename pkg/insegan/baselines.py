"""Classical clustering baselines: K-Means and spectral clustering.

Both lift foreground pixels to 3D points (col, row, alpha * height) with
alpha stretching the height range over the image width.
"""

import logging
from typing import Tuple, Union

import numpy as np
from scipy import sparse
from sklearn.cluster import KMeans, spectral_clustering
from sklearn.neighbors import NearestNeighbors

logger = logging.getLogger(__name__)

FOREGROUND_EPS: float = 1e-3
KMEANS_RESTARTS: int = 10
SPECTRAL_NEIGHBORS: int = 10
SPECTRAL_BANDWIDTH_RANK: int = 7
SPECTRAL_MAX_POINTS: int = 2000

RngLike = Union[int, np.random.Generator, None]


def _as_image(x) -> np.ndarray:
    image = np.asarray(x.detach().cpu() if hasattr(x, "detach") else x, dtype=np.float64)
    return image.reshape(image.shape[-2:])


def _random_state(rng: RngLike) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(2**31 - 1))
    return 0 if rng is None else int(rng)


def lift_foreground(
    x, floor: float, eps: float = FOREGROUND_EPS
) -> Tuple[np.ndarray, np.ndarray]:
    """Foreground pixel coordinates and their isotropic 3D lift.

    Returns:
        ``(rows_cols, points)``: integer (P, 2) pixel positions and float
        (P, 3) points.
    """
    image = _as_image(x)
    rows, cols = np.nonzero(image > floor + eps)
    heights = image[rows, cols] - floor
    span = heights.max() if heights.size else 0.0
    alpha = image.shape[1] / span if span > 0 else 1.0
    points = np.stack([cols, rows, alpha * heights], axis=1).astype(np.float64)
    return np.stack([rows, cols], axis=1), points


def _labels_to_mask(shape: Tuple[int, int], rows_cols: np.ndarray, labels: np.ndarray) -> np.ndarray:
    mask = np.zeros(shape, dtype=np.uint8)
    mask[rows_cols[:, 0], rows_cols[:, 1]] = labels.astype(np.uint8) + 1
    return mask


def kmeans_segment(x, n: int, floor: float, rng: RngLike = 0) -> np.ndarray:
    """K-Means (k-means++ seeding, 10 restarts) over lifted foreground pixels.

    Falls back to a single foreground segment when there are fewer
    foreground pixels than clusters.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    image = _as_image(x)
    rows_cols, points = lift_foreground(image, floor)
    if len(points) == 0:
        return np.zeros(image.shape, dtype=np.uint8)
    if len(points) < n:
        logger.warning("only %d foreground pixels for %d clusters; one segment", len(points), n)
        return _labels_to_mask(image.shape, rows_cols, np.zeros(len(points), dtype=np.int64))
    km = KMeans(
        n_clusters=n, init="k-means++", n_init=KMEANS_RESTARTS, random_state=_random_state(rng)
    )
    labels = km.fit_predict(points)
    return _labels_to_mask(image.shape, rows_cols, labels)


def _knn_affinity(points: np.ndarray) -> Tuple[sparse.csr_matrix, np.ndarray]:
    """Symmetric kNN affinity with per-point bandwidth (7th-neighbour distance)."""
    k = min(SPECTRAL_NEIGHBORS, len(points) - 1)
    nn = NearestNeighbors(n_neighbors=k + 1).fit(points)
    dist, idx = nn.kneighbors(points)
    dist, idx = dist[:, 1:], idx[:, 1:]
    rank = min(SPECTRAL_BANDWIDTH_RANK, k) - 1
    sigma = np.maximum(dist[:, rank], 1e-12)
    weights = np.exp(-(dist**2) / (sigma[:, None] * sigma[idx]))
    rows = np.repeat(np.arange(len(points)), k)
    affinity = sparse.csr_matrix((weights.ravel(), (rows, idx.ravel())), shape=(len(points),) * 2)
    affinity = affinity.maximum(affinity.T)
    degree = np.asarray(affinity.sum(axis=1)).ravel()
    return affinity.tocsr(), degree


def spectral_segment(x, n: int, floor: float, seed: int = 0) -> np.ndarray:
    """Normalized-cut spectral clustering of lifted foreground pixels.

    At most 2000 evenly strided points are clustered; every other
    foreground pixel, and any point isolated in the affinity graph, takes
    the label of its nearest clustered point.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    image = _as_image(x)
    rows_cols, points = lift_foreground(image, floor)
    if len(points) == 0:
        return np.zeros(image.shape, dtype=np.uint8)
    if n == 1 or len(points) <= n:
        return _labels_to_mask(image.shape, rows_cols, np.zeros(len(points), dtype=np.int64))

    sample = np.unique(np.linspace(0, len(points) - 1, min(len(points), SPECTRAL_MAX_POINTS)).astype(int))
    sampled = points[sample]
    affinity, degree = _knn_affinity(sampled)
    connected = degree > 0
    if connected.sum() <= n:
        logger.warning("degenerate affinity graph; one segment")
        return _labels_to_mask(image.shape, rows_cols, np.zeros(len(points), dtype=np.int64))
    core = affinity[connected][:, connected]
    core_labels = spectral_clustering(
        core, n_clusters=n, assign_labels="kmeans", random_state=seed
    )

    anchors = sampled[connected]
    nearest = NearestNeighbors(n_neighbors=1).fit(anchors)
    _, idx = nearest.kneighbors(points)
    labels = core_labels[idx[:, 0]]
    return _labels_to_mask(image.shape, rows_cols, labels)
