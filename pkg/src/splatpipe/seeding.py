"""Surface-statistics Gaussian seeding: KNN PCA normals and disc-like scales.

Each dense point becomes one anisotropic Gaussian whose smallest axis follows
the local surface normal (smallest-eigenvalue direction of the neighborhood
covariance), with the normal-axis scale a fixed fraction of the tangential
scale. Degenerate neighborhoods (collinear, or too few points) fall back to
isotropic seeds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .scene import DenseCloud, GaussianModel, logit
from .se3 import quats_from_z_axis

logger = logging.getLogger(__name__)


@dataclass
class SeedConfig:
    k_neighbors: int = 16  # PCA neighborhood size
    k_scale: int = 3  # neighbors averaged for the tangential scale
    normal_scale_ratio: float = 0.3  # normal-axis scale / tangential scale
    initial_opacity: float = 0.1
    scale_clamp: tuple = (5e-4, 5e-2)  # meters, guards fusion outliers
    include_self: bool = False  # whether the PCA neighborhood includes the point


@dataclass
class SurfaceStats:
    centroid: np.ndarray  # (N, 3) neighbor means
    covariance: np.ndarray  # (N, 3, 3) neighbor covariances
    normal: np.ndarray  # (N, 3) unit, smallest-eigenvalue direction
    tangential_scale: np.ndarray  # (N,) meters
    fallback: np.ndarray  # (N,) bool: normal ill-defined


def knn(points: np.ndarray, i: int, k: int) -> np.ndarray:
    """Indices of the k nearest neighbors of point i (excluded), Euclidean
    distance, ties broken by smaller index. Uses all other points (with a
    warning) when fewer than k exist."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n - 1 < k:
        logger.warning("knn: only %d neighbors available, wanted %d", n - 1, k)
        k = n - 1
    d = np.linalg.norm(points - points[i], axis=1)
    order = np.lexsort((np.arange(n), d))
    order = order[order != i]
    return order[:k]


def knn_all(points: np.ndarray, k: int) -> np.ndarray:
    """(N, k) nearest-neighbor indices for every point, same tie rule as knn.

    KD-tree accelerated; rows with any distance tie (or whose k-th distance
    ties the truncated candidate set) are re-resolved brute-force so results
    match the exact rule.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    k = min(k, n - 1)
    if k <= 0:
        return np.zeros((n, 0), dtype=np.intp)
    kq = min(n, k + 16)
    tree = cKDTree(points)
    dist, idx = tree.query(points, k=kq)

    has_tie = (dist[:, :-1] == dist[:, 1:]).any(axis=1)
    if kq < n:
        has_tie |= dist[:, -1] <= dist[:, k] + 1e-15

    out = np.empty((n, k), dtype=np.intp)
    clean = ~has_tie
    # no ties: query order is already (distance, index) and self sits first
    out[clean] = idx[clean, 1 : k + 1]
    for i in np.nonzero(has_tie)[0]:
        out[i] = knn(points, i, k)
    return out


def surface_stats(points: np.ndarray, cfg: SeedConfig = None, source_centers: np.ndarray = None) -> SurfaceStats:
    """Neighborhood centroid/covariance, PCA normal, and tangential scale per point.

    The covariance averages over the K neighbors only (the point itself is
    excluded unless configured otherwise). Normal signs point toward the
    observing camera when provenance is available, otherwise the largest
    component is made positive so results stay deterministic.
    """
    cfg = cfg or SeedConfig()
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    nbrs = knn_all(points, cfg.k_neighbors)
    k_eff = nbrs.shape[1]
    if k_eff < 2:
        return SurfaceStats(
            centroid=points.copy(),
            covariance=np.zeros((n, 3, 3)),
            normal=np.tile([0.0, 0.0, 1.0], (n, 1)),
            tangential_scale=np.full(n, 0.01),
            fallback=np.ones(n, dtype=bool),
        )

    neigh = points[nbrs]  # (N, K, 3)
    if cfg.include_self:
        neigh = np.concatenate([points[:, None, :], neigh], axis=1)
    pbar = neigh.mean(axis=1)
    diffs = neigh - pbar[:, None, :]
    cov = np.einsum("nki,nkj->nij", diffs, diffs) / neigh.shape[1]

    w, v = np.linalg.eigh(cov)  # ascending eigenvalues
    normal = v[:, :, 0]
    # collinear neighborhoods (two vanishing eigenvalues) have no usable normal
    fallback = w[:, 1] <= 1e-10 * np.maximum(w[:, 2], 1e-300)

    if source_centers is not None:
        flip = np.einsum("ni,ni->n", normal, source_centers - points) < 0
        normal[flip] = -normal[flip]
    else:
        main = np.argmax(np.abs(normal), axis=1)
        sign = np.sign(normal[np.arange(n), main])
        normal *= np.where(sign == 0, 1.0, sign)[:, None]

    k_s = min(cfg.k_scale, k_eff)
    dists = np.linalg.norm(points[nbrs[:, :k_s]] - points[:, None, :], axis=2)
    scale = np.clip(dists.mean(axis=1), cfg.scale_clamp[0], cfg.scale_clamp[1])
    return SurfaceStats(pbar, cov, normal, scale, fallback)


def seed_gaussians(cloud: DenseCloud, cfg: SeedConfig = None) -> GaussianModel:
    """Disc-like anisotropic seeds: tangential scales s, normal-axis 0.3 s,
    local z mapped to the surface normal by a shortest-arc rotation."""
    cfg = cfg or SeedConfig()
    if len(cloud) == 0:
        raise ValueError("cannot seed from an empty cloud")
    stats = surface_stats(cloud.positions, cfg, cloud.source_centers)
    n = len(cloud)

    s = stats.tangential_scale
    scales = np.stack([s, s, cfg.normal_scale_ratio * s], axis=1)
    rots = quats_from_z_axis(stats.normal)
    if stats.fallback.any():
        scales[stats.fallback] = s[stats.fallback, None]
        rots[stats.fallback] = np.array([1.0, 0.0, 0.0, 0.0])

    return GaussianModel(
        positions=cloud.positions.copy(),
        log_scales=np.log(scales),
        rotations=rots,
        opacity_logits=np.full(n, logit(np.array(cfg.initial_opacity))),
        color_logits=logit(cloud.colors),
    )


def isotropic_seeds(cloud: DenseCloud, cfg: SeedConfig = None) -> GaussianModel:
    """Ablation seeding: isotropic scales from mean neighbor distance only."""
    cfg = cfg or SeedConfig()
    if len(cloud) == 0:
        raise ValueError("cannot seed from an empty cloud")
    n = len(cloud)
    nbrs = knn_all(cloud.positions, cfg.k_scale)
    if nbrs.shape[1] == 0:
        s = np.full(n, 0.01)
    else:
        dists = np.linalg.norm(cloud.positions[nbrs] - cloud.positions[:, None, :], axis=2)
        s = np.clip(dists.mean(axis=1), cfg.scale_clamp[0], cfg.scale_clamp[1])
    return GaussianModel(
        positions=cloud.positions.copy(),
        log_scales=np.log(np.stack([s, s, s], axis=1)),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full(n, logit(np.array(cfg.initial_opacity))),
        color_logits=logit(cloud.colors),
    )
