"""Binary feature front-end: FAST segment-test corners with steered BRIEF descriptors.

Everything runs on the frame's luma plane. Descriptors are 256-bit strings
packed into 32 bytes; matching is mutual-nearest Hamming with a ratio test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter

from .scene import Frame

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy)
_CIRCLE = np.array(
    [
        (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
        (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
    ]
)
_ARC_LEN = 9  # FAST-9
_PATCH_HALF = 15  # 31x31 descriptor patch
_N_BITS = 256

MIN_KEYPOINTS = 8


def _brief_pattern() -> np.ndarray:
    """Fixed test-pair layout (256, 2, 2), Gaussian about the patch center.

    Points are clipped radially so any steering rotation stays inside the
    31x31 patch.
    """
    rng = np.random.default_rng(53)
    pts = rng.normal(0.0, _PATCH_HALF / 5.0, size=(_N_BITS, 2, 2))
    radius = np.linalg.norm(pts, axis=-1, keepdims=True)
    return pts * np.minimum(1.0, (_PATCH_HALF - 1.0) / np.maximum(radius, 1e-9))


_PATTERN = _brief_pattern()


@dataclass
class FeatureSet:
    keypoints: np.ndarray  # (N, 2) pixel (x, y)
    responses: np.ndarray  # (N,)
    descriptors: np.ndarray  # (N, 32) uint8, 256 bits
    flagged: bool = False  # too few keypoints for geometry

    def __len__(self) -> int:
        return len(self.keypoints)


def _fast_corners(luma: np.ndarray, threshold: float, border: int) -> tuple[np.ndarray, np.ndarray]:
    """Segment-test corners: >= 9 contiguous circle pixels all brighter or all
    darker than the center by ``threshold``. Returns (xy (N,2), response (N,))."""
    h, w = luma.shape
    if h <= 2 * border or w <= 2 * border:
        return np.zeros((0, 2), dtype=np.intp), np.zeros(0)
    pad = 3
    lp = np.pad(luma, pad, mode="edge")
    ring = np.empty((16, h, w))
    for k, (dx, dy) in enumerate(_CIRCLE):
        ring[k] = lp[pad + dy : pad + dy + h, pad + dx : pad + dx + w]
    diff = ring - luma[None]
    bright = diff > threshold
    dark = diff < -threshold

    def has_arc(mask):
        hit = np.zeros((h, w), dtype=bool)
        for s in range(16):
            idx = [(s + k) % 16 for k in range(_ARC_LEN)]
            hit |= mask[idx].all(axis=0)
        return hit

    corner = has_arc(bright) | has_arc(dark)
    corner[:border] = corner[-border:] = False
    corner[:, :border] = corner[:, -border:] = False

    # response: absolute-difference mass beyond the threshold over the ring
    score = np.where(corner, np.maximum(np.abs(diff) - threshold, 0.0).sum(axis=0), 0.0)
    # 3x3 non-maximum suppression, ties kept (both survive, harmless)
    keep = corner & (score >= maximum_filter(score, size=3))
    ys, xs = np.nonzero(keep)
    return np.stack([xs, ys], axis=1), score[ys, xs]


def detect_and_describe(
    frame: Frame,
    target_count: int = 1500,
    base_threshold: float = 0.06,
) -> FeatureSet:
    """FAST corners with orientation-steered BRIEF descriptors.

    The detection threshold adapts downward until the corner count reaches
    the target (or the floor); the strongest ``target_count`` responses are
    kept. Frames yielding fewer than MIN_KEYPOINTS corners are flagged so
    the solver can exclude them.
    """
    luma = frame.luma
    border = _PATCH_HALF + 1

    threshold = base_threshold
    xy, resp = _fast_corners(luma, threshold, border)
    while len(xy) < target_count and threshold > 0.008:
        threshold *= 0.5
        xy, resp = _fast_corners(luma, threshold, border)
    if len(xy) > target_count:
        order = np.argsort(-resp, kind="stable")[:target_count]
        order = order[np.argsort(order, kind="stable")]  # restore raster order
        xy, resp = xy[order], resp[order]

    if len(xy) < MIN_KEYPOINTS:
        return FeatureSet(xy.astype(np.float64), resp, np.zeros((len(xy), 32), np.uint8), flagged=True)

    smooth = gaussian_filter(luma, sigma=2.0, mode="nearest")
    angles = _orientations(smooth, xy)
    desc = _describe(smooth, xy, angles)
    return FeatureSet(xy.astype(np.float64), resp, desc, flagged=False)


def _orientations(smooth: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Intensity-centroid orientation over a 7x7 disc around each keypoint."""
    r = 3
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    disc = (dx * dx + dy * dy) <= r * r
    dxf, dyf = dx[disc], dy[disc]
    ys, xs = xy[:, 1][:, None] + dyf[None, :], xy[:, 0][:, None] + dxf[None, :]
    patch = smooth[ys, xs]
    m10 = (patch * dxf).sum(axis=1)
    m01 = (patch * dyf).sum(axis=1)
    return np.arctan2(m01, m10)


def _describe(smooth: np.ndarray, xy: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Steered BRIEF: rotate the test pattern per keypoint, compare smoothed luma."""
    ca, sa = np.cos(angles), np.sin(angles)
    # (N, 2, 2) rotation applied to every (256, 2)-pair endpoint
    px = _PATTERN[None, :, :, 0]  # (1, 256, 2)
    py = _PATTERN[None, :, :, 1]
    rx = ca[:, None, None] * px - sa[:, None, None] * py
    ry = sa[:, None, None] * px + ca[:, None, None] * py
    sx = np.rint(xy[:, 0][:, None, None] + rx).astype(np.intp)
    sy = np.rint(xy[:, 1][:, None, None] + ry).astype(np.intp)
    sx = np.clip(sx, 0, smooth.shape[1] - 1)
    sy = np.clip(sy, 0, smooth.shape[0] - 1)
    vals = smooth[sy, sx]  # (N, 256, 2)
    bits = vals[:, :, 0] < vals[:, :, 1]
    return np.packbits(bits, axis=1)


def hamming_matrix(da: np.ndarray, db: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Pairwise Hamming distances between packed descriptor sets."""
    out = np.empty((len(da), len(db)), dtype=np.int32)
    for s in range(0, len(da), chunk):
        x = np.bitwise_xor(da[s : s + chunk, None, :], db[None, :, :])
        out[s : s + chunk] = np.bitwise_count(x).sum(axis=2, dtype=np.int32)
    return out


def match(a: FeatureSet, b: FeatureSet, ratio: float = 0.8) -> np.ndarray:
    """Mutual-nearest Hamming matches passing the best/second-best ratio test.

    Returns an (M, 2) array of (index in a, index in b).
    """
    if len(a) == 0 or len(b) == 0:
        return np.zeros((0, 2), dtype=np.intp)
    d = hamming_matrix(a.descriptors, b.descriptors)
    best_ab = d.argmin(axis=1)
    best_ba = d.argmin(axis=0)

    ia = np.arange(len(a))
    mutual = best_ba[best_ab] == ia

    best_d = d[ia, best_ab]
    if d.shape[1] == 1:
        ok = mutual  # no second neighbor to test against
    else:
        masked = d.copy()
        masked[ia, best_ab] = np.iinfo(np.int32).max
        second_d = masked.min(axis=1)
        ok = mutual & (best_d < ratio * second_d)
    return np.stack([ia[ok], best_ab[ok]], axis=1)
