"""Single-reference plane-sweep MVS: census matching, SGM aggregation,
ratio-confidence filtering, and fusion into a colored dense cloud.

The cost volume samples depth hypotheses uniformly in inverse depth between
bounds derived from sparse-point depth quantiles. Matching cost is the
Hamming distance between census bitstrings; pixels warping outside the
reference (or onto its invalid border) take the maximum cost.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .scene import DenseCloud, Frame, Intrinsics, PoseSE3, SparseMap

logger = logging.getLogger(__name__)


@dataclass
class MVSConfig:
    n_hypotheses: int = 64
    census_window: int = 7  # odd, <= 7 (bits must fit a uint64)
    p1: int = 6  # SGM small-jump penalty, bit units
    p2: int = 96  # SGM large-jump penalty, bit units
    conf_thresh: float = 0.4
    baseline_target: float = 0.15  # meters
    baseline_sigma: float = 0.075
    angle_min_deg: float = 3.0
    angle_floor_deg: float = 1.0
    fuse_depth_min: float = 0.05
    fuse_depth_max: float = 5.0
    voxel_size: float = 0.005

    def __post_init__(self):
        if self.census_window % 2 == 0 or self.census_window > 7:
            raise ValueError("census window must be odd and at most 7")


@dataclass
class DepthRange:
    d_min: float
    d_max: float
    n_hypotheses: int = 64

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"invalid depth range [{self.d_min}, {self.d_max}]")

    def hypotheses(self) -> np.ndarray:
        """Ascending depths, uniformly spaced in inverse depth."""
        inv = np.linspace(1.0 / self.d_min, 1.0 / self.d_max, self.n_hypotheses)
        return 1.0 / inv


@dataclass
class CostVolume:
    costs: np.ndarray  # (H, W, D) int32, 0..max_cost
    depths: np.ndarray  # (D,) hypothesis depths, ascending
    max_cost: int


@dataclass
class DepthMap:
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    confidence: np.ndarray  # (H, W) in [0, 1]

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


def nearest_rank_quantile(values: np.ndarray, q: float) -> float:
    """Nearest-rank quantile: smallest v with cdf(v) >= q."""
    a = np.sort(np.asarray(values, dtype=np.float64))
    if len(a) == 0:
        raise ValueError("quantile of empty set")
    idx = max(int(np.ceil(q * len(a))) - 1, 0)
    return float(a[idx])


def depth_range(
    target: int, smap: SparseMap, n_hypotheses: int = 64, min_visible: int = 20
) -> DepthRange:
    """[0.6 q05, 1.6 q95] over depths of sparse points visible in the target.

    Falls back to all map points in front of the camera when the target sees
    fewer than ``min_visible`` points, and to center distances of the whole
    map (with a warning) below 5.
    """
    pose = smap.poses[target]
    vis = smap.obs_point[smap.obs_cam == target]
    depths = np.array([])
    if len(vis):
        z = smap.points[np.unique(vis)] @ pose.rotation.T[:, 2] + pose.translation[2]
        depths = z[z > 1e-6]
    if len(depths) < min_visible:
        z_all = smap.points @ pose.rotation.T[:, 2] + pose.translation[2]
        in_front = z_all[z_all > 1e-6]
        if len(depths) >= 5:
            pass  # keep the visible points: few but usable
        elif len(in_front) >= 5:
            logger.warning("frame %d: <5 visible points, using all in-front map points", target)
            depths = in_front
        else:
            logger.warning("frame %d: degenerate visibility, using global scene range", target)
            depths = np.linalg.norm(smap.points - pose.center(), axis=1)
            if len(depths) == 0:
                raise ValueError("empty sparse map: cannot estimate depth range")
    q05 = nearest_rank_quantile(depths, 0.05)
    q95 = nearest_rank_quantile(depths, 0.95)
    return DepthRange(max(0.6 * q05, 1e-3), max(1.6 * q95, 2e-3), n_hypotheses)


def reference_score(b: float, alpha_deg: float, cfg: MVSConfig) -> float:
    """Baseline/viewing-angle balance used to pick the reference frame."""
    gauss = np.exp(-((b - cfg.baseline_target) ** 2) / (2.0 * cfg.baseline_sigma**2))
    return float(gauss * max(alpha_deg / cfg.angle_min_deg, 1.0))


def select_reference(
    target: int, candidates: list[int], smap: SparseMap, cfg: MVSConfig = None
) -> tuple[int | None, list]:
    """Best reference for the target frame plus the top-3 diagnostic scores.

    Candidates with mean triangulation angle under the hard floor are
    excluded; returns (None, scored) when nothing survives.
    """
    cfg = cfg or MVSConfig()
    pose_t = smap.poses[target]
    pts_t = set(smap.obs_point[smap.obs_cam == target].tolist())
    scored = []
    for cand in sorted(candidates):
        if cand == target:
            continue
        pts_c = set(smap.obs_point[smap.obs_cam == cand].tolist())
        common = np.array(sorted(pts_t & pts_c), dtype=np.intp)
        if len(common) == 0:
            continue
        pose_c = smap.poses[cand]
        b = float(np.linalg.norm(pose_t.center() - pose_c.center()))
        da = smap.points[common] - pose_t.center()
        db = smap.points[common] - pose_c.center()
        cosang = np.einsum("ni,ni->n", da, db) / np.maximum(
            np.linalg.norm(da, axis=1) * np.linalg.norm(db, axis=1), 1e-12
        )
        alpha = float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))).mean())
        if alpha < cfg.angle_floor_deg:
            continue
        scored.append({"frame": cand, "baseline": b, "angle_deg": alpha,
                       "score": reference_score(b, alpha, cfg)})
    scored.sort(key=lambda s: (-s["score"], s["frame"]))
    if not scored:
        return None, []
    return scored[0]["frame"], scored[:3]


# ---------------------------------------------------------------------------
# census


def _census_offsets(window: int) -> np.ndarray:
    r = window // 2
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0)]
    return np.array(offs)


def census_image(luma: np.ndarray, window: int = 7) -> tuple[np.ndarray, np.ndarray]:
    """Census bitstrings (uint64) and a validity mask (borders invalid).

    Bit k (row-major window order, center excluded) is 1 iff that neighbor
    is strictly darker than the center.
    """
    h, w = luma.shape
    r = window // 2
    bits = np.zeros((h, w), dtype=np.uint64)
    padded = np.pad(luma, r, mode="edge")
    for k, (dy, dx) in enumerate(_census_offsets(window)):
        nb = padded[r + dy : r + dy + h, r + dx : r + dx + w]
        bits |= (nb < luma).astype(np.uint64) << np.uint64(k)
    valid = np.zeros((h, w), dtype=bool)
    valid[r : h - r, r : w - r] = True
    return bits, valid


def census(luma: np.ndarray, x: int, y: int, window: int = 7) -> int:
    """Census bitstring at one pixel; raises when the window leaves the image."""
    r = window // 2
    h, w = luma.shape
    if not (r <= x < w - r and r <= y < h - r):
        raise ValueError(f"census window out of bounds at ({x}, {y})")
    center = luma[y, x]
    code = 0
    for k, (dy, dx) in enumerate(_census_offsets(window)):
        if luma[y + dy, x + dx] < center:
            code |= 1 << k
    return code


def hamming64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.bitwise_xor(a, b)).astype(np.int32)


# ---------------------------------------------------------------------------
# plane sweep and aggregation


def plane_sweep(
    target: Frame,
    reference: Frame,
    pose_t: PoseSE3,
    pose_r: PoseSE3,
    drange: DepthRange,
    cfg: MVSConfig = None,
) -> CostVolume:
    """Per-pixel census Hamming cost over inverse-depth-spaced hypotheses.

    Each target pixel is back-projected at the hypothesis depth and sampled
    in the reference by nearest pixel; out-of-bounds or invalid-border warps
    cost the full bit count.
    """
    cfg = cfg or MVSConfig()
    window = cfg.census_window
    max_cost = window * window - 1
    cen_t, val_t = census_image(target.luma, window)
    cen_r, val_r = census_image(reference.luma, window)

    h, w = target.luma.shape
    intr_t, intr_r = target.intrinsics, reference.intrinsics
    ys, xs = np.mgrid[0:h, 0:w]
    dirs = np.stack(
        [(xs - intr_t.cx) / intr_t.fx, (ys - intr_t.cy) / intr_t.fy, np.ones((h, w))], axis=-1
    ).reshape(-1, 3)

    rel = pose_r.compose(pose_t.inverse())
    R_rel, t_rel = rel.rotation, rel.translation

    depths = drange.hypotheses()
    costs = np.full((h, w, len(depths)), max_cost, dtype=np.int32)
    cen_t_flat = cen_t.reshape(-1)
    target_valid = val_t.reshape(-1)

    for k, d in enumerate(depths):
        x_ref = d * (dirs @ R_rel.T) + t_rel
        z = x_ref[:, 2]
        ok = z > 1e-6
        zs = np.where(ok, z, 1.0)
        u = np.rint(intr_r.fx * x_ref[:, 0] / zs + intr_r.cx).astype(np.intp)
        v = np.rint(intr_r.fy * x_ref[:, 1] / zs + intr_r.cy).astype(np.intp)
        ok &= (u >= 0) & (u < w) & (v >= 0) & (v < h) & target_valid
        uc = np.clip(u, 0, w - 1)
        vc = np.clip(v, 0, h - 1)
        ok &= val_r[vc, uc]
        cost_k = hamming64(cen_t_flat, cen_r[vc, uc])
        costs[:, :, k] = np.where(ok, cost_k, max_cost).reshape(h, w)
    return CostVolume(costs, depths, max_cost)


def sgm_aggregate(vol: CostVolume, p1: int = 6, p2: int = 96) -> CostVolume:
    """4-path semi-global aggregation (left, right, up, down).

    L_r(p,d) = C(p,d) + min(L_r(q,d), L_r(q,d+-1)+P1, min_k L_r(q,k)+P2)
             - min_k L_r(q,k), with q the previous pixel along the path.
    """
    C = vol.costs.astype(np.int32)
    h, w, D = C.shape
    big = np.int32(1 << 29)
    total = np.zeros_like(C)

    def sweep(cost_seq):
        # cost_seq: (steps, lanes, D); recurrence along axis 0
        L = np.empty_like(cost_seq)
        L[0] = cost_seq[0]
        for s in range(1, len(cost_seq)):
            prev = L[s - 1]
            up = np.concatenate([np.full((prev.shape[0], 1), big), prev[:, :-1] + p1], axis=1)
            down = np.concatenate([prev[:, 1:] + p1, np.full((prev.shape[0], 1), big)], axis=1)
            m = prev.min(axis=1, keepdims=True)
            L[s] = cost_seq[s] + np.minimum(np.minimum(prev, np.minimum(up, down)), m + p2) - m
        return L

    Cx = np.moveaxis(C, 1, 0)  # (w, h, D): steps over x
    total += np.moveaxis(sweep(Cx), 0, 1)  # left-to-right
    total += np.moveaxis(sweep(Cx[::-1])[::-1], 0, 1)  # right-to-left
    total += sweep(C)  # top-to-bottom: steps over y
    total += sweep(C[::-1])[::-1]  # bottom-to-top
    return CostVolume(total, vol.depths, 4 * (vol.max_cost + p2))


def extract_depth(vol: CostVolume, conf_thresh: float = 0.4) -> DepthMap:
    """Winner-take-all with parabolic refinement in inverse depth.

    Confidence is 1 - c_best / c_second, the second-best taken outside the
    winner's immediate neighborhood; pixels under the threshold (or with a
    flat cost curve) are invalidated.
    """
    C = vol.costs
    h, w, D = C.shape
    k_best = C.argmin(axis=2)
    c_best = np.take_along_axis(C, k_best[:, :, None], axis=2)[:, :, 0].astype(np.float64)

    big = np.int64(1 << 60)
    masked = C.astype(np.int64).copy()
    ks = np.arange(D)
    near = np.abs(ks[None, None, :] - k_best[:, :, None]) <= 1
    masked[near] = big
    c_second = masked.min(axis=2).astype(np.float64)
    c_second_valid = c_second < big
    with np.errstate(divide="ignore", invalid="ignore"):
        conf = np.where(
            c_second_valid & (c_second > 0), 1.0 - c_best / np.where(c_second > 0, c_second, 1.0), 0.0
        )
    conf = np.clip(conf, 0.0, 1.0)

    inv = 1.0 / vol.depths
    step = inv[1] - inv[0] if D > 1 else 0.0
    inv_best = inv[k_best]
    interior = (k_best > 0) & (k_best < D - 1)
    km = np.clip(k_best - 1, 0, D - 1)
    kp = np.clip(k_best + 1, 0, D - 1)
    cm = np.take_along_axis(C, km[:, :, None], axis=2)[:, :, 0].astype(np.float64)
    cp = np.take_along_axis(C, kp[:, :, None], axis=2)[:, :, 0].astype(np.float64)
    denom = cm - 2.0 * c_best + cp
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(denom > 0, 0.5 * (cm - cp) / np.where(denom > 0, denom, 1.0), 0.0)
    delta = np.clip(delta, -0.5, 0.5)
    inv_refined = np.where(interior, inv_best + delta * step, inv_best)
    depth = 1.0 / inv_refined
    depth = np.clip(depth, vol.depths[0], vol.depths[-1])

    keep = conf >= conf_thresh
    return DepthMap(np.where(keep, depth, 0.0), np.where(keep, conf, conf))


def fuse(
    depth_maps: dict,
    frames: list[Frame],
    poses: list[PoseSE3],
    cfg: MVSConfig = None,
) -> DenseCloud:
    """Back-project valid pixels within the fusion depth band, color them from
    their frame, and subsample on a voxel grid (first point per voxel wins,
    in frame-then-raster order)."""
    cfg = cfg or MVSConfig()
    positions, colors, centers = [], [], []
    for idx in sorted(depth_maps.keys()):
        dm = depth_maps[idx]
        frame, pose = frames[idx], poses[idx]
        sel = dm.valid & (dm.depth >= cfg.fuse_depth_min) & (dm.depth <= cfg.fuse_depth_max)
        if not sel.any():
            continue
        ys, xs = np.nonzero(sel)
        d = dm.depth[ys, xs]
        pts_cam = frame.intrinsics.unproject(np.stack([xs, ys], axis=1).astype(np.float64), d)
        inv = pose.inverse()
        pts_world = pts_cam @ inv.rotation.T + inv.translation
        positions.append(pts_world)
        colors.append(frame.image[ys, xs])
        centers.append(np.broadcast_to(pose.center(), pts_world.shape).copy())
    if not positions:
        return DenseCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))
    pos = np.concatenate(positions)
    col = np.concatenate(colors)
    cen = np.concatenate(centers)
    if cfg.voxel_size > 0:
        keys = np.floor(pos / cfg.voxel_size).astype(np.int64)
        _, first = np.unique(keys, axis=0, return_index=True)
        keep = np.sort(first)
        pos, col, cen = pos[keep], col[keep], cen[keep]
    return DenseCloud(pos, col, cen)
