"""Synthetic scenes with exact ground truth for tests and end-to-end runs.

Two generators: a textured fronto-parallel plane (analytic per-pixel depth,
exact sparse tracks) and a random-Gaussian scene rendered by the package's
own rasterizer. ``perturb`` produces the noisy inputs that drive solver
recovery experiments. Textures are procedural value noise so everything is
hermetic and deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rasterizer import rasterize_reference, project, sort_by_depth
from .scene import Frame, GaussianModel, Intrinsics, PoseSE3, SparseMap
from .se3 import exp_so3
from .ba import triangulate


@dataclass
class SyntheticScene:
    frames: list  # list[Frame]; coarse_pose holds the true pose
    true_poses: list  # list[PoseSE3]
    tracks: SparseMap  # exact observations of the true 3D points
    depth_maps: list = None  # (H, W) per frame, None for Gaussian scenes
    gaussians: GaussianModel = None  # truth for Gaussian scenes
    plane_depth: float = None  # world z of the plane, plane scenes only


class ValueNoiseTexture:
    """Periodic multi-octave value noise, evaluated at arbitrary float coords."""

    def __init__(self, seed: int, grid: int = 64, octaves: int = 4, channels: int = 3):
        rng = np.random.default_rng(seed)
        self.grids = [rng.uniform(0.0, 1.0, size=(channels, grid, grid)) for _ in range(octaves)]
        self.grid = grid

    def sample(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Color in [0,1] at world-plane coordinates (meters); (...,3)."""
        out = 0.0
        amp = 1.0
        total = 0.0
        freq = 8.0  # base lattice cells per meter
        for g in self.grids:
            out = out + amp * self._bilinear(g, x * freq, y * freq)
            total += amp
            amp *= 0.55
            freq *= 2.3
        return out / total

    def _bilinear(self, g: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        n = self.grid
        i0 = np.floor(u).astype(np.int64)
        j0 = np.floor(v).astype(np.int64)
        fu = u - i0
        fv = v - j0
        i0m, i1m = i0 % n, (i0 + 1) % n
        j0m, j1m = j0 % n, (j0 + 1) % n
        c00 = g[:, j0m, i0m]
        c10 = g[:, j0m, i1m]
        c01 = g[:, j1m, i0m]
        c11 = g[:, j1m, i1m]
        top = c00 * (1 - fu) + c10 * fu
        bot = c01 * (1 - fu) + c11 * fu
        return np.moveaxis(top * (1 - fv) + bot * fv, 0, -1)


def default_intrinsics(width: int = 96, height: int = 72, f: float = 85.0) -> Intrinsics:
    return Intrinsics(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                      width=width, height=height)


def gen_plane_scene(
    texture_seed: int = 0,
    n_views: int = 5,
    baseline: float = 0.06,
    depth: float = 1.2,
    intrinsics: Intrinsics = None,
    n_track_points: int = 200,
    fps: float = 10.0,
) -> SyntheticScene:
    """Textured plane at world z = depth, cameras shifted along x (identity
    rotation), exact constant depth maps and exact plane-point tracks."""
    if n_views < 2:
        raise ValueError("need at least 2 views")
    intr = intrinsics or default_intrinsics()
    tex = ValueNoiseTexture(texture_seed)
    rng = np.random.default_rng(texture_seed + 1)

    poses = []
    frames = []
    depth_maps = []
    h, w = intr.height, intr.width
    ys, xs = np.mgrid[0:h, 0:w]
    for i in range(n_views):
        center = np.array([i * baseline, 0.0, 0.0])
        pose = PoseSE3(np.eye(3), -center)  # world-to-camera with R = I
        poses.append(pose)
        # ray through each pixel hits the plane at world (X, Y, depth)
        zc = depth - center[2]
        X = (xs - intr.cx) / intr.fx * zc + center[0]
        Y = (ys - intr.cy) / intr.fy * zc + center[1]
        img = tex.sample(X.ravel(), Y.ravel()).reshape(h, w, 3)
        frames.append(Frame(id=i, timestamp=i / fps, image=img, intrinsics=intr, coarse_pose=pose))
        depth_maps.append(np.full((h, w), zc))

    # exact tracks: plane points spread over the union of the views
    span_x = (n_views - 1) * baseline
    half_w = (w / 2.0) / intr.fx * depth
    half_h = (h / 2.0) / intr.fy * depth
    px = rng.uniform(-half_w * 0.9, span_x + half_w * 0.9, n_track_points)
    py = rng.uniform(-half_h * 0.9, half_h * 0.9, n_track_points)
    pts = np.stack([px, py, np.full(n_track_points, depth)], axis=1)
    tracks = _exact_tracks(pts, poses, [intr] * n_views, list(range(n_views)))
    return SyntheticScene(frames, poses, tracks, depth_maps=depth_maps, plane_depth=depth)


def gen_gaussian_scene(
    n: int = 50,
    seed: int = 0,
    n_views: int = 5,
    intrinsics: Intrinsics = None,
    arc_radius: float = 2.0,
    arc_span_deg: float = 30.0,
) -> SyntheticScene:
    """Random Gaussians in a unit box viewed from an arc, rendered by the
    reference rasterizer; tracks observe the Gaussian centers exactly."""
    if n < 1:
        raise ValueError("need at least one Gaussian")
    intr = intrinsics or default_intrinsics()
    rng = np.random.default_rng(seed)

    positions = rng.uniform(-0.5, 0.5, (n, 3))
    scales = rng.uniform(0.02, 0.08, (n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    quats[quats[:, 0] < 0] *= -1
    opacities = rng.uniform(0.4, 0.9, n)
    colors = rng.uniform(0.1, 0.9, (n, 3))
    model = GaussianModel.from_colors(positions, scales, quats, opacities, colors)

    poses = []
    frames = []
    angles = np.linspace(-np.radians(arc_span_deg) / 2, np.radians(arc_span_deg) / 2, n_views)
    for i, ang in enumerate(angles):
        center = np.array([arc_radius * np.sin(ang), 0.0, -arc_radius * np.cos(ang)])
        # look at the origin: camera z axis toward -center
        R = _look_at_rotation(center, np.zeros(3))
        pose = PoseSE3(R, -R @ center)
        poses.append(pose)
        splats = project(model, pose, intr)
        img = rasterize_reference(splats, sort_by_depth(splats), intr.width, intr.height)
        frames.append(Frame(id=i, timestamp=i / 10.0, image=np.clip(img, 0.0, 1.0),
                            intrinsics=intr, coarse_pose=pose))

    tracks = _exact_tracks(positions, poses, [intr] * n_views, list(range(n_views)))
    return SyntheticScene(frames, poses, tracks, gaussians=model)


def _look_at_rotation(eye: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-to-camera rotation with +z toward the target, y down-ish."""
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, -1.0, 0.0])
    right = np.cross(up, fwd)
    if np.linalg.norm(right) < 1e-9:
        up = np.array([0.0, 0.0, -1.0])
        right = np.cross(up, fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=0)


def _exact_tracks(points, poses, intrinsics, frame_ids) -> SparseMap:
    """Project points into every view; keep in-bounds, in-front observations
    and points seen at least twice."""
    points = np.asarray(points, dtype=np.float64)
    obs_cam, obs_point, obs_px = [], [], []
    for ci, (pose, intr) in enumerate(zip(poses, intrinsics)):
        cam = pose.apply(points)
        z = cam[:, 2]
        px = intr.project(cam)
        ok = (
            (z > 1e-3)
            & (px[:, 0] >= 0) & (px[:, 0] <= intr.width - 1)
            & (px[:, 1] >= 0) & (px[:, 1] <= intr.height - 1)
        )
        for j in np.nonzero(ok)[0]:
            obs_cam.append(ci)
            obs_point.append(j)
            obs_px.append(px[j])
    obs_cam = np.array(obs_cam, dtype=np.intp)
    obs_point = np.array(obs_point, dtype=np.intp)
    obs_px = np.array(obs_px, dtype=np.float64).reshape(-1, 2)

    counts = np.bincount(obs_point, minlength=len(points))
    keep = counts >= 2
    remap = -np.ones(len(points), dtype=np.intp)
    remap[keep] = np.arange(int(keep.sum()))
    sel = keep[obs_point]
    return SparseMap(
        poses=list(poses),
        frame_ids=list(frame_ids),
        points=points[keep],
        obs_cam=obs_cam[sel],
        obs_point=remap[obs_point[sel]],
        obs_px=obs_px[sel],
    )


def perturb(
    scene: SyntheticScene,
    sigma_rot_deg: float = 1.0,
    sigma_t: float = 0.02,
    outlier_frac: float = 0.0,
    seed: int = 0,
    retriangulate: bool = True,
):
    """Noisy solver input: pose twists plus planted outlier observations.

    Returns (noisy SparseMap, outlier mask over observations). Points are
    re-triangulated from the perturbed poses by default, mirroring how the
    pipeline builds its initial map; outliers get a 20-100 px offset.
    """
    if sigma_rot_deg < 0 or sigma_t < 0:
        raise ValueError("sigmas must be non-negative")
    rng = np.random.default_rng(seed)
    tracks = scene.tracks
    intr = [f.intrinsics for f in scene.frames]

    poses = []
    for pose in tracks.poses:
        w = rng.normal(0.0, np.radians(sigma_rot_deg), 3)
        dt = rng.normal(0.0, sigma_t, 3)
        poses.append(PoseSE3(exp_so3(w) @ pose.rotation, pose.translation + dt))

    obs_px = tracks.obs_px.copy()
    outliers = np.zeros(len(obs_px), dtype=bool)
    if outlier_frac > 0:
        n_out = int(round(outlier_frac * len(obs_px)))
        pick = rng.choice(len(obs_px), size=n_out, replace=False)
        offset = rng.uniform(20.0, 100.0, (n_out, 2)) * rng.choice([-1.0, 1.0], (n_out, 2))
        obs_px[pick] += offset
        outliers[pick] = True

    noisy = SparseMap(
        poses=poses,
        frame_ids=list(tracks.frame_ids),
        points=tracks.points.copy(),
        obs_cam=tracks.obs_cam.copy(),
        obs_point=tracks.obs_point.copy(),
        obs_px=obs_px,
    )
    if retriangulate:
        pts = noisy.points.copy()
        for j in range(noisy.n_points):
            rows = np.nonzero(noisy.obs_point == j)[0]
            cams = noisy.obs_cam[rows]
            X = triangulate(
                noisy.obs_px[rows],
                [poses[c] for c in cams],
                [intr[c] for c in cams],
                min_angle_deg=0.0,
            )
            if X is not None:
                pts[j] = X
        noisy.points = pts
    return noisy, outliers
