"""Core domain types shared by every pipeline stage."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .se3 import quat_to_rotmat

#: Rec.601 luma weights used everywhere a scalar intensity is needed.
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def luma_of(image: np.ndarray) -> np.ndarray:
    """Per-pixel luma 0.299 R + 0.587 G + 0.114 B of an H x W x 3 image in [0, 1]."""
    return image @ LUMA_WEIGHTS


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def project(self, pts_cam: np.ndarray) -> np.ndarray:
        """Project camera-space points (..., 3) to pixels (..., 2). No cheirality check."""
        pts_cam = np.asarray(pts_cam, dtype=np.float64)
        z = pts_cam[..., 2]
        u = self.fx * pts_cam[..., 0] / z + self.cx
        v = self.fy * pts_cam[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def unproject(self, px: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Back-project pixels (..., 2) at given depths to camera-space points (..., 3)."""
        px = np.asarray(px, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        x = (px[..., 0] - self.cx) / self.fx * depth
        y = (px[..., 1] - self.cy) / self.fy * depth
        return np.stack([x, y, depth], axis=-1)


@dataclass(frozen=True)
class PoseSE3:
    """World-to-camera rigid transform, right-handed, +z forward: x_cam = R x_world + t."""

    rotation: np.ndarray  # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError(f"rotation is not SE(3): orthonormality error {err:.3e}, det {np.linalg.det(R):.6f}")

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray, orthonormal_tol: float = 1e-4) -> "PoseSE3":
        """Build from a 4x4 matrix; rejects non-SE(3) inputs beyond the tolerance."""
        T = np.asarray(T, dtype=np.float64)
        R = T[:3, :3]
        err = np.abs(R.T @ R - np.eye(3)).max()
        det = np.linalg.det(R)
        if err > orthonormal_tol or abs(det - 1.0) > orthonormal_tol:
            raise ValueError(f"matrix is not SE(3): orthonormality error {err:.3e}, det {det:.6f}")
        # re-project onto SO(3) so downstream exact checks hold
        u, _, vt = np.linalg.svd(R)
        Rn = u @ vt
        if np.linalg.det(Rn) < 0:
            Rn = u @ np.diag([1.0, 1.0, -1.0]) @ vt
        return PoseSE3(Rn, T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, pts_world: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into camera coordinates."""
        return np.asarray(pts_world) @ self.rotation.T + self.translation

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self after other: (self @ other)(x) = self(other(x))."""
        return PoseSE3(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class Frame:
    """One captured image with timestamp, intrinsics, and the tracker's coarse pose."""

    id: int
    timestamp: float
    image: np.ndarray  # (H, W, 3) linear RGB in [0, 1]
    intrinsics: Intrinsics
    coarse_pose: PoseSE3
    luma: np.ndarray = field(default=None, repr=False)  # (H, W), derived on load

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise ValueError(
                f"frame {self.id}: image {w}x{h} does not match intrinsics "
                f"{self.intrinsics.width}x{self.intrinsics.height}"
            )
        if self.luma is None:
            self.luma = luma_of(self.image)


@dataclass
class SparseMap:
    """Refined poses plus triangulated points with their 2D observations."""

    poses: list  # list[PoseSE3], one per keyframe
    frame_ids: list  # capture frame id per keyframe (parallel to poses)
    points: np.ndarray  # (P, 3)
    # observations, parallel arrays sorted by (point, camera)
    obs_cam: np.ndarray  # (M,) camera index
    obs_point: np.ndarray  # (M,) point index
    obs_px: np.ndarray  # (M, 2) observed pixel
    obs_info: np.ndarray = None  # (M, 2, 2) information weights; identity if None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.obs_cam = np.asarray(self.obs_cam, dtype=np.intp)
        self.obs_point = np.asarray(self.obs_point, dtype=np.intp)
        self.obs_px = np.asarray(self.obs_px, dtype=np.float64).reshape(-1, 2)
        if self.obs_info is None:
            self.obs_info = np.broadcast_to(np.eye(2), (len(self.obs_cam), 2, 2)).copy()
        if len(self.obs_cam) and (self.obs_cam.max() >= len(self.poses) or self.obs_point.max() >= len(self.points)):
            raise ValueError("observation references out-of-range camera or point index")

    @property
    def n_cameras(self) -> int:
        return len(self.poses)

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_observations(self) -> int:
        return len(self.obs_cam)


@dataclass
class DenseCloud:
    """Fused dense points with color and per-point source camera center.

    The source center orients seed normals; it is carried alongside the
    geometry rather than inside each point record so the arrays stay flat.
    """

    positions: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3) in [0, 1]
    source_centers: np.ndarray = None  # (N, 3) camera center that contributed each point

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("dense cloud contains non-finite coordinates")
        if self.source_centers is not None:
            self.source_centers = np.asarray(self.source_centers, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.positions)


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-6, 1.0 - 1e-6)
    return np.log(p / (1.0 - p))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class GaussianModel:
    """Canonical parameter buffers of the trained scene plus Adam moments.

    Opacity and color live as logits so optimizer steps cannot leave their
    valid ranges; scales live in log space for the same reason.
    """

    positions: np.ndarray  # (N, 3) meters
    log_scales: np.ndarray  # (N, 3) log-meters
    rotations: np.ndarray  # (N, 4) unit quaternions (w, x, y, z)
    opacity_logits: np.ndarray  # (N,)
    color_logits: np.ndarray  # (N, 3)
    adam_m: dict = None  # per-parameter first moments, canonical order
    adam_v: dict = None  # per-parameter second moments, canonical order

    PARAM_NAMES = ("positions", "log_scales", "rotations", "opacity_logits", "color_logits")

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.color_logits = np.asarray(self.color_logits, dtype=np.float64).reshape(n, 3)
        if self.adam_m is None:
            self.adam_m = {k: np.zeros_like(getattr(self, k)) for k in self.PARAM_NAMES}
        if self.adam_v is None:
            self.adam_v = {k: np.zeros_like(getattr(self, k)) for k in self.PARAM_NAMES}

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def opacities(self) -> np.ndarray:
        return _sigmoid(self.opacity_logits)

    @property
    def colors(self) -> np.ndarray:
        return _sigmoid(self.color_logits)

    def rotation_matrices(self) -> np.ndarray:
        return quat_to_rotmat(self.rotations)

    def covariances(self) -> np.ndarray:
        """World-space covariances R diag(exp(2 log_scale)) R^T, PSD by construction."""
        R = self.rotation_matrices()
        s2 = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", R, s2, R)

    def copy(self) -> "GaussianModel":
        return GaussianModel(
            self.positions.copy(),
            self.log_scales.copy(),
            self.rotations.copy(),
            self.opacity_logits.copy(),
            self.color_logits.copy(),
            {k: v.copy() for k, v in self.adam_m.items()},
            {k: v.copy() for k, v in self.adam_v.items()},
        )

    @staticmethod
    def from_colors(positions, scales, rotations, opacities, colors) -> "GaussianModel":
        """Build from activated values (scales in meters, opacity/color in (0,1))."""
        return GaussianModel(
            positions,
            np.log(np.asarray(scales, dtype=np.float64)),
            rotations,
            _logit(np.asarray(opacities, dtype=np.float64)),
            _logit(np.asarray(colors, dtype=np.float64)),
        )


logit = _logit
sigmoid = _sigmoid
