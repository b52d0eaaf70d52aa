"""Global bundle adjustment: Schur-complement Levenberg-Marquardt with
gauge fixing and iterative re-triangulation/purification.

Pose updates use a decoupled local parameterization, rotation first:
R <- exp(dw) R, t <- t + dt, so the twist is (dw, dt). The robust Huber
loss enters as an IRLS weight inside the normal equations. The point
block of the normal equations is block-diagonal 3x3, so its inversion
and the back-substitution are batched; the reduced camera system is a
dense Cholesky solve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .scene import Intrinsics, PoseSE3, SparseMap
from .se3 import exp_so3, hat

logger = logging.getLogger(__name__)


class DampingNeeded(Exception):
    """Raised when a (damped) system is not positive definite yet."""


@dataclass
class BAConfig:
    huber_delta: float = 2.0  # pixels
    lm_lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    max_lm_iters: int = 20
    refinement_rounds: int = 3
    max_reproj_px: float = 2.0
    min_tri_angle_deg: float = 1.5

    def __post_init__(self):
        vals = (self.huber_delta, self.lm_lambda0, self.lambda_up, self.lambda_down,
                self.max_lm_iters, self.refinement_rounds, self.max_reproj_px,
                self.min_tri_angle_deg)
        if any(v <= 0 for v in vals):
            raise ValueError("all BA config values must be positive")


@dataclass
class NormalEquations:
    """Block form of J^T W J and -J^T W r for one linearization point."""

    H_tt: np.ndarray  # (C, 6, 6) per-camera diagonal blocks
    H_pp: np.ndarray  # (P, 3, 3) per-point diagonal blocks
    H_tp: np.ndarray  # (M, 6, 3) coupling block per observation
    b_t: np.ndarray  # (C, 6)
    b_p: np.ndarray  # (P, 3)
    obs_cam: np.ndarray  # (M,)
    obs_point: np.ndarray  # (M,)
    active_cols: np.ndarray = None  # (C, 6) bool; False = frozen by gauge

    def __post_init__(self):
        if self.active_cols is None:
            self.active_cols = np.ones(self.H_tt.shape[:2], dtype=bool)

    @property
    def n_cameras(self) -> int:
        return len(self.H_tt)

    @property
    def n_points(self) -> int:
        return len(self.H_pp)


# ---------------------------------------------------------------------------
# residuals and Jacobians


def project_point(pose: PoseSE3, point: np.ndarray, intr: Intrinsics) -> np.ndarray:
    return intr.project(pose.apply(point))


def residual_and_jacobian(
    obs_px: np.ndarray,
    pose: PoseSE3,
    point: np.ndarray,
    intr: Intrinsics,
    huber_delta: float = 2.0,
    info: np.ndarray = None,
):
    """Reprojection residual with analytic Jacobians and the Huber IRLS weight.

    Returns (r (2,), J_pose (2,6) twist rotation-first, J_point (2,3), w).
    Returns None when the point sits at or behind the camera plane
    (z <= 1e-6), deactivating the observation for this iteration.
    """
    x_cam = pose.apply(point)
    z = x_cam[2]
    if z <= 1e-6:
        return None
    r = intr.project(x_cam) - obs_px
    J_proj = np.array(
        [
            [intr.fx / z, 0.0, -intr.fx * x_cam[0] / z**2],
            [0.0, intr.fy / z, -intr.fy * x_cam[1] / z**2],
        ]
    )
    J_pose = np.empty((2, 6))
    J_pose[:, :3] = J_proj @ (-hat(x_cam - pose.translation))
    J_pose[:, 3:] = J_proj
    J_point = J_proj @ pose.rotation
    if info is None:
        e = float(np.linalg.norm(r))
    else:
        e = float(np.sqrt(r @ info @ r))
    w = 1.0 if e <= huber_delta else huber_delta / e
    return r, J_pose, J_point, w


def _batch_residuals(smap: SparseMap, intrinsics: list[Intrinsics], huber_delta: float):
    """Vectorized residuals/Jacobians over all observations.

    Returns (r (M,2), J_pose (M,2,6), J_point (M,2,3), w (M,), active (M,)).
    Deactivated observations (z <= 1e-6) carry zeros.
    """
    M = smap.n_observations
    R = np.stack([p.rotation for p in smap.poses])  # (C,3,3)
    t = np.stack([p.translation for p in smap.poses])  # (C,3)
    fx = np.array([i.fx for i in intrinsics])
    fy = np.array([i.fy for i in intrinsics])
    cx = np.array([i.cx for i in intrinsics])
    cy = np.array([i.cy for i in intrinsics])

    ci, pi = smap.obs_cam, smap.obs_point
    P = smap.points[pi]  # (M,3)
    x_cam = np.einsum("mij,mj->mi", R[ci], P) + t[ci]
    z = x_cam[:, 2]
    active = z > 1e-6
    zs = np.where(active, z, 1.0)

    u = fx[ci] * x_cam[:, 0] / zs + cx[ci]
    v = fy[ci] * x_cam[:, 1] / zs + cy[ci]
    r = np.stack([u, v], axis=1) - smap.obs_px

    J_proj = np.zeros((M, 2, 3))
    J_proj[:, 0, 0] = fx[ci] / zs
    J_proj[:, 0, 2] = -fx[ci] * x_cam[:, 0] / zs**2
    J_proj[:, 1, 1] = fy[ci] / zs
    J_proj[:, 1, 2] = -fy[ci] * x_cam[:, 1] / zs**2

    rp = x_cam - t[ci]  # rotated point R P
    hats = np.zeros((M, 3, 3))
    hats[:, 0, 1] = -rp[:, 2]
    hats[:, 0, 2] = rp[:, 1]
    hats[:, 1, 0] = rp[:, 2]
    hats[:, 1, 2] = -rp[:, 0]
    hats[:, 2, 0] = -rp[:, 1]
    hats[:, 2, 1] = rp[:, 0]

    J_pose = np.empty((M, 2, 6))
    J_pose[:, :, :3] = -np.einsum("mij,mjk->mik", J_proj, hats)
    J_pose[:, :, 3:] = J_proj
    J_point = np.einsum("mij,mjk->mik", J_proj, R[ci])

    e = np.sqrt(np.einsum("mi,mij,mj->m", r, smap.obs_info, r))
    w = np.where(e <= huber_delta, 1.0, huber_delta / np.maximum(e, 1e-12))

    r[~active] = 0.0
    J_pose[~active] = 0.0
    J_point[~active] = 0.0
    w[~active] = 0.0
    return r, J_pose, J_point, w, active


def robust_cost(smap: SparseMap, intrinsics: list[Intrinsics], huber_delta: float) -> float:
    """Huber objective over all active observations, in squared pixels."""
    r, _, _, _, active = _batch_residuals(smap, intrinsics, huber_delta)
    e = np.sqrt(np.einsum("mi,mij,mj->m", r, smap.obs_info, r))[active]
    quad = e <= huber_delta
    return float(np.sum(0.5 * e[quad] ** 2) + np.sum(huber_delta * (e[~quad] - 0.5 * huber_delta)))


# ---------------------------------------------------------------------------
# normal equations, gauge, Schur solve


def build_normal_equations(smap: SparseMap, intrinsics: list[Intrinsics], cfg: BAConfig) -> NormalEquations:
    """Accumulate J^T W J and -J^T W r blockwise, in observation order."""
    r, J_pose, J_point, w, _ = _batch_residuals(smap, intrinsics, cfg.huber_delta)
    W = w[:, None, None] * smap.obs_info  # (M,2,2)

    WJp = np.einsum("mij,mjk->mik", W, J_pose)
    WJx = np.einsum("mij,mjk->mik", W, J_point)
    Htt_obs = np.einsum("mji,mjk->mik", J_pose, WJp)  # (M,6,6)
    Hpp_obs = np.einsum("mji,mjk->mik", J_point, WJx)  # (M,3,3)
    Htp_obs = np.einsum("mji,mjk->mik", J_pose, WJx)  # (M,6,3)
    bt_obs = -np.einsum("mji,mj->mi", WJp, r)
    bp_obs = -np.einsum("mji,mj->mi", WJx, r)

    C, P = smap.n_cameras, smap.n_points
    H_tt = np.zeros((C, 6, 6))
    H_pp = np.zeros((P, 3, 3))
    b_t = np.zeros((C, 6))
    b_p = np.zeros((P, 3))
    np.add.at(H_tt, smap.obs_cam, Htt_obs)
    np.add.at(H_pp, smap.obs_point, Hpp_obs)
    np.add.at(b_t, smap.obs_cam, bt_obs)
    np.add.at(b_p, smap.obs_point, bp_obs)
    return NormalEquations(H_tt, H_pp, Htp_obs, b_t, b_p, smap.obs_cam.copy(), smap.obs_point.copy())


def dominant_baseline_axis(t1: np.ndarray, t2: np.ndarray) -> int:
    """Index of the largest-magnitude component of t2 - t1."""
    baseline = np.asarray(t2) - np.asarray(t1)
    if np.linalg.norm(baseline) < 1e-12:
        raise ValueError("first two cameras coincide; dominant baseline axis undefined")
    return int(np.argmax(np.abs(baseline)))


def fix_gauge(ne: NormalEquations, poses: list[PoseSE3]) -> NormalEquations:
    """Freeze the 7 gauge DoF: all of camera 0 plus camera 1's translation
    component along the dominant baseline axis. Idempotent."""
    if ne.n_cameras < 2:
        raise ValueError("gauge fixing needs at least 2 cameras")
    axis = dominant_baseline_axis(poses[0].translation, poses[1].translation)
    ne.active_cols[0, :] = False
    ne.active_cols[1, 3 + axis] = False
    return ne


def schur_solve(ne: NormalEquations, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Solve the damped normal equations by point elimination.

    Damping is multiplicative on the block diagonals (Marquardt scaling).
    Returns (delta_t (C, 6), delta_p (P, 3)); frozen coordinates stay zero.
    Raises DampingNeeded when a Cholesky factorization fails.
    """
    C, P = ne.n_cameras, ne.n_points
    eye6 = np.eye(6)
    eye3 = np.eye(3)
    Htt_d = ne.H_tt + lam * ne.H_tt * eye6  # scales diagonal entries only
    Hpp_d = ne.H_pp + lam * ne.H_pp * eye3

    try:
        np.linalg.cholesky(Hpp_d)
    except np.linalg.LinAlgError as exc:
        raise DampingNeeded("point block not positive definite") from exc
    Hpp_inv = np.linalg.inv(Hpp_d)

    # Y = H_tp H_pp^-1 per observation
    Y = np.einsum("mij,mjk->mik", ne.H_tp, Hpp_inv[ne.obs_point])  # (M,6,3)

    S = np.zeros((C, 6, C, 6))
    S[np.arange(C), :, np.arange(C), :] = Htt_d
    b_red = ne.b_t.copy()
    # group observations per point; each pair of cameras seeing the point couples
    order = np.argsort(ne.obs_point, kind="stable")
    pt_sorted = ne.obs_point[order]
    starts = np.searchsorted(pt_sorted, np.arange(P))
    ends = np.searchsorted(pt_sorted, np.arange(P), side="right")
    for j in range(P):
        rows = order[starts[j] : ends[j]]
        if len(rows) == 0:
            continue
        cams = ne.obs_cam[rows]
        Yj = Y[rows]  # (k,6,3)
        Hj = ne.H_tp[rows]  # (k,6,3)
        contrib = np.einsum("aij,bkj->aibk", Yj, Hj)  # (k,6,k,6)
        for a, ca in enumerate(cams):
            b_red[ca] -= Yj[a] @ ne.b_p[j]
            for b, cb in enumerate(cams):
                S[ca, :, cb, :] -= contrib[a, :, b, :]

    mask = ne.active_cols.reshape(-1)
    S_flat = S.reshape(C * 6, C * 6)
    A = S_flat[np.ix_(mask, mask)]
    rhs = b_red.reshape(-1)[mask]

    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise DampingNeeded("reduced camera system not positive definite") from exc
    x = np.linalg.solve(L.T, np.linalg.solve(L, rhs))

    delta_t = np.zeros(C * 6)
    delta_t[mask] = x
    delta_t = delta_t.reshape(C, 6)

    # back-substitute points: dp_j = Hpp^-1 (b_p - H_pt dt), batched per point
    resid_p = ne.b_p.copy()
    np.add.at(resid_p, ne.obs_point, -np.einsum("mji,mj->mi", ne.H_tp, delta_t[ne.obs_cam]))
    delta_p = np.einsum("pij,pj->pi", Hpp_inv, resid_p)
    return delta_t, delta_p


def dense_solve(ne: NormalEquations, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Oracle: assemble the full damped H and solve densely (gauge respected)."""
    C, P = ne.n_cameras, ne.n_points
    n = C * 6 + P * 3
    H = np.zeros((n, n))
    b = np.zeros(n)
    for i in range(C):
        H[i * 6 : i * 6 + 6, i * 6 : i * 6 + 6] = ne.H_tt[i]
        b[i * 6 : i * 6 + 6] = ne.b_t[i]
    for j in range(P):
        s = C * 6 + j * 3
        H[s : s + 3, s : s + 3] = ne.H_pp[j]
        b[s : s + 3] = ne.b_p[j]
    for m in range(len(ne.obs_cam)):
        i, j = ne.obs_cam[m], ne.obs_point[m]
        H[i * 6 : i * 6 + 6, C * 6 + j * 3 : C * 6 + j * 3 + 3] += ne.H_tp[m]
        H[C * 6 + j * 3 : C * 6 + j * 3 + 3, i * 6 : i * 6 + 6] += ne.H_tp[m].T
    H = H + lam * np.diag(np.diag(H))
    mask = np.concatenate([ne.active_cols.reshape(-1), np.ones(P * 3, dtype=bool)])
    x = np.zeros(n)
    x[mask] = np.linalg.solve(H[np.ix_(mask, mask)], b[mask])
    return x[: C * 6].reshape(C, 6), x[C * 6 :].reshape(P, 3)


# ---------------------------------------------------------------------------
# triangulation


def triangulate(
    obs_px: np.ndarray,
    poses: list[PoseSE3],
    intrinsics: list[Intrinsics],
    min_angle_deg: float = 1.5,
):
    """DLT triangulation refined by one Gauss-Newton step on reprojection.

    Returns the 3D point, or None when the triangulation angle is below the
    floor or the point falls behind any observing camera.
    """
    obs_px = np.asarray(obs_px, dtype=np.float64).reshape(-1, 2)
    k = len(obs_px)
    if k < 2:
        return None
    A = np.empty((2 * k, 4))
    for i in range(k):
        Pm = intrinsics[i].matrix() @ np.hstack([poses[i].rotation, poses[i].translation[:, None]])
        A[2 * i] = obs_px[i, 0] * Pm[2] - Pm[0]
        A[2 * i + 1] = obs_px[i, 1] * Pm[2] - Pm[1]
    _, _, vt = np.linalg.svd(A)
    Xh = vt[-1]
    if abs(Xh[3]) < 1e-12:
        return None
    X = Xh[:3] / Xh[3]

    # one Gauss-Newton step on the summed reprojection error
    JtJ = np.zeros((3, 3))
    Jtr = np.zeros(3)
    for i in range(k):
        out = residual_and_jacobian(obs_px[i], poses[i], X, intrinsics[i], huber_delta=np.inf)
        if out is None:
            return None
        r, _, J_point, _ = out
        JtJ += J_point.T @ J_point
        Jtr += J_point.T @ r
    try:
        X = X - np.linalg.solve(JtJ + 1e-12 * np.eye(3), Jtr)
    except np.linalg.LinAlgError:
        return None

    # cheirality and angle checks on the refined point
    dirs = []
    for i in range(k):
        if poses[i].apply(X)[2] <= 1e-9:
            return None
        d = X - poses[i].center()
        dirs.append(d / np.linalg.norm(d))
    max_angle = 0.0
    for i in range(k):
        for j in range(i + 1, k):
            c = np.clip(np.dot(dirs[i], dirs[j]), -1.0, 1.0)
            max_angle = max(max_angle, np.degrees(np.arccos(c)))
    if max_angle < min_angle_deg:
        return None
    return X


def triangulation_angle_deg(point: np.ndarray, pose_a: PoseSE3, pose_b: PoseSE3) -> float:
    da = point - pose_a.center()
    db = point - pose_b.center()
    c = np.dot(da, db) / max(np.linalg.norm(da) * np.linalg.norm(db), 1e-12)
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


# ---------------------------------------------------------------------------
# the LM driver with refinement rounds


@dataclass
class BARoundStats:
    round: int
    initial_cost: float
    final_cost: float
    accepted_steps: int
    n_points_before: int
    n_points_after: int
    n_obs_dropped: int


@dataclass
class BAResult:
    map: SparseMap
    rounds: list = field(default_factory=list)
    converged: bool = True
    warning: str = ""


def _apply_update(smap: SparseMap, delta_t: np.ndarray, delta_p: np.ndarray) -> SparseMap:
    poses = []
    for i, pose in enumerate(smap.poses):
        dw, dt = delta_t[i, :3], delta_t[i, 3:]
        if np.all(dw == 0.0) and np.all(dt == 0.0):
            poses.append(pose)  # gauge-frozen cameras stay bit-identical
        else:
            poses.append(PoseSE3(exp_so3(dw) @ pose.rotation, pose.translation + dt))
    return SparseMap(
        poses=poses,
        frame_ids=list(smap.frame_ids),
        points=smap.points + delta_p,
        obs_cam=smap.obs_cam,
        obs_point=smap.obs_point,
        obs_px=smap.obs_px,
        obs_info=smap.obs_info,
    )


def _retriangulate_and_purify(
    smap: SparseMap, intrinsics: list[Intrinsics], cfg: BAConfig
) -> tuple[SparseMap, int]:
    """Re-triangulate every track, drop behind-camera observations, then drop
    points with high mean reprojection error or a too-small triangulation angle."""
    P = smap.n_points
    new_points = smap.points.copy()
    keep_point = np.ones(P, dtype=bool)
    keep_obs = np.ones(smap.n_observations, dtype=bool)

    order = np.argsort(smap.obs_point, kind="stable")
    pt_sorted = smap.obs_point[order]
    starts = np.searchsorted(pt_sorted, np.arange(P))
    ends = np.searchsorted(pt_sorted, np.arange(P), side="right")

    for j in range(P):
        rows = order[starts[j] : ends[j]]
        if len(rows) < 2:
            keep_point[j] = False
            keep_obs[rows] = False
            continue
        cams = smap.obs_cam[rows]
        poses = [smap.poses[c] for c in cams]
        intrs = [intrinsics[c] for c in cams]

        X = triangulate(smap.obs_px[rows], poses, intrs, cfg.min_tri_angle_deg)
        if X is None:
            keep_point[j] = False
            keep_obs[rows] = False
            continue

        # remove observations behind the camera, then re-check support
        z = np.array([poses[a].apply(X)[2] for a in range(len(rows))])
        good = z > 1e-6
        if good.sum() < 2:
            keep_point[j] = False
            keep_obs[rows] = False
            continue
        keep_obs[rows[~good]] = False
        rows = rows[good]
        poses = [p for p, g in zip(poses, good) if g]
        intrs = [i for i, g in zip(intrs, good) if g]

        errs = [
            np.linalg.norm(intrs[a].project(poses[a].apply(X)) - smap.obs_px[rows[a]])
            for a in range(len(rows))
        ]
        if float(np.mean(errs)) > cfg.max_reproj_px:
            keep_point[j] = False
            keep_obs[rows] = False
            continue
        new_points[j] = X

    keep_obs &= keep_point[smap.obs_point]
    n_dropped = int((~keep_obs).sum())

    point_remap = -np.ones(P, dtype=np.intp)
    point_remap[keep_point] = np.arange(int(keep_point.sum()))
    purified = SparseMap(
        poses=list(smap.poses),
        frame_ids=list(smap.frame_ids),
        points=new_points[keep_point],
        obs_cam=smap.obs_cam[keep_obs],
        obs_point=point_remap[smap.obs_point[keep_obs]],
        obs_px=smap.obs_px[keep_obs],
        obs_info=smap.obs_info[keep_obs],
    )
    return purified, n_dropped


def run_global_ba(smap: SparseMap, intrinsics: list[Intrinsics], cfg: BAConfig = None) -> BAResult:
    """LM with Schur solves inside ``refinement_rounds`` re-triangulation rounds.

    Accepted steps never increase the robust objective; rejected steps raise
    the damping. Divergence (five consecutive rejections at maximum damping)
    returns the best map so far with a warning.
    """
    cfg = cfg or BAConfig()
    if smap.n_cameras < 2:
        raise ValueError("bundle adjustment needs at least 2 cameras")
    lam_max = 1e8
    result = BAResult(map=smap)

    for rnd in range(cfg.refinement_rounds):
        cost = robust_cost(smap, intrinsics, cfg.huber_delta)
        initial_cost = cost
        lam = cfg.lm_lambda0
        accepted = 0
        consecutive_fail = 0
        for _ in range(cfg.max_lm_iters):
            ne = build_normal_equations(smap, intrinsics, cfg)
            fix_gauge(ne, smap.poses)
            try:
                delta_t, delta_p = schur_solve(ne, lam)
            except DampingNeeded:
                lam = min(lam * cfg.lambda_up, lam_max)
                consecutive_fail += 1
                if consecutive_fail >= 5 and lam >= lam_max:
                    result.warning = "diverged: damping exhausted"
                    break
                continue
            step_norm = max(
                np.abs(delta_t).max() if delta_t.size else 0.0,
                np.abs(delta_p).max() if delta_p.size else 0.0,
            )
            if step_norm < 1e-12:
                break  # converged: nothing left to move
            candidate = _apply_update(smap, delta_t, delta_p)
            new_cost = robust_cost(candidate, intrinsics, cfg.huber_delta)
            if new_cost < cost:
                improvement = cost - new_cost
                smap = candidate
                cost = new_cost
                accepted += 1
                consecutive_fail = 0
                lam = max(lam * cfg.lambda_down, 1e-12)
                if improvement < 1e-12 * max(cost, 1.0):
                    break
            else:
                lam = min(lam * cfg.lambda_up, lam_max)
                consecutive_fail += 1
                if consecutive_fail >= 5 and lam >= lam_max:
                    if step_norm > 1e-8:
                        result.warning = "diverged: no acceptable step at maximum damping"
                    break
        n_before = smap.n_points
        smap, n_dropped = _retriangulate_and_purify(smap, intrinsics, cfg)
        result.rounds.append(
            BARoundStats(
                round=rnd,
                initial_cost=initial_cost,
                final_cost=cost,
                accepted_steps=accepted,
                n_points_before=n_before,
                n_points_after=smap.n_points,
                n_obs_dropped=n_dropped,
            )
        )
        logger.info(
            "BA round %d: cost %.3e -> %.3e, %d accepted steps, points %d -> %d",
            rnd, initial_cost, cost, accepted, n_before, smap.n_points,
        )
    result.map = smap
    result.converged = not result.warning
    return result
