"""Scratch: BA Jacobian FD, Schur vs dense, and synthetic recovery."""
import time
import numpy as np

from splatpipe.scene import Intrinsics, PoseSE3, SparseMap
from splatpipe.se3 import exp_so3
from splatpipe import ba
from splatpipe.synth import gen_gaussian_scene, perturb

rng = np.random.default_rng(3)

# --- Jacobian FD ---
intr = Intrinsics(fx=100.0, fy=110.0, cx=32.0, cy=30.0, width=64, height=60)
fails = 0
for trial in range(20):
    R = exp_so3(rng.normal(0, 0.5, 3))
    t = rng.normal(0, 0.5, 3)
    pose = PoseSE3(R, t)
    point = rng.normal(0, 0.5, 3) + pose.inverse().apply(np.array([0, 0, 2.0]))
    obs = rng.uniform(0, 60, 2)
    out = ba.residual_and_jacobian(obs, pose, point, intr)
    if out is None:
        continue
    r0, J_pose, J_point, w = out
    h = 1e-7
    for k in range(6):
        d = np.zeros(6)
        d[k] = h
        pp = PoseSE3(exp_so3(d[:3]) @ R, t + d[3:])
        pm = PoseSE3(exp_so3(-d[:3]) @ R, t - d[3:])
        rp = ba.residual_and_jacobian(obs, pp, point, intr)[0]
        rm = ba.residual_and_jacobian(obs, pm, point, intr)[0]
        fd = (rp - rm) / (2 * h)
        rel = np.abs(fd - J_pose[:, k]) / np.maximum(np.abs(fd), 1e-6)
        if rel.max() > 1e-5:
            fails += 1
            print("pose jac mismatch", trial, k, fd, J_pose[:, k])
    for k in range(3):
        d = np.zeros(3); d[k] = h
        rp = ba.residual_and_jacobian(obs, pose, point + d, intr)[0]
        rm = ba.residual_and_jacobian(obs, pose, point - d, intr)[0]
        fd = (rp - rm) / (2 * h)
        rel = np.abs(fd - J_point[:, k]) / np.maximum(np.abs(fd), 1e-6)
        if rel.max() > 1e-5:
            fails += 1
            print("point jac mismatch", trial, k)
print("jacobian FD:", "PASS" if fails == 0 else f"{fails} FAIL")

# --- Schur vs dense on random instances ---
t0 = time.time()
worst = 0.0
for trial in range(50):
    C = int(rng.integers(2, 6))
    P = int(rng.integers(3, 21))
    poses = []
    for i in range(C):
        poses.append(PoseSE3(exp_so3(rng.normal(0, 0.1, 3)), np.array([i * 0.3, 0, 0]) + rng.normal(0, 0.05, 3)))
    pts = rng.uniform(-1, 1, (P, 3)) + np.array([0.3 * C / 2, 0, 3.0])
    oc, op_, opx = [], [], []
    for j in range(P):
        for i in range(C):
            z = poses[i].apply(pts[j])
            if z[2] > 0.1:
                oc.append(i); op_.append(j)
                opx.append(intr.project(z) + rng.normal(0, 1.0, 2))
    smap = SparseMap(poses=poses, frame_ids=list(range(C)), points=pts,
                     obs_cam=np.array(oc), obs_point=np.array(op_), obs_px=np.array(opx))
    cfg = ba.BAConfig()
    ne = ba.build_normal_equations(smap, [intr] * C, cfg)
    ba.fix_gauge(ne, poses)
    lam = 10 ** rng.uniform(-4, 0)
    try:
        dt_s, dp_s = ba.schur_solve(ne, lam)
    except ba.DampingNeeded:
        continue
    dt_d, dp_d = ba.dense_solve(ne, lam)
    scale = max(np.abs(dt_d).max(), np.abs(dp_d).max(), 1e-12)
    err = max(np.abs(dt_s - dt_d).max(), np.abs(dp_s - dp_d).max()) / scale
    worst = max(worst, err)
print(f"schur vs dense: worst rel {worst:.2e} ({time.time()-t0:.2f}s)", "PASS" if worst < 1e-9 else "FAIL")

# --- recovery ---
t0 = time.time()
scene = gen_gaussian_scene(n=200, seed=5, n_views=8, arc_span_deg=40.0)
print("tracks:", scene.tracks.n_points, "pts,", scene.tracks.n_observations, "obs")
noisy, outliers = perturb(scene, sigma_rot_deg=1.0, sigma_t=0.02, outlier_frac=0.1, seed=11)
intrs = [f.intrinsics for f in scene.frames]
res = ba.run_global_ba(noisy, intrs, ba.BAConfig())
print("rounds:", [(r.initial_cost, r.final_cost, r.accepted_steps, r.n_points_after) for r in res.rounds])
print("warning:", res.warning, f"({time.time()-t0:.1f}s)")

# gauge-align and score
est = res.map


def umeyama(src, dst):
    mu_s, mu_d = src.mean(0), dst.mean(0)
    cs, cd = src - mu_s, dst - mu_d
    cov = cd.T @ cs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1, 1, d])
    R = U @ D @ Vt
    var = (cs ** 2).sum() / len(src)
    s = np.trace(np.diag(S) @ D) / var
    t = mu_d - s * R @ mu_s
    return s, R, t


C_est = np.stack([p.center() for p in est.poses])
C_gt = np.stack([p.center() for p in scene.true_poses])
s, R, t = umeyama(C_est, C_gt)
C_al = (s * (R @ C_est.T)).T + t
err_c = np.sqrt(((C_al - C_gt) ** 2).sum(1)).mean()
rot_errs = []
for pe, pg in zip(est.poses, scene.true_poses):
    Ralign = pg.rotation @ (pe.rotation @ R.T)
    ang = np.arccos(np.clip((np.trace(Ralign) - 1) / 2, -1, 1))
    rot_errs.append(ang)
print(f"center RMS after align: {err_c:.2e} m, rot RMS: {np.sqrt(np.mean(np.array(rot_errs)**2)):.2e} rad")
