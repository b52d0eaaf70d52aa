"""Instrument the LM loop on a clean perturbed scene (no outliers)."""
import numpy as np
from splatpipe.scene import SparseMap, PoseSE3
from splatpipe import ba
from splatpipe.synth import gen_gaussian_scene, perturb
from splatpipe.se3 import exp_so3

scene = gen_gaussian_scene(n=50, seed=5, n_views=8, arc_span_deg=40.0)
noisy, _ = perturb(scene, sigma_rot_deg=1.0, sigma_t=0.02, outlier_frac=0.0, seed=11)
intrs = [f.intrinsics for f in scene.frames]
cfg = ba.BAConfig()

smap = noisy
cost = ba.robust_cost(smap, intrs, cfg.huber_delta)
print(f"initial cost {cost:.6e}")
lam = cfg.lm_lambda0
for it in range(30):
    ne = ba.build_normal_equations(smap, intrs, cfg)
    ba.fix_gauge(ne, smap.poses)
    try:
        dt, dp = ba.schur_solve(ne, lam)
    except ba.DampingNeeded:
        lam *= 10
        print(f"  it {it}: damping needed, lam -> {lam}")
        continue
    cand = ba._apply_update(smap, dt, dp)
    nc = ba.robust_cost(cand, intrs, cfg.huber_delta)
    tag = "ACC" if nc < cost else "rej"
    print(f"  it {it}: lam={lam:.1e} cost {cost:.6e} -> {nc:.6e} {tag} |dt|={np.abs(dt).max():.2e} |dp|={np.abs(dp).max():.2e}")
    if nc < cost:
        smap, cost = cand, nc
        lam = max(lam * 0.1, 1e-12)
    else:
        lam = min(lam * 10, 1e8)
