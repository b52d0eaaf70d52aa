import numpy as np
from splatpipe import ba
from splatpipe.synth import gen_gaussian_scene, perturb

scene = gen_gaussian_scene(n=200, seed=5, n_views=8, arc_span_deg=40.0)
noisy, outliers = perturb(scene, sigma_rot_deg=1.0, sigma_t=0.02, outlier_frac=0.1, seed=11)
intrs = [f.intrinsics for f in scene.frames]
cfg = ba.BAConfig()

smap = noisy
for rnd in range(3):
    cost0 = ba.robust_cost(smap, intrs, cfg.huber_delta)
    lam = cfg.lm_lambda0
    cost = cost0
    acc = 0
    for it in range(cfg.max_lm_iters):
        ne = ba.build_normal_equations(smap, intrs, cfg)
        ba.fix_gauge(ne, smap.poses)
        try:
            dt, dp = ba.schur_solve(ne, lam)
        except ba.DampingNeeded:
            lam *= 10
            continue
        cand = ba._apply_update(smap, dt, dp)
        nc = ba.robust_cost(cand, intrs, cfg.huber_delta)
        if nc < cost:
            smap, cost = cand, nc
            acc += 1
            lam = max(lam * 0.1, 1e-12)
        else:
            lam = min(lam * 10, 1e8)
    r, _, _, _, active = ba._batch_residuals(smap, intrs, cfg.huber_delta)
    e = np.linalg.norm(r, axis=1)
    print(f"round {rnd}: cost {cost0:.4e} -> {cost:.4e} acc={acc} "
          f"resid med={np.median(e):.3f} max={e.max():.1f} n>2px={(e>2).sum()}")
    smap, ndrop = ba._retriangulate_and_purify(smap, intrs, cfg)
    print(f"  purify: points -> {smap.n_points}, dropped obs {ndrop}")
