"""Scratch: FD-check the splatting gradients end to end."""
import numpy as np

from splatpipe.scene import GaussianModel, Intrinsics, PoseSE3
from splatpipe.rasterizer import (
    ReplayCache, project, sort_by_depth, rasterize_forward, rasterize_backward,
    chain_to_model, scatter_gradients,
)
from splatpipe.losses import compute_loss
from splatpipe.trainer import zero_gradients
from splatpipe.se3 import exp_so3


def make_model(rng, n=4):
    pos = rng.uniform(-0.25, 0.25, (n, 3)) + np.array([0, 0, 1.0])
    scales = rng.uniform(0.05, 0.15, (n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    op = rng.uniform(0.3, 0.8, n)
    col = rng.uniform(0.2, 0.8, (n, 3))
    return GaussianModel.from_colors(pos, scales, q, op, col)


def render_loss(model, pose, intr, target):
    splats = project(model, pose, intr)
    perm = sort_by_depth(splats)
    cache = ReplayCache(intr.width, intr.height, 32)
    img = rasterize_forward(splats, perm, cache)
    loss, dl = compute_loss(img, target)
    return loss, dl, splats, perm, cache


def analytic_grads(model, pose, intr, target):
    loss, dl, splats, perm, cache = render_loss(model, pose, intr, target)
    g_screen = rasterize_backward(dl, cache, splats, perm)
    g_sorted = chain_to_model(g_screen, splats, perm, model, pose, intr)
    grads = zero_gradients(model)
    scatter_gradients(g_sorted, perm, grads)
    return loss, grads


rng = np.random.default_rng(7)
intr = Intrinsics(fx=10.0, fy=10.0, cx=3.5, cy=3.5, width=8, height=8)
pose = PoseSE3(np.eye(3), np.zeros(3))
model = make_model(rng)
target = rng.uniform(0, 1, (8, 8, 3))

loss0, grads = analytic_grads(model, pose, intr, target)
print("loss:", loss0)

fails = 0
for name in GaussianModel.PARAM_NAMES:
    theta = getattr(model, name)
    g = grads[name]
    it = np.ndindex(theta.shape)
    for idx in it:
        h = 1e-6 * max(abs(theta[idx]), 1.0)
        old = theta[idx]
        theta[idx] = old + h
        lp = render_loss(model, pose, intr, target)[0]
        theta[idx] = old - h
        lm = render_loss(model, pose, intr, target)[0]
        theta[idx] = old
        fd = (lp - lm) / (2 * h)
        an = g[idx]
        denom = max(abs(fd), abs(an), 1e-10)
        rel = abs(fd - an) / denom
        if rel > 1e-4 and abs(fd - an) > 1e-10:
            fails += 1
            print(f"  MISMATCH {name}{idx}: fd={fd:.8e} an={an:.8e} rel={rel:.2e}")
print("FD check:", "PASS" if fails == 0 else f"{fails} FAILURES")
