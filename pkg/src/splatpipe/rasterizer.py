"""Differentiable tile-based splatting with a bounded forward replay cache.

The forward pass composites depth-sorted 2D splats front to back, recording
per pixel only {splat id, accumulator-in color, alpha} plus a valid-entry
counter. Between iterations only the counters are reset; stale entries
beyond the counter are never read. The backward pass replays each pixel's
cached chain in reverse and produces per-splat gradients in sorted order,
which ``scatter_gradients`` accumulates back into canonical buffers through
the sort permutation so optimizer state never reorders.

All math is float64. A splat covers a pixel iff its evaluated alpha is at
least 1/255; the tile binning radius (3.5 sigma) is wide enough that the
binning never excludes a pixel passing that test, so tiling is purely an
acceleration and a per-pixel sequential oracle reproduces the output
bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import GaussianModel, Intrinsics, PoseSE3
from .se3 import quat_to_rotmat

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
_BBOX_SIGMA = 3.5  # alpha at this Mahalanobis radius is < ALPHA_MIN for any opacity


@dataclass
class Splat2D:
    """Screen-space splats for one view, canonical order (one row per Gaussian).

    Culled Gaussians keep their slot with ``valid`` False and infinite depth
    so the depth sort stays a bijection on [0, N).
    """

    mean2d: np.ndarray  # (N, 2) pixels
    cov2d: np.ndarray  # (N, 2, 2) pixels^2, dilated
    conic: np.ndarray  # (N, 2, 2) inverse of cov2d
    depth: np.ndarray  # (N,) camera z, +inf when culled
    color: np.ndarray  # (N, 3) activated
    base_opacity: np.ndarray  # (N,) activated
    valid: np.ndarray  # (N,) bool
    radius: np.ndarray  # (N,) binning radius, pixels
    # saved intermediates for the backward chain
    x_cam: np.ndarray  # (N, 3)
    J: np.ndarray  # (N, 2, 3) projection Jacobian
    V: np.ndarray  # (N, 2, 3) J @ R_cam
    M: np.ndarray  # (N, 3, 3) R_quat @ diag(scales)
    R_quat: np.ndarray  # (N, 3, 3)
    scales: np.ndarray  # (N, 3)

    def __len__(self) -> int:
        return len(self.depth)


@dataclass
class SortPermutation:
    """sorted index -> canonical index, a bijection on [0, N)."""

    pi: np.ndarray

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.intp)

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.pi)
        inv[self.pi] = np.arange(len(self.pi))
        return inv

    def is_bijection(self) -> bool:
        return len(np.unique(self.pi)) == len(self.pi)


class ReplayCache:
    """Per-pixel bounded replay trace: {id, C_in, alpha} plus a valid counter.

    ``reset_counters`` touches only the O(WH) counter plane; entry contents
    beyond count(u) are semantically invalid whatever bytes they hold.
    """

    def __init__(self, width: int, height: int, k_max: int = 32):
        self.width = width
        self.height = height
        self.k_max = k_max
        self.entry_id = np.zeros((height, width, k_max), dtype=np.int64)
        self.entry_cin = np.zeros((height, width, k_max, 3))
        self.entry_alpha = np.zeros((height, width, k_max))
        self.count = np.zeros((height, width), dtype=np.int64)
        self.saturated_pixels = 0  # overflow diagnostic, set by the forward pass

    def reset_counters(self) -> None:
        self.count[:] = 0

    def zero_all(self) -> None:
        """Full clear (the expensive alternative the counter reset replaces)."""
        self.entry_id[:] = 0
        self.entry_cin[:] = 0.0
        self.entry_alpha[:] = 0.0
        self.count[:] = 0

    def poison(self, rng: np.random.Generator) -> None:
        """Fill entry storage with garbage; tests prove it is never read."""
        self.entry_id[:] = rng.integers(0, 1 << 31, self.entry_id.shape)
        self.entry_cin[:] = rng.normal(size=self.entry_cin.shape)
        self.entry_alpha[:] = rng.uniform(-5, 5, self.entry_alpha.shape)


def project(model: GaussianModel, pose: PoseSE3, intr: Intrinsics, dilation: float = 0.3) -> Splat2D:
    """EWA projection of every Gaussian into one view.

    Culls Gaussians with camera z <= 0.01 m or projected mean further than a
    0.3-image margin outside the frame; near-singular screen covariances
    (det < 1e-12) are skipped the same way.
    """
    n = len(model)
    Rc, tc = pose.rotation, pose.translation
    x_cam = model.positions @ Rc.T + tc
    z = x_cam[:, 2]
    valid = z > 0.01
    zs = np.where(valid, z, 1.0)

    u = intr.fx * x_cam[:, 0] / zs + intr.cx
    v = intr.fy * x_cam[:, 1] / zs + intr.cy
    mean2d = np.stack([u, v], axis=1)
    mx, my = 0.3 * intr.width, 0.3 * intr.height
    valid &= (u >= -mx) & (u <= intr.width - 1 + mx) & (v >= -my) & (v <= intr.height - 1 + my)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = intr.fx / zs
    J[:, 0, 2] = -intr.fx * x_cam[:, 0] / zs**2
    J[:, 1, 1] = intr.fy / zs
    J[:, 1, 2] = -intr.fy * x_cam[:, 1] / zs**2

    R_quat = quat_to_rotmat(model.rotations)
    scales = np.exp(model.log_scales)
    M = R_quat * scales[:, None, :]  # columns scaled: R @ diag(s)
    V = J @ Rc  # (N,2,3)
    VM = np.einsum("nij,njk->nik", V, M)
    cov2d = np.einsum("nik,njk->nij", VM, VM)
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    valid &= det > 1e-12
    det_s = np.where(det > 1e-12, det, 1.0)
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = c / det_s
    conic[:, 0, 1] = conic[:, 1, 0] = -b / det_s
    conic[:, 1, 1] = a / det_s

    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = np.ceil(_BBOX_SIGMA * np.sqrt(np.maximum(lam_max, 0.0)))

    return Splat2D(
        mean2d=mean2d,
        cov2d=cov2d,
        conic=conic,
        depth=np.where(valid, z, np.inf),
        color=model.colors,
        base_opacity=model.opacities,
        valid=valid,
        radius=radius,
        x_cam=x_cam,
        J=J,
        V=V,
        M=M,
        R_quat=R_quat,
        scales=scales,
    )


def sort_by_depth(splats: Splat2D) -> SortPermutation:
    """Stable ascending depth sort; ties (and culled +inf entries) keep canonical order."""
    if not np.all(np.isfinite(splats.depth[splats.valid])):
        raise ValueError("non-finite depth on a valid splat")
    return SortPermutation(np.argsort(splats.depth, kind="stable"))


def _tile_bins(splats: Splat2D, perm: SortPermutation, width, height, tile: int):
    """Per-tile lists of canonical splat ids, each in ascending depth order."""
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    bins = [[] for _ in range(ntx * nty)]
    order = perm.pi
    mean = splats.mean2d
    rad = splats.radius
    for s in order:
        if not splats.valid[s]:
            break  # culled splats sort to the end
        x0 = max(int(mean[s, 0] - rad[s]) // tile, 0)
        x1 = min(int(mean[s, 0] + rad[s]) // tile, ntx - 1)
        y0 = max(int(mean[s, 1] - rad[s]) // tile, 0)
        y1 = min(int(mean[s, 1] + rad[s]) // tile, nty - 1)
        if x1 < x0 or y1 < y0:
            continue
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                bins[ty * ntx + tx].append(s)
    return bins, ntx, nty


def rasterize_forward(
    splats: Splat2D,
    perm: SortPermutation,
    cache: ReplayCache,
    t_min: float = 1e-4,
    tile: int = 16,
) -> np.ndarray:
    """Front-to-back compositing over a black background with cache recording.

    The caller must have reset the cache counters for this iteration. Pixels
    reaching the cache capacity with transmittance still above ``t_min`` are
    counted in ``cache.saturated_pixels`` and their remaining splats dropped.
    """
    W, H, K = cache.width, cache.height, cache.k_max
    image = np.zeros((H, W, 3))
    trans = np.ones(H * W)
    flat_count = cache.count.reshape(-1)
    flat_id = cache.entry_id.reshape(-1, K)
    flat_cin = cache.entry_cin.reshape(-1, K, 3)
    flat_alpha = cache.entry_alpha.reshape(-1, K)
    flat_img = image.reshape(-1, 3)
    saturated = np.zeros(H * W, dtype=bool)

    bins, ntx, nty = _tile_bins(splats, perm, W, H, tile)
    for tidx, ids in enumerate(bins):
        if not ids:
            continue
        ty, tx = divmod(tidx, ntx)
        xs = np.arange(tx * tile, min((tx + 1) * tile, W))
        ys = np.arange(ty * tile, min((ty + 1) * tile, H))
        px = np.repeat(ys * W, len(xs)) + np.tile(xs, len(ys))  # flat pixel ids
        pxy = np.stack([np.tile(xs, len(ys)), np.repeat(ys, len(xs))], axis=1).astype(np.float64)
        for s in ids:
            t_px = trans[px]
            cnt = flat_count[px]
            live = (t_px >= t_min) & (cnt < K)
            if not live.any():
                break
            d = pxy - splats.mean2d[s]
            A, B, C = splats.conic[s, 0, 0], splats.conic[s, 0, 1], splats.conic[s, 1, 1]
            power = -0.5 * (A * d[:, 0] ** 2 + C * d[:, 1] ** 2) - B * d[:, 0] * d[:, 1]
            alpha = np.minimum(splats.base_opacity[s] * np.exp(power), ALPHA_MAX)
            hit = alpha >= ALPHA_MIN
            # overflow: a splat wants in but the pixel's cache is full
            saturated[px[(t_px >= t_min) & (cnt >= K) & hit]] = True
            write = live & hit
            if not write.any():
                continue
            w_px = px[write]
            w_cnt = cnt[write]
            a = alpha[write]
            flat_id[w_px, w_cnt] = s
            flat_cin[w_px, w_cnt] = flat_img[w_px]
            flat_alpha[w_px, w_cnt] = a
            flat_count[w_px] = w_cnt + 1
            flat_img[w_px] = flat_img[w_px] * (1.0 - a[:, None]) + a[:, None] * splats.color[s]
            trans[w_px] = t_px[write] * (1.0 - a)
    cache.saturated_pixels = int(saturated.sum())
    return image


def rasterize_reference(
    splats: Splat2D, perm: SortPermutation, width: int, height: int,
    t_min: float = 1e-4, k_max: int = 32,
) -> np.ndarray:
    """Cache-less forward used where only the image is needed (eval renders)."""
    cache = ReplayCache(width, height, k_max)
    return rasterize_forward(splats, perm, cache, t_min=t_min)


def rasterize_backward(
    dL_dC: np.ndarray,
    cache: ReplayCache,
    splats: Splat2D,
    perm: SortPermutation,
) -> dict:
    """Replay cached compositing in reverse; gradients come back in sorted order.

    Returns a dict of sorted-order gradient arrays for color logits are not
    known here, so entries are w.r.t. activated color/opacity plus geometry:
    {"color", "base_opacity", "mean2d", "cov2d"} and the chained model-space
    {"positions", "log_scales", "rotations"} handled by ``chain_to_model``.
    Only entries below each pixel's count are read.
    """
    W, H, K = cache.width, cache.height, cache.k_max
    n = len(splats)
    inv = perm.inverse  # canonical -> sorted position

    g_color = np.zeros((n, 3))
    g_alpha0 = np.zeros(n)
    g_mean = np.zeros((n, 2))
    g_Q = np.zeros((n, 2, 2))  # gradient w.r.t. conic, full-matrix convention

    flat_count = cache.count.reshape(-1)
    flat_id = cache.entry_id.reshape(-1, K)
    flat_cin = cache.entry_cin.reshape(-1, K, 3)
    flat_alpha = cache.entry_alpha.reshape(-1, K)
    g_out = dL_dC.reshape(-1, 3).astype(np.float64).copy()

    px_all = np.arange(H * W)
    pxy_all = np.stack([px_all % W, px_all // W], axis=1).astype(np.float64)

    kmax_used = int(flat_count.max()) if flat_count.size else 0
    for k in range(kmax_used - 1, -1, -1):
        sel = np.nonzero(flat_count > k)[0]
        if len(sel) == 0:
            continue
        ids = flat_id[sel, k]
        cin = flat_cin[sel, k]
        a = flat_alpha[sel, k]
        col = splats.color[ids]
        g_here = g_out[sel]

        d_alpha = np.einsum("mi,mi->m", g_here, col - cin)
        sp = inv[ids]
        np.add.at(g_color, sp, g_here * a[:, None])
        g_out[sel] = g_here * (1.0 - a[:, None])

        # chain alpha -> (alpha0, mean2d, conic); clamped entries pass no gradient
        d = pxy_all[sel] - splats.mean2d[ids]
        A = splats.conic[ids, 0, 0]
        B = splats.conic[ids, 0, 1]
        C = splats.conic[ids, 1, 1]
        power = -0.5 * (A * d[:, 0] ** 2 + C * d[:, 1] ** 2) - B * d[:, 0] * d[:, 1]
        G = np.exp(power)
        unclamped = splats.base_opacity[ids] * G < ALPHA_MAX
        d_alpha = np.where(unclamped, d_alpha, 0.0)

        np.add.at(g_alpha0, sp, G * d_alpha)
        d_power = a * d_alpha  # a == alpha0 * G for unclamped entries
        gm = np.stack(
            [(A * d[:, 0] + B * d[:, 1]) * d_power, (C * d[:, 1] + B * d[:, 0]) * d_power],
            axis=1,
        )
        np.add.at(g_mean, sp, gm)
        gq = np.empty((len(sel), 2, 2))
        gq[:, 0, 0] = -0.5 * d[:, 0] ** 2 * d_power
        gq[:, 1, 1] = -0.5 * d[:, 1] ** 2 * d_power
        gq[:, 0, 1] = gq[:, 1, 0] = -0.5 * d[:, 0] * d[:, 1] * d_power
        np.add.at(g_Q, sp, gq)

    # conic -> cov2d in sorted view
    conic_s = splats.conic[perm.pi]
    g_cov = -np.einsum("nij,njk,nkl->nil", conic_s, g_Q, conic_s)
    return {"color": g_color, "base_opacity": g_alpha0, "mean2d": g_mean, "cov2d": g_cov}


def chain_to_model(
    g: dict,
    splats: Splat2D,
    perm: SortPermutation,
    model: GaussianModel,
    pose: PoseSE3,
    intr: Intrinsics,
) -> dict:
    """Chain screen-space gradients into canonical-parameter space (sorted order).

    Returns sorted-order gradients for positions, log_scales, rotations,
    opacity_logits, and color_logits, ready for ``scatter_gradients``.
    """
    pi = perm.pi
    x_cam = splats.x_cam[pi]
    J = splats.J[pi]
    V = splats.V[pi]
    M = splats.M[pi]
    Rq = splats.R_quat[pi]
    scales = splats.scales[pi]
    q = model.rotations[pi]
    colors = splats.color[pi]
    alpha0 = splats.base_opacity[pi]

    g_cov = g["cov2d"]
    g_mean = g["mean2d"]

    # cov2d = V Sigma V^T + dilation, Sigma = M M^T
    Sigma = np.einsum("nab,ncb->nac", M, M)
    g_Sigma = np.einsum("nji,njk,nkl->nil", V, g_cov, V)
    g_V = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov, V, Sigma)
    g_J = np.einsum("nij,kj->nik", g_V, pose.rotation)
    g_M = 2.0 * np.einsum("nij,njk->nik", g_Sigma, M)

    # x_cam gradient: through the projected mean and through J's z dependence
    g_xcam = np.einsum("nji,nj->ni", J, g_mean)
    tz = np.where(splats.valid[pi], x_cam[:, 2], 1.0)
    fx, fy = intr.fx, intr.fy
    g_xcam[:, 0] += g_J[:, 0, 2] * (-fx / tz**2)
    g_xcam[:, 1] += g_J[:, 1, 2] * (-fy / tz**2)
    g_xcam[:, 2] += (
        g_J[:, 0, 0] * (-fx / tz**2)
        + g_J[:, 0, 2] * (2.0 * fx * x_cam[:, 0] / tz**3)
        + g_J[:, 1, 1] * (-fy / tz**2)
        + g_J[:, 1, 2] * (2.0 * fy * x_cam[:, 1] / tz**3)
    )
    g_pos = g_xcam @ pose.rotation

    # M = R diag(s): column-scaled splits
    g_R = g_M * scales[:, None, :]
    g_s = np.einsum("nij,nij->nj", Rq, g_M)
    g_logs = g_s * scales

    g_quat = _rotmat_grad_to_quat(g_R, q)

    g_logit_color = g["color"] * colors * (1.0 - colors)
    g_logit_op = g["base_opacity"] * alpha0 * (1.0 - alpha0)

    # culled splats must not leak gradients from stale intermediates
    valid_sorted = splats.valid[pi]
    for arr in (g_pos, g_logs, g_quat, g_logit_color):
        arr[~valid_sorted] = 0.0
    g_logit_op[~valid_sorted] = 0.0

    return {
        "positions": g_pos,
        "log_scales": g_logs,
        "rotations": g_quat,
        "opacity_logits": g_logit_op,
        "color_logits": g_logit_color,
    }


def _rotmat_grad_to_quat(g_R: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Chain dL/dR into dL/dq for unit quaternions (w, x, y, z), including the
    normalization's tangent projection."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn.T
    zero = np.zeros_like(w)

    dRdw = 2.0 * np.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], axis=1
    ).reshape(-1, 3, 3)
    dRdx = 2.0 * np.stack(
        [zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1
    ).reshape(-1, 3, 3)
    dRdy = 2.0 * np.stack(
        [-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1
    ).reshape(-1, 3, 3)
    dRdz = 2.0 * np.stack(
        [-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1
    ).reshape(-1, 3, 3)

    g_qn = np.stack(
        [
            np.einsum("nij,nij->n", dRdw, g_R),
            np.einsum("nij,nij->n", dRdx, g_R),
            np.einsum("nij,nij->n", dRdy, g_R),
            np.einsum("nij,nij->n", dRdz, g_R),
        ],
        axis=1,
    )
    # project through q / ||q||
    return (g_qn - qn * np.einsum("ni,ni->n", qn, g_qn)[:, None]) / norm


def scatter_gradients(g_sorted: dict, perm: SortPermutation, grads: dict) -> None:
    """Accumulate sorted-order gradients into canonical buffers: grad[pi[i]] += g[i].

    Accumulation runs in ascending sorted index; fails if the permutation is
    not a bijection.
    """
    if not perm.is_bijection():
        raise ValueError("sort permutation is not a bijection")
    for name, g in g_sorted.items():
        np.add.at(grads[name], perm.pi, g)
