"""Image-quality metrics on linear RGB in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .capture import load_image
from .losses import ssim_map

PSNR_CAP_DB = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE); identical images report the 99 dB cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03)."""
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(ssim_map(a, b).mean())


def evaluate(rendered_dir, truth_dir, color_space: str = "linear") -> dict:
    """Per-image and mean PSNR/SSIM over matching filenames in two directories."""
    rendered_dir, truth_dir = Path(rendered_dir), Path(truth_dir)
    names = sorted(p.name for p in rendered_dir.iterdir() if p.suffix.lower() == ".png")
    if not names:
        raise FileNotFoundError(f"no rendered images in {rendered_dir}")
    per_image = {}
    for name in names:
        truth_path = truth_dir / name
        if not truth_path.is_file():
            raise FileNotFoundError(f"missing ground truth for {name}")
        a = load_image(rendered_dir / name, color_space)
        b = load_image(truth_path, color_space)
        if a.shape != b.shape:
            raise ValueError(f"{name}: size mismatch {a.shape} vs {b.shape}")
        per_image[name] = {"psnr": psnr(a, b), "ssim": ssim(a, b)}
    return {
        "per_image": per_image,
        "mean_psnr": float(np.mean([m["psnr"] for m in per_image.values()])),
        "mean_ssim": float(np.mean([m["ssim"] for m in per_image.values()])),
    }
