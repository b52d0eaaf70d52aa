"""Capture directory ingestion and writing.

A capture is a directory holding one ``capture.json`` index plus image files.
The index lists every frame's image path, timestamp, intrinsics, and coarse
4x4 world-to-camera pose, and declares the stored color space (``"linear"``
or ``"srgb"``). Images are decoded to linear RGB in [0, 1] on load; all
downstream photometric work happens in that space.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import Frame, Intrinsics, PoseSE3

INDEX_NAME = "capture.json"


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.clip(c, 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def load_image(path: Path, color_space: str = "linear") -> np.ndarray:
    """Decode an image file to linear RGB float64 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if color_space == "srgb":
        arr = _srgb_to_linear(arr)
    return arr


def save_image(path: Path, image: np.ndarray, color_space: str = "linear") -> None:
    """Encode a linear RGB [0, 1] image to an 8-bit file."""
    img = np.asarray(image, dtype=np.float64)
    if color_space == "srgb":
        img = _linear_to_srgb(img)
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_capture(path) -> list[Frame]:
    """Load all frames of a capture directory, sorted by timestamp.

    Ties in timestamp keep index-file order. Fails with the image path on
    unreadable images and with the frame id on non-SE(3) pose matrices
    (orthonormality violated beyond 1e-4).
    """
    root = Path(path)
    index_path = root / INDEX_NAME
    if not index_path.is_file():
        raise FileNotFoundError(f"capture index not found: {index_path}")
    index = json.loads(index_path.read_text())
    color_space = index.get("color_space", "linear")

    entries = list(enumerate(index["frames"]))
    # stable sort: equal timestamps keep file order
    entries.sort(key=lambda e: (float(e[1]["timestamp"]), e[0]))

    frames = []
    for _, entry in entries:
        frame_id = int(entry["id"])
        img_path = root / entry["image"]
        if not img_path.is_file():
            raise FileNotFoundError(f"missing image for frame {frame_id}: {img_path}")
        try:
            image = load_image(img_path, color_space)
        except Exception as exc:
            raise IOError(f"unreadable image for frame {frame_id}: {img_path}: {exc}") from exc
        intr = Intrinsics(**entry["intrinsics"])
        try:
            pose = PoseSE3.from_matrix(np.array(entry["pose"], dtype=np.float64))
        except ValueError as exc:
            raise ValueError(f"frame {frame_id}: {exc}") from exc
        frames.append(
            Frame(
                id=frame_id,
                timestamp=float(entry["timestamp"]),
                image=image,
                intrinsics=intr,
                coarse_pose=pose,
            )
        )
    return frames


def save_capture(path, frames: list[Frame], color_space: str = "linear") -> None:
    """Write frames as a capture directory readable by :func:`load_capture`."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    index = {"color_space": color_space, "frames": []}
    for frame in frames:
        rel = f"images/{frame.id:05d}.png"
        save_image(root / rel, frame.image, color_space)
        intr = frame.intrinsics
        index["frames"].append(
            {
                "id": frame.id,
                "timestamp": frame.timestamp,
                "image": rel,
                "intrinsics": {
                    "fx": intr.fx,
                    "fy": intr.fy,
                    "cx": intr.cx,
                    "cy": intr.cy,
                    "width": intr.width,
                    "height": intr.height,
                },
                "pose": frame.coarse_pose.matrix().tolist(),
            }
        )
    (root / INDEX_NAME).write_text(json.dumps(index, indent=1))
