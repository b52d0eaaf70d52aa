"""Binary PLY export/import of Gaussian models.

Field names follow the layout common 3DGS viewers expect (x, y, z,
f_dc_0..2, opacity, scale_0..2, rot_0..3). Values are the raw model
parameters (color/opacity logits, log scales, quaternion wxyz) stored as
doubles so an export/import round trip is bit-exact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .scene import GaussianModel

_FIELDS = (
    ["x", "y", "z"]
    + [f"f_dc_{i}" for i in range(3)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)


def _model_record_array(model: GaussianModel) -> np.ndarray:
    data = np.concatenate(
        [
            model.positions,
            model.color_logits,
            model.opacity_logits[:, None],
            model.log_scales,
            model.rotations,
        ],
        axis=1,
    )
    return np.rec.fromarrays(data.T, names=_FIELDS, formats=["<f8"] * len(_FIELDS))


def export_ply(model: GaussianModel, path) -> None:
    """Write the model as binary little-endian PLY in canonical order.

    Fails listing the first non-finite parameter index.
    """
    for name in GaussianModel.PARAM_NAMES:
        arr = getattr(model, name)
        bad = ~np.isfinite(arr).reshape(len(model), -1).all(axis=1)
        if bad.any():
            raise ValueError(f"non-finite {name} at index {int(np.argmax(bad))}")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(model)}"]
    header += [f"property double {f}" for f in _FIELDS]
    header += ["end_header", ""]
    with open(path, "wb") as fh:
        fh.write("\n".join(header).encode("ascii"))
        fh.write(_model_record_array(model).tobytes())


def import_ply(path) -> GaussianModel:
    """Read a PLY written by :func:`export_ply` back into a model."""
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    if header[0] != "ply" or "format binary_little_endian 1.0" not in header[1]:
        raise ValueError(f"not a binary little-endian PLY: {path}")
    n = 0
    props = []
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property"):
            _, dtype, name = line.split()
            props.append((name, {"double": "<f8", "float": "<f4"}[dtype]))
    rec = np.frombuffer(raw[end:], dtype=np.dtype(props), count=n)

    def get(names):
        return np.stack([rec[f].astype(np.float64) for f in names], axis=1)

    return GaussianModel(
        positions=get(["x", "y", "z"]),
        log_scales=get([f"scale_{i}" for i in range(3)]),
        rotations=get([f"rot_{i}" for i in range(4)]),
        opacity_logits=rec["opacity"].astype(np.float64),
        color_logits=get([f"f_dc_{i}" for i in range(3)]),
    )
