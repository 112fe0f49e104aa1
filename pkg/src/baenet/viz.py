"""Bit-exact image output: binary PPM/PGM writers, the fixed branch palette,
label-grid renders, axis projections for 3D grids, and activation maps."""

from __future__ import annotations

import numpy as np

from .errors import FormatError, ParameterError

# One color per branch, background white; chosen pairwise distinct and
# readable on white. Index b colors branch b (label b+1 in label grids).
PALETTE = (
    (31, 119, 180),
    (255, 127, 14),
    (44, 160, 44),
    (214, 39, 40),
    (148, 103, 189),
    (140, 86, 75),
    (227, 119, 194),
    (127, 127, 127),
    (188, 189, 34),
    (23, 190, 207),
    (255, 187, 120),
    (152, 223, 138),
)
BACKGROUND = (255, 255, 255)


def write_ppm(path, rgb: np.ndarray) -> None:
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ParameterError("write_ppm expects a uint8 [H, W, 3] array")
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes(order="C"))


def write_pgm(path, gray: np.ndarray) -> None:
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ParameterError("write_pgm expects a uint8 [H, W] array")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.tobytes(order="C"))


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != magic:
        raise FormatError(f"bad netpbm header in {path}", offset=0)
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError:
        raise FormatError("bad netpbm dimensions", offset=len(parts[0]) + 1) from None
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", offset=0)
    data = parts[3]
    expected = w * h * channels
    if len(data) != expected:
        raise FormatError(f"expected {expected} pixel bytes, have {len(data)}",
                          offset=len(blob) - len(data))
    arr = np.frombuffer(data, np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def render_labels(labels: np.ndarray) -> np.ndarray:
    """Color a 2D label grid: image row y, column x; background white."""
    if labels.ndim != 2:
        raise ParameterError("render_labels expects a 2D grid")
    if labels.max() > len(PALETTE):
        raise ParameterError(f"label {labels.max()} exceeds the {len(PALETTE)}-color palette")
    lut = np.array([BACKGROUND, *PALETTE], dtype=np.uint8)
    return lut[labels.T]  # transpose: axis0=x -> image columns


def project_labels_3d(labels: np.ndarray) -> list[np.ndarray]:
    """Maximum-label projection of a 3D grid along each axis, as 2D grids."""
    if labels.ndim != 3:
        raise ParameterError("expected a 3D label grid")
    return [labels.max(axis=a) for a in range(3)]


def render_activation(act: np.ndarray) -> np.ndarray:
    """Min-max normalize a 2D activation map to uint8; constant maps map to 128."""
    if act.ndim != 2:
        raise ParameterError("expected a 2D activation map")
    lo = float(act.min())
    hi = float(act.max())
    if hi <= lo:
        return np.full(act.shape[::-1], 128, np.uint8)
    scaled = np.round((act.astype(np.float64) - lo) / (hi - lo) * 255.0)
    return scaled.astype(np.uint8).T


def hstack_frames(frames: list[np.ndarray]) -> np.ndarray:
    if not frames:
        raise ParameterError("no frames to stack")
    if any(f.shape[0] != frames[0].shape[0] for f in frames):
        raise ParameterError("frames must share their height")
    return np.concatenate(frames, axis=1)
