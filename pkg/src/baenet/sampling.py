"""Point/value training pairs from raster shapes.

Coordinates are cell centers mapped to [-0.5, 0.5): (i + 0.5)/dim - 0.5.
Sampling is boundary-biased: every cell face-adjacent to an occupancy
transition is included first, then the budget is filled with uniform
draws without replacement. 3D grids finer than 32 cells per axis are
max-pooled down to 32 before sampling; 2D grids sample at native
resolution. Everything is deterministic per (shape, n, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError, ParameterError
from .shapes import RasterShape, downsample_occupancy

PTS_MAGIC = b"BAEPTS1"

SAMPLE_GRID_3D = 32

# default points per shape, by grid geometry
def default_point_count(dims: tuple[int, ...]) -> int:
    if len(dims) == 3:
        return 8192
    return 4096 if dims[0] <= 64 else 8192


def normalize_coords(cell_index, dims) -> np.ndarray:
    """Cell-center coordinates: (i + 0.5)/dim - 0.5 per axis, float32."""
    idx = np.asarray(cell_index)
    dims = np.asarray(dims)
    if idx.shape[-1] != dims.size:
        raise ParameterError(f"index rank {idx.shape[-1]} does not match dims {tuple(dims)}")
    if np.any(idx < 0) or np.any(idx >= dims):
        raise ParameterError("cell index outside the grid")
    return (((idx + 0.5) / dims) - 0.5).astype(np.float32)


def denormalize_coords(coords, dims) -> np.ndarray:
    """Index of the cell containing each coordinate."""
    c = np.asarray(coords, dtype=np.float64)
    dims = np.asarray(dims)
    idx = np.floor((c + 0.5) * dims).astype(np.int64)
    return np.clip(idx, 0, dims - 1)


def grid_coords(dims) -> np.ndarray:
    """Normalized centers of every cell, C order, shape [prod(dims), d]."""
    idx = np.indices(tuple(dims)).reshape(len(dims), -1).T
    return normalize_coords(idx, dims)


def boundary_cells(occ: np.ndarray) -> np.ndarray:
    """Flat C-order indices of cells with a face neighbor of different occupancy."""
    mask = np.zeros(occ.shape, dtype=bool)
    for a in range(occ.ndim):
        lo = [slice(None)] * occ.ndim
        hi = [slice(None)] * occ.ndim
        lo[a] = slice(None, -1)
        hi[a] = slice(1, None)
        diff = occ[tuple(lo)] != occ[tuple(hi)]
        mask[tuple(lo)] |= diff
        mask[tuple(hi)] |= diff
    return np.flatnonzero(mask)


@dataclass
class LabeledPoints:
    """Inside points with one-hot part labels (rows of an [m, L] matrix)."""

    coords: np.ndarray  # [m, d] float32
    labels: np.ndarray  # [m, L] float32, one-hot rows


@dataclass
class SampleSet:
    shape_id: int
    coords: np.ndarray  # [n, d] float32
    values: np.ndarray  # [n] float32 in {0, 1}
    labeled: LabeledPoints | None
    seed: int

    def __len__(self) -> int:
        return self.coords.shape[0]


def _sampling_grid(shape: RasterShape) -> np.ndarray:
    occ = shape.occupancy
    if occ.ndim == 3 and occ.shape[0] > SAMPLE_GRID_3D:
        occ = downsample_occupancy(occ, SAMPLE_GRID_3D)
    return occ


def sample_points(shape: RasterShape, n: int, seed: int, jitter: bool = False) -> SampleSet:
    """Boundary-first point/occupancy sample of one shape."""
    occ = _sampling_grid(shape)
    dims = occ.shape
    total = occ.size
    if not 1 <= n <= total:
        raise ParameterError(f"need 1 <= n <= {total}, got {n}")
    rng = np.random.Generator(
        np.random.Philox(key=np.array([seed, shape.shape_id], dtype=np.uint64))
    )
    bidx = boundary_cells(occ)
    if bidx.size >= n:
        idx = rng.choice(bidx, size=n, replace=False)
    else:
        rest = np.setdiff1d(np.arange(total), bidx, assume_unique=True)
        fill = rng.choice(rest, size=n - bidx.size, replace=False)
        idx = np.concatenate([bidx, fill])
    cell = np.stack(np.unravel_index(idx, dims), axis=1)
    coords = normalize_coords(cell, dims)
    if jitter:
        coords = coords + rng.uniform(-0.5, 0.5, size=coords.shape).astype(np.float32) / np.asarray(
            dims, dtype=np.float32
        )
    values = occ.reshape(-1)[idx].astype(np.float32)
    return SampleSet(shape.shape_id, coords, values, None, seed)


def labeled_points_from_gt(shape: RasterShape, n: int, seed: int,
                           num_parts: int | None = None) -> LabeledPoints:
    """Uniform sample of occupied cells with one-hot ground-truth part labels."""
    if shape.gt_labels is None:
        raise ContractError("shape has no ground-truth labels")
    flat_lab = shape.gt_labels.reshape(-1)
    occupied = np.flatnonzero(flat_lab > 0)
    if not 1 <= n <= occupied.size:
        raise ParameterError(f"need 1 <= n <= {occupied.size} occupied cells, got {n}")
    parts = num_parts if num_parts is not None else int(flat_lab.max())
    rng = np.random.Generator(
        np.random.Philox(key=np.array([seed, shape.shape_id ^ (1 << 32)], dtype=np.uint64))
    )
    idx = rng.choice(occupied, size=n, replace=False)
    cell = np.stack(np.unravel_index(idx, shape.dims), axis=1)
    coords = normalize_coords(cell, shape.dims)
    onehot = np.zeros((n, parts), dtype=np.float32)
    onehot[np.arange(n), flat_lab[idx] - 1] = 1.0
    return LabeledPoints(coords, onehot)


# -- BAEPTS1 cache format --------------------------------------------------
#
# Header "BAEPTS1 <n> <d> <L>\n", then n packed records of d little-endian
# float32 coordinates, one value byte, and L one-hot label bytes when L>0.


def _record_dtype(d: int, n_labels: int) -> np.dtype:
    fields = [("c", "<f4", (d,)), ("v", "u1")]
    if n_labels:
        fields.append(("l", "u1", (n_labels,)))
    return np.dtype(fields)


def write_points(path, coords: np.ndarray, values: np.ndarray,
                 labels: np.ndarray | None = None) -> None:
    n, d = coords.shape
    n_labels = 0 if labels is None else labels.shape[1]
    rec = np.zeros(n, dtype=_record_dtype(d, n_labels))
    rec["c"] = coords.astype("<f4")
    rec["v"] = values.astype(np.uint8)
    if n_labels:
        rec["l"] = labels.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"BAEPTS1 {n} {d} {n_labels}\n".encode("ascii"))
        f.write(rec.tobytes())


def read_points(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    with open(path, "rb") as f:
        blob = f.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError("missing header newline", offset=0)
    fields = blob[:nl].split(b" ")
    if len(fields) != 4 or fields[0] != PTS_MAGIC:
        raise FormatError(f"bad header {blob[:nl]!r}", offset=0)
    try:
        n, d, n_labels = (int(v) for v in fields[1:])
    except ValueError:
        raise FormatError(f"non-integer header field in {blob[:nl]!r}", offset=0) from None
    if n < 0 or d < 1 or n_labels < 0:
        raise FormatError("header values out of range", offset=0)
    dtype = _record_dtype(d, n_labels)
    start = nl + 1
    expected = start + n * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(f"expected {expected} bytes, have {len(blob)}",
                          offset=min(len(blob), expected))
    rec = np.frombuffer(blob, dtype=dtype, count=n, offset=start)
    coords = rec["c"].astype(np.float32)
    values = rec["v"].astype(np.float32)
    labels = rec["l"].astype(np.float32) if n_labels else None
    return coords, values, labels
