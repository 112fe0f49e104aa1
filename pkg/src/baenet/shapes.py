"""Deterministic synthetic shape generators and bit-exact raster file I/O.

Three families: "elements" (64x64 images of a cross, a triangle and a
rhombus), "triple_rings" (128x128 images of three annuli), and "tables3d"
(procedural voxel tables: a slab top over four legs). Every shape is a
pure function of (seed, index) via a counter-based Philox stream, so
datasets regenerate bitwise and generation parallelizes trivially.

Grids are stored x-major: array shape (dx, dy) or (dx, dy, dz) in C order,
matching the BAEVOX1 byte layout exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError

VOX_MAGIC = b"BAEVOX1"

DEFAULT_RESOLUTION = {"elements": 64, "triple_rings": 128, "tables3d": 32}

# Pattern geometry, roughly proportional to the source imagery; override
# per-call if needed. Cross: two orthogonal 3-cell-thick bars, length 17.
CROSS_LEN = 17
CROSS_THICK = 3
TRIANGLE_BASE = 17
TRIANGLE_HEIGHT = 12
RHOMBUS_DIAG = 15
RING_RADII = ((8, 12), (14, 18), (20, 24))  # (r_in, r_out) small/medium/large


@dataclass
class RasterShape:
    """Binary occupancy grid with optional per-cell ground-truth part labels."""

    dims: tuple[int, ...]
    occupancy: np.ndarray  # uint8 in {0,1}, shape == dims
    gt_labels: np.ndarray | None = None  # uint8 in {0..L}, 0 = background
    params: dict = field(default_factory=dict)
    category: str = ""
    shape_id: int = 0

    def check_consistent(self) -> None:
        """Structural invariants every raster must satisfy."""
        if tuple(self.occupancy.shape) != tuple(self.dims):
            raise ParameterError("occupancy shape does not match dims")
        if not np.isin(self.occupancy, (0, 1)).all():
            raise ParameterError("occupancy must be 0/1")
        if self.gt_labels is not None:
            if self.gt_labels.shape != self.occupancy.shape:
                raise ParameterError("gt_labels shape does not match occupancy")
            if np.any((self.gt_labels > 0) != (self.occupancy == 1)):
                raise ParameterError("gt_labels>0 must coincide exactly with occupancy==1")

    def validate(self) -> None:
        """Structural invariants plus the generator rule that nothing may
        touch the grid border (predicted label grids are exempt)."""
        self.check_consistent()
        border = np.ones(self.dims, dtype=bool)
        border[(slice(1, -1),) * len(self.dims)] = False
        if np.any(self.occupancy[border]):
            raise ParameterError("occupied cells touch the grid border")

    def num_parts(self) -> int:
        if self.gt_labels is None:
            return 0
        return int(self.gt_labels.max())


@dataclass
class DatasetSpec:
    """What to generate: category, how many shapes, seed, resolution."""

    category: str
    count: int
    seed: int = 0
    resolution: int | None = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.category not in DEFAULT_RESOLUTION:
            raise ParameterError(f"unknown category {self.category!r}")
        if self.count < 1:
            raise ParameterError("count must be >= 1")
        if self.resolution is None:
            self.resolution = DEFAULT_RESOLUTION[self.category]


def shape_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per shape index from a counter-based generator."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))


def _stamp_cross(occ, lab, cx, cy, label):
    h = CROSS_LEN // 2
    t = CROSS_THICK // 2
    occ[cx - h : cx + h + 1, cy - t : cy + t + 1] = 1
    occ[cx - t : cx + t + 1, cy - h : cy + h + 1] = 1
    lab[cx - h : cx + h + 1, cy - t : cy + t + 1] = label
    lab[cx - t : cx + t + 1, cy - h : cy + h + 1] = label


def _stamp_triangle(occ, lab, cx, cy, label):
    # filled isoceles, apex toward -y, base TRIANGLE_BASE at +y side
    h = TRIANGLE_HEIGHT
    hw_max = TRIANGLE_BASE // 2
    y0 = cy - h // 2
    for r in range(h):
        hw = round(hw_max * r / (h - 1))
        occ[cx - hw : cx + hw + 1, y0 + r] = 1
        lab[cx - hw : cx + hw + 1, y0 + r] = label


def _stamp_rhombus(occ, lab, cx, cy, label):
    r = RHOMBUS_DIAG // 2
    xs, ys = np.ogrid[-r : r + 1, -r : r + 1]
    mask = np.abs(xs) + np.abs(ys) <= r
    sub = occ[cx - r : cx + r + 1, cy - r : cy + r + 1]
    sub[mask] = 1
    lab[cx - r : cx + r + 1, cy - r : cy + r + 1][mask] = label


def gen_elements(spec: DatasetSpec) -> list[RasterShape]:
    """Cross anywhere, triangle sliding on the horizontal midline, rhombus
    sliding on the vertical midline; labels 1/2/3, later patterns overwrite
    overlaps. Option ``cross_prob`` (default 1.0) drops the cross from a
    fraction of the images for weak-supervision experiments.
    """
    res = spec.resolution
    reach = max(CROSS_LEN, TRIANGLE_BASE, RHOMBUS_DIAG) // 2
    lo, hi = 1 + reach, res - 2 - reach  # inclusive center range
    if res < 24 or hi < lo:
        raise ParameterError(f"resolution {res} too small to fit the patterns")
    cross_prob = float(spec.options.get("cross_prob", 1.0))
    mid = res // 2
    tri_lo = 1 + TRIANGLE_HEIGHT // 2
    shapes = []
    for i in range(spec.count):
        rng = shape_rng(spec.seed, i)
        occ = np.zeros((res, res), dtype=np.uint8)
        lab = np.zeros((res, res), dtype=np.uint8)
        has_cross = rng.random() < cross_prob if cross_prob < 1.0 else True
        cross_x = int(rng.integers(lo, hi + 1))
        cross_y = int(rng.integers(lo, hi + 1))
        tri_x = int(rng.integers(lo, hi + 1))
        rho_y = int(rng.integers(lo, hi + 1))
        params = {"triangle": [tri_x, mid], "rhombus": [mid, rho_y]}
        if has_cross:
            _stamp_cross(occ, lab, cross_x, cross_y, 1)
            params["cross"] = [cross_x, cross_y]
        if mid - TRIANGLE_HEIGHT // 2 < tri_lo:
            raise ParameterError("triangle does not fit on the midline")
        _stamp_triangle(occ, lab, tri_x, mid, 2)
        _stamp_rhombus(occ, lab, mid, rho_y, 3)
        shapes.append(RasterShape((res, res), occ, lab, params, "elements", i))
    return shapes


def gen_triple_rings(spec: DatasetSpec) -> list[RasterShape]:
    """Three annuli of fixed distinct radius classes, centers uniform over
    placements that keep each ring fully inside the border."""
    res = spec.resolution
    radii = spec.options.get("radii", RING_RADII)
    if 1 + 2 * max(r_out for _, r_out in radii) + 1 >= res:
        raise ParameterError(f"resolution {res} too small for ring radii {radii}")
    shapes = []
    for i in range(spec.count):
        rng = shape_rng(spec.seed, i)
        occ = np.zeros((res, res), dtype=np.uint8)
        lab = np.zeros((res, res), dtype=np.uint8)
        centers = []
        for label, (r_in, r_out) in enumerate(radii, start=1):
            lo, hi = 1 + r_out, res - 2 - r_out
            cx = int(rng.integers(lo, hi + 1))
            cy = int(rng.integers(lo, hi + 1))
            xs, ys = np.ogrid[-r_out : r_out + 1, -r_out : r_out + 1]
            d2 = xs * xs + ys * ys
            mask = (d2 <= r_out * r_out) & (d2 > r_in * r_in)
            occ[cx - r_out : cx + r_out + 1, cy - r_out : cy + r_out + 1][mask] = 1
            lab[cx - r_out : cx + r_out + 1, cy - r_out : cy + r_out + 1][mask] = label
            centers.append([cx, cy])
        shapes.append(
            RasterShape((res, res), occ, lab, {"centers": centers, "radii": [list(r) for r in radii]},
                        "triple_rings", i)
        )
    return shapes


def gen_tables3d(spec: DatasetSpec) -> list[RasterShape]:
    """Axis-aligned tabletop slab (label 1) over four corner legs (label 2).

    Randomized per shape: top half-extents in [0.28R, 0.42R], top thickness
    and leg width in [R/16, R/10], underside height in [0.35R, 0.65R], and a
    small center jitter. Everything stays >= 1 cell away from the border.
    """
    res = spec.resolution
    if res not in (16, 32, 64):
        raise ParameterError(f"tables3d resolution must be 16, 32 or 64, got {res}")
    ax_lo, ax_hi = max(3, round(0.28 * res)), round(0.42 * res)
    t_lo, t_hi = max(1, res // 16), max(2, res // 10)
    z_lo, z_hi = round(0.35 * res), round(0.65 * res)
    jit = res // 16
    if ax_lo > ax_hi or z_lo > z_hi:
        raise ParameterError("infeasible tables3d ranges at this resolution")
    shapes = []
    for i in range(spec.count):
        rng = shape_rng(spec.seed, i)
        ax = int(rng.integers(ax_lo, ax_hi + 1))
        ay = int(rng.integers(ax_lo, ax_hi + 1))
        t = int(rng.integers(t_lo, t_hi + 1))
        w = int(rng.integers(t_lo, t_hi + 1))
        z1 = int(rng.integers(z_lo, z_hi + 1))  # top underside (first slab layer)
        cx = res // 2 + int(rng.integers(-jit, jit + 1))
        cy = res // 2 + int(rng.integers(-jit, jit + 1))
        cx = min(max(cx, 1 + ax), res - 2 - ax)
        cy = min(max(cy, 1 + ay), res - 2 - ay)
        z2 = z1 + t - 1
        if z2 > res - 2 or z1 - 1 < 1 or w > ax:
            raise ParameterError("sampled table does not fit; tighten the ranges")
        occ = np.zeros((res, res, res), dtype=np.uint8)
        lab = np.zeros((res, res, res), dtype=np.uint8)
        for lx in (cx - ax, cx + ax - w + 1):
            for ly in (cy - ay, cy + ay - w + 1):
                occ[lx : lx + w, ly : ly + w, 1:z1] = 1
                lab[lx : lx + w, ly : ly + w, 1:z1] = 2
        occ[cx - ax : cx + ax + 1, cy - ay : cy + ay + 1, z1 : z2 + 1] = 1
        lab[cx - ax : cx + ax + 1, cy - ay : cy + ay + 1, z1 : z2 + 1] = 1
        params = {"top": [cx, cy, ax, ay, z1, t], "leg": [w, z1 - 1]}
        shapes.append(RasterShape((res, res, res), occ, lab, params, "tables3d", i))
    return shapes


_GENERATORS = {
    "elements": gen_elements,
    "triple_rings": gen_triple_rings,
    "tables3d": gen_tables3d,
}


def generate_dataset(spec: DatasetSpec) -> list[RasterShape]:
    return _GENERATORS[spec.category](spec)


def downsample_occupancy(occ: np.ndarray, target: int) -> np.ndarray:
    """Max-pool a cubic/square grid down to target cells per axis."""
    d = occ.ndim
    src = occ.shape[0]
    if any(e != src for e in occ.shape):
        raise ParameterError("downsample expects equal extents per axis")
    if src % target:
        raise ParameterError(f"extent {src} not divisible by target {target}")
    f = src // target
    view = occ.reshape(sum(([target, f] for _ in range(d)), []))
    axes = tuple(range(1, 2 * d, 2))
    return view.max(axis=axes)


# -- BAEVOX1 file format -------------------------------------------------
#
# ASCII header "BAEVOX1 <dx> <dy> <dz> <has_labels:0|1>\n" (2D uses dz=1),
# then dx*dy*dz occupancy bytes in x-major order, then the same count of
# label bytes when has_labels=1. No padding, no compression.


def write_raster(shape: RasterShape, path) -> None:
    shape.check_consistent()
    dims3 = tuple(shape.dims) + (1,) * (3 - len(shape.dims))
    has_labels = 1 if shape.gt_labels is not None else 0
    header = f"BAEVOX1 {dims3[0]} {dims3[1]} {dims3[2]} {has_labels}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(shape.occupancy.astype(np.uint8).tobytes(order="C"))
        if has_labels:
            f.write(shape.gt_labels.astype(np.uint8).tobytes(order="C"))


def read_raster(path) -> RasterShape:
    with open(path, "rb") as f:
        blob = f.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError("missing header newline", offset=0)
    fields = blob[:nl].split(b" ")
    if len(fields) != 5 or fields[0] != VOX_MAGIC:
        raise FormatError(f"bad header {blob[:nl]!r}", offset=0)
    try:
        dx, dy, dz, has_labels = (int(v) for v in fields[1:])
    except ValueError:
        raise FormatError(f"non-integer header field in {blob[:nl]!r}", offset=0) from None
    if dx < 1 or dy < 1 or dz < 1 or has_labels not in (0, 1):
        raise FormatError("header values out of range", offset=0)
    n = dx * dy * dz
    start = nl + 1
    expected = start + n * (1 + has_labels)
    if len(blob) < expected:
        raise FormatError(f"payload truncated: need {expected} bytes, have {len(blob)}",
                          offset=len(blob))
    if len(blob) > expected:
        raise FormatError("trailing bytes after payload", offset=expected)
    occ = np.frombuffer(blob, dtype=np.uint8, count=n, offset=start)
    bad = np.nonzero(occ > 1)[0]
    if bad.size:
        raise FormatError(f"occupancy byte {occ[bad[0]]} not in {{0,1}}",
                          offset=start + int(bad[0]))
    dims = (dx, dy) if dz == 1 else (dx, dy, dz)
    occ = occ.reshape(dims).copy()
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=start + n)
        mismatch = np.nonzero((labels > 0) != (occ.reshape(-1) == 1))[0]
        if mismatch.size:
            raise FormatError("label/occupancy inconsistency", offset=start + n + int(mismatch[0]))
        labels = labels.reshape(dims).copy()
    return RasterShape(dims, occ, labels, {}, "", 0)
