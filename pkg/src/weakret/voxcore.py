"""Voxel objects, procedural shape families, scan degradation and the grid file format.

Grids are indexed ``occ[x, y, z]`` with ``z`` pointing up. Voxels are
isotropic: the longest side of an object spans ``INNER_RES`` voxels and the
remaining sides keep the object's aspect ratio. ``scale`` carries the
world-space bounding-box extents separately, since the grid alone does not
encode absolute size.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

INNER_RES = 32
PAD = 2
GRID_RES = INNER_RES + 2 * PAD

FAMILIES = ("box", "table", "chair", "lshape", "cylinder", "shelf", "ring", "cross")

GRID_MAGIC = b"WVOX1"
GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<5sBB3I3f")


class FormatError(ValueError):
    """Raised when a binary artifact cannot be decoded."""


@dataclass(frozen=True, eq=False)
class VoxelObject:
    id: str
    occupancy: np.ndarray
    scale: np.ndarray
    family: str = ""
    visibility: Optional[np.ndarray] = None

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=bool)
        scale = np.asarray(self.scale, dtype=np.float32).reshape(3)
        if occ.ndim != 3:
            raise ValueError("occupancy must be a 3D array")
        if not np.all(scale > 0):
            raise ValueError("scale components must be strictly positive")
        vis = self.visibility
        if vis is not None:
            vis = np.asarray(vis, dtype=bool)
            if vis.shape != occ.shape:
                raise ValueError("visibility and occupancy dimensions differ")
            vis.flags.writeable = False
        occ.flags.writeable = False
        scale.flags.writeable = False
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "visibility", vis)

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.occupancy.shape

    def __eq__(self, other):
        if not isinstance(other, VoxelObject):
            return NotImplemented
        if (self.visibility is None) != (other.visibility is None):
            return False
        same_vis = self.visibility is None or np.array_equal(self.visibility, other.visibility)
        return (
            self.id == other.id
            and self.family == other.family
            and np.array_equal(self.occupancy, other.occupancy)
            and np.array_equal(self.scale.view(np.uint32), other.scale.view(np.uint32))
            and same_vis
        )

    __hash__ = None


@dataclass(frozen=True)
class DegradationParams:
    noise_flip_prob: float = 0.03
    carve_view_count: int = 5
    dropout_fraction: float = 0.8
    clutter_prob: float = 0.3
    jitter_scale: float = 0.1

    def __post_init__(self):
        for name in ("noise_flip_prob", "dropout_fraction", "clutter_prob"):
            v = float(getattr(self, name))
            object.__setattr__(self, name, min(max(v, 0.0), 1.0))
        object.__setattr__(self, "jitter_scale", min(max(float(self.jitter_scale), 0.0), 0.5))
        object.__setattr__(self, "carve_view_count", max(int(self.carve_view_count), 0))


@dataclass(frozen=True)
class DatasetSpec:
    n_families: int = 8
    n_prototypes_per_family: int = 5
    n_scans_per_prototype: int = 8
    degradation: DegradationParams = field(default_factory=DegradationParams)
    seed: int = 0

    def __post_init__(self):
        if min(self.n_families, self.n_prototypes_per_family, self.n_scans_per_prototype) < 1:
            raise ValueError("dataset counts must be >= 1")
        if self.n_families > len(FAMILIES):
            raise ValueError(f"at most {len(FAMILIES)} families are available")


# -- procedural prototypes ---------------------------------------------------


def _family_shape(family: str, rng: np.random.Generator):
    """Return (dims, predicate) where predicate maps unit-box coords to occupancy."""
    u = rng.uniform
    if family == "box":
        dims = np.array([u(0.4, 1.0), u(0.4, 1.0), u(0.3, 1.0)])
        return dims, lambda x, y, z: np.ones_like(x, dtype=bool)

    if family == "table":
        dims = np.array([u(0.8, 1.6), u(0.6, 1.2), u(0.5, 0.9)])
        top = u(0.08, 0.25)
        leg = u(0.08, 0.2)

        def table(x, y, z):
            legs = ((x < leg) | (x > 1 - leg)) & ((y < leg) | (y > 1 - leg))
            return (z > 1 - top) | legs

        return dims, table

    if family == "chair":
        dims = np.array([u(0.5, 0.7), u(0.5, 0.7), u(0.8, 1.2)])
        seat_h = u(0.35, 0.55)
        seat_t = u(0.07, 0.15)
        back_t = u(0.08, 0.2)
        leg = u(0.1, 0.2)

        def chair(x, y, z):
            seat = (z > seat_h - seat_t) & (z <= seat_h)
            back = (y < back_t) & (z > seat_h - seat_t)
            legs = (z <= seat_h) & ((x < leg) | (x > 1 - leg)) & ((y < leg) | (y > 1 - leg))
            return seat | back | legs

        return dims, chair

    if family == "lshape":
        dims = np.array([u(0.6, 1.2), u(0.6, 1.2), u(0.2, 0.8)])
        a = u(0.25, 0.6)
        b = u(0.25, 0.6)
        return dims, lambda x, y, z: (x < a) | (y < b)

    if family == "cylinder":
        d = u(0.4, 1.0)
        dims = np.array([d, d, u(0.3, 1.4)])
        taper = u(0.0, 0.6)

        def cylinder(x, y, z):
            r = 0.5 * (1.0 - taper * z)
            return (x - 0.5) ** 2 + (y - 0.5) ** 2 <= r**2

        return dims, cylinder

    if family == "shelf":
        dims = np.array([u(0.6, 1.2), u(0.25, 0.5), u(0.8, 1.8)])
        n_slabs = int(rng.integers(2, 6))
        slab = u(0.04, 0.1)
        side = u(0.06, 0.15)
        has_back = bool(rng.integers(0, 2))

        def shelf(x, y, z):
            pos = z * (n_slabs - 1)
            near = np.abs(pos - np.round(pos)) < slab * (n_slabs - 1)
            sides = (x < side) | (x > 1 - side)
            back = (y < 0.15) if has_back else np.zeros_like(x, dtype=bool)
            return near | sides | back

        return dims, shelf

    if family == "ring":
        d = u(0.6, 1.2)
        dims = np.array([d * u(0.8, 1.0), d, u(0.15, 0.5)])
        inner = u(0.35, 0.75)

        def ring(x, y, z):
            r2 = (x - 0.5) ** 2 + (y - 0.5) ** 2
            return (r2 <= 0.25) & (r2 >= (0.5 * inner) ** 2)

        return dims, ring

    if family == "cross":
        dims = np.array([u(0.6, 1.2), u(0.6, 1.2), u(0.3, 1.2)])
        a = u(0.1, 0.25)
        b = u(0.1, 0.25)
        c = u(0.15, 0.35)

        def cross(x, y, z):
            ax, ay, az = np.abs(x - 0.5), np.abs(y - 0.5), np.abs(z - 0.5)
            return ((ax < a) & (az < c)) | ((ay < b) & (az < c)) | ((ax < a) & (ay < b))

        return dims, cross

    raise ValueError(f"unknown family: {family!r}")


def _voxelize(dims: np.ndarray, predicate) -> np.ndarray:
    extents = np.maximum(1, np.round(INNER_RES * dims / dims.max()).astype(int))
    coords = [(np.arange(n) + 0.5) / n for n in extents]
    x, y, z = np.meshgrid(*coords, indexing="ij")
    block = np.asarray(predicate(x, y, z), dtype=bool)
    occ = np.zeros((GRID_RES,) * 3, dtype=bool)
    lo = PAD + (INNER_RES - extents) // 2
    occ[lo[0]:lo[0] + extents[0], lo[1]:lo[1] + extents[1], lo[2]:lo[2] + extents[2]] = block
    return occ


def generate_prototype(family: str, variant_seed: int, id: Optional[str] = None) -> VoxelObject:
    """Build a clean, solid, centered prototype with unit bounding-box diagonal."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family: {family!r}")
    rng = np.random.default_rng([FAMILIES.index(family), int(variant_seed)])
    dims, predicate = _family_shape(family, rng)
    occ = _voxelize(dims, predicate)
    scale = dims / np.linalg.norm(dims)
    return VoxelObject(id=id or f"{family}_{variant_seed}", occupancy=occ, scale=scale, family=family)


# -- transforms ----------------------------------------------------------------


def occupied_bbox(occ: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive-lo, exclusive-hi index bounds of the occupied region."""
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(occ.any(axis=other))
        if idx.size == 0:
            raise ValueError("degenerate extent: empty occupancy")
        lo.append(idx[0])
        hi.append(idx[-1] + 1)
    return np.array(lo), np.array(hi)


def rescale_anisotropic(cad: VoxelObject, target_scale) -> VoxelObject:
    """Nearest-neighbour resample so the occupied extents follow target_scale's aspect.

    The longest occupied extent is kept; the other axes are resized relative to
    it and the result stays centered on the source bounding box.
    """
    target = np.asarray(target_scale, dtype=np.float64).reshape(3)
    if not np.all(target > 0):
        raise ValueError("target_scale must be strictly positive")
    occ = cad.occupancy
    lo, hi = occupied_bbox(occ)
    src_ext = hi - lo
    if np.any(src_ext < 1):
        raise ValueError("degenerate extent")
    res = np.array(occ.shape)
    dst_ext = np.maximum(1, np.round(src_ext.max() * target / target.max()).astype(int))
    dst_ext = np.minimum(dst_ext, res - 2 * PAD)
    dst_lo = lo + (src_ext - dst_ext) // 2
    dst_lo = np.clip(dst_lo, PAD, res - PAD - dst_ext)

    index = []
    for axis in range(3):
        i = np.arange(dst_ext[axis])
        src = lo[axis] + np.floor((i + 0.5) * src_ext[axis] / dst_ext[axis]).astype(int)
        index.append(np.minimum(src, hi[axis] - 1))
    block = occ[np.ix_(*index)]
    out = np.zeros_like(occ)
    out[dst_lo[0]:dst_lo[0] + dst_ext[0], dst_lo[1]:dst_lo[1] + dst_ext[1],
        dst_lo[2]:dst_lo[2] + dst_ext[2]] = block
    return VoxelObject(id=cad.id, occupancy=out, scale=target, family=cad.family,
                       visibility=cad.visibility)


# -- scan simulation -------------------------------------------------------------

# Camera directions (pointing from the object towards the camera), top and sides first.
_UPPER = [(0, 0, 1), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0),
          (1, 1, 1), (-1, 1, 1), (1, -1, 1), (-1, -1, 1),
          (1, 0, 1), (-1, 0, 1), (0, 1, 1), (0, -1, 1),
          (1, 1, 0), (-1, 1, 0), (1, -1, 0), (-1, -1, 0)]
_LOWER = [(1, 0, -1), (-1, 0, -1), (0, 1, -1), (0, -1, -1),
          (1, 1, -1), (-1, 1, -1), (1, -1, -1), (-1, -1, -1), (0, 0, -1)]
CARVE_DIRECTIONS = tuple(_UPPER + _LOWER)


def _shift(a: np.ndarray, step, fill: bool) -> np.ndarray:
    """out[v] = a[v + step], with `fill` where v + step leaves the grid."""
    out = np.full_like(a, fill)
    src, dst = [], []
    for s, n in zip(step, a.shape):
        if s > 0:
            src.append(slice(s, n)); dst.append(slice(0, n - s))
        elif s < 0:
            src.append(slice(0, n + s)); dst.append(slice(-s, n))
        else:
            src.append(slice(None)); dst.append(slice(None))
    out[tuple(dst)] = a[tuple(src)]
    return out


def carve_visibility(occ: np.ndarray, directions) -> np.ndarray:
    """Voxels reached from any direction before (or at) the first occupied voxel."""
    visible = np.zeros(occ.shape, dtype=bool)
    free = ~occ
    for step in directions:
        free_next = _shift(free, step, True)
        vis = _shift(np.zeros_like(occ), step, True)
        outside = vis.copy()
        for _ in range(max(occ.shape)):
            new = outside | (free_next & _shift(vis, step, True))
            if np.array_equal(new, vis):
                break
            vis = new
        visible |= vis
    return visible


def pick_directions(count: int, rng: np.random.Generator):
    if count <= 0:
        return []
    if count >= len(CARVE_DIRECTIONS):
        return list(CARVE_DIRECTIONS)
    if count <= len(_UPPER):
        idx = rng.choice(len(_UPPER), size=count, replace=False)
        return [_UPPER[i] for i in sorted(idx)]
    idx = rng.choice(len(_LOWER), size=count - len(_UPPER), replace=False)
    return list(_UPPER) + [_LOWER[i] for i in sorted(idx)]


def interior_mask(shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[PAD:-PAD, PAD:-PAD, PAD:-PAD] = True
    return mask


def surface_band(occ: np.ndarray) -> np.ndarray:
    """Occupied voxels touching free space plus free voxels touching occupancy (6-neighbourhood)."""
    near_free = np.zeros_like(occ)
    near_occ = np.zeros_like(occ)
    for axis in range(3):
        for s in (-1, 1):
            step = [0, 0, 0]
            step[axis] = s
            near_free |= _shift(~occ, step, True)
            near_occ |= _shift(occ, step, False)
    return (occ & near_free) | (~occ & near_occ)


def apply_degradation(occ, visibility, params: DegradationParams, rng: np.random.Generator):
    """Dropout, surface noise and clutter for a given visibility grid."""
    band = surface_band(occ) & visibility & interior_mask(occ.shape)
    occ = occ.copy()
    visibility = visibility.copy()

    hidden = occ & ~visibility
    occ[hidden & (rng.random(occ.shape) < params.dropout_fraction)] = False

    flips = band & (rng.random(occ.shape) < params.noise_flip_prob)
    occ ^= flips

    if rng.random() < params.clutter_prob:
        size = rng.integers(2, 5, size=3)
        lo = [int(rng.integers(PAD, n - PAD - s + 1)) for n, s in zip(occ.shape, size)]
        blob = tuple(slice(l, l + s) for l, s in zip(lo, size))
        occ[blob] = True
        visibility[blob] = True
    return occ, visibility


def degrade(clean: VoxelObject, params: DegradationParams, seed: int, id: Optional[str] = None) -> VoxelObject:
    """Simulate a noisy, partial scan of a clean object."""
    if clean.visibility is not None:
        raise ValueError("clean object already has a visibility grid")
    rng = np.random.default_rng([int(seed), 0x5CA7])
    scale = clean.scale.astype(np.float64)
    if params.jitter_scale > 0:
        scale = scale * (1.0 + rng.uniform(-params.jitter_scale, params.jitter_scale, size=3))
        clean = rescale_anisotropic(clean, scale)
    occ = clean.occupancy
    if params.carve_view_count == 0:
        visibility = np.ones(occ.shape, dtype=bool)
    else:
        visibility = carve_visibility(occ, pick_directions(params.carve_view_count, rng))
    occ, visibility = apply_degradation(occ, visibility, params, rng)
    return VoxelObject(id=id or f"{clean.id}_scan{seed}", occupancy=occ, scale=scale,
                       family=clean.family, visibility=visibility)


# -- dataset ---------------------------------------------------------------------


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def generate_dataset(spec: DatasetSpec):
    """Return (cads, scans, source) where source maps scan id -> prototype id."""
    cads, scans, source = [], [], {}
    for f in range(spec.n_families):
        family = FAMILIES[f]
        for p in range(spec.n_prototypes_per_family):
            cad = generate_prototype(family, _derived_seed(spec.seed, f, p), id=f"{family}_{p:02d}")
            cads.append(cad)
            for s in range(spec.n_scans_per_prototype):
                scan = degrade(cad, spec.degradation, _derived_seed(spec.seed, f, p, s, 1),
                               id=f"{cad.id}_s{s:02d}")
                scans.append(scan)
                source[scan.id] = cad.id
    return cads, scans, source


# -- file format -------------------------------------------------------------------


def _pack(grid: np.ndarray) -> bytes:
    return np.packbits(grid.ravel(order="F"), bitorder="little").tobytes()


def encode_grid(obj: VoxelObject) -> bytes:
    flags = 1 if obj.visibility is not None else 0
    header = _GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, flags, *obj.occupancy.shape, *obj.scale.tolist())
    body = _pack(obj.occupancy)
    if flags:
        body += _pack(obj.visibility)
    return header + body


def decode_grid(data: bytes, id: str = "", family: str = "") -> VoxelObject:
    if len(data) < _GRID_HEADER.size:
        if data[:5] != GRID_MAGIC[:len(data[:5])]:
            raise FormatError("unsupported format")
        raise FormatError("corrupt file")
    magic, version, flags, dx, dy, dz, sx, sy, sz = _GRID_HEADER.unpack_from(data)
    if magic != GRID_MAGIC or version != GRID_VERSION:
        raise FormatError("unsupported format")
    n = dx * dy * dz
    nbytes = (n + 7) // 8
    expected = _GRID_HEADER.size + nbytes * (2 if flags & 1 else 1)
    if len(data) != expected:
        raise FormatError("corrupt file")

    def unpack(offset):
        bits = np.unpackbits(np.frombuffer(data, np.uint8, nbytes, offset), count=n, bitorder="little")
        return bits.astype(bool).reshape((dx, dy, dz), order="F")

    occ = unpack(_GRID_HEADER.size)
    vis = unpack(_GRID_HEADER.size + nbytes) if flags & 1 else None
    scale = np.array([sx, sy, sz], dtype=np.float32)
    return VoxelObject(id=id, occupancy=occ, scale=scale, family=family, visibility=vis)


def write_grid(obj: VoxelObject, path) -> None:
    Path(path).write_bytes(encode_grid(obj))


def read_grid(path, id: Optional[str] = None, family: str = "") -> VoxelObject:
    path = Path(path)
    return decode_grid(path.read_bytes(), id=path.stem if id is None else id, family=family)
