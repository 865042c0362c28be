"""Sparse multi-level Morton-coded voxel octree with shared corner feature slots.

The octree is the spatial model of the map: per level it keeps the sorted
Morton keys of exactly those voxels that contain surface points (coarser
levels cover finer ones by construction), plus a dense slot index for every
unique voxel corner at that level. Feature storage lives elsewhere and is
addressed by (level, corner slot).

Conventions:
  - level 0 is the coarsest, level ``height-1`` the finest; the voxel edge
    at level l is ``leaf_voxel_size * 2**(height-1-l)``.
  - world -> grid uses ``floor((p - origin) / edge)``; all levels share the
    same origin, so the parent of leaf cell (x,y,z) is (x>>1, y>>1, z>>1).
  - grid coordinates must fit 21 bits per axis so a Morton key fits one
    64-bit word (~+/-200 km extent at 0.2 m leaves).
  - corner c of a voxel, c in [0,8), has offset (c&1, c>>1&1, c>>2&1).
  - corner slots are allocated in sorted-Morton-then-corner-offset order,
    which makes slot assignment a pure function of the voxel set.

A finalized tree is immutable (arrays are marked read-only) and safe for
concurrent readers. ``extend`` returns a new tree and never renumbers
existing slots, so feature arrays indexed by old slots stay valid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COORD_BITS = 21
# voxel coords need one spare step so corner coords (coord+1) still encode
MAX_VOXEL_COORD = (1 << COORD_BITS) - 2

_U = np.uint64
N_CORNERS = 8
# offset of corner c along (x, y, z); x in the least-significant bit
CORNER_OFFSETS = np.array(
    [[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(N_CORNERS)], dtype=np.int64
)


class EmptyMapError(ValueError):
    """Raised when an octree build receives no points."""


class CoordinateRangeError(ValueError):
    """Raised when a grid coordinate falls outside the 21-bit Morton budget."""


def _spread_bits(v: np.ndarray) -> np.ndarray:
    """Spread the low 21 bits of each uint64 so consecutive bits are 3 apart."""
    v = v & _U(0x1FFFFF)
    v = (v | (v << _U(32))) & _U(0x1F00000000FFFF)
    v = (v | (v << _U(16))) & _U(0x1F0000FF0000FF)
    v = (v | (v << _U(8))) & _U(0x100F00F00F00F00F)
    v = (v | (v << _U(4))) & _U(0x10C30C30C30C30C3)
    v = (v | (v << _U(2))) & _U(0x1249249249249249)
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`_spread_bits`."""
    v = v & _U(0x1249249249249249)
    v = (v | (v >> _U(2))) & _U(0x10C30C30C30C30C3)
    v = (v | (v >> _U(4))) & _U(0x100F00F00F00F00F)
    v = (v | (v >> _U(8))) & _U(0x1F0000FF0000FF)
    v = (v | (v >> _U(16))) & _U(0x1F00000000FFFF)
    v = (v | (v >> _U(32))) & _U(0x1FFFFF)
    return v


def morton_encode(x, y, z):
    """Interleave three 21-bit grid coordinates into one Morton key.

    Bit k of x lands at key bit 3k, y at 3k+1, z at 3k+2, so lexicographic
    key order is z-order traversal of the grid. Accepts scalars or arrays.
    """
    xs = np.asarray(x, dtype=np.int64)
    ys = np.asarray(y, dtype=np.int64)
    zs = np.asarray(z, dtype=np.int64)
    for name, arr in (("x", xs), ("y", ys), ("z", zs)):
        if np.any(arr < 0) or np.any(arr >= (1 << COORD_BITS)):
            raise CoordinateRangeError(
                f"{name} coordinate outside [0, 2^{COORD_BITS}) grid budget"
            )
    code = (
        _spread_bits(xs.astype(np.uint64))
        | (_spread_bits(ys.astype(np.uint64)) << _U(1))
        | (_spread_bits(zs.astype(np.uint64)) << _U(2))
    )
    return code


def morton_decode(code):
    """Recover (x, y, z) grid coordinates from a Morton key."""
    c = np.asarray(code, dtype=np.uint64)
    x = _compact_bits(c).astype(np.int64)
    y = _compact_bits(c >> _U(1)).astype(np.int64)
    z = _compact_bits(c >> _U(2)).astype(np.int64)
    return x, y, z


@dataclass(frozen=True)
class OctreeConfig:
    """Geometry of the octree grid.

    height: number of levels; leaf_voxel_size: edge length in meters of the
    finest (level height-1) voxel; origin: world position of grid (0,0,0).
    """

    height: int
    leaf_voxel_size: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.height < 1:
            raise ValueError("octree height must be >= 1")
        if not self.leaf_voxel_size > 0:
            raise ValueError("leaf_voxel_size must be > 0")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        if len(self.origin) != 3:
            raise ValueError("origin must be a 3-vector")

    def edge_length(self, level: int) -> float:
        """Voxel edge length in meters at the given level (0 = coarsest)."""
        if not 0 <= level < self.height:
            raise ValueError(f"level {level} outside [0, {self.height})")
        return self.leaf_voxel_size * float(2 ** (self.height - 1 - level))

    @property
    def origin_array(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)


@dataclass(frozen=True)
class InterpolationStencil:
    """Per-level lookup result for one query point."""

    level: int
    hit: bool
    slots: np.ndarray    # (8,) corner slot indices, zeros on miss
    weights: np.ndarray  # (8,) trilinear weights, zeros on miss


class _LevelTable:
    """Voxels and corner slots of one octree level."""

    def __init__(self, keys, corner_slots, corner_keys):
        self.keys = keys                  # (Nvox,) uint64, sorted
        self.corner_slots = corner_slots  # (Nvox, 8) int64
        self.corner_keys = corner_keys    # (Ncorner,) uint64, indexed by slot
        for arr in (keys, corner_slots, corner_keys):
            arr.flags.writeable = False

    @property
    def n_voxels(self) -> int:
        return len(self.keys)

    @property
    def n_corners(self) -> int:
        return len(self.corner_keys)


def _allocate_corners(coords, start_slot=0, existing_sorted=None, existing_slots=None):
    """Assign corner slots for voxel coords (N,3), in appearance order.

    Corner keys already present in ``existing_sorted`` (sorted uint64, with
    parallel ``existing_slots``) keep their slot; new keys get consecutive
    slots from ``start_slot`` in first-appearance order over the flattened
    (voxel-major, corner-offset-minor) key sequence.

    Returns (slots (N,8) int64, new_corner_keys (M,) uint64 in slot order).
    """
    corner_coords = coords[:, None, :] + CORNER_OFFSETS[None, :, :]  # (N,8,3)
    flat = morton_encode(
        corner_coords[..., 0], corner_coords[..., 1], corner_coords[..., 2]
    ).ravel()

    slots_flat = np.full(flat.shape, -1, dtype=np.int64)
    known = np.zeros(flat.shape, dtype=bool)
    if existing_sorted is not None and len(existing_sorted):
        pos = np.searchsorted(existing_sorted, flat)
        pos_c = np.minimum(pos, len(existing_sorted) - 1)
        known = existing_sorted[pos_c] == flat
        slots_flat[known] = existing_slots[pos_c[known]]

    fresh = flat[~known]
    uniq, first_idx, inverse = np.unique(fresh, return_index=True, return_inverse=True)
    appearance = np.argsort(first_idx, kind="stable")
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[appearance] = np.arange(len(uniq))
    slots_flat[~known] = start_slot + rank[inverse]

    new_keys = uniq[appearance]
    return slots_flat.reshape(-1, N_CORNERS), new_keys


class SparseOctree:
    """Finalized multi-level sparse voxel octree.

    Construction goes through :func:`build_octree`; the voxel->corner maps
    used while assembling levels are transient and only the sorted arrays
    survive here.
    """

    def __init__(self, config: OctreeConfig, levels: list[_LevelTable]):
        if len(levels) != config.height:
            raise ValueError("level table count must equal octree height")
        self.config = config
        self.levels = levels

    # -- structure queries ---------------------------------------------------

    @property
    def height(self) -> int:
        return self.config.height

    def n_voxels(self, level: int) -> int:
        return self.levels[level].n_voxels

    def n_corners(self, level: int) -> int:
        return self.levels[level].n_corners

    @property
    def total_voxels(self) -> int:
        return sum(t.n_voxels for t in self.levels)

    @property
    def total_corners(self) -> int:
        return sum(t.n_corners for t in self.levels)

    def voxel_keys(self, level: int) -> np.ndarray:
        return self.levels[level].keys

    def corner_slot_table(self, level: int) -> np.ndarray:
        return self.levels[level].corner_slots

    def corner_keys(self, level: int) -> np.ndarray:
        return self.levels[level].corner_keys

    def allocated_bounds(self):
        """World AABB (lo, hi) covering the allocated leaf voxels."""
        leaf = self.height - 1
        x, y, z = morton_decode(self.levels[leaf].keys)
        coords = np.stack([x, y, z], axis=1).astype(np.float64)
        edge = self.config.edge_length(leaf)
        origin = self.config.origin_array
        return origin + coords.min(axis=0) * edge, origin + (coords.max(axis=0) + 1.0) * edge

    # -- point mapping ---------------------------------------------------------

    def _leaf_coords(self, points: np.ndarray) -> np.ndarray:
        rel = (points - self.config.origin_array) / self.config.leaf_voxel_size
        return np.floor(rel).astype(np.int64)

    def query_stencil_batch(self, points: np.ndarray):
        """Per-level (hit, slots, weights) arrays for a (N,3) query batch.

        Miss rows (point outside every allocated voxel at that level, or
        outside the grid budget entirely) carry hit=False and zero weights;
        callers treat their feature contribution as zero.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(points)
        origin = self.config.origin_array
        out = []
        for level, table in enumerate(self.levels):
            edge = self.config.edge_length(level)
            t = (points - origin) / edge
            coords = np.floor(t).astype(np.int64)
            frac = t - coords

            in_range = np.all((coords >= 0) & (coords <= MAX_VOXEL_COORD), axis=1)
            safe = np.where(in_range[:, None], coords, 0)
            keys = morton_encode(safe[:, 0], safe[:, 1], safe[:, 2])

            hit = np.zeros(n, dtype=bool)
            slots = np.zeros((n, N_CORNERS), dtype=np.int64)
            if table.n_voxels:
                pos = np.searchsorted(table.keys, keys)
                pos_c = np.minimum(pos, table.n_voxels - 1)
                hit = in_range & (table.keys[pos_c] == keys)
                slots[hit] = table.corner_slots[pos_c[hit]]

            offs = CORNER_OFFSETS[None, :, :]  # (1,8,3)
            w = np.prod(
                offs * frac[:, None, :] + (1 - offs) * (1.0 - frac[:, None, :]), axis=2
            )
            w[~hit] = 0.0
            out.append((hit, slots, w))
        return out

    def query_stencil(self, point) -> list[InterpolationStencil]:
        """Single-point stencil, one entry per level."""
        per_level = self.query_stencil_batch(np.asarray(point, dtype=np.float64))
        return [
            InterpolationStencil(level=l, hit=bool(hit[0]), slots=slots[0], weights=w[0])
            for l, (hit, slots, w) in enumerate(per_level)
        ]

    # -- growth ---------------------------------------------------------------

    def extend(self, points) -> "SparseOctree":
        """Return a tree covering the union of voxels; append-only on slots."""
        leaf_coords = _validated_leaf_coords(points, self.config)
        new_levels = []
        for level, table in enumerate(self.levels):
            shift = self.config.height - 1 - level
            coords = leaf_coords >> shift
            keys = np.unique(morton_encode(coords[:, 0], coords[:, 1], coords[:, 2]))

            pos = np.searchsorted(table.keys, keys)
            pos_c = np.minimum(pos, max(table.n_voxels - 1, 0))
            if table.n_voxels:
                missing = table.keys[pos_c] != keys
            else:
                missing = np.ones(len(keys), dtype=bool)
            added = keys[missing]
            if len(added) == 0:
                new_levels.append(table)
                continue

            ck_order = np.argsort(table.corner_keys, kind="stable")
            ck_sorted = table.corner_keys[ck_order]
            added_coords = np.stack(morton_decode(added), axis=1)
            added_slots, fresh_keys = _allocate_corners(
                added_coords,
                start_slot=table.n_corners,
                existing_sorted=ck_sorted,
                existing_slots=ck_order,
            )

            merged_keys = np.concatenate([table.keys, added])
            order = np.argsort(merged_keys, kind="stable")
            merged_slots = np.concatenate([table.corner_slots, added_slots])[order]
            corner_keys = np.concatenate([table.corner_keys, fresh_keys])
            new_levels.append(_LevelTable(merged_keys[order], merged_slots, corner_keys))
        return SparseOctree(self.config, new_levels)

    def canonical_corner_permutation(self) -> list[np.ndarray]:
        """Per level: perm with perm[slot] = slot under canonical allocation.

        A freshly built tree is canonical (identity); a tree grown through
        ``extend`` generally is not. Feature rows permuted by this map give
        a state that a rebuild from the same voxel set reproduces exactly,
        which is what the checkpoint format relies on.
        """
        perms = []
        for table in self.levels:
            coords = np.stack(morton_decode(table.keys), axis=1)
            canon_slots, canon_keys = _allocate_corners(coords)
            if len(canon_keys) != table.n_corners:
                raise AssertionError("corner count changed under canonicalization")
            order = np.argsort(canon_keys, kind="stable")
            canon_sorted = canon_keys[order]
            pos = np.searchsorted(canon_sorted, table.corner_keys)
            perm = order[pos]
            perms.append(perm)
        return perms


def _validated_leaf_coords(points, config: OctreeConfig) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.size == 0:
        raise EmptyMapError("cannot build or extend an octree from zero points")
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected (N,3) points, got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ValueError("points must be finite")
    rel = (points - config.origin_array) / config.leaf_voxel_size
    coords = np.floor(rel).astype(np.int64)
    if np.any(coords < 0) or np.any(coords > MAX_VOXEL_COORD):
        raise CoordinateRangeError(
            "points fall outside the grid budget; move the octree origin"
        )
    return coords


def build_octree(points, config: OctreeConfig) -> SparseOctree:
    """Build the sparse octree holding exactly the voxels containing points.

    Every level keeps the voxels touched by at least one point; because the
    level-l cell of a point is the leaf cell right-shifted, coarser levels
    automatically cover finer ones (parent closure). Corner slots for all 8
    corners of every voxel are allocated per level, shared between adjacent
    voxels.
    """
    leaf_coords = _validated_leaf_coords(points, config)
    levels = []
    for level in range(config.height):
        shift = config.height - 1 - level
        coords = leaf_coords >> shift
        keys = np.unique(morton_encode(coords[:, 0], coords[:, 1], coords[:, 2]))
        vox_coords = np.stack(morton_decode(keys), axis=1)
        slots, corner_keys = _allocate_corners(vox_coords)
        levels.append(_LevelTable(keys, slots, corner_keys))
    return SparseOctree(config, levels)


def auto_origin(points, config_height: int, leaf_voxel_size: float, margin: float = 0.0):
    """Choose an origin below the data, snapped to the coarsest cell size.

    Snapping keeps all levels aligned to the same lattice regardless of the
    exact data minimum; the margin leaves room for later ``extend`` calls.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    coarse = leaf_voxel_size * float(2 ** (config_height - 1))
    lo = points.min(axis=0) - margin
    return tuple(np.floor(lo / coarse) * coarse)
