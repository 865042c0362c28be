"""Scan ingestion, training-pair generation, and synthetic scene capture.

A posed scan is a sensor origin plus world-frame ray endpoints. Each ray
contributes two sample populations: free-space points uniform on
(0, r - 3s) along the ray, and near-surface points uniform on the
truncation band (r - 3s, r + 3s), where r is the ray length and s the
sigmoid flatness scale. Labels are projective distances r - t measured
along the ray, not true Euclidean distances; for a convex scene the two
differ by at most (1 - cos theta) |r - t| at incidence angle theta.

Ray sampling draws from a per-ray random stream seeded by
(seed, scan index, ray index), so the generated dataset is identical no
matter how rays are batched or parallelized.

Synthetic scenes are analytic signed-distance fields captured by a
sphere-tracing virtual range sensor; they stand in for real datasets at
desk scale. File formats: XYZ ASCII and binary little-endian PLY for
points, and a pose file with one row-major 3x4 world-from-sensor matrix
per line.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ParseError(ValueError):
    """Malformed input file; message carries path and 1-based line number."""


class DataError(ValueError):
    """Structurally valid inputs that do not form a usable dataset."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class PosedScan:
    sensor_origin: np.ndarray      # (3,)
    endpoints: np.ndarray          # (N,3) world frame

    def __post_init__(self):
        self.sensor_origin = np.asarray(self.sensor_origin, dtype=np.float64)
        self.endpoints = np.atleast_2d(np.asarray(self.endpoints, dtype=np.float64))
        if not np.all(np.isfinite(self.sensor_origin)):
            raise DataError("sensor origin must be finite")
        if not np.all(np.isfinite(self.endpoints)):
            raise DataError("scan endpoints must be finite")
        if len(self.endpoints) and np.any(self.ray_lengths() <= 0):
            raise DataError("every ray must have positive length")

    def ray_lengths(self):
        return _lengths(self.endpoints - self.sensor_origin)


@dataclass
class TrainingSample:
    x: np.ndarray
    label: float
    sample_class: str              # "free_space" or "near_surface"


FREE_SPACE = 0
NEAR_SURFACE = 1
CLASS_NAMES = {FREE_SPACE: "free_space", NEAR_SURFACE: "near_surface"}


# ---------------------------------------------------------------------------
# ray sampling
# ---------------------------------------------------------------------------


def _lengths(vecs):
    # one shared reduction so batch and per-ray paths agree bit for bit
    vecs = np.atleast_2d(vecs)
    return np.sqrt(np.add.reduce(vecs * vecs, axis=1))


def sample_ray(origin, endpoint, n_free, n_surface, s, rng):
    """Training samples for one ray; empty when the ray is shorter than 3s.

    Free-space positions are drawn first, then band positions, each
    uniform on its interval; labels are r - t.
    """
    origin = np.asarray(origin, dtype=np.float64)
    endpoint = np.asarray(endpoint, dtype=np.float64)
    r = float(_lengths(endpoint - origin)[0])
    if r <= 3.0 * s:
        return []
    d = (endpoint - origin) / r
    out = []
    t_free = rng.uniform(0.0, r - 3.0 * s, size=n_free)
    t_band = rng.uniform(r - 3.0 * s, r + 3.0 * s, size=n_surface)
    for t in t_free:
        out.append(TrainingSample(origin + t * d, r - t, CLASS_NAMES[FREE_SPACE]))
    for t in t_band:
        out.append(TrainingSample(origin + t * d, r - t, CLASS_NAMES[NEAR_SURFACE]))
    return out


def _ray_rng(seed, scan_idx, ray_idx):
    return np.random.default_rng(np.random.SeedSequence((seed, scan_idx, ray_idx)))


def sample_scan(scan: PosedScan, scan_idx, n_free, n_surface, s, seed):
    """Vectorized per-scan sampling with per-ray streams.

    Equivalent to calling :func:`sample_ray` with the (seed, scan, ray)
    stream for each ray and stacking; returns (points, labels, classes).
    """
    origin = scan.sensor_origin
    n_rays = len(scan.endpoints)
    per_ray = n_free + n_surface
    pts = np.empty((n_rays * per_ray, 3))
    labels = np.empty(n_rays * per_ray)
    classes = np.empty(n_rays * per_ray, dtype=np.uint8)
    classes[:] = NEAR_SURFACE
    keep = np.ones(n_rays * per_ray, dtype=bool)
    lengths = scan.ray_lengths()
    dirs = (scan.endpoints - origin) / lengths[:, None]
    for i in range(n_rays):
        lo = i * per_ray
        r = lengths[i]
        if r <= 3.0 * s:
            keep[lo: lo + per_ray] = False
            continue
        rng = _ray_rng(seed, scan_idx, i)
        t = np.concatenate([
            rng.uniform(0.0, r - 3.0 * s, size=n_free),
            rng.uniform(r - 3.0 * s, r + 3.0 * s, size=n_surface),
        ])
        pts[lo: lo + per_ray] = origin + t[:, None] * dirs[i]
        labels[lo: lo + per_ray] = r - t
        classes[lo: lo + n_free] = FREE_SPACE
    return pts[keep], labels[keep], classes[keep]


def build_dataset(scans, n_free, n_surface, s, seed):
    """Sample every scan; returns (points, labels, classes, scan_ids)."""
    if not scans:
        raise DataError("no scans to sample")
    parts = []
    for k, scan in enumerate(scans):
        p, l, c = sample_scan(scan, k, n_free, n_surface, s, seed)
        parts.append((p, l, c, np.full(len(p), k, dtype=np.int32)))
    pts = np.concatenate([p[0] for p in parts])
    if len(pts) == 0:
        raise DataError("all rays shorter than the truncation band")
    return (
        pts,
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        np.concatenate([p[3] for p in parts]),
    )


# ---------------------------------------------------------------------------
# analytic scenes
# ---------------------------------------------------------------------------


class AnalyticScene:
    """Exact signed-distance evaluator over (N,3) point arrays."""

    def sdf(self, points):
        raise NotImplementedError


class Sphere(AnalyticScene):
    def __init__(self, center=(0.0, 0.0, 0.0), radius=1.0):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def sdf(self, points):
        return np.linalg.norm(points - self.center, axis=-1) - self.radius


class Box(AnalyticScene):
    def __init__(self, center=(0.0, 0.0, 0.0), half_extents=(1.0, 1.0, 1.0)):
        self.center = np.asarray(center, dtype=np.float64)
        self.half = np.asarray(half_extents, dtype=np.float64)

    def sdf(self, points):
        q = np.abs(points - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


class Plane(AnalyticScene):
    def __init__(self, normal=(0.0, 0.0, 1.0), offset=0.0):
        n = np.asarray(normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        self.offset = float(offset)

    def sdf(self, points):
        return points @ self.normal - self.offset


class Union(AnalyticScene):
    def __init__(self, *parts):
        if not parts:
            raise ValueError("union needs at least one part")
        self.parts = parts

    def sdf(self, points):
        return np.min([p.sdf(points) for p in self.parts], axis=0)


SCENES = {
    "sphere": lambda: Sphere(radius=1.0),
    "box": lambda: Box(half_extents=(0.8, 0.6, 0.5)),
    "two_spheres": lambda: Union(Sphere((-0.8, 0, 0), 0.7), Sphere((0.9, 0, 0), 0.55)),
    "sphere_box": lambda: Union(Sphere((0.9, 0, 0), 0.6), Box((-0.7, 0, 0), (0.5, 0.5, 0.5))),
}


def make_scene(name) -> AnalyticScene:
    try:
        return SCENES[name]()
    except KeyError:
        raise DataError(f"unknown scene {name!r}; choose from {sorted(SCENES)}")


# ---------------------------------------------------------------------------
# virtual range sensor
# ---------------------------------------------------------------------------


def virtual_lidar(scene: AnalyticScene, pose, ray_directions, max_range,
                  hit_eps=1e-5, max_steps=512) -> PosedScan:
    """Sphere-trace rays through the scene; misses are dropped.

    pose is a 4x4 world-from-sensor matrix; ray_directions are unit
    vectors in the sensor frame.
    """
    pose = np.asarray(pose, dtype=np.float64)
    dirs = np.asarray(ray_directions, dtype=np.float64)
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("ray directions must be normalized")
    origin = pose[:3, 3]
    world_dirs = dirs @ pose[:3, :3].T

    t = np.zeros(len(dirs))
    alive = np.ones(len(dirs), dtype=bool)
    hit = np.zeros(len(dirs), dtype=bool)
    for _ in range(max_steps):
        if not alive.any():
            break
        p = origin + t[alive, None] * world_dirs[alive]
        d = scene.sdf(p)
        newly_hit = d < hit_eps
        idx = np.flatnonzero(alive)
        hit[idx[newly_hit]] = True
        t[idx] += np.maximum(d, 0.0)
        dead = newly_hit | (t[idx] > max_range)
        alive[idx[dead]] = False
    endpoints = origin + t[hit, None] * world_dirs[hit]
    return PosedScan(origin, endpoints)


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)):
    """World-from-sensor 4x4 with the sensor +z axis pointing at target."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(forward @ up) > 0.99 * np.linalg.norm(up):
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, forward)
    right = right / np.linalg.norm(right)
    true_up = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = forward
    pose[:3, 3] = eye
    return pose


def cone_directions(n, half_angle, rng):
    """n unit vectors uniform on the spherical cap around sensor +z."""
    cos_min = np.cos(half_angle)
    cz = rng.uniform(cos_min, 1.0, size=n)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    sz = np.sqrt(1.0 - cz**2)
    return np.column_stack([sz * np.cos(phi), sz * np.sin(phi), cz])


def synth_scene_scans(scene, n_scans, rays_per_scan, seed, ring_radius=3.0,
                      cone_half_angle=0.42, max_range=10.0):
    """Capture a scene from poses alternating between two orthogonal rings.

    Returns (scans, poses); every pose looks at the origin. The default
    cone half-angle slightly over-covers a unit sphere seen from radius 3.
    """
    scans = []
    poses = []
    for i in range(n_scans):
        k, ring = divmod(i, 2)
        n_on_ring = (n_scans + 1 - ring) // 2
        alpha = 2.0 * np.pi * k / max(n_on_ring, 1) + 0.35 * ring
        if ring == 0:
            eye = ring_radius * np.array([np.cos(alpha), np.sin(alpha), 0.0])
        else:
            eye = ring_radius * np.array([np.cos(alpha), 0.0, np.sin(alpha)])
        pose = look_at_pose(eye, (0.0, 0.0, 0.0))
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        dirs = cone_directions(rays_per_scan, cone_half_angle, rng)
        scan = virtual_lidar(scene, pose, dirs, max_range)
        if len(scan.endpoints) == 0:
            continue
        scans.append(scan)
        poses.append(pose)
    if not scans:
        raise DataError("no scan captured any geometry")
    return scans, np.stack(poses)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def save_xyz(path, points):
    with open(path, "w") as f:
        for p in np.asarray(points, dtype=np.float64):
            f.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def load_xyz(path):
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(fields)}")
            try:
                rows.append([float(v) for v in fields])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric field")
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


_PLY_HEADER = (
    "ply\nformat binary_little_endian 1.0\nelement vertex {n}\n"
    "property float x\nproperty float y\nproperty float z\nend_header\n"
)


def save_ply_points(path, points):
    pts = np.ascontiguousarray(np.asarray(points), dtype="<f4")
    with open(path, "wb") as f:
        f.write(_PLY_HEADER.format(n=len(pts)).encode("ascii"))
        f.write(pts.tobytes())


def load_ply_points(path):
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise ParseError(f"{path}:1: not a PLY file")
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    n = None
    props = []
    for lineno, line in enumerate(header, start=1):
        parts = line.split()
        if parts[:2] == ["format", "binary_little_endian"]:
            pass
        elif parts[:1] == ["format"]:
            raise ParseError(f"{path}:{lineno}: only binary_little_endian supported")
        elif parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:1] == ["element"] and parts[1] != "vertex":
            raise ParseError(f"{path}:{lineno}: unexpected element {parts[1]!r}")
        elif parts[:1] == ["property"]:
            if parts[1] != "float":
                raise ParseError(f"{path}:{lineno}: only float properties supported")
            props.append(parts[2])
    if n is None:
        raise ParseError(f"{path}:1: missing vertex element")
    if props != ["x", "y", "z"]:
        raise ParseError(f"{path}:1: expected properties x y z, got {props}")
    body = blob[end + len(b"end_header\n"):]
    expect = 12 * n
    if len(body) < expect:
        raise ParseError(f"{path}: truncated body, expected {expect} bytes")
    return np.frombuffer(body[:expect], dtype="<f4").reshape(n, 3).astype(np.float64)


def save_poses(path, poses):
    """One line per pose: 12 floats, row-major 3x4 world-from-sensor."""
    with open(path, "w") as f:
        for pose in np.asarray(poses, dtype=np.float64):
            f.write(" ".join(f"{v:.17g}" for v in pose[:3, :].ravel()) + "\n")


def load_poses(path):
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 12:
                raise ParseError(f"{path}:{lineno}: expected 12 fields, got {len(fields)}")
            try:
                vals = np.array([float(v) for v in fields]).reshape(3, 4)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric field")
            pose = np.eye(4)
            pose[:3, :] = vals
            poses.append(pose)
    if not poses:
        raise ParseError(f"{path}:1: empty pose file")
    return np.stack(poses)


def load_scan_file(path, fmt):
    if fmt == "xyz_ascii":
        return load_xyz(path)
    if fmt == "ply_binary":
        return load_ply_points(path)
    raise DataError(f"unknown scan format {fmt!r}")


def load_scan_stream(scan_paths, pose_path, fmt="xyz_ascii"):
    """One PosedScan per (file, pose line), endpoints moved to world frame."""
    poses = load_poses(pose_path)
    scan_paths = list(scan_paths)
    if len(scan_paths) != len(poses):
        raise DataError(
            f"{len(scan_paths)} scan files but {len(poses)} poses in {pose_path}"
        )
    scans = []
    for path, pose in zip(scan_paths, poses):
        local = load_scan_file(path, fmt)
        world = local @ pose[:3, :3].T + pose[:3, 3]
        scans.append(PosedScan(pose[:3, 3], world))
    return scans
