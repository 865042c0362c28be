"""Evaluation metric tests: surface sampling statistics, analytic metric
oracles on constructed mesh pairs, and report formatting."""

import numpy as np
import pytest

from composdf.embedding import storage_report
from composdf.evaluation import (
    EvalError,
    MetricReport,
    compute_metrics,
    csv_header,
    csv_row,
    format_table,
    nearest_distances,
    sample_surface,
)
from composdf.meshing import MeshGrid, TriangleMesh, marching_cubes, sample_grid
from composdf.octree import OctreeConfig, build_octree


def sphere_mesh(radius=1.0, cell=0.05):
    def sdf(pts):
        return np.linalg.norm(pts, axis=1) - radius

    pad = radius + 3 * cell
    grid = sample_grid(sdf, MeshGrid.from_bounds([-pad] * 3, [pad] * 3, cell))
    return marching_cubes(grid)


def square_mesh(x=0.0):
    verts = np.array([[x, 0, 0], [x, 1, 0], [x, 1, 1], [x, 0, 1]],
                     dtype=np.float32)
    tris = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    return TriangleMesh(verts, tris)


# ---------------------------------------------------------------------------
# surface sampling
# ---------------------------------------------------------------------------


def test_single_triangle_samples_have_valid_barycentrics():
    verts = np.array([[0, 0, 0], [2, 0, 1], [0, 3, -1]], dtype=np.float32)
    mesh = TriangleMesh(verts, np.array([[0, 1, 2]], dtype=np.int32))
    pts = sample_surface(mesh, 2000, np.random.default_rng(1))
    a, b, c = verts.astype(np.float64)
    basis = np.stack([b - a, c - a], axis=1)          # (3,2)
    uv, res, _, _ = np.linalg.lstsq(basis, (pts - a).T, rcond=None)
    assert res.max() < 1e-20                           # coplanar
    u, v = uv
    assert u.min() >= -1e-12 and v.min() >= -1e-12
    assert (u + v).max() <= 1 + 1e-12


def test_equal_area_triangles_split_half_and_half():
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]],
                     dtype=np.float32)
    tris = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    n = 100_000
    pts = sample_surface(TriangleMesh(verts, tris), n, np.random.default_rng(7))
    in_lower = (pts[:, 0] >= pts[:, 1]).sum()          # triangle 0 is x >= y
    sigma = np.sqrt(n * 0.25)
    assert abs(in_lower - n / 2) <= 3 * sigma


def test_sampling_is_area_weighted():
    # areas 0.5 and 2.0, separated along x for attribution
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0],
                      [5, 0, 0], [7, 0, 0], [5, 2, 0]], dtype=np.float32)
    tris = np.array([[0, 1, 2], [3, 4, 5]], dtype=np.int32)
    n = 100_000
    pts = sample_surface(TriangleMesh(verts, tris), n, np.random.default_rng(3))
    big = (pts[:, 0] >= 4.0).sum()
    p = 2.0 / 2.5
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(big - n * p) <= 3 * sigma


def test_sampling_deterministic_under_seed():
    mesh = square_mesh()
    a = sample_surface(mesh, 500, np.random.default_rng(42))
    b = sample_surface(mesh, 500, np.random.default_rng(42))
    c = sample_surface(mesh, 500, np.random.default_rng(43))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_empty_mesh_rejected():
    empty = TriangleMesh(np.zeros((0, 3), dtype=np.float32),
                         np.zeros((0, 3), dtype=np.int32))
    with pytest.raises(EvalError):
        sample_surface(empty, 10, np.random.default_rng(0))
    with pytest.raises(EvalError):
        compute_metrics(empty, square_mesh(), 10.0, n=10)
    with pytest.raises(EvalError):
        compute_metrics(square_mesh(), empty, 10.0, n=10)


# ---------------------------------------------------------------------------
# nearest-neighbor backend
# ---------------------------------------------------------------------------


def test_spatial_index_matches_brute_force_exactly():
    rng = np.random.default_rng(5)
    query = rng.normal(size=(1000, 3))
    target = rng.normal(size=(800, 3))
    d_index = nearest_distances(query, target)
    diff = query[:, None, :] - target[None, :, :]
    d_brute = np.sqrt((diff ** 2).sum(axis=2)).min(axis=1)
    np.testing.assert_array_equal(d_index, d_brute)


# ---------------------------------------------------------------------------
# metric oracles
# ---------------------------------------------------------------------------


def test_identical_meshes_score_perfectly():
    mesh = sphere_mesh(cell=0.2)
    rep = compute_metrics(mesh, mesh, threshold_cm=10.0, n=5000)
    assert rep.accuracy_cm == 0.0
    assert rep.completion_cm == 0.0
    assert rep.chamfer_l1_cm == 0.0
    assert rep.f_score_percent == 100.0


def test_translation_by_exactly_the_threshold_scores_zero():
    # 2 m along x is exact in float64 and orthogonal to the square, so every
    # sample sits at distance exactly 2 m; strict less-than counts none
    gt = square_mesh(x=0.0)
    recon = square_mesh(x=2.0)
    rep = compute_metrics(recon, gt, threshold_cm=200.0, n=2000)
    assert rep.accuracy_cm == 200.0
    assert rep.completion_cm == 200.0
    assert rep.f_score_percent == 0.0
    nudged = compute_metrics(recon, gt, threshold_cm=200.0000001, n=2000)
    assert nudged.f_score_percent == 100.0


def test_concentric_spheres_measure_the_gap():
    gt = sphere_mesh(radius=1.0)
    recon = sphere_mesh(radius=1.05)
    rep = compute_metrics(recon, gt, threshold_cm=10.0, n=150_000)
    assert rep.accuracy_cm == pytest.approx(5.0, abs=0.5)
    assert rep.completion_cm == pytest.approx(5.0, abs=0.5)
    assert rep.chamfer_l1_cm == pytest.approx(5.0, abs=0.5)
    assert rep.f_score_percent == 100.0


def test_swapping_meshes_swaps_direction_metrics_only():
    a = sphere_mesh(radius=1.0, cell=0.1)
    b = sphere_mesh(radius=1.05, cell=0.1)
    fwd = compute_metrics(a, b, threshold_cm=4.0, n=20_000)
    rev = compute_metrics(b, a, threshold_cm=4.0, n=20_000)
    assert fwd.accuracy_cm == rev.completion_cm
    assert fwd.completion_cm == rev.accuracy_cm
    assert fwd.chamfer_l1_cm == rev.chamfer_l1_cm
    assert fwd.f_score_percent == rev.f_score_percent


def test_f_score_monotone_in_threshold():
    a = sphere_mesh(radius=1.0, cell=0.1)
    b = sphere_mesh(radius=1.05, cell=0.1)
    scores = [compute_metrics(a, b, threshold_cm=t, n=20_000).f_score_percent
              for t in (1.0, 2.0, 4.0, 5.5, 8.0, 12.0)]
    assert all(s1 >= s0 for s0, s1 in zip(scores, scores[1:]))
    assert scores[0] < scores[-1]


def test_report_invariants_enforced():
    with pytest.raises(ValueError, match="chamfer"):
        MetricReport(accuracy_cm=1.0, completion_cm=3.0, chamfer_l1_cm=1.5,
                     f_score_percent=50.0, threshold_cm=10.0, n_samples=10)
    with pytest.raises(ValueError, match="0, 100"):
        MetricReport(accuracy_cm=1.0, completion_cm=3.0, chamfer_l1_cm=2.0,
                     f_score_percent=100.5, threshold_cm=10.0, n_samples=10)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def demo_report():
    pts = np.random.default_rng(0).uniform(0.5, 2.5, size=(50, 3))
    tree = build_octree(pts, OctreeConfig(height=3, leaf_voxel_size=0.2))
    store = storage_report(tree, "decomposition_discrete_only", 4, 8,
                           decoder_bytes=5508)
    return MetricReport(accuracy_cm=3.25, completion_cm=4.75, chamfer_l1_cm=4.0,
                        f_score_percent=96.5, threshold_cm=10.0,
                        n_samples=1000, storage=store)


def test_csv_row_matches_header_and_storage_units():
    rep = demo_report()
    header = csv_header().split(",")
    row = csv_row(rep, method="variant-a").split(",")
    assert len(row) == len(header)
    named = dict(zip(header, row))
    assert named["method"] == "variant-a"
    assert float(named["acc_cm"]) == 3.25
    assert float(named["f_score"]) == 96.5
    assert float(named["rep_kb"]) == pytest.approx(rep.storage.rep_bytes / 1024,
                                                   abs=1e-3)
    assert float(named["total_kb"]) == pytest.approx(rep.storage.total_bytes / 1024,
                                                     abs=1e-3)
    with pytest.raises(ValueError):
        csv_row(rep, method="has,comma")


def test_table_columns_in_quality_then_storage_order():
    rep = demo_report()
    bare = MetricReport(accuracy_cm=1.0, completion_cm=1.0, chamfer_l1_cm=1.0,
                        f_score_percent=90.0, threshold_cm=10.0, n_samples=10)
    text = format_table([("with-storage", rep), ("no-storage", bare)])
    head = text.splitlines()[0]
    cols = ["Method", "Acc.(cm)", "Com.(cm)", "C-l1(cm)", "F-score",
            "Rep.(kB)", "Total(kB)"]
    positions = [head.index(c) for c in cols]
    assert positions == sorted(positions)
    assert "with-storage" in text and "no-storage" in text
    assert text.splitlines()[-1].rstrip().endswith("-")
