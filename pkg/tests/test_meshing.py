"""Meshing tests: lattice sampling, iso-surface extraction against
analytic shapes, and mesh file format roundtrips."""

import numpy as np
import pytest

from composdf.decoder import SdfDecoder
from composdf.embedding import BaselineContinuousField
from composdf.meshing import (
    MeshGrid,
    TriangleMesh,
    empty_mesh,
    grid_for_tree,
    marching_cubes,
    read_mesh,
    sample_grid,
    write_mesh,
)
from composdf.octree import OctreeConfig, build_octree, morton_decode
from composdf.sampler import ParseError
from composdf.trainer import MapState


def sphere_sdf(pts):
    return np.linalg.norm(np.asarray(pts, dtype=np.float64), axis=1) - 1.0


def extract_sphere(cell=0.05, lo=-1.5, hi=1.5):
    grid = sample_grid(sphere_sdf, MeshGrid.from_bounds([lo] * 3, [hi] * 3, cell))
    return marching_cubes(grid)


def signed_volume(mesh):
    a = mesh.vertices[mesh.triangles[:, 0]].astype(np.float64)
    b = mesh.vertices[mesh.triangles[:, 1]].astype(np.float64)
    c = mesh.vertices[mesh.triangles[:, 2]].astype(np.float64)
    return float(np.sum(np.einsum("ij,ij->i", a, np.cross(b, c))) / 6.0)


# ---------------------------------------------------------------------------
# grid construction and sampling
# ---------------------------------------------------------------------------


def test_grid_covers_requested_bounds():
    grid = MeshGrid.from_bounds([0.0, 0.0, 0.0], [1.0, 0.62, 2.0], 0.25)
    coords = grid.vertex_coords().reshape(grid.shape + (3,))
    assert coords[0, 0, 0] == pytest.approx([0, 0, 0])
    assert coords[-1, 0, 0][0] >= 1.0
    assert coords[0, -1, 0][1] >= 0.62
    assert grid.shape == (5, 4, 9)


def test_grid_validation():
    with pytest.raises(ValueError, match="cell"):
        MeshGrid.from_bounds([0, 0, 0], [1, 1, 1], 0.0)
    with pytest.raises(ValueError, match="extent"):
        MeshGrid.from_bounds([0, 0, 0], [0, 1, 1], 0.1)


def test_sample_grid_matches_direct_evaluation_any_chunking():
    grid = MeshGrid.from_bounds([-1.0] * 3, [1.0] * 3, 0.5)
    filled_small = sample_grid(sphere_sdf, grid, chunk=7)
    filled_big = sample_grid(sphere_sdf, grid, chunk=10 ** 6)
    direct = sphere_sdf(grid.vertex_coords()).reshape(grid.shape)
    np.testing.assert_array_equal(filled_small.values, direct)
    np.testing.assert_array_equal(filled_small.values, filled_big.values)
    assert filled_small.valid.all()


def rigged_sphere_state(leaf=0.1):
    """Map state whose decoded output interpolates the analytic sphere SDF
    stored at leaf corners, passed through an identity-like decoder."""
    rng = np.random.default_rng(0)
    surface = rng.normal(size=(4000, 3))
    surface /= np.linalg.norm(surface, axis=1, keepdims=True)
    shell = surface * rng.uniform(0.9, 1.1, size=(4000, 1))
    config = OctreeConfig(height=3, leaf_voxel_size=leaf, origin=(-2.0, -2.0, -2.0))
    tree = build_octree(shell, config)
    levels = []
    for level in range(tree.height):
        vals = np.zeros((tree.n_corners(level), 2))
        if level == tree.height - 1:
            coords = np.stack(morton_decode(tree.corner_keys(level)), axis=1)
            world = tree.config.origin_array + coords * tree.config.edge_length(level)
            vals[:, 0] = sphere_sdf(world)
        levels.append(vals)
    dec = SdfDecoder(*[np.zeros(s) for s in
                       [(2, 32), (32,), (32, 32), (32,), (32, 1), (1,)]])
    dec.w1[0, 0] = 1.0
    dec.b1[0] = 10.0
    dec.w2[0, 0] = 1.0
    dec.w3[0, 0] = 1.0
    dec.b3[0] = -10.0
    return MapState(tree, "continuous", dec, baseline=BaselineContinuousField(levels))


def leaf_hit(tree, pts):
    # the rigged field only carries values at finest-level corners, so clamp
    # the valid region to finest-level coverage
    return tree.query_stencil_batch(pts)[-1][0]


def test_sample_grid_through_map_state_matches_analytic_sdf():
    state = rigged_sphere_state()
    grid = grid_for_tree(state.tree, cell=0.05)
    filled = sample_grid(state, grid, valid_fn=lambda p: leaf_hit(state.tree, p))
    pts = grid.vertex_coords()
    exact = sphere_sdf(pts).reshape(grid.shape)
    valid = filled.valid
    assert 0.005 < valid.mean() < 0.5         # shell map: inside and outside miss
    err = np.abs(filled.values - exact)[valid]
    assert err.max() < 0.01                   # trilinear interpolation error
    far = np.linalg.norm(pts, axis=1).reshape(grid.shape) > 1.5
    assert not filled.valid[far].any()


def test_full_pipeline_on_rigged_state_meshes_the_sphere():
    state = rigged_sphere_state()
    grid = grid_for_tree(state.tree, cell=0.05)
    filled = sample_grid(state, grid, valid_fn=lambda p: leaf_hit(state.tree, p))
    mesh = marching_cubes(filled)
    assert mesh.n_triangles > 1000
    r = np.linalg.norm(mesh.vertices.astype(np.float64), axis=1)
    assert np.abs(r - 1.0).max() < 0.06


# ---------------------------------------------------------------------------
# marching cubes against analytic fields
# ---------------------------------------------------------------------------


def test_sphere_mesh_vertices_on_surface_and_topology():
    mesh = extract_sphere(cell=0.05)
    r = np.linalg.norm(mesh.vertices.astype(np.float64), axis=1)
    assert np.abs(r - 1.0).max() <= 0.05
    edges, counts = mesh.edge_counts()
    assert (counts == 2).all()                 # watertight
    euler = mesh.n_vertices - len(edges) + mesh.n_triangles
    assert euler == 2
    assert (mesh.triangle_areas() > 1e-12).all()
    vol = signed_volume(mesh)
    assert vol == pytest.approx(4.0 / 3.0 * np.pi, rel=0.02)


def test_constant_positive_grid_gives_empty_mesh():
    grid = sample_grid(lambda p: np.full(len(p), 3.0),
                       MeshGrid.from_bounds([0] * 3, [1] * 3, 0.25))
    mesh = marching_cubes(grid)
    assert mesh.n_vertices == 0 and mesh.n_triangles == 0


def test_all_invalid_grid_gives_empty_mesh():
    grid = sample_grid(sphere_sdf, MeshGrid.from_bounds([-1.5] * 3, [1.5] * 3, 0.25),
                       valid_fn=lambda p: np.zeros(len(p), dtype=bool))
    assert marching_cubes(grid).n_triangles == 0


def test_plane_mesh_is_exact_for_linear_field():
    def plane(pts):
        return pts[:, 0] - 1.234

    grid = sample_grid(plane, MeshGrid.from_bounds([0] * 3, [2] * 3, 0.25))
    mesh = marching_cubes(grid)
    assert mesh.n_triangles > 0
    assert np.abs(mesh.vertices[:, 0].astype(np.float64) - 1.234).max() < 1e-6
    n = np.cross(
        mesh.vertices[mesh.triangles[:, 1]].astype(np.float64)
        - mesh.vertices[mesh.triangles[:, 0]],
        mesh.vertices[mesh.triangles[:, 2]].astype(np.float64)
        - mesh.vertices[mesh.triangles[:, 0]])
    assert (n[:, 0] > 0).all()                 # outward = +x (field grows that way)


def test_plane_through_lattice_vertices_welds_cleanly():
    def plane(pts):
        return pts[:, 0] - 1.0

    grid = sample_grid(plane, MeshGrid.from_bounds([0] * 3, [2] * 3, 0.25))
    mesh = marching_cubes(grid)
    assert mesh.n_triangles > 0
    assert np.abs(mesh.vertices[:, 0] - 1.0).max() == 0.0
    assert (mesh.triangle_areas() > 1e-12).all()


def test_cells_touching_invalid_vertices_are_skipped():
    lo, hi, cell = -1.5, 1.5, 0.1
    grid = MeshGrid.from_bounds([lo] * 3, [hi] * 3, cell)

    def valid_fn(p):
        # poke a rectangular window out of the map near the +x pole
        inside = (p[:, 0] > 0.8) & (np.abs(p[:, 1]) < 0.2) & (np.abs(p[:, 2]) < 0.2)
        return ~inside

    full = marching_cubes(sample_grid(sphere_sdf, grid))
    holed = marching_cubes(sample_grid(sphere_sdf, grid, valid_fn=valid_fn))
    assert holed.n_triangles < full.n_triangles
    _, counts = holed.edge_counts()
    assert (counts == 1).sum() > 0             # an open rim exists now
    vx = holed.vertices
    gap = (vx[:, 0] > 0.8 + cell) & (np.abs(vx[:, 1]) < 0.2 - cell) \
        & (np.abs(vx[:, 2]) < 0.2 - cell)
    assert not gap.any()


def test_mesh_invariant_under_whole_cell_grid_translation():
    cell = 0.05
    mesh_a = extract_sphere(cell=cell, lo=-1.5, hi=1.5)
    mesh_b = extract_sphere(cell=cell, lo=-1.5 - cell, hi=1.5 + cell)
    assert mesh_a.n_vertices == mesh_b.n_vertices
    va = mesh_a.vertices[np.lexsort(mesh_a.vertices.T)]
    vb = mesh_b.vertices[np.lexsort(mesh_b.vertices.T)]
    np.testing.assert_allclose(va, vb, atol=1e-5)


def test_triangle_mesh_validation():
    verts = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(ValueError, match="range"):
        TriangleMesh(verts, np.array([[0, 1, 3]]))
    with pytest.raises(ValueError, match="finite"):
        TriangleMesh(np.array([[np.nan, 0, 0]]), np.zeros((0, 3), dtype=np.int32))


# ---------------------------------------------------------------------------
# mesh file I/O
# ---------------------------------------------------------------------------


def small_mesh():
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                      [0.125, 0.25, 1.0 / 3.0]], dtype=np.float32)
    tris = np.array([[0, 1, 2], [0, 1, 3]], dtype=np.int32)
    return TriangleMesh(verts, tris)


def test_ply_roundtrip_bit_identical(tmp_path):
    mesh = extract_sphere(cell=0.2)
    path = tmp_path / "m.ply"
    write_mesh(mesh, path, "ply_binary")
    back = read_mesh(path)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)


def test_obj_roundtrip_exact_for_float32(tmp_path):
    mesh = small_mesh()
    path = tmp_path / "m.obj"
    write_mesh(mesh, path, "obj_ascii")
    back = read_mesh(path)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)


def test_obj_indices_are_one_based(tmp_path):
    path = tmp_path / "m.obj"
    write_mesh(small_mesh(), path, "obj_ascii")
    lines = path.read_text().splitlines()
    assert lines[4] == "f 1 2 3"


def test_empty_mesh_files_are_valid(tmp_path):
    for fmt, name in [("ply_binary", "e.ply"), ("obj_ascii", "e.obj")]:
        path = tmp_path / name
        write_mesh(empty_mesh(), path, fmt)
        back = read_mesh(path)
        assert back.n_vertices == 0 and back.n_triangles == 0


def test_unknown_format_rejected(tmp_path):
    with pytest.raises(ValueError, match="format"):
        write_mesh(small_mesh(), tmp_path / "m.stl", "stl")


def test_ply_parse_errors_carry_path(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_bytes(b"not a ply at all")
    with pytest.raises(ParseError, match="bad.ply"):
        read_mesh(path)
    good = tmp_path / "trunc.ply"
    write_mesh(small_mesh(), good, "ply_binary")
    blob = good.read_bytes()
    good.write_bytes(blob[:-5])
    with pytest.raises(ParseError, match="size"):
        read_mesh(good)


def test_obj_parse_error_has_line_number(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 0 zero\n")
    with pytest.raises(ParseError, match="bad.obj:2"):
        read_mesh(path)
