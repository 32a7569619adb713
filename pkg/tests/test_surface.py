"""Mesh container, isosurface extraction, sampling, and mesh file IO."""

import struct

import numpy as np
import pytest

from serbf.surface import (
    TriangleMesh,
    load_mesh,
    marching_cubes,
    read_obj,
    read_ply,
    sample_surface,
    write_obj,
)


def signed_volume(mesh):
    tri = mesh.vertices[mesh.faces]
    return float(np.sum(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2]))) / 6.0)


def sphere_grid(radius=0.47, n=17, half=0.8):
    ax = np.linspace(-half, half, n)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    values = np.sqrt(x * x + y * y + z * z) - radius
    return values, (-half, -half, -half), ax[1] - ax[0]


def tetrahedron():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    f = np.array([[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]])
    return TriangleMesh(v, f)


class TestTriangleMesh:
    def test_rejects_non_finite_vertices(self):
        with pytest.raises(ValueError):
            TriangleMesh(np.array([[0.0, 0, np.nan]]), np.zeros((0, 3), dtype=np.int64))

    def test_rejects_out_of_range_face(self):
        v = np.zeros((3, 3))
        with pytest.raises(ValueError):
            TriangleMesh(v, np.array([[0, 1, 3]]))
        with pytest.raises(ValueError):
            TriangleMesh(v, np.array([[0, 1, -1]]))

    def test_area_and_normal_of_right_triangle(self):
        mesh = TriangleMesh(
            np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]])
        )
        np.testing.assert_allclose(mesh.face_areas(), [0.5])
        np.testing.assert_allclose(mesh.face_normals(), [[0, 0, 1]])

    def test_degenerate_face_gets_zero_normal(self):
        mesh = TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
        np.testing.assert_array_equal(mesh.face_normals(), [[0, 0, 0]])
        assert mesh.face_areas()[0] == 0.0

    def test_boundary_edges(self):
        single = TriangleMesh(
            np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]])
        )
        assert single.boundary_edge_count() == 3
        assert not single.is_closed()
        assert tetrahedron().boundary_edge_count() == 0
        assert tetrahedron().is_closed()


class TestMarchingCubes:
    def test_single_corner_pinned_triangle(self):
        """One corner below the level gives one triangle whose vertices sit
        at the midpoints of the three incident edges, facing the corner."""
        values = np.full((2, 2, 2), 2.0)
        values[0, 0, 0] = 0.0
        mesh = marching_cubes(values, origin=(0.0, 0.0, 0.0), spacing=1.0, isolevel=1.0)
        assert mesh.face_count == 1
        want = {(0.5, 0.0, 0.0), (0.0, 0.5, 0.0), (0.0, 0.0, 0.5)}
        assert {tuple(v) for v in mesh.vertices} == want
        normal = mesh.face_normals()[0]
        assert normal @ np.ones(3) < 0.0  # points toward the below-level corner

    def test_uniform_fields_give_empty_meshes(self):
        for fill in (0.0, 2.0):
            mesh = marching_cubes(np.full((3, 3, 3), fill), (0, 0, 0), 1.0, 1.0)
            assert mesh.face_count == 0
            assert mesh.vertex_count == 0

    def test_sphere_mesh_is_closed_genus_zero(self):
        values, origin, h = sphere_grid()
        mesh = marching_cubes(values, origin, h, 0.0)
        assert mesh.boundary_edge_count() == 0
        euler = mesh.vertex_count - (3 * mesh.face_count) // 2 + mesh.face_count
        assert euler == 2

    def test_vertices_lie_near_the_level_set(self):
        """Linear interpolation puts every vertex within a cell of the
        true surface."""
        values, origin, h = sphere_grid()
        mesh = marching_cubes(values, origin, h, 0.0)
        r = np.linalg.norm(mesh.vertices, axis=1)
        assert np.abs(r - 0.47).max() < h / 4

    def test_welded_vertices_are_unique(self):
        values, origin, h = sphere_grid()
        mesh = marching_cubes(values, origin, h, 0.0)
        assert len(np.unique(mesh.vertices, axis=0)) == mesh.vertex_count

    def test_volume_matches_the_ball(self):
        values, origin, h = sphere_grid()
        mesh = marching_cubes(values, origin, h, 0.0)
        true = 4.0 / 3.0 * np.pi * 0.47**3
        np.testing.assert_allclose(abs(signed_volume(mesh)), true, rtol=0.03)

    def test_negating_field_and_level_flips_winding_only(self):
        values, origin, h = sphere_grid()
        a = marching_cubes(values, origin, h, 0.0)
        b = marching_cubes(-values, origin, h, 0.0)
        np.testing.assert_array_equal(a.vertices, b.vertices)
        assert signed_volume(b) == -signed_volume(a)

    def test_origin_and_spacing_place_the_geometry(self):
        values = np.full((2, 2, 2), 2.0)
        values[0, 0, 0] = 0.0
        mesh = marching_cubes(values, origin=(10.0, 20.0, 30.0), spacing=4.0, isolevel=1.0)
        want = {(12.0, 20.0, 30.0), (10.0, 22.0, 30.0), (10.0, 20.0, 32.0)}
        assert {tuple(v) for v in mesh.vertices} == want

    def test_rejects_tiny_grids(self):
        with pytest.raises(ValueError):
            marching_cubes(np.zeros((1, 3, 3)), (0, 0, 0), 1.0, 0.5)


class TestSampleSurface:
    def flat_pair(self):
        v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0], [4, 0, 0], [2, 2, 0]])
        f = np.array([[0, 1, 2], [3, 4, 5]])
        return TriangleMesh(v, f)  # areas 0.5 and 2.0

    def test_points_lie_on_their_faces(self):
        mesh = self.flat_pair()
        pts, normals = sample_surface(mesh, 500, seed=3)
        assert pts.shape == (500, 3)
        np.testing.assert_array_equal(pts[:, 2], np.zeros(500))
        np.testing.assert_allclose(normals, np.tile([0.0, 0, 1], (500, 1)))
        on_first = pts[:, 0] < 1.5
        a = pts[on_first]
        assert np.all(a[:, 0] >= 0) and np.all(a[:, 1] >= 0)
        assert np.all(a[:, 0] + a[:, 1] <= 1.0 + 1e-12)

    def test_sampling_is_area_weighted(self):
        mesh = self.flat_pair()
        pts, _ = sample_surface(mesh, 20000, seed=0)
        frac = np.mean(pts[:, 0] >= 1.5)
        np.testing.assert_allclose(frac, 0.8, atol=0.02)

    def test_seed_controls_the_draw(self):
        mesh = self.flat_pair()
        a, _ = sample_surface(mesh, 100, seed=1)
        b, _ = sample_surface(mesh, 100, seed=1)
        c, _ = sample_surface(mesh, 100, seed=2)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_normals_follow_face_orientation(self):
        mesh = tetrahedron()
        pts, normals = sample_surface(mesh, 200, seed=4)
        face_n = mesh.face_normals()
        match = np.isclose(normals @ face_n.T, 1.0, atol=1e-9)
        assert np.all(match.any(axis=1))

    def test_rejects_empty_or_degenerate(self):
        mesh = self.flat_pair()
        with pytest.raises(ValueError):
            sample_surface(mesh, 0)
        flat = TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
        with pytest.raises(ValueError):
            sample_surface(flat, 10)


class TestObjIO:
    def test_round_trip_is_exact(self, tmp_path):
        values, origin, h = sphere_grid(n=9)
        mesh = marching_cubes(values, origin, h, 0.0)
        path = tmp_path / "m.obj"
        write_obj(path, mesh)
        back = read_obj(path)
        np.testing.assert_array_equal(back.vertices, mesh.vertices)
        np.testing.assert_array_equal(back.faces, mesh.faces)

    def test_quads_are_fanned(self, tmp_path):
        path = tmp_path / "q.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        mesh = read_obj(path)
        np.testing.assert_array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])

    def test_negative_and_slash_indices(self, tmp_path):
        path = tmp_path / "n.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3/1 -2/2 -1/3\n")
        mesh = read_obj(path)
        np.testing.assert_array_equal(mesh.faces, [[0, 1, 2]])

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "e.obj"
        path.write_text("# nothing\n")
        with pytest.raises(ValueError):
            read_obj(path)


class TestPlyIO:
    def write_ply(self, path, verts, faces, vtype="double", extra=False):
        props = "".join(f"property {vtype} {ax}\n" for ax in "xyz")
        if extra:
            props += "property uchar red\n"
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(verts)}\n{props}"
            f"element face {len(faces)}\n"
            "property list uchar int vertex_indices\n"
            "end_header\n"
        ).encode()
        body = b""
        code = {"double": "<3d", "float": "<3f"}[vtype]
        for row in verts:
            body += struct.pack(code, *row)
            if extra:
                body += struct.pack("<B", 7)
        for f in faces:
            body += struct.pack("<B3i", 3, *f)
        path.write_bytes(header + body)

    def test_reads_double_vertices_exactly(self, tmp_path):
        verts = np.array([[0.1, 0.2, 0.3], [1.0, 0, 0], [0, 1.0, 0]])
        faces = [[0, 1, 2]]
        path = tmp_path / "m.ply"
        self.write_ply(path, verts, faces)
        mesh = read_ply(path)
        np.testing.assert_array_equal(mesh.vertices, verts)
        np.testing.assert_array_equal(mesh.faces, faces)

    def test_skips_extra_vertex_properties(self, tmp_path):
        verts = np.array([[0.5, 0.25, 0.75], [1.0, 0, 0], [0, 1.0, 0]])
        path = tmp_path / "m.ply"
        self.write_ply(path, verts, [[0, 1, 2]], vtype="float", extra=True)
        mesh = read_ply(path)
        np.testing.assert_array_equal(mesh.vertices, verts)

    def test_quad_faces_are_fanned(self, tmp_path):
        verts = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            "element vertex 4\nproperty double x\nproperty double y\nproperty double z\n"
            "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
        ).encode()
        body = b"".join(struct.pack("<3d", *row) for row in verts)
        body += struct.pack("<B4i", 4, 0, 1, 2, 3)
        path = tmp_path / "q.ply"
        path.write_bytes(header + body)
        mesh = read_ply(path)
        np.testing.assert_array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])

    def test_rejects_ascii_format(self, tmp_path):
        path = tmp_path / "a.ply"
        path.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
        with pytest.raises(ValueError):
            read_ply(path)

    def test_rejects_non_ply(self, tmp_path):
        path = tmp_path / "x.ply"
        path.write_bytes(b"not a mesh")
        with pytest.raises(ValueError):
            read_ply(path)


class TestLoadMesh:
    def test_dispatch_by_extension(self, tmp_path):
        obj = tmp_path / "m.obj"
        obj.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
        mesh = load_mesh(obj)
        assert mesh.face_count == 1
        ply = tmp_path / "m.ply"
        TestPlyIO().write_ply(ply, np.eye(3), [[0, 1, 2]])
        mesh = load_mesh(ply)
        assert mesh.face_count == 1
