import math

import numpy as np
import pytest
import trimesh
from scipy.stats import chisquare

from app.services.errors import MeshError
from app.services.mesh_geometry import (
    Aabb,
    ConvexPart,
    TriMesh,
    aabb_of,
    check_rigid,
    load_mesh,
    make_pose,
    pose_from_vector,
    pose_to_vector,
    random_rotation,
    rotation_aligning,
    sample_count,
    sample_surface,
    tangent_basis,
    tangent_bases,
    transform_samples,
)


def test_sphere_samples_lie_on_surface(sphere_samples):
    radii = np.linalg.norm(sphere_samples.points, axis=1)
    assert np.all(np.abs(radii - 0.03) < 5e-4)
    radial = sphere_samples.points / radii[:, None]
    assert np.all(np.einsum("ij,ij->i", radial, sphere_samples.normals) > 0.99)


def test_sampling_is_deterministic(sphere_mesh):
    a = sample_surface(sphere_mesh, 200, seed=7)
    b = sample_surface(sphere_mesh, 200, seed=7)
    c = sample_surface(sphere_mesh, 200, seed=8)
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points)


def test_face_counts_follow_area():
    # 면적 1:2:3:4 인 분리된 삼각형 네 개
    vertices, faces = [], []
    for i, width in enumerate((1.0, 2.0, 3.0, 4.0)):
        z = float(i)
        vertices += [[0.0, 0.0, z], [width, 0.0, z], [0.0, 1.0, z]]
        faces.append([3 * i, 3 * i + 1, 3 * i + 2])
    mesh = TriMesh.from_arrays(vertices, faces)

    samples = sample_surface(mesh, 20000, seed=3)
    observed = np.bincount(samples.face_ids, minlength=4)
    expected = 20000 * mesh.areas / mesh.areas.sum()
    assert chisquare(observed, expected).pvalue > 1e-3


def test_sample_count_uses_density_per_square_cm(assets):
    box = load_mesh(assets["box"])
    assert box.area == pytest.approx(6 * 0.04 ** 2)
    assert sample_count(box, 40.0) == 3840


def test_degenerate_triangles_are_dropped():
    vertices = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]]
    mesh = TriMesh.from_arrays(vertices, [[0, 1, 2], [0, 1, 3]])
    assert len(mesh.triangles) == 1
    assert mesh.dropped == 1
    assert np.allclose(mesh.normals[0], [0, 0, 1])


def test_all_degenerate_mesh_is_rejected():
    with pytest.raises(MeshError):
        TriMesh.from_arrays([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])


def test_load_mesh_rejects_unsupported_and_ascii_stl(tmp_path):
    ply = tmp_path / "thing.ply"
    ply.write_text("ply\n")
    with pytest.raises(MeshError):
        load_mesh(str(ply))

    ascii_stl = tmp_path / "ascii.stl"
    ascii_stl.write_text("solid t\nfacet normal 0 0 1\nouter loop\nvertex 0 0 0\n"
                         "vertex 1 0 0\nvertex 0 1 0\nendloop\nendfacet\nendsolid t\n")
    with pytest.raises(MeshError):
        load_mesh(str(ascii_stl))


def test_binary_stl_and_scale(tmp_path):
    path = str(tmp_path / "box.stl")
    trimesh.creation.box(extents=(40.0, 40.0, 40.0)).export(path)
    mesh = load_mesh(path, scale=0.001)
    box = aabb_of(mesh)
    assert np.allclose(box.extent, 0.04)


def test_check_rigid_rejects_scaled_rotation():
    pose = make_pose(2.0 * np.eye(3), [0, 0, 0])
    with pytest.raises(ValueError):
        check_rigid(pose)


def test_pose_vector_round_trip(rng):
    pose = make_pose(random_rotation(rng), rng.normal(size=3))
    vector = pose_to_vector(pose)
    assert len(vector) == 7
    assert np.allclose(pose_from_vector(vector), pose, atol=1e-12)


@pytest.mark.parametrize("b", [[0, 0, 1], [0, 0, -1], [1, 1, 0]])
def test_rotation_aligning(b):
    a = np.array([0.0, 0.0, 1.0])
    b = np.asarray(b, dtype=float) / np.linalg.norm(b)
    rot = rotation_aligning(a, b)
    assert np.allclose(rot @ a, b, atol=1e-12)
    assert np.isclose(np.linalg.det(rot), 1.0)


def test_tangent_bases_match_single_version(rng):
    normals = rng.normal(size=(50, 3))
    xs, ys = tangent_bases(normals)
    for n, x, y in zip(normals, xs, ys):
        ex, ey = tangent_basis(n)
        assert np.allclose(x, ex) and np.allclose(y, ey)
        unit = n / np.linalg.norm(n)
        assert abs(x @ unit) < 1e-12 and abs(y @ unit) < 1e-12
        assert np.allclose(np.cross(x, y), unit)


def test_tangent_basis_rejects_zero_normal():
    with pytest.raises(ValueError):
        tangent_basis(np.zeros(3))


def test_transform_samples_keeps_unit_normals(sphere_samples, rng):
    pose = make_pose(random_rotation(rng), [0.1, 0.0, 0.0])
    moved = transform_samples(sphere_samples, pose)
    assert np.allclose(np.linalg.norm(moved.normals, axis=1), 1.0)
    assert np.allclose(moved.points.mean(axis=0), [0.1, 0, 0] + pose[:3, :3] @ sphere_samples.points.mean(axis=0))


def test_aabb_contains_and_overlaps():
    box = Aabb(np.zeros(3), np.ones(3))
    assert box.contains(np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]])).tolist() == [True, False]
    assert box.overlaps(Aabb(np.full(3, 0.9), np.full(3, 2.0)))
    assert not box.overlaps(Aabb(np.full(3, 1.1), np.full(3, 2.0)))
    assert box.inflate(0.2).overlaps(Aabb(np.full(3, 1.1), np.full(3, 2.0)))


def test_convex_part_closest_surface_point():
    cube = ConvexPart.from_points(trimesh.creation.box(extents=(0.04, 0.04, 0.04)).vertices)
    point, normal, dist = cube.closest_surface_point(np.array([0.05, 0.0, 0.0]))
    assert np.allclose(point, [0.02, 0.0, 0.0])
    assert np.allclose(normal, [1.0, 0.0, 0.0])
    assert dist == pytest.approx(0.03)


def test_closest_surface_point_matches_box_distance(rng):
    half = 0.02
    cube = ConvexPart.from_points(trimesh.creation.box(extents=(2 * half,) * 3).vertices)
    for _ in range(50):
        point = rng.uniform(-0.08, 0.08, size=3)
        if np.all(np.abs(point) <= half):
            continue
        closest, normal, dist = cube.closest_surface_point(point)
        assert dist == pytest.approx(np.linalg.norm(np.maximum(np.abs(point) - half, 0.0)), abs=1e-10)
        assert np.allclose(closest, np.clip(point, -half, half), atol=1e-10)
        assert np.isclose(np.linalg.norm(normal), 1.0)


def test_random_rotation_is_proper(rng):
    for _ in range(10):
        rot = random_rotation(rng)
        assert np.allclose(rot.T @ rot, np.eye(3), atol=1e-12)
        assert math.isclose(np.linalg.det(rot), 1.0, abs_tol=1e-12)
