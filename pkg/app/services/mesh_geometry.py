# app/services/mesh_geometry.py
import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation
from trimesh.triangles import closest_point

from .errors import MeshError
from .extractors import MeshExtractor

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
ROTATION_TOL = 1e-6


# ========= Types =========
@dataclass(frozen=True, eq=False)
class TriMesh:
    """삼각형 메쉬 (단위: m). normals는 면 단위 외향 법선"""

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray
    dropped: int = 0

    @classmethod
    def from_arrays(cls, vertices, triangles) -> "TriMesh":
        """정점/면 배열에서 메쉬 생성 (퇴화 삼각형은 제거하고 개수만 기록)"""
        vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
        triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)

        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise MeshError("면 인덱스가 정점 범위를 벗어났습니다.")

        cross = _face_cross(vertices, triangles)
        norms = np.linalg.norm(cross, axis=1)
        valid = 0.5 * norms > DEGENERATE_AREA

        if not valid.any():
            raise MeshError("유효한 삼각형이 없습니다.")

        normals = cross[valid] / norms[valid, None]
        return cls(
            vertices=vertices,
            triangles=triangles[valid],
            normals=normals,
            dropped=int((~valid).sum()),
        )

    @property
    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(_face_cross(self.vertices, self.triangles), axis=1)

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    def transformed(self, pose: np.ndarray) -> "TriMesh":
        check_rigid(pose)
        return TriMesh(
            vertices=transform_points(self.vertices, pose),
            triangles=self.triangles,
            normals=self.normals @ pose[:3, :3].T,
            dropped=self.dropped,
        )


@dataclass(frozen=True)
class SurfaceSample:
    point: np.ndarray
    normal: np.ndarray
    face: int
    weight: float


@dataclass(frozen=True, eq=False)
class SurfaceSamples:
    """SurfaceSample 묶음 (열 단위 배열로 보관)"""

    points: np.ndarray
    normals: np.ndarray
    face_ids: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.points)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return SurfaceSample(
                point=self.points[idx],
                normal=self.normals[idx],
                face=int(self.face_ids[idx]),
                weight=float(self.weights[idx]),
            )
        return self.subset(idx)

    def subset(self, idx) -> "SurfaceSamples":
        return SurfaceSamples(
            points=self.points[idx],
            normals=self.normals[idx],
            face_ids=self.face_ids[idx],
            weights=self.weights[idx],
        )


@dataclass(frozen=True, eq=False)
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise ValueError("AABB 최소 좌표가 최대 좌표보다 큽니다.")

    @classmethod
    def from_points(cls, points) -> "Aabb":
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            raise ValueError("빈 점 집합의 AABB는 정의되지 않습니다.")
        return cls(points.min(axis=0), points.max(axis=0))

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def inflate(self, margin: float) -> "Aabb":
        return Aabb(self.lo - margin, self.hi + margin)

    def overlaps(self, other: "Aabb") -> bool:
        return bool(np.all(self.lo <= other.hi) and np.all(other.lo <= self.hi))

    def contains(self, points) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.lo) & (points <= self.hi), axis=1)


@dataclass(frozen=True, eq=False)
class ConvexPart:
    """볼록 파트. 면 평면은 n·x <= d 형태 (n은 외향 단위 법선)"""

    vertices: np.ndarray
    faces: np.ndarray
    plane_normals: np.ndarray
    plane_offsets: np.ndarray

    @classmethod
    def from_points(cls, points) -> "ConvexPart":
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        hull = ConvexHull(points)
        hull_vertices = points[hull.vertices]
        remap = np.full(len(points), -1, dtype=np.int64)
        remap[hull.vertices] = np.arange(len(hull.vertices))
        return cls(
            vertices=hull_vertices,
            faces=remap[hull.simplices],
            plane_normals=hull.equations[:, :3].copy(),
            plane_offsets=-hull.equations[:, 3],
        )

    @property
    def has_planes(self) -> bool:
        return self.plane_normals is not None and len(self.plane_normals) > 0

    def world_vertices(self, pose: np.ndarray) -> np.ndarray:
        return transform_points(self.vertices, pose)

    def world_planes(self, pose: np.ndarray):
        normals = self.plane_normals @ pose[:3, :3].T
        offsets = self.plane_offsets + normals @ pose[:3, 3]
        return normals, offsets

    def closest_surface_point(self, point: np.ndarray):
        """파트 좌표계의 점에서 가장 가까운 표면점과 해당 면의 외향 법선"""
        tri = self.vertices[self.faces]
        closest = closest_point(tri, np.tile(np.asarray(point, dtype=float), (len(tri), 1)))
        dist = np.einsum("ij,ij->i", closest - point, closest - point)
        best = int(np.argmin(dist))
        return closest[best], self.plane_normals[best], float(math.sqrt(dist[best]))


# ========= Rigid transforms =========
def check_rigid(pose: np.ndarray) -> None:
    pose = np.asarray(pose, dtype=float)
    if pose.shape != (4, 4):
        raise ValueError(f"포즈는 4x4 행렬이어야 합니다: {pose.shape}")
    rot = pose[:3, :3]
    if not np.allclose(rot.T @ rot, np.eye(3), atol=ROTATION_TOL) or np.linalg.det(rot) <= 0:
        raise ValueError("회전 행렬이 정규직교(det +1)가 아닙니다.")


def make_pose(rotation=None, translation=None) -> np.ndarray:
    pose = np.eye(4)
    if rotation is not None:
        pose[:3, :3] = rotation
    if translation is not None:
        pose[:3, 3] = translation
    return pose


def invert_pose(pose: np.ndarray) -> np.ndarray:
    rot = pose[:3, :3]
    return make_pose(rot.T, -rot.T @ pose[:3, 3])


def transform_points(points: np.ndarray, pose: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=float) @ pose[:3, :3].T + pose[:3, 3]


def pose_to_vector(pose: np.ndarray) -> list:
    """4x4 포즈 -> [qw, qx, qy, qz, tx, ty, tz]"""
    x, y, z, w = Rotation.from_matrix(pose[:3, :3]).as_quat()
    return [float(w), float(x), float(y), float(z)] + [float(v) for v in pose[:3, 3]]


def pose_from_vector(values) -> np.ndarray:
    w, x, y, z, tx, ty, tz = [float(v) for v in values]
    rot = Rotation.from_quat([x, y, z, w]).as_matrix()
    return make_pose(rot, [tx, ty, tz])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """회전군 위의 균일 샘플 (정규분포 쿼터니언 정규화)"""
    quat = rng.normal(size=4)
    quat /= np.linalg.norm(quat)
    return Rotation.from_quat(quat).as_matrix()


def rotation_aligning(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """단위벡터 a를 b로 보내는 최소 회전"""
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    axis = np.cross(a, b)
    sin = np.linalg.norm(axis)
    cos = float(np.dot(a, b))
    if sin < 1e-12:
        if cos > 0:
            return np.eye(3)
        # 반대 방향: a에 수직인 아무 축으로 180도
        perp, _ = tangent_basis(a)
        return Rotation.from_rotvec(np.pi * perp).as_matrix()
    return Rotation.from_rotvec(axis / sin * math.atan2(sin, cos)).as_matrix()


def axis_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    return Rotation.from_rotvec(axis / np.linalg.norm(axis) * angle).as_matrix()


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def tangent_basis(n: np.ndarray):
    """법선 n에 수직인 정규직교 (x, y). 가장 작은 성분 축을 기준으로 결정적으로 생성"""
    n = np.asarray(n, dtype=float)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise ValueError("영벡터 법선에는 접평면 기저가 없습니다.")
    n = n / norm
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(n)))] = 1.0
    x = axis - np.dot(axis, n) * n
    x /= np.linalg.norm(x)
    y = np.cross(n, x)
    return x, y


def tangent_bases(normals: np.ndarray):
    """tangent_basis 의 벡터화 버전 (행별 결과 동일)"""
    normals = np.atleast_2d(np.asarray(normals, dtype=float))
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("영벡터 법선에는 접평면 기저가 없습니다.")
    n = normals / norms
    axis = np.eye(3)[np.argmin(np.abs(n), axis=1)]
    x = axis - np.einsum("ij,ij->i", axis, n)[:, None] * n
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x, np.cross(n, x)


# ========= Operations =========
def load_mesh(path: str, scale: float = 1.0) -> TriMesh:
    """OBJ / 바이너리 STL 메쉬 로드"""
    raw = MeshExtractor().extract(path, scale=scale)
    mesh = TriMesh.from_arrays(raw["vertices"], raw["faces"])
    logger.info(
        f"mesh loaded: {path} faces={len(mesh.triangles)} dropped={mesh.dropped}"
    )
    return mesh


def sample_count(mesh: TriMesh, density_per_cm2: float) -> int:
    return max(1, int(math.ceil(mesh.area * 1e4 * density_per_cm2)))


def sample_surface(mesh: TriMesh, count: int, seed: int) -> SurfaceSamples:
    """면적 가중 표면 샘플링 (seed 고정 시 결정적)"""
    if count <= 0:
        raise ValueError("샘플 개수는 양수여야 합니다.")

    rng = np.random.default_rng(seed)
    areas = mesh.areas
    faces = rng.choice(len(areas), size=count, p=areas / areas.sum())

    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    tri = mesh.vertices[mesh.triangles[faces]]
    points = (
        (1.0 - r1)[:, None] * tri[:, 0]
        + (r1 * (1.0 - r2))[:, None] * tri[:, 1]
        + (r1 * r2)[:, None] * tri[:, 2]
    )
    return SurfaceSamples(
        points=points,
        normals=mesh.normals[faces].copy(),
        face_ids=faces.astype(np.int64),
        weights=np.full(count, areas.sum() / count),
    )


def transform_samples(samples: SurfaceSamples, pose: np.ndarray) -> SurfaceSamples:
    check_rigid(pose)
    return SurfaceSamples(
        points=transform_points(samples.points, pose),
        normals=samples.normals @ pose[:3, :3].T,
        face_ids=samples.face_ids,
        weights=samples.weights,
    )


def aabb_of(item: Union[TriMesh, SurfaceSamples, np.ndarray],
            pose: Optional[np.ndarray] = None) -> Aabb:
    if isinstance(item, TriMesh):
        points = item.vertices
    elif isinstance(item, SurfaceSamples):
        points = item.points
    else:
        points = np.asarray(item, dtype=float).reshape(-1, 3)

    if len(points) == 0:
        raise ValueError("빈 입력의 AABB는 계산할 수 없습니다.")
    if pose is not None:
        check_rigid(pose)
        points = transform_points(points, pose)
    return Aabb.from_points(points)


# ========= Geometry utilities =========
def _face_cross(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    tri = vertices[triangles]
    return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
