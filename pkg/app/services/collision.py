# app/services/collision.py
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .kinematics import HandModel, forward_kinematics
from .mesh_geometry import Aabb, ConvexPart, SurfaceSamples, check_rigid, transform_points

logger = logging.getLogger(__name__)

GJK_MAX_ITERS = 128
HAND_OBJECT_MARGIN = 0.002


@dataclass
class CollisionReport:
    hand_pairs: List[Tuple[str, str]] = field(default_factory=list)
    object_pairs: List[Tuple[str, float]] = field(default_factory=list)
    max_depth: float = 0.0
    counts: Dict[str, int] = field(default_factory=dict)

    @property
    def clean(self) -> bool:
        return not self.hand_pairs and not self.object_pairs

    @property
    def penetration_free(self) -> bool:
        return not self.object_pairs


@dataclass(frozen=True, eq=False)
class BroadPhaseResult:
    part_pairs: np.ndarray
    object_parts: np.ndarray

    def __len__(self):
        return len(self.part_pairs) + len(self.object_parts)


# ========= Broad phase =========
def broad_phase(aabbs: Sequence[Aabb], margin: float = 0.0,
                object_box: Optional[Aabb] = None) -> BroadPhaseResult:
    """margin 만큼 부풀린 AABB 가 겹치는 파트 쌍 (i < j) 과 오브젝트 후보 파트"""
    if margin < 0:
        raise ValueError("margin 은 0 이상이어야 합니다.")
    if len(aabbs) == 0:
        return BroadPhaseResult(np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64))

    lo = np.array([box.lo for box in aabbs]) - margin
    hi = np.array([box.hi for box in aabbs]) + margin
    overlap = np.all((lo[:, None, :] <= hi[None, :, :]) & (lo[None, :, :] <= hi[:, None, :]), axis=2)
    i, j = np.nonzero(np.triu(overlap, k=1))
    pairs = np.column_stack([i, j]).astype(np.int64)

    if object_box is None:
        object_parts = np.zeros(0, dtype=np.int64)
    else:
        obj_lo, obj_hi = object_box.lo - margin, object_box.hi + margin
        hit = np.all((lo <= obj_hi) & (obj_lo <= hi), axis=1)
        object_parts = np.flatnonzero(hit).astype(np.int64)
    return BroadPhaseResult(pairs, object_parts)


def part_aabbs(parts: Sequence[Tuple[ConvexPart, np.ndarray]]) -> List[Aabb]:
    return [Aabb.from_points(part.world_vertices(pose)) for part, pose in parts]


# ========= GJK =========
def _closest_on_simplex(simplex: np.ndarray):
    """단체(<=4점)의 원점 최근접점과 그 점을 지지하는 최소 부분단체"""
    best_point, best_subset, best_dist = None, None, math.inf
    n = len(simplex)
    for size in range(1, n + 1):
        for subset in itertools.combinations(range(n), size):
            pts = simplex[list(subset)]
            if size == 1:
                lam = np.ones(1)
            else:
                edges = (pts[1:] - pts[0]).T
                mu, *_ = np.linalg.lstsq(edges.T @ edges, -edges.T @ pts[0], rcond=None)
                lam = np.concatenate([[1.0 - mu.sum()], mu])
            if np.any(lam < -1e-12):
                continue
            point = lam @ pts
            dist = float(point @ point)
            if dist < best_dist - 1e-18:
                best_point, best_subset, best_dist = point, subset, dist
    return best_point, simplex[list(best_subset)]


def gjk_distance(a: ConvexPart, pose_a: np.ndarray, b: ConvexPart, pose_b: np.ndarray) -> float:
    """
    두 볼록 파트 사이의 유클리드 거리 (교차하면 0).
    128 회 안에 수렴하지 않으면 교차로 본다.
    """
    verts_a = a.world_vertices(pose_a)
    verts_b = b.world_vertices(pose_b)

    def support(direction):
        return verts_a[np.argmax(verts_a @ direction)] - verts_b[np.argmax(verts_b @ -direction)]

    v = verts_a.mean(axis=0) - verts_b.mean(axis=0)
    if float(v @ v) < 1e-20:
        return 0.0
    simplex = np.zeros((0, 3))

    for _ in range(GJK_MAX_ITERS):
        w = support(-v)
        vv = float(v @ v)
        if vv - float(v @ w) <= max(1e-14, 1e-12 * vv):
            return math.sqrt(vv)
        if len(simplex) and np.any(np.all(np.isclose(simplex, w, rtol=0.0, atol=1e-15), axis=1)):
            return math.sqrt(vv)

        simplex = np.vstack([simplex, w])
        v, simplex = _closest_on_simplex(simplex)
        if len(simplex) == 4 or float(v @ v) < 1e-20:
            return 0.0

    logger.debug("GJK did not converge, treating pair as intersecting")
    return 0.0


# ========= Half-plane penetration =========
def object_penetration(points: np.ndarray, part: ConvexPart, pose: np.ndarray,
                       margin: float = HAND_OBJECT_MARGIN):
    """
    모든 면 반공간 안에 있는 샘플의 침투 깊이 = 가장 가까운 면까지의 거리

    Returns:
        (최대 깊이, margin 을 넘는 샘플 인덱스)
    """
    if not part.has_planes:
        raise ValueError("면 평면이 없는 볼록 파트입니다.")
    points = np.atleast_2d(points)
    if len(points) == 0:
        return 0.0, np.zeros(0, dtype=np.int64)

    normals, offsets = part.world_planes(pose)
    signed = points @ normals.T - offsets
    inside = np.all(signed <= 0.0, axis=1)
    depth = np.where(inside, -signed.max(axis=1), 0.0)
    offending = np.flatnonzero(inside & (depth > margin))
    if len(offending) == 0:
        return 0.0, offending
    return float(depth[offending].max()), offending


# ========= Grasp validation =========
def posed_parts(model: HandModel, transforms: np.ndarray):
    """(링크 id, 볼록 파트, 월드 포즈) 목록"""
    return [
        (i, part, transforms[i])
        for i, link in enumerate(model.links)
        for part in link.convex_parts
    ]


def validate_grasp_collisions(model: HandModel, q, samples: SurfaceSamples, pose: np.ndarray,
                              margin: float = HAND_OBJECT_MARGIN,
                              check_self: bool = True) -> CollisionReport:
    """핸드-핸드 (GJK, 인접 링크 제외) + 핸드-오브젝트 (반공간, margin 초과) 충돌 검사"""
    check_rigid(pose)
    transforms = forward_kinematics(model, q)
    parts = posed_parts(model, transforms)
    object_points = transform_points(samples.points, pose)
    report = CollisionReport()

    boxes = part_aabbs([(part, t) for _, part, t in parts])
    candidates = broad_phase(boxes, 0.0, Aabb.from_points(object_points))
    report.counts["broad_phase_pairs"] = len(candidates)

    adjacent = model.adjacent_pairs()
    names = [link.name for link in model.links]
    gjk_queries = 0
    if check_self:
        seen = set()
        for i, j in candidates.part_pairs:
            la, lb = parts[i][0], parts[j][0]
            if la == lb or frozenset((la, lb)) in adjacent:
                continue
            gjk_queries += 1
            if gjk_distance(parts[i][1], parts[i][2], parts[j][1], parts[j][2]) <= 0.0:
                pair = tuple(sorted((names[la], names[lb])))
                if pair not in seen:
                    seen.add(pair)
                    report.hand_pairs.append(pair)
    report.counts["gjk_queries"] = gjk_queries

    halfplane_queries = 0
    depth_by_link: Dict[int, float] = {}
    for p in candidates.object_parts:
        link, part, t = parts[p]
        near = boxes[p].contains(object_points)
        if not near.any():
            continue
        halfplane_queries += 1
        depth, offending = object_penetration(object_points[near], part, t, margin)
        if len(offending):
            depth_by_link[link] = max(depth, depth_by_link.get(link, 0.0))
            report.max_depth = max(report.max_depth, depth)
    report.object_pairs = [(names[link], depth) for link, depth in sorted(depth_by_link.items())]
    report.counts["halfplane_queries"] = halfplane_queries
    return report
