# app/services/validator.py
import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .collision import HAND_OBJECT_MARGIN, validate_grasp_collisions
from .errors import GraspError, HandModelError
from .kinematics import HandModel, forward_kinematics
from .mesh_geometry import SurfaceSamples, invert_pose, transform_points
from .wrench_stability import StabilityParams, WrenchProblem, is_stable

logger = logging.getLogger(__name__)


@dataclass
class ValidationResult:
    index: int
    passed: bool
    depth: float = 0.0
    objective: float = float("inf")
    residual: float = float("inf")
    failures: List[str] = field(default_factory=list)


def _surface_distance(model: HandModel, transforms: np.ndarray, link: int, point: np.ndarray):
    """링크 볼록 파트 표면까지의 최소 거리와 그 월드 좌표"""
    local = transform_points(point[None, :], invert_pose(transforms[link]))[0]
    best_dist, best_point = np.inf, point
    for part in model.links[link].convex_parts:
        closest, _, dist = part.closest_surface_point(local)
        if dist < best_dist:
            best_dist = dist
            best_point = transform_points(closest[None, :], transforms[link])[0]
    return best_dist, best_point


def validate_grasp(model: HandModel, grasp, samples: SurfaceSamples, epsilon: float,
                   stability: StabilityParams = StabilityParams(),
                   margin: float = HAND_OBJECT_MARGIN, tolerance: float = 0.003,
                   index: int = 0) -> ValidationResult:
    """
    그래스프 하나를 처음부터 다시 검사 (파이프라인 플래그는 보지 않음)

    - 관절값이 한계 안에 있는지
    - 핸드-핸드 / 핸드-오브젝트 충돌 (margin 초과 침투)
    - 접촉 잔차 (오브젝트 접촉점 ~ 지정 링크 표면 거리) <= tolerance
    - 실제 접촉으로 계산한 렌치 목적함수 < epsilon
    """
    result = ValidationResult(index=index, passed=False)
    try:
        q = model.check_config(grasp.q)
    except HandModelError as e:
        result.failures.append(f"joint_config: {e}")
        return result
    if np.any(q < model.lower - 1e-9) or np.any(q > model.upper + 1e-9):
        result.failures.append("joint_limits")

    report = validate_grasp_collisions(model, q, samples, grasp.pose, margin)
    result.depth = report.max_depth
    if report.object_pairs:
        result.failures.append(f"penetration: {report.max_depth:.4f} m")
    if report.hand_pairs:
        result.failures.append(f"self_collision: {report.hand_pairs}")

    points = np.vstack([grasp.contact_points, grasp.static_points])
    normals = np.vstack([grasp.contact_normals, grasp.static_normals])
    names: Sequence[str] = list(grasp.contact_links) + list(grasp.static_links)
    if len(points) == 0:
        result.failures.append("no_contacts")
        return result

    transforms = forward_kinematics(model, q)
    hand_points = np.zeros_like(points)
    residuals = np.zeros(len(points))
    try:
        for i, (p, name) in enumerate(zip(points, names)):
            residuals[i], hand_points[i] = _surface_distance(model, transforms, model.link_index(name), p)
    except HandModelError as e:
        result.failures.append(f"contact_link: {e}")
        return result
    result.residual = float(residuals.max())
    if result.residual > tolerance:
        result.failures.append(f"residual: {result.residual:.4f} m")

    # 동적 접촉의 힘 방향은 핸드 점에 가장 가까운 오브젝트 샘플 법선, 정적 접촉은 기록된 법선
    object_points = transform_points(samples.points, grasp.pose)
    object_normals = samples.normals @ grasp.pose[:3, :3].T
    _, nearest = cKDTree(object_points).query(hand_points[:len(grasp.contact_points)])
    force_normals = np.vstack([object_normals[np.atleast_1d(nearest)], grasp.static_normals])
    problem = WrenchProblem.from_contacts(hand_points, -force_normals.reshape(-1, 3),
                                          stability.torque_weight, stability.friction)
    stable, solution = is_stable(problem, epsilon, params=stability)
    result.objective = solution.objective
    if not stable:
        result.failures.append(f"unstable: {solution.objective:.4g}")

    result.passed = not result.failures
    return result


def validate_dataset(model: HandModel, grasps: Sequence, samples: SurfaceSamples, epsilon: float,
                     stability: StabilityParams = StabilityParams(),
                     margin: float = HAND_OBJECT_MARGIN,
                     tolerance: float = 0.003) -> List[ValidationResult]:
    if len(grasps) == 0:
        raise GraspError("검증할 그래스프가 없습니다 (빈 데이터셋).")
    results = [
        validate_grasp(model, grasp, samples, epsilon, stability, margin, tolerance, index=i)
        for i, grasp in enumerate(grasps)
    ]
    failed = [r for r in results if not r.passed]
    for r in failed:
        logger.warning(f"grasp {r.index} failed: {'; '.join(r.failures)}")
    logger.info(f"validated {len(results)} grasps, {len(failed)} failed")
    return results
