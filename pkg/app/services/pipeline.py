# app/services/pipeline.py
import json
import logging
import math
import multiprocessing
import os
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .collision import HAND_OBJECT_MARGIN, object_penetration, validate_grasp_collisions
from .contact_field import (
    ContactDomain,
    ContactFieldIndex,
    ContactFieldParams,
    build_contact_field,
    cache_path,
    index_key,
    load_index,
    patch_nbytes,
    query_domains,
    reverse_lookup,
    sample_hand_surface,
    save_index,
)
from .contact_optimizer import ContactSelection, OptimizerParams, optimize_contacts
from .errors import GraspError, MeshError
from .kinematics import (
    ContactTarget,
    DependencyGroups,
    HandModel,
    IkParams,
    IkResult,
    dependency_groups,
    forward_kinematics,
    load_hand,
    solve_contact_ik,
)
from .mesh_geometry import (
    Aabb,
    SurfaceSamples,
    TriMesh,
    axis_rotation,
    invert_pose,
    load_mesh,
    make_pose,
    pose_from_vector,
    pose_to_vector,
    random_rotation,
    rotation_aligning,
    sample_count,
    sample_surface,
    tangent_bases,
    transform_points,
)
from .wrench_stability import StabilityParams, WrenchProblem, is_stable

logger = logging.getLogger(__name__)

STAGE_SETUP = "setup"
STAGE_PLACEMENT = "placement_domains"
STAGE_CONTACT = "contact_optimization"
STAGE_KINEMATICS = "kinematics_optimization"
STAGE_POST = "postprocessing"
STAGES = (STAGE_SETUP, STAGE_PLACEMENT, STAGE_CONTACT, STAGE_KINEMATICS, STAGE_POST)

# 후보별 난수 스트림 구분용 (SeedSequence spawn_key 의 마지막 성분)
RNG_PLACEMENT, RNG_DOMAINS, RNG_CONTACT, RNG_LOOKUP, RNG_POST = range(1, 6)


def log_metric(stage: str, key: str, value) -> None:
    logger.info(f"stage={stage} key={key} value={value}")


def stage_rng(seed: int, candidate: int, pass_id: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(candidate, pass_id, stream))
    )


# ========= Types =========
@dataclass(frozen=True)
class PlacementSpec:
    mode: str = "canonical"
    box_center: Tuple[float, float, float] = (0.0, 0.0, 0.06)
    box_size: Tuple[float, float, float] = (0.08, 0.08, 0.08)
    static_probability: float = 0.3
    orientation: str = "uniform"

    def __post_init__(self):
        if self.mode not in ("canonical", "exhaustive"):
            raise ValueError(f"지원하지 않는 배치 모드: {self.mode}")
        if not 0.0 <= self.static_probability <= 1.0:
            raise ValueError("static_probability 는 0~1 범위여야 합니다.")
        if any(s < 0 for s in self.box_size):
            raise ValueError("canonical 박스 크기는 0 이상이어야 합니다.")
        if self.orientation != "uniform":
            raise ValueError(f"지원하지 않는 방향 샘플링: {self.orientation}")

    @property
    def canonical_box(self) -> Aabb:
        center, half = np.asarray(self.box_center), 0.5 * np.asarray(self.box_size)
        return Aabb(center - half, center + half)


@dataclass(eq=False)
class PlacementRecord:
    pose_id: int
    pose: np.ndarray
    static_points: np.ndarray
    static_normals: np.ndarray
    static_links: List[str]
    accepted: bool
    reason: str = ""


@dataclass(eq=False)
class SearchTask:
    candidate: int
    pass_id: int
    placement: PlacementRecord
    domains: List[ContactDomain]


@dataclass(eq=False)
class OptimizedCandidate:
    task: SearchTask
    selection: ContactSelection


@dataclass(eq=False)
class RealizedGrasp:
    task: SearchTask
    points: np.ndarray
    normals: np.ndarray
    links: List[int]
    q: np.ndarray
    unused_mask: np.ndarray
    residuals: np.ndarray
    ik: Optional[IkResult]
    diverged: bool = False


@dataclass(eq=False)
class Grasp:
    """오브젝트 포즈(핸드 베이스 좌표계) + 관절값 + 접촉 집합"""

    pose: np.ndarray
    q: np.ndarray
    contact_points: np.ndarray
    contact_normals: np.ndarray
    contact_links: List[str]
    static_points: np.ndarray
    static_normals: np.ndarray
    static_links: List[str]
    objective: float
    flags: Dict[str, bool]
    residual: float = 0.0
    depth: float = 0.0
    pose_id: int = -1
    pass_id: int = 0

    @property
    def valid(self) -> bool:
        return all(self.flags.values())

    def to_record(self) -> Dict:
        contacts = [
            {"p": [float(v) for v in p], "n": [float(v) for v in n], "link": link}
            for p, n, link in zip(self.contact_points, self.contact_normals, self.contact_links)
        ]
        contacts += [
            {"p": [float(v) for v in p], "n": [float(v) for v in n], "link": link, "static": True}
            for p, n, link in zip(self.static_points, self.static_normals, self.static_links)
        ]
        return {
            "pose": pose_to_vector(self.pose),
            "q": [float(v) for v in self.q],
            "contacts": contacts,
            "objective": float(self.objective),
            "flags": {k: bool(v) for k, v in self.flags.items()},
            "residual": float(self.residual),
            "depth": float(self.depth),
            "pose_id": int(self.pose_id),
            "pass": int(self.pass_id),
        }

    @classmethod
    def from_record(cls, record: Dict) -> "Grasp":
        try:
            dynamic = [c for c in record["contacts"] if not c.get("static")]
            static = [c for c in record["contacts"] if c.get("static")]
            return cls(
                pose=pose_from_vector(record["pose"]),
                q=np.asarray(record["q"], dtype=float),
                contact_points=np.array([c["p"] for c in dynamic], dtype=float).reshape(-1, 3),
                contact_normals=np.array([c["n"] for c in dynamic], dtype=float).reshape(-1, 3),
                contact_links=[c["link"] for c in dynamic],
                static_points=np.array([c["p"] for c in static], dtype=float).reshape(-1, 3),
                static_normals=np.array([c["n"] for c in static], dtype=float).reshape(-1, 3),
                static_links=[c["link"] for c in static],
                objective=float(record["objective"]),
                flags=dict(record.get("flags", {})),
                residual=float(record.get("residual", 0.0)),
                depth=float(record.get("depth", 0.0)),
                pose_id=int(record.get("pose_id", -1)),
                pass_id=int(record.get("pass", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise GraspError(f"그래스프 레코드 형식 오류: {e}") from e


@dataclass
class GraspDataset:
    grasps: List[Grasp] = field(default_factory=list)

    def __len__(self):
        return len(self.grasps)

    def records(self) -> List[Dict]:
        return [g.to_record() for g in self.grasps]

    def save(self, path: str) -> str:
        """JSON-lines (그래스프 한 줄씩)"""
        with open(path, "w", encoding="utf-8") as f:
            for record in self.records():
                f.write(json.dumps(record, ensure_ascii=False) + "\n")
        return path

    @classmethod
    def load(cls, path: str) -> "GraspDataset":
        if not os.path.isfile(path):
            raise GraspError(f"데이터셋 파일을 읽을 수 없습니다: {path}")
        grasps = []
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except ValueError as e:
                    raise GraspError(f"{path}:{line_no}: JSON 파싱 실패: {e}") from e
                grasps.append(Grasp.from_record(record))
        return cls(grasps)


@dataclass
class StageProfile:
    seconds: Dict[str, float] = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    total: float = 0.0
    valid: int = 0

    @property
    def sps(self) -> float:
        return self.valid / self.total if self.total > 0 else 0.0

    def to_dict(self) -> Dict:
        data = {stage: round(seconds, 6) for stage, seconds in self.seconds.items()}
        data.update(total=round(self.total, 6), valid=self.valid, sps=self.sps)
        return data


@dataclass
class SearchCache:
    """단계 출력 캐시: 인덱스(핸드 키), 포즈별 도메인, 포즈별 배치 판정"""

    index: Dict[str, ContactFieldIndex] = field(default_factory=dict)
    domains: Dict[int, Optional[List[ContactDomain]]] = field(default_factory=dict)
    verdicts: Dict[int, PlacementRecord] = field(default_factory=dict)


@dataclass(eq=False)
class SearchContext:
    """워커 공유 읽기 전용 상태"""

    model: HandModel
    groups: DependencyGroups
    index: ContactFieldIndex
    samples: SurfaceSamples
    query_ids: np.ndarray
    static_points: np.ndarray
    static_normals: np.ndarray
    static_links: List[str]
    static_parts: list
    placement: PlacementSpec
    optimizer: OptimizerParams
    stability: StabilityParams
    ik: IkParams
    seed: int
    k: int
    theta_hit: float
    margin: float = HAND_OBJECT_MARGIN
    contact_tolerance: float = 0.003
    finetune_iters: int = 3


# ========= Object preprocessing =========
def preprocess_object(samples: SurfaceSamples, half_width: float = 0.01,
                      depth_threshold: float = 0.005) -> Tuple[SurfaceSamples, np.ndarray]:
    """
    샘플마다 법선 방향으로 작은 프로브 박스를 놓고,
    모서리가 가장 가까운 샘플의 국소 반공간 안쪽으로 depth_threshold 이상 들어가면 제거

    Returns:
        (남은 샘플, 남은 샘플의 원래 인덱스)
    """
    if len(samples) == 0:
        raise MeshError("전처리할 오브젝트 샘플이 없습니다.")
    if half_width <= 0:
        return samples, np.arange(len(samples))

    tx, ty = tangent_bases(samples.normals)
    center = samples.points + half_width * samples.normals
    signs = np.array([[a, b, c] for a in (-1, 1) for b in (-1, 1) for c in (-1, 1)], dtype=float)
    corners = (
        center[:, None, :]
        + half_width * signs[None, :, 0:1] * samples.normals[:, None, :]
        + half_width * signs[None, :, 1:2] * tx[:, None, :]
        + half_width * signs[None, :, 2:3] * ty[:, None, :]
    )
    flat = corners.reshape(-1, 3)
    _, nearest = cKDTree(samples.points).query(flat)
    depth = -np.einsum("ij,ij->i", flat - samples.points[nearest], samples.normals[nearest])
    keep = np.flatnonzero(~np.any(depth.reshape(len(samples), 8) > depth_threshold, axis=1))

    if len(keep) == 0:
        raise MeshError("전처리 후 남은 오브젝트 샘플이 없습니다 (퇴화 오브젝트).")
    return samples.subset(keep), keep


# ========= Placement =========
def place_object(spec: PlacementSpec, samples: SurfaceSamples, index: Optional[ContactFieldIndex],
                 static_surface: Tuple[np.ndarray, np.ndarray, List[str]], static_parts: list,
                 batch: int, seed: int, margin: float = HAND_OBJECT_MARGIN,
                 first_id: int = 0) -> List[PlacementRecord]:
    """batch 개의 오브젝트 포즈 후보 생성 + 정적 링크 침투 검사"""
    if batch < 1:
        raise ValueError("batch 는 1 이상이어야 합니다.")
    if spec.mode == "exhaustive" and (index is None or len(index.entry_code) == 0):
        raise GraspError("exhaustive 배치에는 접촉장 인덱스가 필요합니다.")
    return [
        _place_one(spec, samples, index, static_surface, static_parts, margin,
                   pose_id, stage_rng(seed, pose_id, 0, RNG_PLACEMENT))
        for pose_id in range(first_id, first_id + batch)
    ]


def _place_one(spec, samples, index, static_surface, static_parts, margin, pose_id, rng):
    if spec.mode == "canonical":
        box = spec.canonical_box
        rot = random_rotation(rng)
        center = box.lo + rng.random(3) * box.extent
        trans = center - rot @ samples.points.mean(axis=0)
    else:
        # 접촉장의 임의 대표 벡터 위치에 임의 오브젝트 샘플을 법선 반대로 정렬
        entry = int(rng.integers(len(index.entry_code)))
        position = index.entry_position[entry]
        direction = index.entry_direction[entry]
        j = int(rng.integers(len(samples)))
        roll = axis_rotation(direction, rng.uniform(0.0, 2.0 * math.pi))
        rot = roll @ rotation_aligning(samples.normals[j], -direction)
        trans = position - rot @ samples.points[j]

    static_points, static_normals, static_links = np.zeros((0, 3)), np.zeros((0, 3)), []
    points, normals, links = static_surface
    if len(points) and rng.random() < spec.static_probability:
        s = int(rng.integers(len(points)))
        j = int(np.argmin((samples.normals @ rot.T) @ normals[s]))
        trans = points[s] - rot @ samples.points[j]
        static_points = points[s][None, :].copy()
        static_normals = (rot @ samples.normals[j])[None, :]
        static_links = [links[s]]

    pose = make_pose(rot, trans)
    posed = transform_points(samples.points, pose)
    for part, part_pose in static_parts:
        _, offending = object_penetration(posed, part, part_pose, margin)
        if len(offending):
            return PlacementRecord(pose_id, pose, static_points, static_normals, static_links,
                                   accepted=False, reason="penetration")
    return PlacementRecord(pose_id, pose, static_points, static_normals, static_links, accepted=True)


# ========= Domains =========
def generate_domains(index: ContactFieldIndex, samples: SurfaceSamples, pose: np.ndarray,
                     groups: DependencyGroups, k: int, theta_hit: float, rng,
                     sample_ids: Optional[np.ndarray] = None) -> Optional[List[ContactDomain]]:
    """그룹별 병합 도메인 중 비어있지 않은 k 개를 무작위 선택 (부족하면 None)"""
    query_samples = samples if sample_ids is None else samples.subset(sample_ids)
    domains = query_domains(index, query_samples, pose, theta_hit, groups, sample_ids)
    nonempty = [d for d in domains if len(d)]
    if k < 1 or len(nonempty) < k:
        return None
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    picks = rng.choice(len(nonempty), size=k, replace=False)
    return [nonempty[i] for i in picks]


# ========= Kinematics =========
def closest_on_link(model: HandModel, link: int, transform: np.ndarray, point: np.ndarray):
    """월드 점에서 링크 볼록 파트 표면까지의 최근접점 (링크 좌표계 점, 외향 법선, 거리)"""
    local = transform_points(point[None, :], invert_pose(transform))[0]
    best = None
    for part in model.links[link].convex_parts:
        candidate = part.closest_surface_point(local)
        if best is None or candidate[2] < best[2]:
            best = candidate
    return best


def realize_grasp(model: HandModel, q0, points: np.ndarray, normals: np.ndarray,
                  lookups: Sequence[Tuple[int, np.ndarray, np.ndarray]],
                  ik: IkParams = IkParams(), finetune_iters: int = 3):
    """
    Phase I: 역조회된 핸드 점으로 DLS IK.
    Phase II: 현재 q 에서 오브젝트 접촉점을 링크 표면에 재투영해 목표를 갱신하고 다시 DLS.
    잔차가 1e-6 보다 크게 늘어나는 라운드는 되돌린다.

    Returns:
        (q, 위치 잔차, IkResult) / 발산 시 (None, None, None)
    """
    targets = [
        ContactTarget(point=p, normal=-n, link=link, local_point=lp, local_normal=ln)
        for p, n, (link, lp, ln) in zip(points, normals, lookups)
    ]
    result = solve_contact_ik(model, q0, targets, ik)
    if not np.all(np.isfinite(result.q)):
        return None, None, None

    for _ in range(finetune_iters):
        transforms = forward_kinematics(model, result.q)
        refined = []
        for target in targets:
            closest = closest_on_link(model, target.link, transforms[target.link], target.point)
            if closest is None:
                refined.append(target)
                continue
            local_point, local_normal, _ = closest
            refined.append(ContactTarget(target.point, target.normal, target.link,
                                         local_point, local_normal))
        candidate = solve_contact_ik(model, result.q, refined, ik)
        if not np.all(np.isfinite(candidate.q)):
            break
        if candidate.position_residuals.max(initial=0.0) > result.position_residuals.max(initial=0.0) + 1e-6:
            break
        targets, result = refined, candidate

    return result.q, result.position_residuals, result


# ========= Postprocessing =========
def realized_contacts(model: HandModel, q, points: np.ndarray, links: Sequence[int],
                      object_points: np.ndarray, object_normals: np.ndarray,
                      object_tree: Optional[cKDTree] = None):
    """
    최종 q 에서의 실제 접촉: 오브젝트 접촉점에 가장 가까운 링크 표면점과,
    그 점에 가장 가까운 오브젝트 샘플의 외향 법선

    Returns:
        (핸드 점, 오브젝트 외향 법선, 잔차)
    """
    transforms = forward_kinematics(model, q)
    hand_points = np.zeros((len(points), 3))
    residuals = np.zeros(len(points))
    for i, (p, link) in enumerate(zip(points, links)):
        closest = closest_on_link(model, link, transforms[link], p)
        if closest is None:
            hand_points[i], residuals[i] = p, math.inf
            continue
        local_point, _, dist = closest
        hand_points[i] = transform_points(local_point[None, :], transforms[link])[0]
        residuals[i] = dist
    tree = object_tree if object_tree is not None else cKDTree(object_points)
    _, nearest = tree.query(hand_points)
    return hand_points, object_normals[np.atleast_1d(nearest)], residuals


def postprocess(model: HandModel, candidates: Sequence[RealizedGrasp], samples: SurfaceSamples,
                epsilon: float, seed: int, stability: StabilityParams = StabilityParams(),
                margin: float = HAND_OBJECT_MARGIN, contact_tolerance: float = 0.003):
    """
    미사용 관절 무작위화 -> 충돌 검사 -> 실제 접촉 기반 안정성 재평가 -> 잔차 검사

    Returns:
        (유효 그래스프 목록, 거절 사유 Counter)
    """
    grasps, reasons = [], Counter()
    for candidate in candidates:
        rng = stage_rng(seed, candidate.task.candidate, candidate.task.pass_id, RNG_POST)
        grasp, reason = _postprocess_one(model, candidate, samples, epsilon, rng, stability,
                                         margin, contact_tolerance)
        if grasp is not None:
            grasps.append(grasp)
        else:
            reasons[reason] += 1
    return grasps, reasons


def _postprocess_one(model, candidate: RealizedGrasp, samples, epsilon, rng, stability,
                     margin, contact_tolerance):
    if candidate.diverged:
        return None, "ik_diverged"

    placement = candidate.task.placement
    pose = pose_from_vector(pose_to_vector(placement.pose))
    q = candidate.q.copy()
    unused = candidate.unused_mask
    q[unused] = model.lower[unused] + rng.random(int(unused.sum())) * (model.upper - model.lower)[unused]

    report = validate_grasp_collisions(model, q, samples, pose, margin)

    object_points = transform_points(samples.points, pose)
    object_normals = samples.normals @ pose[:3, :3].T
    hand_points, force_normals, residuals = realized_contacts(
        model, q, candidate.points, candidate.links, object_points, object_normals)

    all_points = np.vstack([hand_points, placement.static_points])
    all_normals = np.vstack([force_normals, placement.static_normals])
    problem = WrenchProblem.from_contacts(all_points, -all_normals,
                                          stability.torque_weight, stability.friction)
    stable, solution = is_stable(problem, epsilon, params=stability)

    residual = float(residuals.max(initial=0.0))
    flags = {
        "penetration_free": report.clean,
        "stable": bool(stable),
        "ik_converged": residual <= contact_tolerance,
    }
    grasp = Grasp(
        pose=pose,
        q=q,
        contact_points=candidate.points,
        contact_normals=candidate.normals,
        contact_links=[model.links[l].name for l in candidate.links],
        static_points=placement.static_points,
        static_normals=placement.static_normals,
        static_links=list(placement.static_links),
        objective=solution.objective,
        flags=flags,
        residual=residual,
        depth=report.max_depth,
        pose_id=placement.pose_id,
        pass_id=candidate.task.pass_id,
    )
    if not report.clean:
        return None, "collision"
    if not stable:
        return None, "unstable"
    if not flags["ik_converged"]:
        return None, "residual"
    return grasp, ""


# ========= Worker tasks =========
_WORKER: Dict[str, SearchContext] = {}


def _init_worker(context: SearchContext) -> None:
    _WORKER["context"] = context


def _optimize_task(task: SearchTask) -> OptimizedCandidate:
    ctx = _WORKER["context"]
    placement = task.placement
    static = (placement.static_points, placement.static_normals) if len(placement.static_points) else None
    selection = optimize_contacts(task.domains, ctx.optimizer, static,
                                  stage_rng(ctx.seed, task.candidate, task.pass_id, RNG_CONTACT))
    return OptimizedCandidate(task, selection)


def _realize_task(optimized: OptimizedCandidate) -> RealizedGrasp:
    ctx = _WORKER["context"]
    task, selection = optimized.task, optimized.selection
    rng = stage_rng(ctx.seed, task.candidate, task.pass_id, RNG_LOOKUP)
    lookups = [
        reverse_lookup(ctx.index, domain, int(element), rng)
        for domain, element in zip(task.domains, selection.element_ids)
    ]
    links = [link for link, _, _ in lookups]
    q, residuals, result = realize_grasp(ctx.model, ctx.model.rest_pose(), selection.points,
                                         selection.normals, lookups, ctx.ik, ctx.finetune_iters)
    if q is None:
        return RealizedGrasp(task, selection.points, selection.normals, links,
                             ctx.model.rest_pose(), np.zeros(ctx.model.dof, dtype=bool),
                             np.full(len(links), math.inf), None, diverged=True)
    return RealizedGrasp(task, selection.points, selection.normals, links, q,
                         result.unused_mask, residuals, result)


def _postprocess_task(realized: RealizedGrasp):
    ctx = _WORKER["context"]
    rng = stage_rng(ctx.seed, realized.task.candidate, realized.task.pass_id, RNG_POST)
    return _postprocess_one(ctx.model, realized, ctx.samples, ctx.stability.epsilon, rng,
                            ctx.stability, ctx.margin, ctx.contact_tolerance)


# ========= Batch orchestration =========
@contextmanager
def _timed(profile: StageProfile, stage: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        profile.seconds[stage] += time.perf_counter() - start


def _static_surface(model: HandModel, groups: DependencyGroups, density: float, seed: int,
                    links: Optional[Sequence[str]]):
    static = [name for name in groups.static if links is None or name in links]
    transforms = forward_kinematics(model, model.rest_pose())
    points, normals, names = [], [], []
    for link, samples in sample_hand_surface(model, density, seed, static).items():
        points.append(transform_points(samples.points, transforms[link]))
        normals.append(samples.normals @ transforms[link][:3, :3].T)
        names += [model.links[link].name] * len(samples)
    if not points:
        return np.zeros((0, 3)), np.zeros((0, 3)), []
    return np.vstack(points), np.vstack(normals), names


def _region_ids(samples: SurfaceSamples, region_min, region_max) -> np.ndarray:
    if region_min is None or region_max is None:
        return np.arange(len(samples))
    inside = Aabb(np.asarray(region_min, dtype=float), np.asarray(region_max, dtype=float)).contains(samples.points)
    return np.flatnonzero(inside)


def load_object_samples(config) -> Tuple[TriMesh, SurfaceSamples]:
    """오브젝트 메쉬 로드 + 밀도 기반 표면 샘플링 (시드 고정)"""
    mesh = load_mesh(config.object, scale=config.object_scale)
    return mesh, sample_surface(mesh, sample_count(mesh, config.object_density), config.seed)


def prepare(config, cache: Optional[SearchCache] = None):
    """
    핸드/오브젝트 로드, 오브젝트 전처리, 접촉장 인덱스 준비

    Returns:
        (SearchContext, load report dict, 오브젝트 TriMesh)
    """
    model = load_hand(config.hand)
    groups = dependency_groups(model)
    mesh, samples = load_object_samples(config)
    _, kept = preprocess_object(samples, config.probe_half_width, config.probe_depth)
    query_ids = np.intersect1d(
        kept, _region_ids(samples, config.object_region_min, config.object_region_max))
    if len(query_ids) == 0:
        raise MeshError("접촉 후보로 쓸 오브젝트 샘플이 없습니다 (object_region 확인).")
    log_metric(STAGE_SETUP, "object_samples", len(samples))
    log_metric(STAGE_SETUP, "object_samples_kept", len(kept))

    field_params = config.contact_field_params()
    links = list(config.contact_links) if config.contact_links else None
    index = get_index(model, field_params, config.seed, links, config, cache)
    nbytes = patch_nbytes(index)

    transforms = forward_kinematics(model, model.rest_pose())
    static_parts = [
        (part, transforms[model.link_index(name)])
        for name in groups.static
        for part in model.links[model.link_index(name)].convex_parts
    ]
    static_points, static_normals, static_links = _static_surface(
        model, groups, field_params.hand_density, config.seed, links)

    context = SearchContext(
        model=model,
        groups=groups,
        index=index,
        samples=samples,
        query_ids=query_ids,
        static_points=static_points,
        static_normals=static_normals,
        static_links=static_links,
        static_parts=static_parts,
        placement=config.placement_spec(),
        optimizer=config.optimizer_params(),
        stability=config.stability_params(),
        ik=config.ik_params(),
        seed=config.seed,
        k=config.k,
        theta_hit=field_params.theta_hit,
        margin=config.margin,
        contact_tolerance=config.contact_tolerance,
        finetune_iters=config.finetune_iters,
    )
    report = {
        "mesh": {"path": config.object, "faces": int(len(mesh.triangles)), "dropped": int(mesh.dropped)},
        "object_samples": {"sampled": len(samples), "kept": int(len(kept)),
                           "removed": len(samples) - int(len(kept)), "queryable": int(len(query_ids))},
        "hand": {
            "path": config.hand,
            "links": len(model.links),
            "joints": model.dof,
            "groups": len(groups.groups),
            "static_links": list(groups.static),
        },
        "index": {
            "patches": index.n_patches,
            "boxes": index.n_boxes,
            "entries": int(len(index.entry_code)),
            "max_patch_bytes": int(nbytes.max(initial=0)),
            "total_bytes": int(nbytes.sum()),
        },
    }
    return context, report, mesh


def get_index(model: HandModel, params: ContactFieldParams, seed: int,
              links: Optional[List[str]], config, cache: Optional[SearchCache]) -> ContactFieldIndex:
    """메모리 캐시 -> 파일 캐시 -> 새로 생성 순으로 인덱스 확보"""
    key = index_key(model.source_hash, params, seed, links)
    if cache is not None and key in cache.index:
        return cache.index[key]

    path = cache_path(config.cache_dir, key) if config.cache and config.cache_dir else None
    index = load_index(path, key) if path else None
    if index is None:
        index = build_contact_field(model, params, seed, links)
        if path:
            save_index(index, path)
    else:
        logger.info(f"contact field index loaded from cache: {path}")

    if cache is not None:
        cache.index[key] = index
    return index


def _build_tasks(context: SearchContext, batch: int, pass_id: int,
                 cache: Optional[SearchCache]) -> Tuple[List[SearchTask], Counter]:
    reasons = Counter()
    cached = cache is not None and all(i in cache.verdicts for i in range(batch))
    if cached:
        placements = [cache.verdicts[i] for i in range(batch)]
    else:
        placements = place_object(
            context.placement, context.samples, context.index,
            (context.static_points, context.static_normals, context.static_links),
            context.static_parts, batch, context.seed, context.margin)

    tasks = []
    for record in placements:
        if cache is not None:
            cache.verdicts[record.pose_id] = record
        if not record.accepted:
            reasons["placement_" + record.reason] += 1
            continue
        if cache is not None and record.pose_id in cache.domains:
            domains = cache.domains[record.pose_id]
        else:
            domains = generate_domains(
                context.index, context.samples, record.pose, context.groups, context.k,
                context.theta_hit, stage_rng(context.seed, record.pose_id, 0, RNG_DOMAINS),
                context.query_ids)
            if cache is not None:
                cache.domains[record.pose_id] = domains
        if domains is None:
            reasons["no_domains"] += 1
            continue
        tasks.append(SearchTask(record.pose_id, pass_id, record, domains))
    return tasks, reasons


def run_batch(config, cache: Optional[SearchCache] = None):
    """
    전체 탐색 실행 (배치 -> 도메인 -> 접촉 최적화 -> IK -> 후처리)

    Returns:
        (GraspDataset, StageProfile, load report dict, 거절 사유 Counter)
    """
    profile = StageProfile()
    reasons = Counter()
    start = time.perf_counter()
    pool = None

    try:
        with _timed(profile, STAGE_SETUP):
            context, report, _ = prepare(config, cache)
            if config.workers > 1:
                pool = ProcessPoolExecutor(
                    max_workers=config.workers,
                    mp_context=multiprocessing.get_context("spawn"),
                    initializer=_init_worker,
                    initargs=(context,),
                )
                mapper = pool.map
            else:
                _init_worker(context)
                mapper = map

        dataset = GraspDataset()
        for pass_id in range(config.passes):
            with _timed(profile, STAGE_PLACEMENT):
                tasks, pass_reasons = _build_tasks(context, config.batch, pass_id, cache)
                reasons.update(pass_reasons)
            log_metric(STAGE_PLACEMENT, f"pass{pass_id}_tasks", len(tasks))

            with _timed(profile, STAGE_CONTACT):
                optimized = list(mapper(_optimize_task, tasks))
            with _timed(profile, STAGE_KINEMATICS):
                realized = list(mapper(_realize_task, optimized))
            with _timed(profile, STAGE_POST):
                outcomes = list(mapper(_postprocess_task, realized))

            for grasp, reason in outcomes:
                if grasp is not None:
                    dataset.grasps.append(grasp)
                else:
                    reasons[reason] += 1
            log_metric(STAGE_POST, f"pass{pass_id}_valid", sum(g is not None for g, _ in outcomes))
    finally:
        if pool is not None:
            pool.shutdown()

    profile.total = time.perf_counter() - start
    profile.valid = len(dataset)
    for stage, seconds in profile.seconds.items():
        log_metric(stage, "seconds", f"{seconds:.4f}")
    log_metric("run", "valid", profile.valid)
    log_metric("run", "sps", f"{profile.sps:.3f}")
    report["placements"] = {"batch": config.batch, "passes": config.passes}
    report["rejections"] = dict(reasons)
    return dataset, profile, report, reasons


class GraspSynthesizer:
    """그래스프 합성 핵심 엔진"""

    def __init__(self, config, cache: Optional[SearchCache] = None):
        self.config = config
        self.cache = cache if cache is not None else (SearchCache() if config.cache else None)

    def synthesize(self) -> Dict:
        """
        설정에 따라 한 번의 배치 탐색을 실행

        Returns:
            {
                "metadata": {...},
                "summary": {...},
                "profile": {...},
                "load_report": {...},
                "dataset": GraspDataset
            }
        """
        dataset, profile, report, reasons = run_batch(self.config, self.cache)
        return {
            "metadata": {
                "hand_file": os.path.basename(self.config.hand),
                "object_file": os.path.basename(self.config.object),
                "seed": self.config.seed,
                "batch": self.config.batch,
                "passes": self.config.passes,
                "placement": self.config.placement,
                "synthesized_at": datetime.now().isoformat(),
            },
            "summary": self._generate_summary(dataset, reasons),
            "profile": profile.to_dict(),
            "load_report": report,
            "dataset": dataset,
        }

    def _generate_summary(self, dataset: GraspDataset, reasons: Counter) -> Dict:
        """결과 요약 생성"""
        attempted = self.config.batch * self.config.passes
        objectives = [g.objective for g in dataset.grasps]
        return {
            "valid_grasps": len(dataset),
            "attempted": attempted,
            "acceptance_rate": len(dataset) / attempted if attempted else 0.0,
            "rejections": dict(sorted(reasons.items())),
            "mean_objective": float(np.mean(objectives)) if objectives else None,
            "max_residual": max((g.residual for g in dataset.grasps), default=None),
        }

    def save_dataset(self, results: Dict, output_path: str) -> str:
        return results["dataset"].save(output_path)

    def save_json_results(self, data: Dict, output_path: str) -> str:
        """JSON 형식으로 저장 (profile / load report)"""
        with open(output_path, "w", encoding="utf-8") as f:
            json.dump(data, f, ensure_ascii=False, indent=2)
        return output_path

    def save_html_report(self, results: Dict, output_path: str) -> str:
        """HTML 리포트 생성"""
        from .report_generator import HTMLReportGenerator
        generator = HTMLReportGenerator()
        html = generator.generate(results)
        with open(output_path, "w", encoding="utf-8") as f:
            f.write(html)
        return output_path
