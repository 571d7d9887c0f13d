# app/services/contact_optimizer.py
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .contact_field import ContactDomain
from .errors import ContactFieldError
from .mesh_geometry import tangent_basis
from .wrench_stability import (
    StabilityParams,
    WrenchSolution,
    evaluate_contacts,
    wrench_objective,
    WrenchProblem,
)

logger = logging.getLogger(__name__)

__all__ = [
    "OptimizerParams",
    "OptimizerState",
    "ContactSelection",
    "tangent_basis",
    "project_to_domain",
    "optimize_contacts",
]

TIE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class OptimizerParams:
    outer: int = 8
    inner: int = 32
    sigma: float = 0.01
    torque_weight: float = 10.0
    friction: float = 0.0
    epsilon: float = 0.05
    cold_iters: int = 64
    warm_iters: int = 8

    def stability(self) -> StabilityParams:
        return StabilityParams(
            torque_weight=self.torque_weight,
            friction=self.friction,
            epsilon=self.epsilon,
            cold_iters=self.cold_iters,
            warm_iters=self.warm_iters,
        )


@dataclass
class OptimizerState:
    element_ids: List[int]
    objective: float
    solution: WrenchSolution
    rng: np.random.Generator
    outer: int = 0
    slot: int = 0
    trace: List[float] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class ContactSelection:
    """
    슬롯별로 선택된 도메인 원소. points/normals 는 핸드 좌표계,
    normals 는 오브젝트 외향 법선 (힘 방향은 그 반대)
    """

    element_ids: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    objective: float
    solution: WrenchSolution
    trace: List[float]


# ========= Projection =========
def _project_many(points: np.ndarray, domain: ContactDomain) -> np.ndarray:
    if len(domain) == 0:
        raise ContactFieldError("빈 도메인으로는 투영할 수 없습니다.")
    points = np.atleast_2d(points)
    k = min(8, len(domain))
    dist, idx = domain.tree.query(points, k=k)
    dist = dist.reshape(len(points), k)
    idx = idx.reshape(len(points), k)

    # 최소 거리 동률은 낮은 원소 id 우선
    nearest = dist[:, :1]
    tied = dist <= nearest * (1.0 + TIE_TOLERANCE) + 1e-15
    return np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1).astype(np.int64)


def project_to_domain(point, domain: ContactDomain) -> int:
    """후보점에 유클리드 거리로 가장 가까운 도메인 원소 id"""
    return int(_project_many(np.asarray(point, dtype=float)[None, :], domain)[0])


# ========= Blockwise zeroth-order search =========
def _static_arrays(static_contacts) -> Tuple[np.ndarray, np.ndarray]:
    if not static_contacts:
        return np.zeros((0, 3)), np.zeros((0, 3))
    points, normals = static_contacts
    return np.atleast_2d(points).reshape(-1, 3), np.atleast_2d(normals).reshape(-1, 3)


def optimize_contacts(domains: Sequence[ContactDomain], params: OptimizerParams = OptimizerParams(),
                      static_contacts=None, seed=0) -> ContactSelection:
    """
    블록 단위 0차 접촉점 최적화

    - 각 슬롯을 도메인에서 균등 무작위로 초기화
    - outer 라운드마다 슬롯별로 접평면 가우시안 변이 inner 개를 도메인에 투영해 평가
    - 현 해(incumbent)를 포함한 argmin 으로 교체. 동률이면 변이 쪽으로 이동 (평탄 구간 탐색, 단조 비증가 유지)
    """
    if len(domains) == 0:
        raise ValueError("접촉 도메인이 최소 하나 필요합니다.")
    for domain in domains:
        if len(domain) == 0:
            raise ContactFieldError(f"빈 접촉 도메인: group={domain.group}")

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    stability = params.stability()
    static_p, static_n = _static_arrays(static_contacts)
    k = len(domains)

    def assemble(ids: Sequence[int]):
        points = np.vstack([[d.points[i] for d, i in zip(domains, ids)], static_p])
        normals = np.vstack([[d.normals[i] for d, i in zip(domains, ids)], static_n])
        return points, normals

    ids = [int(rng.integers(len(d))) for d in domains]
    points, normals = assemble(ids)
    first = evaluate_contacts(points[None], -normals[None], stability)
    state = OptimizerState(element_ids=ids, objective=float(first.objectives[0]),
                           solution=first.solution(0), rng=rng)
    state.trace.append(state.objective)

    for outer in range(params.outer):
        state.outer = outer
        points, normals = assemble(state.element_ids)
        verified = wrench_objective(
            WrenchProblem.from_contacts(points, -normals, params.torque_weight, params.friction),
            state.solution,
        )
        if abs(verified - state.objective) > 1e-9 * (1.0 + state.objective):
            logger.warning(f"objective drift: stored={state.objective} verified={verified}")
            state.objective = float(verified)

        for slot in range(k if params.inner > 0 else 0):
            state.slot = slot
            domain = domains[slot]
            current = state.element_ids[slot]
            x, y = tangent_basis(domain.normals[current])
            coeffs = rng.normal(0.0, params.sigma, size=(params.inner, 2))
            candidates = domain.points[current] + coeffs[:, :1] * x + coeffs[:, 1:] * y
            projected = _project_many(candidates, domain)

            batch_p = np.repeat(points[None], len(projected), axis=0)
            batch_n = np.repeat(normals[None], len(projected), axis=0)
            batch_p[:, slot] = domain.points[projected]
            batch_n[:, slot] = domain.normals[projected]
            result = evaluate_contacts(batch_p, -batch_n, stability, warm=state.solution)

            best = int(np.argmin(result.objectives))
            if result.objectives[best] <= state.objective:
                state.element_ids[slot] = int(projected[best])
                state.objective = float(result.objectives[best])
                state.solution = result.solution(best)
                points, normals = batch_p[best], batch_n[best]
            state.trace.append(state.objective)

    points, normals = assemble(state.element_ids)
    return ContactSelection(
        element_ids=np.array(state.element_ids, dtype=np.int64),
        points=points[:k],
        normals=normals[:k],
        objective=state.objective,
        solution=state.solution,
        trace=state.trace,
    )
