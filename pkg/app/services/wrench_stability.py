# app/services/wrench_stability.py
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .mesh_geometry import tangent_bases

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StabilityParams:
    torque_weight: float = 10.0
    friction: float = 0.0
    epsilon: float = 0.05
    step: float = 0.1
    cold_iters: int = 64
    warm_iters: int = 8
    max_halvings: int = 20


# ========= Types =========
@dataclass(frozen=True, eq=False)
class WrenchProblem:
    """접촉점 p_i, 내향 힘 방향 n_i, 접평면 기저 (x_i, y_i), 토크 가중치, 마찰 계수"""

    points: np.ndarray
    normals: np.ndarray
    tangent_x: np.ndarray
    tangent_y: np.ndarray
    torque_weight: float = 10.0
    friction: float = 0.0

    @classmethod
    def from_contacts(cls, points, normals, torque_weight: float = 10.0,
                      friction: float = 0.0) -> "WrenchProblem":
        points = np.atleast_2d(np.asarray(points, dtype=float))
        normals = np.atleast_2d(np.asarray(normals, dtype=float))
        if len(points) == 0:
            raise ValueError("접촉점이 최소 하나 필요합니다.")
        if points.shape != normals.shape:
            raise ValueError("접촉점과 법선 개수가 다릅니다.")
        if torque_weight < 0 or friction < 0:
            raise ValueError("토크 가중치와 마찰 계수는 0 이상이어야 합니다.")
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
        tx, ty = tangent_bases(normals)
        return cls(points, normals, tx, ty, float(torque_weight), float(friction))

    @property
    def size(self) -> int:
        return len(self.points)

    def quadratic(self) -> np.ndarray:
        """z = [alpha, beta_x, beta_y] 에 대한 목적함수 행렬 Q (3k x 3k)"""
        return _quadratics(self.points[None], self.normals[None], self.tangent_x[None],
                           self.tangent_y[None], self.torque_weight)[0]


@dataclass(frozen=True, eq=False)
class WrenchSolution:
    alpha: np.ndarray
    beta_x: np.ndarray
    beta_y: np.ndarray
    anchor: int
    objective: float

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta_x, self.beta_y])


@dataclass(frozen=True, eq=False)
class WrenchBatch:
    """같은 접촉 개수의 문제 묶음에 대한 해 (행 단위)"""

    vectors: np.ndarray
    anchors: np.ndarray
    objectives: np.ndarray
    size: int

    def solution(self, i: int) -> WrenchSolution:
        k, z = self.size, self.vectors[i]
        return WrenchSolution(
            alpha=z[:k].copy(),
            beta_x=z[k:2 * k].copy(),
            beta_y=z[2 * k:].copy(),
            anchor=int(self.anchors[i]),
            objective=float(self.objectives[i]),
        )


def wrench_objective(problem: WrenchProblem, solution: WrenchSolution) -> float:
    """||sum f_i||^2 + lambda * ||sum p_i x f_i||^2"""
    forces = (
        solution.alpha[:, None] * problem.normals
        + solution.beta_x[:, None] * problem.tangent_x
        + solution.beta_y[:, None] * problem.tangent_y
    )
    force = forces.sum(axis=0)
    torque = np.cross(problem.points, forces).sum(axis=0)
    return float(force @ force + problem.torque_weight * (torque @ torque))


# ========= Quadratic forms =========
def _quadratics(points, normals, tangent_x, tangent_y, torque_weight: float) -> np.ndarray:
    directions = np.concatenate([normals, tangent_x, tangent_y], axis=1)
    levers = np.concatenate([points, points, points], axis=1)
    torques = np.cross(levers, directions)
    wrench = np.concatenate([directions, np.sqrt(torque_weight) * torques], axis=2)
    return np.einsum("bik,bjk->bij", wrench, wrench)


def batch_quadratics(points: np.ndarray, normals: np.ndarray, torque_weight: float) -> np.ndarray:
    """(B, k, 3) 접촉 묶음 -> (B, 3k, 3k) 목적함수 행렬"""
    points = np.asarray(points, dtype=float)
    normals = np.asarray(normals, dtype=float)
    normals = normals / np.linalg.norm(normals, axis=2, keepdims=True)
    tx, ty = tangent_bases(normals.reshape(-1, 3))
    return _quadratics(points, normals, tx.reshape(normals.shape), ty.reshape(normals.shape),
                       torque_weight)


# ========= Projected gradient =========
def _project_cone(alpha: np.ndarray, bx: np.ndarray, by: np.ndarray, friction: float):
    """(alpha, beta) 의 2차 원뿔 ||beta|| <= mu * alpha 위로의 유클리드 투영"""
    radius = np.hypot(bx, by)
    inside = radius <= friction * alpha
    below = friction * radius <= -alpha
    edge = (alpha + friction * radius) / (1.0 + friction * friction)
    ratio = np.divide(friction * edge, radius, out=np.zeros_like(radius), where=radius > 0)
    alpha_new = np.where(inside, alpha, np.where(below, 0.0, edge))
    scale = np.where(inside, 1.0, np.where(below, 0.0, ratio))
    return alpha_new, bx * scale, by * scale


def _project(z: np.ndarray, k: int, anchor: int, friction: float) -> np.ndarray:
    """
    앵커 alpha = 1 고정, 나머지는 alpha >= 0 (무마찰) 또는 마찰 원뿔로 투영.
    앵커의 beta 는 반경 mu 원판으로 축소.
    """
    z = z.copy()
    if z.shape[1] == k:
        z[:, :k] = np.maximum(z[:, :k], 0.0)
        z[:, anchor] = 1.0
        return z

    bx, by = z[:, k:2 * k], z[:, 2 * k:]
    anchor_bx, anchor_by = bx[:, anchor].copy(), by[:, anchor].copy()
    alpha, bx, by = _project_cone(z[:, :k], bx, by, friction)

    radius = np.hypot(anchor_bx, anchor_by)
    shrink = np.divide(friction, radius, out=np.ones_like(radius), where=radius > friction)
    alpha[:, anchor] = 1.0
    bx[:, anchor] = anchor_bx * shrink
    by[:, anchor] = anchor_by * shrink

    z[:, :k], z[:, k:2 * k], z[:, 2 * k:] = alpha, bx, by
    return z


def _quadform(quad: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.einsum("bi,bij,bj->b", z, quad, z)


def _descend(quad: np.ndarray, z0: np.ndarray, k: int, anchor: int, friction: float,
             iters: int, step: float, max_halvings: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    앵커 고정 부분문제 묶음의 투영 경사하강.
    첫 스텝은 step, 이후 스펙트럴(BB) 스텝. 목적함수가 증가하면 스텝을 절반으로 (단조 감소).
    """
    z = _project(z0, k, anchor, friction)
    grad = 2.0 * np.einsum("bij,bj->bi", quad, z)
    value = _quadform(quad, z)
    t = np.full(len(z), step)
    active = np.ones(len(z), dtype=bool)

    for _ in range(iters):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        z_new = z[idx].copy()
        value_new = value[idx].copy()
        accepted = np.zeros(len(idx), dtype=bool)
        trial = t[idx].copy()

        for _halving in range(max_halvings + 1):
            pending = np.flatnonzero(~accepted)
            if len(pending) == 0:
                break
            rows = idx[pending]
            candidate = _project(z[rows] - trial[pending, None] * grad[rows], k, anchor, friction)
            candidate_value = _quadform(quad[rows], candidate)
            good = candidate_value <= value[rows]
            z_new[pending[good]] = candidate[good]
            value_new[pending[good]] = candidate_value[good]
            accepted[pending[good]] = True
            trial[pending[~good]] *= 0.5

        active[idx[~accepted]] = False
        rows = idx[accepted]
        if len(rows) == 0:
            break

        s = z_new[accepted] - z[rows]
        z[rows] = z_new[accepted]
        value[rows] = value_new[accepted]
        grad[rows] = 2.0 * np.einsum("bij,bj->bi", quad[rows], z[rows])

        ss = np.einsum("bi,bi->b", s, s)
        sy = 2.0 * _quadform(quad[rows], s)
        t[rows] = np.where(sy > 1e-16, ss / np.where(sy > 1e-16, sy, 1.0), step)
        active[rows[ss < 1e-30]] = False

    return z, value


def _start_vectors(batch: int, k: int, size: int, anchor: int,
                   warm: Optional[WrenchSolution]) -> Tuple[np.ndarray, bool]:
    z = np.zeros((batch, size))
    if warm is not None and len(warm.alpha) == k and warm.alpha[anchor] > 1e-9:
        pivot = warm.alpha[anchor]
        z[:, :k] = warm.alpha / pivot
        if size > k:
            z[:, k:2 * k] = warm.beta_x / pivot
            z[:, 2 * k:] = warm.beta_y / pivot
        return z, True
    z[:, :k] = 1.0
    return z, False


def solve_batch(quads: np.ndarray, friction: float = 0.0, warm: Optional[WrenchSolution] = None,
                params: StabilityParams = StabilityParams()) -> WrenchBatch:
    """
    (B, 3k, 3k) 문제 묶음을 앵커별로 풀고 문제마다 최선의 앵커를 고른다.
    friction = 0 이면 alpha 블록만 푼다 (FSWO).
    마찰이 있는 콜드 스타트는 앵커별 FSWO 해에서 출발하므로 결과가 FSWO 이하이다.
    """
    quads = np.asarray(quads, dtype=float)
    batch, k = len(quads), quads.shape[1] // 3
    if k < 1:
        raise ValueError("접촉점이 최소 하나 필요합니다.")
    quad_alpha = quads[:, :k, :k]

    best_z = np.zeros((batch, 3 * k))
    best_value = np.full(batch, np.inf)
    best_anchor = np.zeros(batch, dtype=np.int64)

    for anchor in range(k):
        if friction == 0.0:
            z0, is_warm = _start_vectors(batch, k, k, anchor, warm)
            iters = params.warm_iters if is_warm else params.cold_iters
            alpha, value = _descend(quad_alpha, z0, k, anchor, 0.0, iters,
                                    params.step, params.max_halvings)
            z = np.zeros((batch, 3 * k))
            z[:, :k] = alpha
        else:
            z0, is_warm = _start_vectors(batch, k, 3 * k, anchor, warm)
            if is_warm:
                iters = params.warm_iters
            else:
                z0[:, :k], _ = _descend(quad_alpha, z0[:, :k], k, anchor, 0.0,
                                        params.cold_iters, params.step, params.max_halvings)
                iters = params.cold_iters
            z, value = _descend(quads, z0, k, anchor, friction, iters,
                                params.step, params.max_halvings)

        better = value < best_value
        best_z[better] = z[better]
        best_value[better] = value[better]
        best_anchor[better] = anchor

    return WrenchBatch(vectors=best_z, anchors=best_anchor, objectives=best_value, size=k)


def evaluate_contacts(points: np.ndarray, normals: np.ndarray, params: StabilityParams,
                      warm: Optional[WrenchSolution] = None) -> WrenchBatch:
    """(B, k, 3) 접촉점 / 내향 법선 묶음의 GSWO 값"""
    quads = batch_quadratics(points, normals, params.torque_weight)
    return solve_batch(quads, params.friction, warm, params)


def solve_fswo(problem: WrenchProblem, warm: Optional[WrenchSolution] = None,
               params: StabilityParams = StabilityParams()) -> WrenchSolution:
    """무마찰 자기균형 렌치 최적화"""
    return solve_batch(problem.quadratic()[None], 0.0, warm, params).solution(0)


def solve_gswo(problem: WrenchProblem, warm: Optional[WrenchSolution] = None,
               params: StabilityParams = StabilityParams()) -> WrenchSolution:
    """마찰원뿔 제약을 포함한 자기균형 렌치 최적화 (mu = 0 이면 FSWO 와 동일)"""
    return solve_batch(problem.quadratic()[None], problem.friction, warm, params).solution(0)


def is_stable(problem: WrenchProblem, epsilon: float, warm: Optional[WrenchSolution] = None,
              params: StabilityParams = StabilityParams()):
    """
    안정성 판정 (목적함수 < epsilon, 엄격 부등호)

    Returns:
        (bool, WrenchSolution)
    """
    if epsilon <= 0:
        raise ValueError("epsilon 은 양수여야 합니다.")
    solution = solve_gswo(problem, warm, params)
    return solution.objective < epsilon, solution
