# app/services/kinematics.py
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import trimesh
from scipy.spatial import QhullError
from scipy.spatial.transform import Rotation

from .errors import GraspError, HandModelError
from .extractors import HandExtractor, MeshExtractor
from .mesh_geometry import ConvexPart, TriMesh, load_mesh, make_pose, skew, transform_points

logger = logging.getLogger(__name__)

LinkRef = Union[int, str]


# ========= Types =========
@dataclass(frozen=True, eq=False)
class Link:
    name: str
    parent: int
    origin: np.ndarray
    joint_name: Optional[str]
    joint_type: str
    axis: np.ndarray
    joint_index: int
    convex_parts: Tuple[ConvexPart, ...] = ()
    mesh: Optional[TriMesh] = None


class HandModel:
    """핸드 모델: 링크 트리 + 구동 조인트 한계 + 링크 형상"""

    def __init__(self, name: str, links: Sequence[Link], joint_names: Sequence[str],
                 lower, upper, source_hash: str = ""):
        self.name = name
        self.links = tuple(links)
        self.joint_names = tuple(joint_names)
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.source_hash = source_hash

        self._index = {link.name: i for i, link in enumerate(self.links)}
        self.graph = nx.DiGraph()
        self.graph.add_nodes_from(range(len(self.links)))
        self.graph.add_edges_from(
            (link.parent, i) for i, link in enumerate(self.links) if link.parent >= 0
        )
        roots = [i for i, link in enumerate(self.links) if link.parent < 0]
        if len(roots) != 1:
            raise HandModelError(f"루트 링크는 하나여야 합니다: {len(roots)}개")
        self.root = roots[0]
        self.order = tuple(nx.lexicographical_topological_sort(self.graph))

        # 링크별 루트->링크 경로 위의 구동 조인트
        self._chains: List[np.ndarray] = []
        for i in range(len(self.links)):
            joints = []
            node = i
            while node >= 0:
                if self.links[node].joint_index >= 0:
                    joints.append(self.links[node].joint_index)
                node = self.links[node].parent
            self._chains.append(np.array(sorted(joints), dtype=np.int64))

    @property
    def dof(self) -> int:
        return len(self.joint_names)

    def link_index(self, link: LinkRef) -> int:
        if isinstance(link, str):
            if link not in self._index:
                raise HandModelError(f"존재하지 않는 링크: {link}")
            return self._index[link]
        if not 0 <= int(link) < len(self.links):
            raise HandModelError(f"존재하지 않는 링크 id: {link}")
        return int(link)

    def chain_joints(self, link: LinkRef) -> np.ndarray:
        return self._chains[self.link_index(link)]

    def adjacent_pairs(self) -> set:
        return {frozenset((link.parent, i)) for i, link in enumerate(self.links) if link.parent >= 0}

    def rest_pose(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def clamp(self, q) -> np.ndarray:
        return np.clip(np.asarray(q, dtype=float), self.lower, self.upper)

    def check_config(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape[-1] != self.dof:
            raise HandModelError(f"조인트 차원 불일치: {q.shape[-1]} != {self.dof}")
        return q


def joint_config(model: HandModel, values) -> np.ndarray:
    """JointConfig: 한계 내로 클램프된 조인트 벡터"""
    return model.clamp(model.check_config(values))


@dataclass(frozen=True)
class DependencyGroups:
    groups: Tuple[Tuple[str, ...], ...]
    static: Tuple[str, ...]

    def group_of(self, link_name: str) -> int:
        for i, group in enumerate(self.groups):
            if link_name in group:
                return i
        return -1


@dataclass(frozen=True, eq=False)
class ContactTarget:
    point: np.ndarray
    normal: np.ndarray
    link: int
    local_point: np.ndarray
    local_normal: np.ndarray


@dataclass(frozen=True)
class IkParams:
    beta: float = 0.01
    damping: float = 1e-4
    iters: int = 30
    step_clamp: float = 0.2
    tolerance: float = 1e-4
    max_retries: int = 10


@dataclass(frozen=True, eq=False)
class IkResult:
    q: np.ndarray
    position_residuals: np.ndarray
    angle_residuals: np.ndarray
    unused_mask: np.ndarray
    iterations: int
    trace: List[float] = field(default_factory=list)


# ========= Loading =========
def load_hand(path: str) -> HandModel:
    """URDF 서브셋 + 볼록 파트 매니페스트에서 핸드 모델 생성"""
    raw = HandExtractor().extract(path)

    link_names = [link["name"] for link in raw["links"]]
    if len(set(link_names)) != len(link_names):
        raise HandModelError("중복된 링크 이름이 있습니다.")
    index = {name: i for i, name in enumerate(link_names)}

    graph = nx.DiGraph()
    graph.add_nodes_from(link_names)
    joint_of_child: Dict[str, dict] = {}
    for joint in raw["joints"]:
        for end in ("parent", "child"):
            if joint[end] not in index:
                raise HandModelError(f"조인트 {joint['name']}: 존재하지 않는 링크 {joint[end]}")
        if joint["child"] in joint_of_child:
            raise HandModelError(f"링크 {joint['child']} 의 부모 조인트가 둘 이상입니다.")
        if joint["lower"] > joint["upper"]:
            raise HandModelError(f"조인트 {joint['name']}: lower > upper")
        joint_of_child[joint["child"]] = joint
        graph.add_edge(joint["parent"], joint["child"])

    if not nx.is_directed_acyclic_graph(graph):
        cycle = nx.find_cycle(graph)
        raise HandModelError(f"링크 트리에 순환이 있습니다: {cycle}")

    actuated = [j for j in raw["joints"] if j["type"] != "fixed"]
    joint_index = {j["name"]: i for i, j in enumerate(actuated)}

    links = []
    for name in link_names:
        joint = joint_of_child.get(name)
        mesh = _load_visual_mesh(raw["links"][index[name]]["visuals"])
        parts = _load_convex_parts(name, raw["convex_parts"].get(name), mesh)

        if joint is None:
            links.append(Link(name=name, parent=-1, origin=np.eye(4), joint_name=None,
                              joint_type="fixed", axis=np.array([1.0, 0.0, 0.0]),
                              joint_index=-1, convex_parts=parts, mesh=mesh))
            continue

        axis = np.asarray(joint["axis"], dtype=float)
        norm = np.linalg.norm(axis)
        if norm < 1e-12:
            raise HandModelError(f"조인트 {joint['name']}: 축 벡터가 0입니다.")
        links.append(Link(
            name=name,
            parent=index[joint["parent"]],
            origin=origin_matrix(joint["xyz"], joint["rpy"]),
            joint_name=joint["name"],
            joint_type=joint["type"],
            axis=axis / norm,
            joint_index=joint_index.get(joint["name"], -1),
            convex_parts=parts,
            mesh=mesh,
        ))

    model = HandModel(
        name=raw["name"],
        links=links,
        joint_names=[j["name"] for j in actuated],
        lower=[j["lower"] for j in actuated],
        upper=[j["upper"] for j in actuated],
        source_hash=hashlib.sha256(raw["source"]).hexdigest(),
    )
    logger.info(f"hand loaded: {path} links={len(model.links)} joints={model.dof} "
                f"root={model.links[model.root].name}")
    return model


def origin_matrix(xyz, rpy) -> np.ndarray:
    # URDF rpy: 고정축 roll-pitch-yaw (Rz * Ry * Rx)
    return make_pose(Rotation.from_euler("xyz", rpy).as_matrix(), xyz)


def _load_visual_mesh(visuals: List[dict]) -> Optional[TriMesh]:
    pieces = []
    for visual in visuals:
        pose = origin_matrix(visual["xyz"], visual["rpy"])
        if visual["type"] == "mesh":
            if not os.path.isfile(visual["path"]):
                raise HandModelError(f"메쉬 참조를 찾을 수 없습니다: {visual['path']}")
            mesh = load_mesh(visual["path"])
            vertices = mesh.vertices * np.asarray(visual["scale"])
            triangles = mesh.triangles
        else:
            box = trimesh.creation.box(extents=visual["size"])
            vertices, triangles = np.asarray(box.vertices), np.asarray(box.faces)
        pieces.append((transform_points(vertices, pose), triangles))

    if not pieces:
        return None

    offset = 0
    all_vertices, all_triangles = [], []
    for vertices, triangles in pieces:
        all_vertices.append(vertices)
        all_triangles.append(triangles + offset)
        offset += len(vertices)
    return TriMesh.from_arrays(np.vstack(all_vertices), np.vstack(all_triangles))


def _load_convex_parts(name: str, files: Optional[List[str]],
                       mesh: Optional[TriMesh]) -> Tuple[ConvexPart, ...]:
    if files:
        parts = []
        for path in files:
            if not os.path.isfile(path):
                raise HandModelError(f"볼록 파트 참조를 찾을 수 없습니다: {path}")
            raw = MeshExtractor().extract(path)
            parts.append(ConvexPart.from_points(raw["vertices"]))
        return tuple(parts)

    if mesh is None:
        return ()

    # 매니페스트가 없으면 링크별 볼록 껍질로 대체
    try:
        return (ConvexPart.from_points(mesh.vertices),)
    except QhullError:
        logger.warning(f"링크 {name}: 볼록 껍질 생성 실패, 충돌 형상 없음")
        return ()


# ========= Forward kinematics / Jacobians =========
def _joint_motion(link: Link, values: np.ndarray) -> np.ndarray:
    motion = np.broadcast_to(np.eye(4), (len(values), 4, 4)).copy()
    if link.joint_type == "revolute":
        motion[:, :3, :3] = Rotation.from_rotvec(values[:, None] * link.axis).as_matrix()
    elif link.joint_type == "prismatic":
        motion[:, :3, 3] = values[:, None] * link.axis
    return motion


def forward_kinematics_batch(model: HandModel, qs) -> np.ndarray:
    """(N, dof) 조인트 배치 -> (N, L, 4, 4) 링크 변환"""
    qs = np.atleast_2d(model.check_config(qs))
    n = len(qs)
    transforms = np.empty((n, len(model.links), 4, 4))

    for i in model.order:
        link = model.links[i]
        if link.parent < 0:
            base = np.broadcast_to(link.origin, (n, 4, 4))
        else:
            base = transforms[:, link.parent] @ link.origin
        if link.joint_index >= 0:
            transforms[:, i] = base @ _joint_motion(link, qs[:, link.joint_index])
        else:
            transforms[:, i] = base
    return transforms


def forward_kinematics(model: HandModel, q) -> np.ndarray:
    """링크별 베이스 프레임 변환 (L, 4, 4)"""
    return forward_kinematics_batch(model, np.asarray(q, dtype=float)[None, :])[0]


def geometric_jacobian(model: HandModel, q, link: LinkRef,
                       transforms: Optional[np.ndarray] = None) -> np.ndarray:
    """링크 원점의 6 x dof 기하 야코비안 [J_p; J_r]"""
    link = model.link_index(link)
    if transforms is None:
        transforms = forward_kinematics(model, q)

    jac = np.zeros((6, model.dof))
    p_link = transforms[link][:3, 3]
    node = link
    while node >= 0:
        current = model.links[node]
        if current.joint_index >= 0:
            axis = transforms[node][:3, :3] @ current.axis
            if current.joint_type == "revolute":
                jac[:3, current.joint_index] = np.cross(axis, p_link - transforms[node][:3, 3])
                jac[3:, current.joint_index] = axis
            else:
                jac[:3, current.joint_index] = axis
        node = current.parent
    return jac


def point_jacobian(model: HandModel, q, link: LinkRef, local_point,
                   transforms: Optional[np.ndarray] = None) -> np.ndarray:
    """링크에 고정된 점의 3 x dof 위치 야코비안: J_p - [r]x J_r"""
    link = model.link_index(link)
    if transforms is None:
        transforms = forward_kinematics(model, q)
    jac = geometric_jacobian(model, q, link, transforms)
    r = transforms[link][:3, :3] @ np.asarray(local_point, dtype=float)
    return jac[:3] - skew(r) @ jac[3:]


def dependency_groups(model: HandModel) -> DependencyGroups:
    """정적(고정 조인트로만 루트와 연결된) 링크를 제외한 트리의 연결 요소"""
    static = {model.root}
    frontier = [model.root]
    while frontier:
        node = frontier.pop()
        for child in model.graph.successors(node):
            if model.links[child].joint_type == "fixed" and child not in static:
                static.add(child)
                frontier.append(child)

    names = [link.name for link in model.links]
    graph = nx.Graph()
    graph.add_nodes_from(names[i] for i in range(len(names)) if i not in static)
    graph.add_edges_from(
        (names[link.parent], names[i])
        for i, link in enumerate(model.links)
        if link.parent >= 0 and i not in static and link.parent not in static
    )
    groups = sorted(tuple(sorted(component)) for component in nx.connected_components(graph))
    return DependencyGroups(
        groups=tuple(groups),
        static=tuple(sorted(names[i] for i in static)),
    )


# ========= Contact IK =========
def _stack_targets(model: HandModel, q: np.ndarray, targets: Sequence[ContactTarget],
                   beta: float, with_jacobian: bool = True):
    transforms = forward_kinematics(model, q)
    rows = 6 * len(targets)
    jac = np.zeros((rows, model.dof)) if with_jacobian else None
    err = np.zeros(rows)
    pos_res = np.zeros(len(targets))
    ang_res = np.zeros(len(targets))

    for i, target in enumerate(targets):
        rot, trans = transforms[target.link][:3, :3], transforms[target.link][:3, 3]
        tip = target.local_point + beta * target.local_normal
        p_world = rot @ target.local_point + trans
        n_world = rot @ target.local_normal

        err[6 * i:6 * i + 3] = target.point - p_world
        err[6 * i + 3:6 * i + 6] = (target.point + beta * target.normal) - (p_world + beta * n_world)
        pos_res[i] = np.linalg.norm(target.point - p_world)
        ang_res[i] = math.acos(float(np.clip(np.dot(n_world, target.normal), -1.0, 1.0)))

        if with_jacobian:
            jac[6 * i:6 * i + 3] = point_jacobian(model, q, target.link, target.local_point, transforms)
            jac[6 * i + 3:6 * i + 6] = point_jacobian(model, q, target.link, tip, transforms)

    return jac, err, pos_res, ang_res


def solve_contact_ik(model: HandModel, q0, targets: Sequence[ContactTarget],
                     params: IkParams = IkParams()) -> IkResult:
    """
    두 개의 위치 매칭 문제(p~ -> p, p~ + beta n~ -> p + beta n)를 쌓은
    감쇠 최소자승(DLS) 반복. 목적함수가 증가하면 감쇠를 10배 키워 다시 푼다 (Levenberg-Marquardt).
    """
    if params.beta <= 0:
        raise GraspError("beta 는 양수여야 합니다.")
    q = model.clamp(model.check_config(q0))
    for target in targets:
        values = np.concatenate([target.point, target.normal,
                                 target.local_point, target.local_normal])
        if not np.all(np.isfinite(values)):
            raise GraspError("타깃에 유한하지 않은 값이 있습니다.")
        model.link_index(target.link)

    used = np.zeros(model.dof, dtype=bool)
    for target in targets:
        used[model.chain_joints(target.link)] = True

    jac, err, pos_res, ang_res = _stack_targets(model, q, targets, params.beta)
    value = float(err @ err)
    trace = [value]
    iterations = 0
    boost = 1.0

    for _ in range(params.iters):
        if len(targets) == 0 or pos_res.max() < params.tolerance:
            break

        jtj = jac.T @ jac
        rhs = jac.T @ err
        base = max(1e-6, params.damping * float(np.mean(np.diag(jtj))))

        accepted = False
        for _retry in range(params.max_retries + 1):
            dq = np.linalg.solve(jtj + base * boost * np.eye(model.dof), rhs)
            peak = np.max(np.abs(dq))
            if peak > params.step_clamp:
                dq *= params.step_clamp / peak
            q_new = model.clamp(q + dq)
            _, err_new, _, _ = _stack_targets(model, q_new, targets, params.beta, with_jacobian=False)
            value_new = float(err_new @ err_new)
            if np.isfinite(value_new) and value_new <= value:
                accepted = True
                break
            # 거절: 감쇠를 키워 경사 방향의 짧은 스텝으로
            boost *= 10.0
        if not accepted:
            break
        boost = max(1.0, boost / 3.0)

        q = q_new
        jac, err, pos_res, ang_res = _stack_targets(model, q, targets, params.beta)
        value = float(err @ err)
        trace.append(value)
        iterations += 1

    return IkResult(
        q=q,
        position_residuals=pos_res,
        angle_residuals=ang_res,
        unused_mask=~used,
        iterations=iterations,
        trace=trace,
    )
