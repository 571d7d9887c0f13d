# app/services/contact_field.py
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContactFieldError
from .kinematics import DependencyGroups, HandModel, forward_kinematics_batch
from .mesh_geometry import (
    SurfaceSamples,
    TriMesh,
    check_rigid,
    sample_count,
    sample_surface,
    transform_points,
)

logger = logging.getLogger(__name__)

INDEX_VERSION = 4
THETA_HIT_DEFAULT = math.cos(math.radians(20.0))


@dataclass(frozen=True)
class ContactFieldParams:
    n_configs: int = 4096
    box_width: float = 0.01
    patch_radius: float = 0.008
    codebook_size: int = 256
    theta_hit: float = THETA_HIT_DEFAULT
    points_per_patch: int = 16
    leaf_size: int = 4
    hand_density: float = 20.0
    config_chunk: int = 64


# ========= Types =========
@dataclass(frozen=True)
class ContactVector:
    position: np.ndarray
    normal: np.ndarray
    patch: int
    config: int


@dataclass(frozen=True, eq=False)
class ContactVectors:
    """ContactVector 묶음 (열 단위). local_* 는 역조회용 링크 좌표계 값"""

    positions: np.ndarray
    normals: np.ndarray
    patch_ids: np.ndarray
    config_ids: np.ndarray
    links: np.ndarray
    local_points: np.ndarray
    local_normals: np.ndarray

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i: int) -> ContactVector:
        return ContactVector(self.positions[i], self.normals[i],
                             int(self.patch_ids[i]), int(self.config_ids[i]))


@dataclass(frozen=True, eq=False)
class ContactPatch:
    patch_id: int
    link: int
    points: np.ndarray
    normals: np.ndarray
    representative: np.ndarray


@dataclass(frozen=True, eq=False)
class ContactFieldIndex:
    """
    패치별 BVH 로 묶인 접촉장 인덱스 (평탄화된 배열)

    - 박스: 정수 격자 셀(box_cell) + 소속 패치, 코드 목록은 box_ptr CSR 로 entry_* 참조
    - 노드: 셀 좌표 경계(node_lo/hi), 자식(-1 이면 리프), leaf_boxes 상의 구간
    - 엔트리: 링크 좌표계 대표점/법선 (역조회), 베이스 좌표계 위치/법선 (exhaustive 배치)
    """

    box_width: float
    codebook: np.ndarray
    link_names: Tuple[str, ...]
    patch_link: np.ndarray
    patch_root: np.ndarray
    node_lo: np.ndarray
    node_hi: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    leaf_boxes: np.ndarray
    box_cell: np.ndarray
    box_patch: np.ndarray
    box_ptr: np.ndarray
    entry_code: np.ndarray
    entry_point: np.ndarray
    entry_normal: np.ndarray
    entry_position: np.ndarray
    entry_direction: np.ndarray
    key: str = ""

    @property
    def n_patches(self) -> int:
        return len(self.patch_link)

    @property
    def n_boxes(self) -> int:
        return len(self.box_cell)

    def box_bounds(self, box: int):
        lo = self.box_cell[box] * self.box_width
        return lo, lo + self.box_width

    def node_bounds(self, node: int):
        return self.node_lo[node] * self.box_width, (self.node_hi[node] + 1) * self.box_width


@dataclass(frozen=True, eq=False)
class QueryHits:
    """(오브젝트 샘플, 박스) 단위 히트. entry 는 박스 내 최대 정렬 코드"""

    queries: np.ndarray
    boxes: np.ndarray
    patches: np.ndarray
    entries: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.queries)


@dataclass(eq=False)
class ContactDomain:
    """
    한 의존 그룹의 접촉 도메인. 점/법선은 핸드 베이스 좌표계,
    normals 는 오브젝트 외향 법선. 원소 i 의 히트는 hit_ptr[i]:hit_ptr[i+1]
    """

    group: int
    sample_ids: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    scores: np.ndarray
    hit_ptr: np.ndarray
    hit_patch: np.ndarray
    hit_box: np.ndarray
    index_key: str = ""

    def __len__(self):
        return len(self.sample_ids)

    @cached_property
    def tree(self) -> cKDTree:
        if len(self) == 0:
            raise ContactFieldError("빈 도메인에는 검색 트리가 없습니다.")
        return cKDTree(self.points)

    def hits_of(self, element: int):
        s, e = self.hit_ptr[element], self.hit_ptr[element + 1]
        return self.hit_patch[s:e], self.hit_box[s:e]


# ========= Normal codebook =========
def fibonacci_codebook(size: int = 256) -> np.ndarray:
    """피보나치 나선 간격의 단위구 방향 코드북"""
    if size < 1:
        raise ValueError("코드북 크기는 1 이상이어야 합니다.")
    i = np.arange(size) + 0.5
    z = 1.0 - 2.0 * i / size
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def quantize_normals(normals: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    # 단위구 위에서 최근접 = 최대 내적
    _, codes = cKDTree(codebook).query(np.atleast_2d(normals))
    return codes.astype(np.int64)


# ========= Hand surface / patches =========
def _link_surface(link) -> Optional[TriMesh]:
    if link.mesh is not None:
        return link.mesh
    if link.convex_parts:
        offset = 0
        vertices, faces = [], []
        for part in link.convex_parts:
            vertices.append(part.vertices)
            faces.append(part.faces + offset)
            offset += len(part.vertices)
        return TriMesh.from_arrays(np.vstack(vertices), np.vstack(faces))
    return None


def sample_hand_surface(model: HandModel, density: float, seed: int,
                        links: Optional[Sequence[str]] = None) -> Dict[int, SurfaceSamples]:
    """링크별 표면 샘플 (링크 좌표계). links 가 주어지면 해당 링크만"""
    allowed = None if links is None else {model.link_index(name) for name in links}
    result = {}
    for i, link in enumerate(model.links):
        if allowed is not None and i not in allowed:
            continue
        mesh = _link_surface(link)
        if mesh is None:
            continue
        link_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        result[i] = sample_surface(mesh, sample_count(mesh, density), link_seed)
    return result


def decompose_patches(model: HandModel, link_samples: Dict[int, SurfaceSamples],
                      patch_radius: float, seed: int) -> List[ContactPatch]:
    """
    확률적 탐욕 커버: 덮이지 않은 샘플을 무작위로 골라
    반경 patch_radius 안의 덮이지 않은 샘플을 하나의 패치로 묶는다.
    """
    if not link_samples or all(len(s) == 0 for s in link_samples.values()):
        raise ContactFieldError("패치 분할에 사용할 핸드 표면 샘플이 없습니다.")
    if patch_radius <= 0:
        raise ValueError("patch_radius 는 양수여야 합니다.")

    rng = np.random.default_rng(seed)
    patches: List[ContactPatch] = []
    for link in sorted(link_samples):
        samples = link_samples[link]
        if len(samples) == 0:
            continue
        tree = cKDTree(samples.points)
        covered = np.zeros(len(samples), dtype=bool)

        for start in rng.permutation(len(samples)):
            if covered[start]:
                continue
            members = np.asarray(tree.query_ball_point(samples.points[start], patch_radius),
                                 dtype=np.int64)
            members = np.sort(members[~covered[members]])
            covered[members] = True
            patches.append(ContactPatch(
                patch_id=len(patches),
                link=link,
                points=samples.points[members],
                normals=samples.normals[members],
                representative=samples.points[start],
            ))

    logger.info(f"hand surface decomposed: patches={len(patches)} radius={patch_radius}")
    return patches


# ========= Field sampling =========
def _patch_subsets(patches: Sequence[ContactPatch], points_per_patch: int, rng):
    subsets = []
    for patch in patches:
        count = len(patch.points)
        if points_per_patch and count > points_per_patch:
            subsets.append(np.sort(rng.choice(count, size=points_per_patch, replace=False)))
        else:
            subsets.append(np.arange(count))
    return subsets


def iter_contact_field(model: HandModel, patches: Sequence[ContactPatch], n_configs: int,
                       seed: int, points_per_patch: int = 16, chunk: int = 256,
                       configs: Optional[np.ndarray] = None) -> Iterator[ContactVectors]:
    """관절 구성 묶음 단위로 ContactVectors 를 생성"""
    if configs is None and n_configs < 1:
        raise ValueError("관절 구성 샘플 수는 1 이상이어야 합니다.")

    rng = np.random.default_rng(seed)
    subsets = _patch_subsets(patches, points_per_patch, rng)
    if configs is None:
        configs = model.lower + rng.random((n_configs, model.dof)) * (model.upper - model.lower)
    configs = np.atleast_2d(model.check_config(configs))

    local_p = np.vstack([p.points[s] for p, s in zip(patches, subsets)])
    local_n = np.vstack([p.normals[s] for p, s in zip(patches, subsets)])
    patch_ids = np.concatenate([np.full(len(s), p.patch_id) for p, s in zip(patches, subsets)])
    links = np.concatenate([np.full(len(s), p.link) for p, s in zip(patches, subsets)])

    for begin in range(0, len(configs), chunk):
        qs = configs[begin:begin + chunk]
        transforms = forward_kinematics_batch(model, qs)[:, links]
        rot, trans = transforms[..., :3, :3], transforms[..., :3, 3]
        positions = np.einsum("cvij,vj->cvi", rot, local_p) + trans
        normals = np.einsum("cvij,vj->cvi", rot, local_n)
        n = len(qs)
        yield ContactVectors(
            positions=positions.reshape(-1, 3),
            normals=normals.reshape(-1, 3),
            patch_ids=np.tile(patch_ids, n),
            config_ids=np.repeat(np.arange(begin, begin + n), len(links)),
            links=np.tile(links, n),
            local_points=np.tile(local_p, (n, 1)),
            local_normals=np.tile(local_n, (n, 1)),
        )


def sample_contact_field(model: HandModel, patches: Sequence[ContactPatch], n_configs: int,
                         seed: int, points_per_patch: int = 16,
                         configs: Optional[np.ndarray] = None) -> ContactVectors:
    """균일 관절 구성 N 개에서 패치 점/법선을 FK 로 베이스 좌표계에 옮긴 접촉 벡터"""
    chunks = list(iter_contact_field(model, patches, n_configs, seed,
                                     points_per_patch=points_per_patch, configs=configs))
    return ContactVectors(*(np.concatenate([getattr(c, f) for c in chunks])
                            for f in ContactVectors.__dataclass_fields__))


# ========= Index build =========
def _reduce_entries(table: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """(patch, cell, code) 별로 가장 잘 정렬된 대표 하나만 남긴다"""
    cell = table["cell"]
    order = np.lexsort((-table["align"], table["code"], cell[:, 2], cell[:, 1], cell[:, 0],
                        table["patch"]))
    table = {k: v[order] for k, v in table.items()}
    key = np.column_stack([table["patch"], table["cell"], table["code"]])
    first = np.ones(len(key), dtype=bool)
    first[1:] = np.any(key[1:] != key[:-1], axis=1)
    return {k: v[first] for k, v in table.items()}


def _entries_from_vectors(vectors: ContactVectors, box_width: float, codebook: np.ndarray):
    codes = quantize_normals(vectors.normals, codebook)
    return _reduce_entries({
        "patch": vectors.patch_ids.astype(np.int64),
        "cell": np.floor(vectors.positions / box_width).astype(np.int64),
        "code": codes,
        "align": np.einsum("ij,ij->i", vectors.normals, codebook[codes]),
        "link": vectors.links.astype(np.int64),
        "point": vectors.local_points,
        "normal": vectors.local_normals,
        "position": vectors.positions,
        "direction": vectors.normals,
    })


def _build_bvh(cells: np.ndarray, leaf_size: int):
    """정수 셀 좌표 위의 중앙값 분할 BVH. order 는 리프 구간 순서의 박스 순열"""
    order = np.arange(len(cells))
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def build(s: int, e: int) -> int:
        idx = order[s:e]
        node = len(lo)
        lo.append(cells[idx].min(axis=0))
        hi.append(cells[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(e - s)
        if e - s > leaf_size:
            axis = int(np.argmax(hi[node] - lo[node]))
            order[s:e] = idx[np.argsort(cells[idx, axis], kind="stable")]
            mid = s + (e - s) // 2
            left[node] = build(s, mid)
            right[node] = build(mid, e)
        return node

    build(0, len(cells))
    return (np.array(lo), np.array(hi), np.array(left), np.array(right),
            np.array(start), np.array(count), order)


def build_index(vectors: Union[ContactVectors, Iterable[ContactVectors]], box_width: float,
                link_names: Sequence[str], codebook_size: int = 256, leaf_size: int = 4,
                key: str = "") -> ContactFieldIndex:
    """격자 박스 커버 -> 패치별 BVH -> 박스별 코드/대표점 배치"""
    if box_width <= 0:
        raise ValueError("box_width 는 양수여야 합니다.")
    if leaf_size < 1:
        raise ValueError("leaf_size 는 1 이상이어야 합니다.")

    codebook = fibonacci_codebook(codebook_size)
    chunks = [vectors] if isinstance(vectors, ContactVectors) else vectors
    tables = [_entries_from_vectors(c, box_width, codebook) for c in chunks if len(c)]
    if not tables:
        raise ContactFieldError("접촉 벡터가 비어 있습니다.")
    table = tables[0] if len(tables) == 1 else _reduce_entries(
        {k: np.concatenate([t[k] for t in tables]) for k in tables[0]})

    # 박스 = (patch, cell) 고유 조합. table 은 이미 그 순서로 정렬됨
    box_key = np.column_stack([table["patch"], table["cell"]])
    box_first = np.ones(len(box_key), dtype=bool)
    box_first[1:] = np.any(box_key[1:] != box_key[:-1], axis=1)
    box_starts = np.flatnonzero(box_first)
    box_ptr = np.append(box_starts, len(box_key))
    box_patch = table["patch"][box_starts]
    box_cell = table["cell"][box_starts]

    n_patches = int(table["patch"].max()) + 1
    patch_link = np.full(n_patches, -1, dtype=np.int64)
    patch_link[table["patch"]] = table["link"]
    patch_root = np.full(n_patches, -1, dtype=np.int64)

    nodes = {name: [] for name in ("lo", "hi", "left", "right", "start", "count")}
    leaf_boxes = np.empty(len(box_cell), dtype=np.int64)
    node_offset = 0
    patch_bounds = np.searchsorted(box_patch, np.arange(n_patches + 1))
    for patch in range(n_patches):
        b0, b1 = patch_bounds[patch], patch_bounds[patch + 1]
        if b0 == b1:
            continue
        lo, hi, left, right, start, count, order = _build_bvh(box_cell[b0:b1], leaf_size)
        leaf_boxes[b0:b1] = b0 + order
        nodes["lo"].append(lo)
        nodes["hi"].append(hi)
        nodes["left"].append(np.where(left >= 0, left + node_offset, -1))
        nodes["right"].append(np.where(right >= 0, right + node_offset, -1))
        nodes["start"].append(start + b0)
        nodes["count"].append(count)
        patch_root[patch] = node_offset
        node_offset += len(lo)

    index = ContactFieldIndex(
        box_width=float(box_width),
        codebook=codebook,
        link_names=tuple(link_names),
        patch_link=patch_link,
        patch_root=patch_root,
        node_lo=np.vstack(nodes["lo"]).astype(np.int64),
        node_hi=np.vstack(nodes["hi"]).astype(np.int64),
        node_left=np.concatenate(nodes["left"]).astype(np.int64),
        node_right=np.concatenate(nodes["right"]).astype(np.int64),
        node_start=np.concatenate(nodes["start"]).astype(np.int64),
        node_count=np.concatenate(nodes["count"]).astype(np.int64),
        leaf_boxes=leaf_boxes,
        box_cell=box_cell,
        box_patch=box_patch,
        box_ptr=box_ptr.astype(np.int64),
        entry_code=table["code"],
        entry_point=table["point"],
        entry_normal=table["normal"],
        entry_position=table["position"],
        entry_direction=table["direction"],
        key=key,
    )
    logger.info(f"contact field index built: patches={n_patches} boxes={index.n_boxes} "
                f"entries={len(index.entry_code)} nodes={node_offset}")
    return index


def build_contact_field(model: HandModel, params: ContactFieldParams, seed: int,
                        links: Optional[Sequence[str]] = None) -> ContactFieldIndex:
    """핸드 표면 샘플링부터 인덱스 생성까지"""
    link_samples = sample_hand_surface(model, params.hand_density, seed, links)
    patches = decompose_patches(model, link_samples, params.patch_radius, seed)
    chunks = iter_contact_field(model, patches, params.n_configs, seed,
                                points_per_patch=params.points_per_patch,
                                chunk=params.config_chunk)
    return build_index(chunks, params.box_width, [l.name for l in model.links],
                       codebook_size=params.codebook_size, leaf_size=params.leaf_size,
                       key=index_key(model.source_hash, params, seed, links))


def patch_nbytes(index: ContactFieldIndex) -> np.ndarray:
    """패치별 인덱스 메모리 (바이트)"""
    n = index.n_patches
    box_bytes = index.box_cell.itemsize * 3 + index.box_patch.itemsize + index.box_ptr.itemsize
    entry_bytes = (index.entry_code.itemsize + index.entry_point.itemsize * 3
                   + index.entry_normal.itemsize * 3 + index.entry_position.itemsize * 3
                   + index.entry_direction.itemsize * 3)
    node_bytes = index.node_lo.itemsize * 6 + index.node_left.itemsize * 4

    entries_per_box = np.diff(index.box_ptr)
    boxes = np.bincount(index.box_patch, minlength=n)
    entries = np.bincount(index.box_patch, weights=entries_per_box, minlength=n)
    node_patch = np.repeat(np.arange(n), _nodes_per_patch(index))
    nodes = np.bincount(node_patch, minlength=n)
    return (boxes * box_bytes + entries * entry_bytes + nodes * node_bytes).astype(np.int64)


def _nodes_per_patch(index: ContactFieldIndex) -> np.ndarray:
    counts = np.zeros(index.n_patches, dtype=np.int64)
    roots = np.flatnonzero(index.patch_root >= 0)
    bounds = np.append(index.patch_root[roots], len(index.node_lo))
    counts[roots] = np.diff(bounds)
    return counts


# ========= Queries =========
def query(index: ContactFieldIndex, points: np.ndarray, normals: np.ndarray,
          theta_hit: float, patches: Optional[np.ndarray] = None) -> QueryHits:
    """
    각 질의점 (p, n)으로 패치 BVH 들을 순회. 리프에서는 같은 격자 셀의 박스만 남기고
    -x·n >= theta_hit 인 코드 x 가 있으면 히트 (점수 = 최대값)
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    normals = np.atleast_2d(np.asarray(normals, dtype=float))
    cells = np.floor(points / index.box_width).astype(np.int64)

    roots = index.patch_root[index.patch_root >= 0]
    if patches is not None:
        roots = index.patch_root[np.asarray(patches, dtype=np.int64)]
        roots = roots[roots >= 0]

    qi = np.repeat(np.arange(len(points)), len(roots))
    nodes = np.tile(roots, len(points))
    found_q, found_box = [], []

    while len(qi):
        c = cells[qi]
        inside = np.all((index.node_lo[nodes] <= c) & (c <= index.node_hi[nodes]), axis=1)
        qi, nodes = qi[inside], nodes[inside]

        leaf = index.node_left[nodes] < 0
        lq, ln = qi[leaf], nodes[leaf]
        if len(ln):
            counts = index.node_count[ln]
            total = int(counts.sum())
            rq = np.repeat(lq, counts)
            offsets = np.repeat(index.node_start[ln], counts) + (
                np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts))
            boxes = index.leaf_boxes[offsets]
            same_cell = np.all(index.box_cell[boxes] == cells[rq], axis=1)
            found_q.append(rq[same_cell])
            found_box.append(boxes[same_cell])

        iq, inner = qi[~leaf], nodes[~leaf]
        qi = np.concatenate([iq, iq])
        nodes = np.concatenate([index.node_left[inner], index.node_right[inner]])

    if not found_q:
        return _empty_hits()
    pair_q = np.concatenate(found_q)
    pair_box = np.concatenate(found_box)
    if len(pair_q) == 0:
        return _empty_hits()

    # 박스 내 코드 전수 내적 검사
    counts = index.box_ptr[pair_box + 1] - index.box_ptr[pair_box]
    total = int(counts.sum())
    pair_id = np.repeat(np.arange(len(pair_q)), counts)
    entries = np.repeat(index.box_ptr[pair_box], counts) + (
        np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts))
    align = -np.einsum("ij,ij->i", index.codebook[index.entry_code[entries]], normals[pair_q[pair_id]])

    passed = align >= theta_hit
    pair_id, entries, align = pair_id[passed], entries[passed], align[passed]
    order = np.lexsort((-align, pair_id))
    pair_id, entries, align = pair_id[order], entries[order], align[order]
    first = np.ones(len(pair_id), dtype=bool)
    first[1:] = pair_id[1:] != pair_id[:-1]
    pair_id, entries, align = pair_id[first], entries[first], align[first]

    queries, boxes = pair_q[pair_id], pair_box[pair_id]
    order = np.lexsort((index.box_patch[boxes], queries))
    return QueryHits(
        queries=queries[order],
        boxes=boxes[order],
        patches=index.box_patch[boxes][order],
        entries=entries[order],
        scores=align[order],
    )


def _empty_hits() -> QueryHits:
    empty = np.zeros(0, dtype=np.int64)
    return QueryHits(empty, empty, empty, empty, np.zeros(0))


def query_domains(index: ContactFieldIndex, samples: SurfaceSamples, pose: np.ndarray,
                  theta_hit: float, groups: DependencyGroups,
                  sample_ids: Optional[np.ndarray] = None) -> List[ContactDomain]:
    """오브젝트 샘플을 핸드 좌표계로 옮겨 질의하고, 히트를 의존 그룹별 도메인으로 병합"""
    check_rigid(pose)
    points = transform_points(samples.points, pose)
    normals = samples.normals @ pose[:3, :3].T
    if sample_ids is None:
        sample_ids = np.arange(len(samples))

    hits = query(index, points, normals, theta_hit)
    patch_group = np.array([
        groups.group_of(index.link_names[link]) if link >= 0 else -1 for link in index.patch_link
    ], dtype=np.int64)
    hit_group = patch_group[hits.patches] if len(hits) else np.zeros(0, dtype=np.int64)

    domains = []
    for g in range(len(groups.groups)):
        mine = hit_group == g
        q, patches, boxes, scores = hits.queries[mine], hits.patches[mine], hits.boxes[mine], hits.scores[mine]
        elements, starts = np.unique(q, return_index=True)
        ptr = np.append(starts, len(q)).astype(np.int64)
        best = np.maximum.reduceat(scores, starts) if len(q) else np.zeros(0)
        domains.append(ContactDomain(
            group=g,
            sample_ids=np.asarray(sample_ids)[elements],
            points=points[elements],
            normals=normals[elements],
            scores=best,
            hit_ptr=ptr,
            hit_patch=patches,
            hit_box=boxes,
            index_key=index.key,
        ))
    return domains


def reverse_lookup(index: ContactFieldIndex, domain: ContactDomain, element: int, rng):
    """
    도메인 원소에서 핸드 접촉점으로의 역조회

    Returns:
        (link id, 링크 좌표계 점, 링크 좌표계 외향 법선)
    """
    if domain.index_key != index.key:
        raise ContactFieldError("도메인이 다른 인덱스에서 생성되었습니다.")
    if not 0 <= element < len(domain):
        raise ContactFieldError(f"도메인에 없는 원소: {element}")
    patches, boxes = domain.hits_of(element)
    if len(patches) == 0:
        raise ContactFieldError(f"원소 {element} 에 히트가 없습니다.")

    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    unique_patches = np.unique(patches)
    patch = unique_patches[rng.integers(len(unique_patches))]
    box = boxes[np.flatnonzero(patches == patch)[0]]
    if box >= index.n_boxes or index.box_patch[box] != patch:
        raise ContactFieldError(f"인덱스에 없는 박스: {box}")

    s, e = index.box_ptr[box], index.box_ptr[box + 1]
    align = -index.codebook[index.entry_code[s:e]] @ domain.normals[element]
    best = s + int(np.argmax(align))
    return int(index.patch_link[patch]), index.entry_point[best].copy(), index.entry_normal[best].copy()


# ========= Cache =========
def index_key(hand_hash: str, params: ContactFieldParams, seed: int,
              links: Optional[Sequence[str]] = None) -> str:
    payload = {
        "version": INDEX_VERSION,
        "hand": hand_hash,
        "n_configs": params.n_configs,
        "box_width": params.box_width,
        "patch_radius": params.patch_radius,
        "codebook_size": params.codebook_size,
        "points_per_patch": params.points_per_patch,
        "leaf_size": params.leaf_size,
        "hand_density": params.hand_density,
        "seed": seed,
        "links": sorted(links) if links else None,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


_ARRAY_FIELDS = [name for name in ContactFieldIndex.__dataclass_fields__
                 if name not in ("box_width", "link_names", "key")]


def save_index(index: ContactFieldIndex, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    np.savez_compressed(
        path,
        version=np.array(INDEX_VERSION),
        key=np.array(index.key),
        box_width=np.array(index.box_width),
        link_names=np.array(index.link_names),
        **{name: getattr(index, name) for name in _ARRAY_FIELDS},
    )
    logger.info(f"contact field index saved: {path}")
    return path


def load_index(path: str, key: Optional[str] = None) -> Optional[ContactFieldIndex]:
    """캐시 파일 로드. 버전/키가 다르면 None"""
    if not os.path.isfile(path):
        return None
    with np.load(path, allow_pickle=False) as data:
        if int(data["version"]) != INDEX_VERSION:
            logger.info(f"contact field cache version mismatch: {path}")
            return None
        if key is not None and str(data["key"]) != key:
            logger.info(f"contact field cache key mismatch: {path}")
            return None
        return ContactFieldIndex(
            box_width=float(data["box_width"]),
            link_names=tuple(str(n) for n in data["link_names"]),
            key=str(data["key"]),
            **{name: data[name] for name in _ARRAY_FIELDS},
        )


def cache_path(cache_dir: str, key: str) -> str:
    return os.path.join(cache_dir, f"contact_field_{key[:16]}.npz")
