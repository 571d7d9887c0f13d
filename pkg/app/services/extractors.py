# app/services/extractors.py
import json
import os
import struct
import xml.etree.ElementTree as ET
from typing import Any, Dict, List

import numpy as np
import trimesh

from .errors import HandModelError, MeshError

SUPPORTED_MESH_EXTENSIONS = {".obj", ".stl"}
SUPPORTED_JOINT_TYPES = {"revolute", "prismatic", "fixed"}


class MeshExtractor:
    """메쉬 파일(OBJ / 바이너리 STL) 추출기"""

    def extract(self, file_path: str, scale: float = 1.0) -> Dict[str, Any]:
        """
        메쉬 파일에서 정점/면 추출

        Returns:
            {"vertices": (V, 3) float, "faces": (F, 3) int, "format": "obj" | "stl"}
        """
        ext = os.path.splitext(file_path)[1].lower()
        if ext not in SUPPORTED_MESH_EXTENSIONS:
            raise MeshError(f"지원하지 않는 메쉬 형식: {ext}")
        if not os.path.isfile(file_path):
            raise MeshError(f"메쉬 파일을 읽을 수 없습니다: {file_path}")

        if ext == ".stl":
            self._check_binary_stl(file_path)

        try:
            loaded = trimesh.load(file_path, file_type=ext[1:], force="mesh", process=False)
        except Exception as e:
            raise MeshError(f"메쉬 파싱 실패: {file_path}: {e}") from e

        if isinstance(loaded, trimesh.Scene):
            if not loaded.geometry:
                raise MeshError(f"메쉬가 비어 있습니다: {file_path}")
            loaded = trimesh.util.concatenate(tuple(loaded.geometry.values()))

        vertices = np.asarray(loaded.vertices, dtype=float) * scale
        faces = np.asarray(loaded.faces, dtype=np.int64)
        if len(faces) == 0:
            raise MeshError(f"삼각형이 없습니다: {file_path}")

        return {"vertices": vertices, "faces": faces, "format": ext[1:]}

    def _check_binary_stl(self, file_path: str):
        """바이너리 STL 여부 확인 (헤더 80B + 개수 4B + 삼각형당 50B)"""
        size = os.path.getsize(file_path)
        with open(file_path, "rb") as f:
            header = f.read(84)
        if len(header) < 84:
            raise MeshError(f"STL 파일이 너무 짧습니다: {file_path}")
        count = struct.unpack("<I", header[80:84])[0]
        if size != 84 + 50 * count:
            raise MeshError(f"바이너리 STL만 지원합니다: {file_path}")


class HandExtractor:
    """핸드 모델(URDF 서브셋) 추출기"""

    def extract(self, file_path: str) -> Dict[str, Any]:
        """
        URDF에서 링크/조인트 정보 추출

        Returns:
            {
                "name": str,
                "links": [{"name", "visuals": [...]}, ...],
                "joints": [{"name", "type", "parent", "child", "xyz", "rpy",
                            "axis", "lower", "upper"}, ...],
                "convex_parts": {link_name: [obj_path, ...]},
                "source": bytes
            }
        """
        if not os.path.isfile(file_path):
            raise HandModelError(f"핸드 파일을 읽을 수 없습니다: {file_path}")

        with open(file_path, "rb") as f:
            source = f.read()

        try:
            root = ET.fromstring(source)
        except ET.ParseError as e:
            raise HandModelError(f"URDF 파싱 실패: {e}") from e

        if root.tag != "robot":
            raise HandModelError("URDF 루트 태그는 <robot> 이어야 합니다.")

        base_dir = os.path.dirname(os.path.abspath(file_path))
        links = [self._extract_link(el, base_dir) for el in root.findall("link")]
        joints = [self._extract_joint(el) for el in root.findall("joint")]

        manifest_path = os.path.splitext(file_path)[0] + ".convex.json"
        convex_parts, manifest_source = self._extract_manifest(manifest_path)

        return {
            "name": root.get("name", "hand"),
            "links": links,
            "joints": joints,
            "convex_parts": convex_parts,
            "source": source + manifest_source,
        }

    def _extract_link(self, el: ET.Element, base_dir: str) -> Dict[str, Any]:
        name = el.get("name")
        if not name:
            raise HandModelError("이름 없는 <link> 가 있습니다.")

        visuals = []
        for visual in el.findall("visual"):
            xyz, rpy = self._origin(visual.find("origin"))
            geometry = visual.find("geometry")
            if geometry is None:
                continue

            mesh_el = geometry.find("mesh")
            box_el = geometry.find("box")
            if mesh_el is not None:
                filename = mesh_el.get("filename", "")
                if filename.startswith("package://"):
                    filename = filename[len("package://"):]
                path = filename if os.path.isabs(filename) else os.path.join(base_dir, filename)
                scale = self._floats(mesh_el.get("scale", "1 1 1"), 3, "scale")
                visuals.append({"type": "mesh", "path": path, "scale": scale,
                                "xyz": xyz, "rpy": rpy})
            elif box_el is not None:
                size = self._floats(box_el.get("size", ""), 3, "box size")
                visuals.append({"type": "box", "size": size, "xyz": xyz, "rpy": rpy})
            else:
                raise HandModelError(f"링크 {name}: mesh / box 이외의 형상은 지원하지 않습니다.")

        return {"name": name, "visuals": visuals}

    def _extract_joint(self, el: ET.Element) -> Dict[str, Any]:
        name = el.get("name")
        joint_type = el.get("type")
        if joint_type not in SUPPORTED_JOINT_TYPES:
            raise HandModelError(f"지원하지 않는 조인트 타입: {name} ({joint_type})")
        if el.find("mimic") is not None:
            raise HandModelError(f"mimic 조인트는 지원하지 않습니다: {name}")

        parent = el.find("parent")
        child = el.find("child")
        if parent is None or child is None:
            raise HandModelError(f"조인트 {name}: parent/child 가 필요합니다.")

        xyz, rpy = self._origin(el.find("origin"))
        axis_el = el.find("axis")
        axis = self._floats(axis_el.get("xyz"), 3, "axis") if axis_el is not None else [1.0, 0.0, 0.0]

        lower = upper = 0.0
        if joint_type != "fixed":
            limit = el.find("limit")
            if limit is None or limit.get("lower") is None or limit.get("upper") is None:
                raise HandModelError(f"조인트 {name}: lower/upper limit 가 필요합니다.")
            lower, upper = float(limit.get("lower")), float(limit.get("upper"))

        return {
            "name": name,
            "type": joint_type,
            "parent": parent.get("link"),
            "child": child.get("link"),
            "xyz": xyz,
            "rpy": rpy,
            "axis": axis,
            "lower": lower,
            "upper": upper,
        }

    def _extract_manifest(self, manifest_path: str):
        """링크 이름 -> 볼록 파트 OBJ 목록 (사이드카 JSON, 없으면 빈 dict)"""
        if not os.path.isfile(manifest_path):
            return {}, b""

        with open(manifest_path, "rb") as f:
            source = f.read()
        try:
            manifest = json.loads(source.decode("utf-8"))
        except ValueError as e:
            raise HandModelError(f"볼록 파트 매니페스트 파싱 실패: {e}") from e

        base_dir = os.path.dirname(os.path.abspath(manifest_path))
        parts: Dict[str, List[str]] = {}
        for link_name, files in manifest.items():
            parts[link_name] = [
                f if os.path.isabs(f) else os.path.join(base_dir, f) for f in files
            ]
        return parts, source

    def _origin(self, el):
        if el is None:
            return [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]
        return (self._floats(el.get("xyz", "0 0 0"), 3, "xyz"),
                self._floats(el.get("rpy", "0 0 0"), 3, "rpy"))

    def _floats(self, text, count: int, what: str) -> List[float]:
        try:
            values = [float(v) for v in (text or "").split()]
        except ValueError as e:
            raise HandModelError(f"{what} 값을 읽을 수 없습니다: {text}") from e
        if len(values) != count:
            raise HandModelError(f"{what} 값은 {count}개여야 합니다: {text}")
        return values
