# app/services/assets.py
import json
import logging
import math
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import trimesh

logger = logging.getLogger(__name__)

SPHERE_RADIUS = 0.03
BOX_SIZE = 0.04
PALM_THICKNESS = 0.012
FINGER_SECTION = (0.012, 0.018)
FLEX_AXIS = (0.0, -1.0, 0.0)


@dataclass(frozen=True)
class Segment:
    """손가락 마디: 부모 끝에서 시작하는 조인트 + +z 방향 박스 링크"""

    suffix: str
    length: float
    lower: float
    upper: float
    axis: Tuple[float, float, float] = FLEX_AXIS


@dataclass(frozen=True)
class HandSpec:
    name: str
    palm: Tuple[float, float, float]
    finger_angles: Tuple[float, ...]
    finger_radius: float
    segments: Tuple[Segment, ...]


TWO_FINGER = HandSpec(
    name="two_finger",
    palm=(0.11, 0.04, PALM_THICKNESS),
    finger_angles=(0.0, 180.0),
    finger_radius=0.045,
    segments=(
        Segment("proximal", 0.045, -0.6, 1.0),
        Segment("distal", 0.035, 0.0, 1.4),
    ),
)

FOUR_FINGER = HandSpec(
    name="four_finger",
    palm=(0.09, 0.09, PALM_THICKNESS),
    finger_angles=(0.0, 90.0, 180.0, 270.0),
    finger_radius=0.04,
    segments=(
        Segment("knuckle", 0.01, -0.25, 0.25, axis=(1.0, 0.0, 0.0)),
        Segment("proximal", 0.04, -0.3, 1.4),
        Segment("middle", 0.03, 0.0, 1.5),
        Segment("distal", 0.025, 0.0, 1.5),
    ),
)


def _fmt(values: Sequence[float]) -> str:
    return " ".join(f"{v:.6g}" for v in values)


def _write_box(path: str, extents, center) -> str:
    box = trimesh.creation.box(extents=extents)
    box.apply_translation(center)
    box.export(path)
    return path


def _add_link(robot: ET.Element, name: str, mesh_file: str):
    link = ET.SubElement(robot, "link", name=name)
    geometry = ET.SubElement(ET.SubElement(link, "visual"), "geometry")
    ET.SubElement(geometry, "mesh", filename=mesh_file)


def _add_joint(robot: ET.Element, name: str, parent: str, child: str, xyz, rpy, segment: Segment):
    joint = ET.SubElement(robot, "joint", name=name, type="revolute")
    ET.SubElement(joint, "parent", link=parent)
    ET.SubElement(joint, "child", link=child)
    ET.SubElement(joint, "origin", xyz=_fmt(xyz), rpy=_fmt(rpy))
    ET.SubElement(joint, "axis", xyz=_fmt(segment.axis))
    ET.SubElement(joint, "limit", lower=f"{segment.lower:.6g}", upper=f"{segment.upper:.6g}",
                  effort="1", velocity="1")


def write_hand(spec: HandSpec, output_dir: str) -> str:
    """
    박스 링크로 된 테스트 핸드를 URDF + 링크별 OBJ + 볼록 파트 매니페스트로 저장.
    팜 상면은 z = 두께/2, 손가락은 팜 상면에서 +z 로 뻗고 굽힘은 팜 중심 쪽.
    """
    mesh_dir = os.path.join(output_dir, f"{spec.name}_meshes")
    os.makedirs(mesh_dir, exist_ok=True)
    robot = ET.Element("robot", name=spec.name)
    manifest: Dict[str, List[str]] = {}

    def link_mesh(link_name: str, extents, center) -> str:
        rel = f"{spec.name}_meshes/{link_name}.obj"
        _write_box(os.path.join(output_dir, rel), extents, center)
        _add_link(robot, link_name, rel)
        manifest[link_name] = [rel]
        return rel

    link_mesh("palm", spec.palm, (0.0, 0.0, 0.0))
    top = spec.palm[2] / 2.0

    for f, angle in enumerate(spec.finger_angles):
        phi = math.radians(angle)
        parent = "palm"
        xyz, rpy = (spec.finger_radius * math.cos(phi), spec.finger_radius * math.sin(phi), top), (0.0, 0.0, phi)
        for segment in spec.segments:
            child = f"f{f}_{segment.suffix}"
            link_mesh(child, (*FINGER_SECTION, segment.length), (0.0, 0.0, segment.length / 2.0))
            _add_joint(robot, f"f{f}_{segment.suffix}_joint", parent, child, xyz, rpy, segment)
            parent, xyz, rpy = child, (0.0, 0.0, segment.length), (0.0, 0.0, 0.0)

    path = os.path.join(output_dir, f"{spec.name}.urdf")
    ET.indent(robot)
    ET.ElementTree(robot).write(path, encoding="utf-8", xml_declaration=True)
    with open(os.path.splitext(path)[0] + ".convex.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return path


def write_objects(output_dir: str) -> Dict[str, str]:
    os.makedirs(output_dir, exist_ok=True)
    sphere_path = os.path.join(output_dir, "sphere.obj")
    trimesh.creation.icosphere(subdivisions=3, radius=SPHERE_RADIUS).export(sphere_path)
    box_path = os.path.join(output_dir, "box.obj")
    _write_box(box_path, (BOX_SIZE,) * 3, (0.0, 0.0, 0.0))
    return {"sphere": sphere_path, "box": box_path}


def write_reference_assets(output_dir: str) -> Dict[str, str]:
    """
    회귀 테스트용 기준 에셋 생성

    Returns:
        {"two_finger": urdf, "four_finger": urdf, "sphere": obj, "box": obj}
    """
    os.makedirs(output_dir, exist_ok=True)
    paths = {
        TWO_FINGER.name: write_hand(TWO_FINGER, output_dir),
        FOUR_FINGER.name: write_hand(FOUR_FINGER, output_dir),
    }
    paths.update(write_objects(output_dir))
    logger.info(f"reference assets written: {output_dir}")
    return paths
