import os

import numpy as np
import pytest

from app import create_app
from app.services.assets import write_reference_assets
from app.services.kinematics import load_hand
from app.services.mesh_geometry import load_mesh, sample_surface

ARM_LENGTHS = (0.1, 0.08)

PLANAR_ARM = """<?xml version="1.0"?>
<robot name="planar_arm">
  <link name="base">
    <visual><geometry><box size="0.02 0.02 0.01"/></geometry></visual>
  </link>
  <link name="upper">
    <visual><origin xyz="{h1} 0 0"/><geometry><box size="{l1} 0.01 0.01"/></geometry></visual>
  </link>
  <link name="lower">
    <visual><origin xyz="{h2} 0 0"/><geometry><box size="{l2} 0.01 0.01"/></geometry></visual>
  </link>
  <joint name="shoulder" type="revolute">
    <parent link="base"/><child link="upper"/>
    <axis xyz="0 0 1"/><limit lower="-3.0" upper="3.0"/>
  </joint>
  <joint name="elbow" type="revolute">
    <parent link="upper"/><child link="lower"/>
    <origin xyz="{l1} 0 0"/>
    <axis xyz="0 0 1"/><limit lower="-3.0" upper="3.0"/>
  </joint>
</robot>
"""


def write_text(path, text: str) -> str:
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return str(path)


def write_planar_arm(directory) -> str:
    l1, l2 = ARM_LENGTHS
    text = PLANAR_ARM.format(l1=l1, l2=l2, h1=l1 / 2, h2=l2 / 2)
    return write_text(os.path.join(str(directory), "planar_arm.urdf"), text)


@pytest.fixture(scope="session")
def assets(tmp_path_factory):
    return write_reference_assets(str(tmp_path_factory.mktemp("assets")))


@pytest.fixture(scope="session")
def two_finger(assets):
    return load_hand(assets["two_finger"])


@pytest.fixture(scope="session")
def four_finger(assets):
    return load_hand(assets["four_finger"])


@pytest.fixture(scope="session")
def sphere_mesh(assets):
    return load_mesh(assets["sphere"])


@pytest.fixture(scope="session")
def sphere_samples(sphere_mesh):
    return sample_surface(sphere_mesh, 1500, seed=0)


@pytest.fixture
def planar_arm(tmp_path):
    return load_hand(write_planar_arm(tmp_path))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def app(tmp_path):
    return create_app(overrides={"cache_dir": str(tmp_path / "cache"), "out": str(tmp_path / "out")})


@pytest.fixture
def runner(app):
    return app.test_cli_runner()


def fast_settings(**extra) -> dict:
    """짧은 회귀용 설정 (작은 접촉장, 작은 배치)"""
    settings = {
        "n_configs": 128,
        "hand_density": 10.0,
        "object_density": 15.0,
        "batch": 16,
        "k": 2,
        "outer": 4,
        "inner": 16,
        "cache": False,
    }
    settings.update(extra)
    return settings


def fast_config(assets, directory, hand="two_finger", obj="sphere", **extra):
    """기준 에셋 + fast_settings 로 만든 RunConfig"""
    from app.config import parse_config

    settings = fast_settings(hand=assets[hand], object=assets[obj],
                             cache_dir=os.path.join(str(directory), "cache"),
                             out=os.path.join(str(directory), "out"))
    settings.update(extra)
    return parse_config(overrides=settings)


PINCH_ANGLE = 0.2


def pinch_grasp(angle: float = PINCH_ANGLE):
    """
    2지 핸드가 반지름 3cm 구를 양쪽에서 집는 그래스프 (직선 손가락, 근위 관절만 굽힘).
    손가락 안쪽 면이 구에 접하도록 구 중심 높이를 정한다. 마찰이 있어야 안정.
    """
    from app.services.assets import FINGER_SECTION, PALM_THICKNESS, SPHERE_RADIUS, TWO_FINGER
    from app.services.mesh_geometry import make_pose
    from app.services.pipeline import Grasp

    base_x, top = TWO_FINGER.finger_radius, PALM_THICKNESS / 2.0
    half = FINGER_SECTION[0] / 2.0
    c, s = np.cos(angle), np.sin(angle)
    center_z = top + (base_x * c - half - SPHERE_RADIUS) / s

    u = np.array([c, 0.0, s])
    contact = np.array([0.0, 0.0, center_z]) + SPHERE_RADIUS * u
    along = (contact - np.array([base_x, 0.0, top])) @ np.array([-s, 0.0, c])
    suffix = "proximal" if along <= TWO_FINGER.segments[0].length else "distal"
    mirror = np.array([-1.0, 1.0, 1.0])

    return Grasp(
        pose=make_pose(None, [0.0, 0.0, center_z]),
        q=np.array([angle, 0.0, angle, 0.0]),
        contact_points=np.vstack([contact, contact * mirror]),
        contact_normals=np.vstack([u, u * mirror]),
        contact_links=[f"f0_{suffix}", f"f1_{suffix}"],
        static_points=np.zeros((0, 3)),
        static_normals=np.zeros((0, 3)),
        static_links=[],
        objective=0.0,
        flags={"penetration_free": True, "stable": True, "ik_converged": True},
    )
