import math
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from app.services.errors import GraspError, HandModelError
from app.services.kinematics import (
    ContactTarget,
    IkParams,
    dependency_groups,
    forward_kinematics,
    forward_kinematics_batch,
    joint_config,
    load_hand,
    point_jacobian,
    solve_contact_ik,
)
from app.services.mesh_geometry import transform_points

from conftest import ARM_LENGTHS, write_text


def test_reference_hands_load(two_finger, four_finger):
    assert two_finger.dof == 4
    assert four_finger.dof == 16
    assert two_finger.links[two_finger.root].name == "palm"
    assert two_finger.joint_names[:2] == ("f0_proximal_joint", "f0_distal_joint")
    assert len(two_finger.source_hash) == 64


def test_dependency_groups(four_finger, two_finger):
    groups = dependency_groups(four_finger)
    assert groups.static == ("palm",)
    assert len(groups.groups) == 4
    assert all(len(g) == 4 for g in groups.groups)
    assert groups.group_of("palm") == -1
    assert groups.group_of("f2_distal") == groups.group_of("f2_knuckle")
    assert len(dependency_groups(two_finger).groups) == 2


def test_dependency_groups_ignore_link_order(assets, four_finger):
    tree = ET.parse(assets["four_finger"])
    robot = tree.getroot()
    links = robot.findall("link")
    for link in links:
        robot.remove(link)
    for position, link in enumerate(reversed(links)):
        robot.insert(position, link)
    path = os.path.join(os.path.dirname(assets["four_finger"]), "four_finger_reordered.urdf")
    tree.write(path)

    reordered = load_hand(path)
    assert [link.name for link in reordered.links] != [link.name for link in four_finger.links]
    expected, actual = dependency_groups(four_finger), dependency_groups(reordered)
    assert {frozenset(g) for g in actual.groups} == {frozenset(g) for g in expected.groups}
    assert actual.static == expected.static


def test_finger_base_position_at_zero_config(two_finger):
    transforms = forward_kinematics(two_finger, np.zeros(two_finger.dof))
    base = transforms[two_finger.link_index("f0_proximal")]
    assert np.allclose(base[:3, 3], [0.045, 0.0, 0.006])
    tip = transforms[two_finger.link_index("f1_distal")]
    assert np.allclose(tip[:3, 3], [-0.045, 0.0, 0.006 + 0.045], atol=1e-12)


def test_flexion_curls_towards_palm_center(two_finger):
    q = np.zeros(two_finger.dof)
    q[0] = 0.5
    transforms = forward_kinematics(two_finger, q)
    distal = transforms[two_finger.link_index("f0_distal")]
    assert distal[0, 3] < 0.045


def test_batch_fk_matches_single(four_finger, rng):
    qs = four_finger.lower + rng.random((5, four_finger.dof)) * (four_finger.upper - four_finger.lower)
    batch = forward_kinematics_batch(four_finger, qs)
    for q, transforms in zip(qs, batch):
        assert np.allclose(forward_kinematics(four_finger, q), transforms)


def test_point_jacobian_matches_finite_differences(four_finger, rng):
    step = 1e-6
    for _ in range(100):
        q = four_finger.lower + rng.random(four_finger.dof) * (four_finger.upper - four_finger.lower)
        link = int(rng.integers(len(four_finger.links)))
        local = rng.normal(scale=0.02, size=3)
        jac = point_jacobian(four_finger, q, link, local)

        numeric = np.zeros_like(jac)
        for j in range(four_finger.dof):
            dq = np.zeros(four_finger.dof)
            dq[j] = step
            plus = transform_points(local[None], forward_kinematics(four_finger, q + dq)[link])[0]
            minus = transform_points(local[None], forward_kinematics(four_finger, q - dq)[link])[0]
            numeric[:, j] = (plus - minus) / (2 * step)
        assert np.max(np.abs(jac - numeric)) <= 1e-5


def test_planar_arm_matches_analytic_ik(planar_arm):
    l1, l2 = ARM_LENGTHS
    x, y = 0.12, 0.07
    elbow = math.acos((x * x + y * y - l1 * l1 - l2 * l2) / (2 * l1 * l2))
    shoulder = math.atan2(y, x) - math.atan2(l2 * math.sin(elbow), l1 + l2 * math.cos(elbow))
    heading = shoulder + elbow

    lower = planar_arm.link_index("lower")
    target = ContactTarget(
        point=np.array([x, y, 0.0]),
        normal=np.array([math.cos(heading), math.sin(heading), 0.0]),
        link=lower,
        local_point=np.array([l2, 0.0, 0.0]),
        local_normal=np.array([1.0, 0.0, 0.0]),
    )
    q0 = np.array([shoulder + 0.2, elbow - 0.2])
    result = solve_contact_ik(planar_arm, q0, [target], IkParams(iters=200, tolerance=1e-7))

    assert result.position_residuals.max() <= 1e-4
    assert np.allclose(result.q, [shoulder, elbow], atol=1e-3)
    assert not result.unused_mask.any()


def test_ik_objective_is_monotone(four_finger, rng):
    for _ in range(20):
        q_true = four_finger.lower + rng.random(four_finger.dof) * (four_finger.upper - four_finger.lower)
        transforms = forward_kinematics(four_finger, q_true)
        targets = []
        for name in rng.choice(["f0_distal", "f1_distal", "f2_middle", "f3_distal"], size=2, replace=False):
            link = four_finger.link_index(str(name))
            local_point = np.array([0.006, 0.0, 0.01])
            local_normal = np.array([1.0, 0.0, 0.0])
            targets.append(ContactTarget(
                point=transform_points(local_point[None], transforms[link])[0],
                normal=transforms[link][:3, :3] @ local_normal,
                link=link,
                local_point=local_point,
                local_normal=local_normal,
            ))
        result = solve_contact_ik(four_finger, four_finger.rest_pose(), targets)
        assert np.all(np.diff(result.trace) <= 1e-12)
        assert np.all(result.q >= four_finger.lower) and np.all(result.q <= four_finger.upper)


def test_unreachable_target_stretches_arm_towards_it(planar_arm):
    l1, l2 = ARM_LENGTHS
    lower = planar_arm.link_index("lower")
    target = ContactTarget(
        point=np.array([0.0, 10.0, 0.0]),
        normal=np.array([0.0, 1.0, 0.0]),
        link=lower,
        local_point=np.array([l2, 0.0, 0.0]),
        local_normal=np.array([1.0, 0.0, 0.0]),
    )
    result = solve_contact_ik(planar_arm, np.zeros(2), [target], IkParams(iters=200))

    # 팔을 목표 방향으로 완전히 편 상태에서 멈춘다
    assert result.position_residuals[0] == pytest.approx(10.0 - (l1 + l2), abs=1e-3)
    assert np.all(np.diff(result.trace) <= 1e-12)


def test_non_positive_normal_weight_is_rejected(planar_arm):
    lower = planar_arm.link_index("lower")
    target = ContactTarget(np.array([0.1, 0.05, 0.0]), np.array([1.0, 0.0, 0.0]), lower,
                           np.array([ARM_LENGTHS[1], 0.0, 0.0]), np.array([1.0, 0.0, 0.0]))
    with pytest.raises(GraspError):
        solve_contact_ik(planar_arm, np.zeros(2), [target], IkParams(beta=0.0))


def test_palm_target_already_touching_does_not_move(two_finger):
    palm = two_finger.link_index("palm")
    local_point = np.array([0.0, 0.0, 0.006])
    target = ContactTarget(local_point, np.array([0.0, 0.0, 1.0]), palm,
                           local_point, np.array([0.0, 0.0, 1.0]))
    q0 = two_finger.rest_pose()
    result = solve_contact_ik(two_finger, q0, [target])
    assert result.position_residuals[0] < 1e-6
    assert np.array_equal(result.q, q0)
    assert result.unused_mask.all()


def test_unused_mask_covers_untargeted_fingers(two_finger):
    transforms = forward_kinematics(two_finger, two_finger.rest_pose())
    link = two_finger.link_index("f0_distal")
    local_point = np.array([-0.006, 0.0, 0.02])
    target = ContactTarget(transform_points(local_point[None], transforms[link])[0],
                           transforms[link][:3, :3] @ np.array([-1.0, 0.0, 0.0]),
                           link, local_point, np.array([-1.0, 0.0, 0.0]))
    result = solve_contact_ik(two_finger, two_finger.rest_pose(), [target])
    assert result.unused_mask.tolist() == [False, False, True, True]


def test_joint_config_clamps_and_checks_size(two_finger):
    clamped = joint_config(two_finger, [5.0, -5.0, 0.0, 0.0])
    assert clamped[0] == two_finger.upper[0] and clamped[1] == two_finger.lower[1]
    with pytest.raises(HandModelError):
        joint_config(two_finger, [0.0, 0.0])


BASE_LINK = '<link name="{name}"><visual><geometry><box size="0.01 0.01 0.01"/></geometry></visual></link>'
JOINT = ('<joint name="{name}" type="revolute"><parent link="{parent}"/><child link="{child}"/>'
         '<axis xyz="0 0 1"/><limit lower="{lower}" upper="{upper}"/></joint>')


def _urdf(links, joints) -> str:
    return ('<robot name="t">' + "".join(BASE_LINK.format(name=n) for n in links)
            + "".join(JOINT.format(**j) for j in joints) + "</robot>")


@pytest.mark.parametrize("links, joints", [
    (["a", "b"], [dict(name="j", parent="a", child="c", lower=0, upper=1)]),
    (["a", "a"], []),
    (["a", "b"], [dict(name="j", parent="a", child="b", lower=1, upper=0)]),
    (["a", "b", "c"], [dict(name="j1", parent="a", child="b", lower=0, upper=1),
                       dict(name="j2", parent="c", child="b", lower=0, upper=1)]),
    (["a", "b"], [dict(name="j1", parent="a", child="b", lower=0, upper=1),
                  dict(name="j2", parent="b", child="a", lower=0, upper=1)]),
])
def test_malformed_hands_are_rejected(tmp_path, links, joints):
    path = write_text(tmp_path / "bad.urdf", _urdf(links, joints))
    with pytest.raises(HandModelError):
        load_hand(path)


def test_missing_mesh_reference_is_rejected(tmp_path):
    text = ('<robot name="t"><link name="a"><visual><geometry><mesh filename="nope.obj"/>'
            '</geometry></visual></link></robot>')
    with pytest.raises(HandModelError):
        load_hand(write_text(tmp_path / "m.urdf", text))
