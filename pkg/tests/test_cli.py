import json
import os

import pytest

from app.services.pipeline import GraspDataset

from conftest import fast_settings, pinch_grasp

# 합성/검증이 같은 오브젝트 샘플과 안정성 설정을 보도록 공통으로 넘긴다
SEARCH = dict(fast_settings(), batch=64, n_configs=512, outer=8, inner=32, friction=0.5)


def _sets(settings) -> list:
    args = []
    for key, value in settings.items():
        args += ["--set", f"{key}={value}"]
    return args


@pytest.fixture
def two_finger_args(assets):
    return ["--hand", assets["two_finger"], "--object", assets["sphere"]]


def test_make_assets(runner, tmp_path):
    result = runner.invoke(args=["make-assets", str(tmp_path / "assets")])
    assert result.exit_code == 0, result.output
    for name in ("two_finger.urdf", "two_finger.convex.json", "four_finger.urdf", "sphere.obj", "box.obj"):
        assert os.path.isfile(tmp_path / "assets" / name)


def test_build_index_reports_patch_memory(runner, assets):
    result = runner.invoke(args=["build-index", "--hand", assets["four_finger"],
                                 *_sets({"n_configs": 64, "hand_density": 10})])
    assert result.exit_code == 0, result.output
    assert "max_patch_bytes=" in result.output
    assert "link=palm" in result.output


def test_synthesize_then_validate(runner, app, two_finger_args):
    result = runner.invoke(args=["synthesize", *two_finger_args, *_sets(SEARCH)])
    assert result.exit_code == 0, result.output

    prefix = os.path.join(app.config["OUT"], "two_finger_sphere_s0")
    for suffix in ("_grasps.jsonl", "_profile.json", "_load_report.json", "_report.html"):
        assert os.path.isfile(prefix + suffix)
    with open(prefix + "_profile.json", encoding="utf-8") as f:
        assert json.load(f)["valid"] > 0

    result = runner.invoke(args=["validate", prefix + "_grasps.jsonl", *two_finger_args, *_sets(SEARCH)])
    assert result.exit_code == 0, result.output

    # 관절을 크게 틀면 재검증에 실패해야 한다
    dataset = GraspDataset.load(prefix + "_grasps.jsonl")
    for grasp in dataset.grasps:
        grasp.q = grasp.q.copy()
        grasp.q[0] += 0.5
    broken = dataset.save(prefix + "_broken.jsonl")
    result = runner.invoke(args=["validate", broken, *two_finger_args, *_sets(SEARCH)])
    assert result.exit_code == 1


def test_validate_pinch_dataset(runner, tmp_path, two_finger_args):
    path = GraspDataset([pinch_grasp()]).save(str(tmp_path / "pinch.jsonl"))
    result = runner.invoke(args=["validate", path, *two_finger_args, *_sets(SEARCH)])
    assert result.exit_code == 0, result.output
    assert "1 grasps, 0 failed" in result.output

    result = runner.invoke(args=["validate", path, *two_finger_args, *_sets(dict(SEARCH, friction=0.0))])
    assert result.exit_code == 1


def test_validate_empty_dataset(runner, tmp_path, two_finger_args):
    path = tmp_path / "empty.jsonl"
    path.write_text("", encoding="utf-8")
    result = runner.invoke(args=["validate", str(path), *two_finger_args])
    assert result.exit_code == 1


def test_bad_input_exits_with_error(runner, tmp_path, assets):
    result = runner.invoke(args=["synthesize", "--hand", str(tmp_path / "missing.urdf"),
                                 "--object", assets["sphere"]])
    assert result.exit_code == 2

    result = runner.invoke(args=["synthesize", "--hand", assets["two_finger"], "--object", assets["sphere"],
                                 "--set", "theta_hit=1.5"])
    assert result.exit_code == 2

    result = runner.invoke(args=["synthesize", "--hand", assets["two_finger"], "--object", assets["sphere"],
                                 "--set", "beta=0"])
    assert result.exit_code == 2
