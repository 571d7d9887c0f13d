import json
from collections import Counter

import numpy as np
import pytest
from scipy.spatial import cKDTree

from app.services.errors import GraspError, MeshError
from app.services.mesh_geometry import SurfaceSamples, transform_points
from app.services.pipeline import (
    STAGES,
    GraspDataset,
    GraspSynthesizer,
    PlacementSpec,
    SearchCache,
    generate_domains,
    place_object,
    postprocess,
    prepare,
    preprocess_object,
    run_batch,
    stage_rng,
)

from conftest import fast_config, fast_settings, pinch_grasp

NO_STATIC = (np.zeros((0, 3)), np.zeros((0, 3)), [])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("run")


@pytest.fixture(scope="module")
def config(assets, run_dir):
    return fast_config(assets, run_dir)


@pytest.fixture(scope="module")
def context(config):
    ctx, _, _ = prepare(config)
    return ctx


@pytest.fixture(scope="module")
def first_run(config):
    return run_batch(config)


def _records(dataset):
    return json.dumps(dataset.records(), sort_keys=True)


# ========= Object preprocessing =========
def test_convex_object_keeps_every_sample(sphere_samples):
    kept_samples, kept = preprocess_object(sphere_samples, 0.01, 0.005)
    assert len(kept) == len(sphere_samples)
    assert len(kept_samples) == len(sphere_samples)


def test_zero_probe_width_keeps_every_sample(sphere_samples):
    _, kept = preprocess_object(sphere_samples, 0.0, 0.005)
    assert np.array_equal(kept, np.arange(len(sphere_samples)))


def test_inner_corner_samples_are_removed():
    # z=0 바닥과 x=0 벽이 만나는 오목한 모서리
    grid = np.linspace(0.001, 0.06, 40)
    floor = np.array([[x, y, 0.0] for x in grid for y in grid])
    wall = np.array([[0.0, y, z] for z in grid for y in grid])
    points = np.vstack([floor, wall])
    normals = np.vstack([np.tile([0.0, 0.0, 1.0], (len(floor), 1)), np.tile([1.0, 0.0, 0.0], (len(wall), 1))])
    samples = SurfaceSamples(points, normals, np.zeros(len(points), dtype=np.int64), np.ones(len(points)))

    _, kept = preprocess_object(samples, 0.01, 0.005)
    removed = np.setdiff1d(np.arange(len(points)), kept)
    to_corner = np.where(normals[:, 2] > 0.5, points[:, 0], points[:, 2])
    assert len(removed) > 0
    assert np.all(to_corner[removed] < 0.01)
    assert np.all(np.isin(np.flatnonzero(to_corner > 0.03), kept))


def test_preprocess_rejects_empty_samples():
    empty = SurfaceSamples(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0))
    with pytest.raises(MeshError):
        preprocess_object(empty)


# ========= Placement =========
def test_zero_volume_box_puts_centroid_at_center(sphere_samples):
    spec = PlacementSpec(box_center=(0.01, -0.02, 0.07), box_size=(0.0, 0.0, 0.0), static_probability=0.0)
    records = place_object(spec, sphere_samples, None, NO_STATIC, [], batch=8, seed=0)
    centroid = sphere_samples.points.mean(axis=0)
    for record in records:
        assert np.allclose(transform_points(centroid[None], record.pose)[0], [0.01, -0.02, 0.07], atol=1e-12)
    assert [r.pose_id for r in records] == list(range(8))


def test_exhaustive_placement_aligns_sample_with_contact_vector(context):
    spec = PlacementSpec(mode="exhaustive", static_probability=0.0)
    index = context.index
    tree = cKDTree(index.entry_position)

    for record in place_object(spec, context.samples, index, NO_STATIC, [], batch=16, seed=4):
        posed = transform_points(context.samples.points, record.pose)
        normals = context.samples.normals @ record.pose[:3, :3].T
        dist, _ = tree.query(posed)
        aligned = False
        for j in np.flatnonzero(dist <= 1e-9):
            # 같은 위치의 대표 벡터가 여러 개일 수 있다
            for entry in tree.query_ball_point(posed[j], 1e-9):
                aligned |= bool(np.allclose(normals[j], -index.entry_direction[entry], atol=1e-9))
        assert aligned


def test_exhaustive_placement_needs_index(sphere_samples):
    with pytest.raises(GraspError):
        place_object(PlacementSpec(mode="exhaustive"), sphere_samples, None, NO_STATIC, [], 4, 0)


def test_canonical_placement_acceptance(context):
    records = place_object(
        context.placement, context.samples, context.index,
        (context.static_points, context.static_normals, context.static_links),
        context.static_parts, batch=64, seed=0, margin=context.margin)
    accepted = [r for r in records if r.accepted]
    assert len(accepted) >= 32
    assert {r.reason for r in records if not r.accepted} <= {"penetration"}
    for record in records:
        if len(record.static_points):
            assert record.static_links[0] == "palm"


def test_invalid_placement_spec():
    with pytest.raises(ValueError):
        PlacementSpec(mode="grid")
    with pytest.raises(ValueError):
        PlacementSpec(static_probability=1.5)


# ========= Domains / postprocessing =========
def test_too_few_groups_yield_no_domains(context):
    pose = np.eye(4)
    pose[2, 3] = 0.06
    assert generate_domains(context.index, context.samples, pose, context.groups, 3,
                            context.theta_hit, rng=0) is None


def test_postprocess_without_candidates(context):
    grasps, reasons = postprocess(context.model, [], context.samples, 0.05, seed=0)
    assert grasps == [] and reasons == Counter()


def test_stage_streams_are_independent():
    a = stage_rng(0, 3, 0, 1).random(4)
    assert np.array_equal(a, stage_rng(0, 3, 0, 1).random(4))
    assert not np.array_equal(a, stage_rng(0, 3, 0, 2).random(4))
    assert not np.array_equal(a, stage_rng(0, 3, 1, 1).random(4))
    assert not np.array_equal(a, stage_rng(1, 3, 0, 1).random(4))


# ========= Batch runs =========
def test_run_is_deterministic(config, first_run):
    dataset, _, _, reasons = first_run
    again, _, _, again_reasons = run_batch(config)
    assert _records(dataset) == _records(again)
    assert reasons == again_reasons


def test_stage_cache_is_transparent(assets, run_dir, first_run):
    cached_config = fast_config(assets, run_dir, cache=True)
    cache = SearchCache()
    cached, _, _, _ = run_batch(cached_config, cache)
    assert _records(cached) == _records(first_run[0])
    assert len(cache.index) == 1 and len(cache.verdicts) == cached_config.batch

    # 두 번째 실행은 캐시된 도메인/판정을 재사용
    reused, _, _, _ = run_batch(cached_config, cache)
    assert _records(reused) == _records(first_run[0])


def test_every_candidate_is_accounted_for(config, context, first_run):
    dataset, _, report, reasons = first_run
    assert len(dataset) + sum(reasons.values()) == config.batch * config.passes
    assert report["rejections"] == dict(reasons)
    assert report["object_samples"]["removed"] == 0
    model = context.model
    for grasp in dataset.grasps:
        assert grasp.valid
        assert grasp.residual <= config.contact_tolerance
        assert np.all(grasp.q >= model.lower) and np.all(grasp.q <= model.upper)


def test_profile_covers_the_run(first_run):
    _, profile, _, _ = first_run
    assert set(profile.seconds) == set(STAGES)
    assert sum(profile.seconds.values()) >= 0.95 * profile.total
    data = profile.to_dict()
    assert data["valid"] == profile.valid
    assert data["sps"] == pytest.approx(profile.valid / profile.total)


def test_extra_passes_extend_the_first(assets, run_dir, first_run):
    two_pass = fast_config(assets, run_dir, passes=2)
    dataset, _, report, reasons = run_batch(two_pass)
    first = first_run[0]
    assert _records(GraspDataset(dataset.grasps[:len(first)])) == _records(first)
    assert {g.pass_id for g in dataset.grasps} <= {0, 1}
    assert len(dataset) + sum(reasons.values()) == 2 * two_pass.batch
    assert report["placements"]["passes"] == 2


def test_synthesizer_results(config, tmp_path):
    synthesizer = GraspSynthesizer(config)
    results = synthesizer.synthesize()
    assert set(results) == {"metadata", "summary", "profile", "load_report", "dataset"}
    summary = results["summary"]
    assert summary["attempted"] == config.batch
    assert summary["valid_grasps"] == len(results["dataset"])

    html = synthesizer.save_html_report(results, str(tmp_path / "report.html"))
    with open(html, encoding="utf-8") as f:
        assert "<html" in f.read()


# ========= Dataset file =========
def test_dataset_file_keeps_static_contacts(tmp_path):
    grasp = pinch_grasp()
    grasp.static_points = np.array([[0.0, 0.0, 0.006]])
    grasp.static_normals = np.array([[0.0, 0.0, -1.0]])
    grasp.static_links = ["palm"]
    path = GraspDataset([grasp]).save(str(tmp_path / "grasps.jsonl"))

    with open(path, encoding="utf-8") as f:
        record = json.loads(f.readline())
    assert len(record["pose"]) == 7
    assert [c.get("static", False) for c in record["contacts"]] == [False, False, True]

    loaded = GraspDataset.load(path).grasps[0]
    assert loaded.static_links == ["palm"]
    assert loaded.contact_links == grasp.contact_links
    assert np.allclose(loaded.pose, grasp.pose)


def test_malformed_dataset_raises(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"pose": [0, 0, 0, 1, 0, 0, 0]}\n', encoding="utf-8")
    with pytest.raises(GraspError):
        GraspDataset.load(str(path))
    with pytest.raises(GraspError):
        GraspDataset.load(str(tmp_path / "missing.jsonl"))


@pytest.mark.slow
@pytest.mark.parametrize("hand, k", [("two_finger", 2), ("four_finger", 3)])
@pytest.mark.parametrize("obj", ["sphere", "box"])
def test_full_size_reference_run(assets, tmp_path, runner, hand, k, obj):
    settings = dict(fast_settings(), n_configs=4096, hand_density=20.0, object_density=40.0,
                    batch=1024, outer=8, inner=32, k=k)
    config = fast_config(assets, tmp_path, hand=hand, obj=obj, **settings)
    dataset, _, _, _ = run_batch(config)
    assert len(dataset) >= 50

    # 저장된 데이터셋은 같은 설정의 독립 재검증을 모두 통과해야 한다
    path = dataset.save(str(tmp_path / f"{hand}_{obj}_grasps.jsonl"))
    args = ["validate", path, "--hand", assets[hand], "--object", assets[obj]]
    for key, value in settings.items():
        args += ["--set", f"{key}={value}"]
    result = runner.invoke(args=args)
    assert result.exit_code == 0, result.output
