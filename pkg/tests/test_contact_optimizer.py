import math

import numpy as np
import pytest

from app.services.contact_field import ContactDomain
from app.services.contact_optimizer import OptimizerParams, optimize_contacts, project_to_domain
from app.services.errors import ContactFieldError
from app.services.wrench_stability import WrenchProblem, solve_fswo, wrench_objective


def _whole_surface_domain(samples, group: int) -> ContactDomain:
    n = len(samples)
    return ContactDomain(
        group=group,
        sample_ids=np.arange(n),
        points=samples.points,
        normals=samples.normals,
        scores=np.ones(n),
        hit_ptr=np.arange(n + 1),
        hit_patch=np.zeros(n, dtype=np.int64),
        hit_box=np.zeros(n, dtype=np.int64),
    )


def _domain(points) -> ContactDomain:
    points = np.asarray(points, dtype=float)
    n = len(points)
    normals = points / np.maximum(np.linalg.norm(points, axis=1, keepdims=True), 1e-12)
    return ContactDomain(0, np.arange(n), points, normals, np.ones(n), np.arange(n + 1),
                         np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64))


@pytest.fixture(scope="module")
def sphere_domains(sphere_samples):
    return [_whole_surface_domain(sphere_samples, 0), _whole_surface_domain(sphere_samples, 1)]


def test_sphere_pair_converges_to_antipodal(sphere_domains):
    params = OptimizerParams(outer=32, inner=32)
    antipodal = 0
    for seed in range(10):
        selection = optimize_contacts(sphere_domains, params, seed=seed)
        cos_angle = float(selection.normals[0] @ selection.normals[1])
        if cos_angle <= math.cos(math.radians(165.0)) and selection.objective < 1e-2:
            antipodal += 1
        assert np.all(np.diff(selection.trace) <= 0.0)
    assert antipodal >= 9


def test_selection_is_made_of_domain_elements(sphere_domains):
    selection = optimize_contacts(sphere_domains, OptimizerParams(outer=4, inner=8), seed=3)
    for slot, domain in enumerate(sphere_domains):
        element = selection.element_ids[slot]
        assert np.array_equal(selection.points[slot], domain.points[element])
        assert np.array_equal(selection.normals[slot], domain.normals[element])


def test_same_seed_same_trajectory(sphere_domains):
    params = OptimizerParams(outer=4, inner=8)
    a = optimize_contacts(sphere_domains, params, seed=11)
    b = optimize_contacts(sphere_domains, params, seed=11)
    assert np.array_equal(a.element_ids, b.element_ids)
    assert a.trace == b.trace


def test_warm_started_objective_matches_cold_solve(sphere_domains):
    selection = optimize_contacts(sphere_domains, OptimizerParams(outer=8, inner=16), seed=5)
    cold = solve_fswo(WrenchProblem.from_contacts(selection.points, -selection.normals))
    assert abs(cold.objective - selection.objective) <= 1e-3


def test_zero_outer_rounds_keeps_initial_selection(sphere_domains):
    selection = optimize_contacts(sphere_domains, OptimizerParams(outer=0), seed=2)
    assert len(selection.trace) == 1


def test_static_contacts_take_part_in_objective(sphere_domains):
    static = (np.array([[0.0, 0.0, -0.03]]), np.array([[0.0, 0.0, -1.0]]))
    selection = optimize_contacts(sphere_domains, OptimizerParams(outer=2, inner=4),
                                  static_contacts=static, seed=0)
    assert len(selection.points) == 2
    assert len(selection.solution.alpha) == 3


def test_projection_prefers_lower_id_on_ties():
    assert project_to_domain([0.0, 0.0, 0.0], _domain([[1.0, 0, 0], [-1.0, 0, 0]])) == 0
    assert project_to_domain([0.0, 0.0, 0.0], _domain([[0, 2.0, 0], [-1.0, 0, 0], [1.0, 0, 0]])) == 1
    assert project_to_domain([0.9, 0.0, 0.0], _domain([[-1.0, 0, 0], [1.0, 0, 0]])) == 1


def test_empty_domain_raises(sphere_domains):
    with pytest.raises(ContactFieldError):
        optimize_contacts([sphere_domains[0], _domain(np.zeros((0, 3)))])
    with pytest.raises(ValueError):
        optimize_contacts([])


def test_returned_objective_matches_returned_contacts(sphere_domains):
    selection = optimize_contacts(sphere_domains, OptimizerParams(outer=4, inner=16), seed=8)
    problem = WrenchProblem.from_contacts(selection.points, -selection.normals)
    assert wrench_objective(problem, selection.solution) == pytest.approx(selection.objective, rel=1e-9, abs=1e-12)


def test_drifted_objective_is_replaced_by_verified_value(sphere_domains, monkeypatch):
    monkeypatch.setattr("app.services.contact_optimizer.wrench_objective", lambda problem, solution: 123.0)
    selection = optimize_contacts(sphere_domains, OptimizerParams(outer=1, inner=0), seed=0)
    assert selection.objective == 123.0
