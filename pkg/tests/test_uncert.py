import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from fixtures import sphere_scene
from catfield.geom import DegenerateCloudError, PointCloud3, fit_obb
from catfield.render import field_box, train_object_model
from catfield.synth import back_project, build_scene, render_sequence
from catfield.uncert import (
    Candidate,
    ReliabilityParams,
    cast_sphere_rays,
    evaluate_bundle,
    fibonacci_sphere,
    ray_entropy,
    ray_uncertainty,
    reliability,
    select_representative,
    write_uncertainty_csv,
)

PARAMS = ReliabilityParams()


def weight_vectors(max_len=20):
    return st.lists(st.floats(0, 1), min_size=1, max_size=max_len).map(np.array)


# -- entropy and uncertainty -----------------------------------------------


def test_entropy_examples():
    assert np.isclose(ray_entropy(np.full(10, 0.1)), math.log(10), atol=1e-12)
    assert ray_entropy(np.zeros(8)) == 0


def test_uncertainty_examples():
    assert ray_uncertainty(np.array([1.0, 0, 0, 0])) == 1.0
    assert ray_uncertainty(np.zeros(5)) == 0.0
    w = np.array([0.5, 0.25])
    assert np.isclose(ray_entropy(w), 0.6931, atol=1e-4)
    assert np.isclose(ray_uncertainty(w), 0.375, atol=1e-4)


@given(weight_vectors())
def test_uncertainty_in_unit_interval_for_valid_weights(w):
    if w.sum() > 1:
        w = w / w.sum()
    u = ray_uncertainty(w)
    assert 0 <= u <= 1 + 1e-12


@given(st.integers(2, 12), st.floats(0.05, 1.0))
def test_uncertainty_falls_as_entropy_rises(n, mass):
    # same total mass, spread over more samples
    peaked = np.zeros(n)
    peaked[0] = mass
    spread = np.full(n, mass / n)
    assert ray_entropy(spread) > ray_entropy(peaked)
    assert ray_uncertainty(spread) < ray_uncertainty(peaked)


def test_batched_uncertainty_matches_rows():
    rng = np.random.default_rng(0)
    w = rng.dirichlet(np.ones(6), size=5) * 0.9
    assert np.allclose(ray_uncertainty(w), [ray_uncertainty(r) for r in w])


# -- reliability -----------------------------------------------------------


def closed_form(u, m1=0.1, m2=0.15, M1=0.57, M2=0.65, kappa=0.9):
    lk = math.log(kappa / (1 - kappa))
    a_m, a_M = 2 * lk / (m2 - m1), 2 * lk / (M2 - M1)
    b_m, b_M = (m1 + m2) / 2, (M1 + M2) / 2
    return 1 / (1 + math.exp(a_m * (u - b_m))) + 1 / (1 + math.exp(-a_M * (u - b_M)))


def test_reliability_examples():
    assert abs(reliability(0.1) - 0.9) < 1e-3
    assert reliability(0.375) < 0.01
    assert reliability(1.0) > 0.99


@given(st.floats(0, 1))
def test_reliability_matches_closed_form(u):
    assert np.isclose(reliability(u), closed_form(u), atol=1e-12)


def test_reliability_at_band_centers():
    for beta in (PARAMS.beta_m, PARAMS.beta_M):
        assert 0 <= reliability(beta) - 0.5 < 1e-5


def test_band_edges_validated():
    with pytest.raises(ValueError):
        ReliabilityParams(m1=0.2, m2=0.15)
    with pytest.raises(ValueError):
        ReliabilityParams(kappa=0.4)


# -- sphere rays -----------------------------------------------------------


def test_sphere_radius_scales_with_extent():
    cloud = PointCloud3(np.array([[0, 0, 0], [2.0, 0, 0], [1.0, 0.5, 0.2]]))
    bundle = cast_sphere_rays(cloud, 64)
    assert np.isclose(bundle.radius, 2.4)
    assert np.allclose(np.linalg.norm(bundle.origins - bundle.center, axis=1), 2.4)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rays_pass_through_center(seed):
    cloud = PointCloud3(np.random.default_rng(seed).normal(size=(50, 3)))
    b = cast_sphere_rays(cloud, 100)
    to_center = b.center - b.origins
    cross = np.cross(to_center, b.directions)
    assert np.allclose(cross, 0, atol=1e-9)
    assert np.all(np.einsum("ij,ij->i", to_center, b.directions) > 0)
    assert np.allclose(b.origins + b.chord_length * b.directions, 2 * b.center - b.origins)


def test_fibonacci_spacing_is_even():
    n = 100
    d = fibonacci_sphere(n)
    dist, _ = cKDTree(d).query(d, 2)
    nearest = 2 * np.arcsin(dist[:, 1] / 2)
    ideal = math.sqrt(8 * math.pi / (math.sqrt(3) * n))  # hexagonal packing
    assert np.all(np.abs(nearest / ideal - 1) < 0.3)


def test_degenerate_cloud_rejected():
    with pytest.raises(DegenerateCloudError):
        cast_sphere_rays(PointCloud3(np.ones((1, 3))))
    with pytest.raises(DegenerateCloudError):
        cast_sphere_rays(PointCloud3(np.ones((5, 3))))


# -- representative --------------------------------------------------------


def sphere_candidate(instance_id, n_views, coverage):
    spec = sphere_scene(n_views)
    spec.trajectory[0].coverage = coverage
    scene = build_scene(spec)
    frames = render_sequence(scene)
    obs = back_project(frames, 1, scene)
    box = field_box(fit_obb(obs.cloud))
    return Candidate(instance_id, train_object_model(frames, obs, box).model, box, obs.cloud)


def test_fully_observed_sphere_preferred(trained_sphere):
    full = Candidate(1, trained_sphere["result"].model, trained_sphere["box"], trained_sphere["obs"].cloud)
    half = sphere_candidate(2, 6, 0.5)
    choice = select_representative([half, full])
    assert choice.instance_id == 1
    assert choice.scores[1] > choice.scores[2]


def test_single_candidate_wins(trained_sphere):
    c = Candidate(7, trained_sphere["result"].model, trained_sphere["box"], trained_sphere["obs"].cloud)
    assert select_representative([c], n_dirs=64).instance_id == 7


def test_ties_broken_by_point_count_then_id(trained_sphere):
    model, box, cloud = trained_sphere["result"].model, trained_sphere["box"], trained_sphere["obs"].cloud
    same = [Candidate(5, model, box, cloud), Candidate(3, model, box, cloud)]
    first = select_representative(same, n_dirs=64)
    assert first.scores[3] == first.scores[5]
    assert first.instance_id == 3
    denser = PointCloud3(np.concatenate([cloud.points, cloud.points]))
    # doubled points leave the centroid and extent, hence the rays, unchanged
    assert select_representative([Candidate(5, model, box, denser), same[1]], n_dirs=64).instance_id == 5


def test_random_method_uses_rng(trained_sphere):
    model, box, cloud = trained_sphere["result"].model, trained_sphere["box"], trained_sphere["obs"].cloud
    cands = [Candidate(i, model, box, cloud) for i in (1, 2, 3)]
    picks = {select_representative(cands, method="random", rng=np.random.default_rng(s)).instance_id for s in range(30)}
    assert picks == {1, 2, 3}
    with pytest.raises(ValueError):
        select_representative(cands, method="best")


def test_uncertainty_csv(tmp_path, trained_sphere):
    bundle = cast_sphere_rays(trained_sphere["obs"].cloud, 32)
    with pytest.raises(ValueError):
        write_uncertainty_csv(tmp_path / "u.csv", bundle)
    evaluate_bundle(bundle, trained_sphere["result"].model, trained_sphere["box"])
    write_uncertainty_csv(tmp_path / "u.csv", bundle)
    rows = list(csv.DictReader(open(tmp_path / "u.csv")))
    assert len(rows) == 32
    assert np.allclose([float(r["g"]) for r in rows], bundle.g, atol=1e-6)
    assert all(0 <= float(r["u"]) <= 1 for r in rows)
