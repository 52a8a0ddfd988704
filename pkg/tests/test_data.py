"""Dataset substrate checks: mixture accounting, canvas geometry, file
round trips.

Oracles: brute-force density evaluation for mode assignment, Monte
Carlo for sampling weights, and scipy quadrature for canvas bump mass.
"""

import numpy as np
import pytest
from scipy import integrate

from kaleido.data import (
    Bump,
    CanvasSpec,
    GmmComponent,
    GmmSpec,
    assign_component,
    assign_mode,
    bump_density,
    dataset_from_csv,
    dataset_to_csv,
    render_canvas,
    sample_canvas_dataset,
    sample_dataset,
    samples_from_csv,
    samples_to_csv,
    toy_gmm_default,
)
from kaleido.errors import ContractError


# ---------------------------------------------------------------------------
# mixture spec

def test_default_layout_and_weights():
    spec = toy_gmm_default(unequal=True)
    assert spec.dim == 2
    assert spec.class_ids() == ["0", "1"]
    assert spec.mode_ids() == ["0A", "0B", "1A", "1B"]
    assert spec.modes_of("0") == ["0A", "0B"]
    assert np.allclose(spec.weights(), [0.35, 0.15, 0.35, 0.15])
    # within-class split is 0.7 / 0.3
    w = spec.weights()
    assert w[0] / (w[0] + w[1]) == pytest.approx(0.7)
    equal = toy_gmm_default(unequal=False)
    assert np.allclose(equal.weights(), 0.25)


def test_spec_rejects_overlapping_components():
    var = np.array([0.09, 0.09])
    with pytest.raises(ContractError, match="separated"):
        GmmSpec(components=(
            GmmComponent(0.5, np.array([0.0, 0.0]), var, "0", "0A"),
            GmmComponent(0.5, np.array([0.5, 0.0]), var, "0", "0B"),
        ))


def test_spec_rejects_unnormalized_weights():
    var = np.array([0.01, 0.01])
    with pytest.raises(ContractError, match="sum"):
        GmmSpec(components=(
            GmmComponent(0.6, np.array([0.0, 0.0]), var, "0", "0A"),
            GmmComponent(0.6, np.array([3.0, 0.0]), var, "0", "0B"),
        ))


def test_assign_mode_matches_brute_force(gmm_spec, rng):
    x = rng.uniform(-5, 5, size=(200, 2))
    got = assign_component(x, gmm_spec)
    # brute force: evaluate each weighted density with scalar math
    for i in range(200):
        best, best_val = None, -np.inf
        for k, comp in enumerate(gmm_spec.components):
            val = np.log(comp.weight)
            for d in range(2):
                val += (-0.5 * np.log(2 * np.pi * comp.variance[d])
                        - 0.5 * (x[i, d] - comp.mean[d]) ** 2 / comp.variance[d])
            if val > best_val:
                best, best_val = k, val
        assert got[i] == best


def test_assign_mode_centers(gmm_spec):
    assert assign_mode(np.array([-3.0, 3.0]), gmm_spec) == "0A"
    assert assign_mode(np.array([-3.0, -3.0]), gmm_spec) == "0B"
    assert assign_mode(np.array([3.0, 3.0]), gmm_spec) == "1A"
    assert assign_mode(np.array([3.0, -3.0]), gmm_spec) == "1B"


def test_responsibilities_normalize(gmm_spec, rng):
    r = gmm_spec.responsibilities(rng.uniform(-4, 4, size=(50, 2)))
    assert np.allclose(r.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(r >= 0)


def test_sample_dataset_weights_monte_carlo(gmm_spec):
    n = 40_000
    ds = sample_dataset(gmm_spec, n, seed=3)
    counts = {m: 0 for m in gmm_spec.mode_ids()}
    for s in ds:
        counts[s.mode_id] += 1
    for comp in gmm_spec.components:
        frac = counts[comp.mode_id] / n
        se = np.sqrt(comp.weight * (1 - comp.weight) / n)
        assert abs(frac - comp.weight) < 4 * se, (comp.mode_id, frac)


def test_sample_dataset_deterministic(gmm_spec):
    a = sample_dataset(gmm_spec, 64, seed=5)
    b = sample_dataset(gmm_spec, 64, seed=5)
    assert all(np.array_equal(x.x, y.x) and x.mode_id == y.mode_id for x, y in zip(a, b))
    c = sample_dataset(gmm_spec, 64, seed=6)
    assert any(not np.array_equal(x.x, y.x) for x, y in zip(a, c))


def test_labels_agree_with_assignment_rule(gmm_spec):
    for s in sample_dataset(gmm_spec, 500, seed=1):
        assert assign_mode(s.x, gmm_spec) == s.mode_id
        assert s.mode_id.startswith(s.class_id)


def test_spec_json_round_trip(gmm_spec):
    again = GmmSpec.from_jsonable(gmm_spec.to_jsonable())
    assert np.array_equal(again.means(), gmm_spec.means())
    assert np.array_equal(again.weights(), gmm_spec.weights())
    assert again.mode_ids() == gmm_spec.mode_ids()


# ---------------------------------------------------------------------------
# canvas

def test_bump_mass_matches_quadrature():
    spec = CanvasSpec(resolution=32)
    bump = Bump(x_c=0.5, y_c=0.45, r_major=0.2, r_minor=0.12, theta_deg=30.0, amplitude=0.8)
    grid = render_canvas([bump], spec)
    pixel_mass = grid.sum() / spec.resolution**2
    true_mass, _ = integrate.dblquad(
        lambda y, x: bump_density(bump, np.array(x), np.array(y)),
        0.0, 1.0, 0.0, 1.0, epsabs=1e-10)
    assert abs(pixel_mass - true_mass) / true_mass < 0.02


def test_bump_peak_value_at_center():
    bump = Bump(x_c=0.4, y_c=0.6, r_major=0.2, r_minor=0.1, theta_deg=45.0, amplitude=0.9)
    assert bump_density(bump, np.array(0.4), np.array(0.6)) == pytest.approx(0.9)
    # 2-sigma contour point along the major axis
    dx = 0.2 * np.cos(np.deg2rad(45.0))
    dy = 0.2 * np.sin(np.deg2rad(45.0))
    val = bump_density(bump, np.array(0.4 + dx), np.array(0.6 + dy))
    assert val == pytest.approx(0.9 * np.exp(-2.0), rel=1e-10)


def test_canvas_rejects_out_of_frame_bump():
    spec = CanvasSpec()
    bump = Bump(x_c=0.05, y_c=0.5, r_major=0.2, r_minor=0.2, theta_deg=0.0, amplitude=1.0)
    with pytest.raises(ContractError, match="outside"):
        render_canvas([bump], spec)


def test_canvas_dataset_classes_and_determinism():
    spec = CanvasSpec()
    ds = sample_canvas_dataset(spec, 40, seed=2)
    assert all(s.class_id in ("1bump", "2bump") for s in ds)
    assert all(s.x.shape == (spec.data_dim,) for s in ds)
    assert all(len(s.params["bumps"]) == int(s.class_id[0]) for s in ds)
    again = sample_canvas_dataset(spec, 40, seed=2)
    assert all(np.array_equal(a.x, b.x) for a, b in zip(ds, again))
    # canonical order: bumps sorted by (x_c, y_c)
    for s in ds:
        xs = [b["x_c"] for b in s.params["bumps"]]
        assert xs == sorted(xs)


def test_canvas_values_clipped_to_unit():
    spec = CanvasSpec()
    ds = sample_canvas_dataset(spec, 30, seed=9)
    for s in ds:
        assert s.x.min() >= 0.0 and s.x.max() <= 1.0


# ---------------------------------------------------------------------------
# file formats

def test_dataset_csv_round_trip_exact(gmm_spec):
    ds = sample_dataset(gmm_spec, 32, seed=8)
    text = dataset_to_csv(ds)
    back = dataset_from_csv(text)
    assert len(back) == 32
    for a, b in zip(ds, back):
        assert np.array_equal(a.x, b.x)  # repr round-trips float64 exactly
        assert a.class_id == b.class_id and a.mode_id == b.mode_id


def test_dataset_csv_carries_params_sidecar():
    spec = CanvasSpec()
    ds = sample_canvas_dataset(spec, 5, seed=4)
    text = dataset_to_csv(ds)
    back = dataset_from_csv(text, params=[s.params for s in ds])
    assert back[0].params == ds[0].params


def test_dataset_csv_rejects_bad_header():
    with pytest.raises(ContractError):
        dataset_from_csv("foo,bar\n1,2\n")


def test_sample_csv_round_trip(rng):
    x = rng.standard_normal((6, 2))
    modes = ["0A", "0B", "1A", "1B", "0A", "0A"]
    lats = ["mode_0A", "", "mode_1A", "", "mode_0A", ""]
    text = samples_to_csv(x, modes, lats)
    x2, m2, l2 = samples_from_csv(text)
    assert np.array_equal(x, x2)
    assert m2 == modes and l2 == lats


def test_sample_csv_rejects_length_mismatch(rng):
    with pytest.raises(ContractError):
        samples_to_csv(rng.standard_normal((3, 2)), ["0A"], ["", "", ""])
