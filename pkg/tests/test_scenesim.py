import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from carvenerf.diffcore import ConfigurationError
from carvenerf.scenesim import (PRESETS, CameraPose, LabelPolicy, SceneSpec, Surface, UsageError, front_depth,
                                invert_affine, label_map, look_at, make_dataset, make_scene, read_dataset,
                                read_ppm, render_analytic, sample_label, scene_from_text, scene_to_text, trace,
                                write_dataset, write_ppm)

GREEN, BLUE = (0.1, 0.9, 0.2), (0.2, 0.3, 0.8)


def frontal(width=16, height=16, focal=20.0):
    return look_at((0.0, 0.0, 2.0), (0.0, 0.0, 0.0), width, height, focal)


def center_ray(gt, pose):
    return gt.ray((pose.height // 2) * pose.width + pose.width // 2)


# ------------------------------------------------------------------- presets
def test_unknown_preset():
    with pytest.raises(UsageError, match="unknown preset"):
        make_scene("cathedral")


@pytest.mark.parametrize("seed", [0, 3, 17])
def test_wall_is_single_unit_mass(seed):
    scene = make_scene("wall", seed)
    assert len(scene.surfaces) == 1 and scene.surfaces[0].alpha == 1.0
    _, gt = render_analytic(scene, frontal())
    assert np.all(gt.n_modes() == 1)
    np.testing.assert_allclose(gt.pmf.sum(axis=1), 1.0)


@pytest.mark.parametrize("seed", [0, 5])
def test_glass_wall_pmf_is_point_four_point_six(seed):
    scene = make_scene("glass-wall", seed, glass_alpha=0.4)
    ray = trace(scene, np.array([[0.1, -0.2, 2.0]]), np.array([[0.0, 0.0, -1.0]])).ray(0)
    np.testing.assert_allclose(ray.pmf, [0.4, 0.6], atol=1e-15)
    np.testing.assert_allclose(ray.distances, [1.0, 2.0], atol=1e-12)
    assert ray.residual == 0.0


def _slab_hits(o, d, lo, hi):
    """Independent ray/box slab test, one ray at a time."""
    t0, t1 = -np.inf, np.inf
    for k in range(3):
        if d[k] == 0:
            if not lo[k] <= o[k] <= hi[k]:
                return None
            continue
        a, b = sorted(((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]))
        t0, t1 = max(t0, a), min(t1, b)
    return (t0, t1) if t1 > max(t0, 0) else None


def test_chair_box_occluder_rays_are_unimodal_at_box():
    scene = make_scene("chair-box", 2)
    pose = frontal(24, 24, 24.0)
    origins, dirs = pose.rays()
    gt = trace(scene, origins, dirs)
    box = scene.surfaces[0]
    boxed = 0
    for i in range(len(origins)):
        hit = _slab_hits(origins[i], dirs[i], box.lo, box.hi)
        modes = gt.modes(i)
        assert len(modes) == 1
        if hit is None:
            # wall plane z = 0
            assert modes[0] == pytest.approx(-origins[i, 2] / dirs[i, 2], abs=1e-12)
        else:
            boxed += 1
            assert modes[0] == pytest.approx(hit[0], abs=1e-12)
    assert 0 < boxed < len(origins)


@pytest.mark.parametrize("preset", PRESETS)
def test_every_preset_is_normalized_and_convex(preset):
    scene = make_scene(preset, 1)
    pose = look_at((0.4, 0.1, 1.9), scene.center, 12, 12, 14.0)
    _, gt = render_analytic(scene, pose)
    total = gt.pmf.sum(axis=1) + gt.residual
    np.testing.assert_allclose(total, 1.0, atol=1e-12)
    assert np.all(gt.pmf >= 0) and np.all(gt.residual >= 0)
    for i in range(len(gt)):
        r = gt.ray(i)
        assert np.all(np.diff(r.distances) > 0)
        assert np.all((r.distances >= scene.t_near) & (r.distances <= scene.t_far))
        cols = np.vstack([r.colors, scene.background])
        lo, hi = cols.min(axis=0), cols.max(axis=0)
        assert np.all(r.color >= lo - 1e-12) and np.all(r.color <= hi + 1e-12)


# ----------------------------------------------------------------- rendering
def test_empty_scene_is_background():
    scene = make_scene("empty")
    img, gt = render_analytic(scene, frontal())
    np.testing.assert_array_equal(img, np.broadcast_to(scene.background, img.shape))
    np.testing.assert_array_equal(gt.residual, 1.0)
    assert np.all(gt.packed_pmf()[:, -1, 0] == scene.t_far)


def test_single_red_plane_is_red():
    scene = SceneSpec((Surface("plane", (1.0, 0.0, 0.0), 1.0, axis=2, offset=0.0),))
    img, _ = render_analytic(scene, frontal())
    np.testing.assert_array_equal(img, np.broadcast_to((1.0, 0.0, 0.0), img.shape))


def test_glass_over_blue_composites_by_hand():
    glass = Surface("plane", GREEN, 0.4, axis=2, offset=1.0)
    wall = Surface("plane", BLUE, 1.0, axis=2, offset=0.0)
    img, _ = render_analytic(SceneSpec((glass, wall)), frontal())
    np.testing.assert_allclose(img, np.broadcast_to(0.4 * np.array(GREEN) + 0.6 * np.array(BLUE), img.shape),
                               atol=1e-15)


def test_glass_wall_preset_pixel_mixes_glass_with_wall_texture():
    scene = make_scene("glass-wall", 0)
    pose = frontal()
    _, gt = render_analytic(scene, pose)
    r = center_ray(gt, pose)
    np.testing.assert_allclose(r.color, 0.4 * np.array(GREEN) + 0.6 * r.colors[1], atol=1e-15)


def test_rotation_must_be_orthonormal():
    with pytest.raises(ConfigurationError):
        CameraPose(np.zeros(3), np.diag([1.0, 1.0, 1.1]), 10.0, 4, 4)


@given(st.floats(-0.8, 0.8), st.floats(-0.3, 0.3))
def test_look_at_rotation_is_orthonormal(x, y):
    pose = look_at((x, y, 2.0), (0, 0, 0), 4, 4, 5.0)
    r = pose.rotation
    assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-9
    _, dirs = pose.rays()
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)


def test_scene_bounds_validated():
    with pytest.raises(ConfigurationError):
        SceneSpec((), t_near=2.0, t_far=1.0)
    with pytest.raises(UsageError):
        Surface("plane", (1, 1, 1), alpha=0.0)


# -------------------------------------------------------------------- labels
def _glass_ray():
    return trace(make_scene("glass-wall", 0), np.array([[0.0, 0.0, 2.0]]), np.array([[0.0, 0.0, -1.0]])).ray(0)


def test_front_policy_returns_first_hit():
    ray = _glass_ray()
    assert sample_label(ray, LabelPolicy("front"), seed=0) == front_depth(ray) == pytest.approx(1.0)


def test_affine_label_arithmetic():
    ray = _glass_ray()
    assert sample_label(ray, LabelPolicy("front"), seed=0, affine=(2.0, 0.1)) == pytest.approx(2.1, abs=1e-12)


def test_mixture_front_fraction_binomial():
    ray = _glass_ray()
    rng = np.random.default_rng(0)
    labels = np.array([sample_label(ray, LabelPolicy("mixture", 0.5), rng=rng) for _ in range(10_000)])
    front = np.mean(np.isclose(labels, 1.0))
    assert abs(front - 0.5) <= 0.02
    assert set(np.round(labels, 9)) == {1.0, 2.0}


@pytest.mark.parametrize("pi", [0.2, 0.5, 0.9])
def test_mixture_passes_chi_square(pi):
    ray = _glass_ray()
    rng = np.random.default_rng(int(pi * 100))
    labels = np.array([sample_label(ray, LabelPolicy("mixture", pi), rng=rng) for _ in range(10_000)])
    counts = [np.sum(np.isclose(labels, 1.0)), np.sum(np.isclose(labels, 2.0))]
    assert stats.chisquare(counts, [10_000 * pi, 10_000 * (1 - pi)]).pvalue > 0.01


@pytest.mark.parametrize("seed", range(4))
def test_label_map_choice_is_per_view(seed):
    pose = frontal(focal=8.0)
    _, gt = render_analytic(make_scene("glass-wall", 0), pose)
    labels, info = label_map(gt, LabelPolicy("mixture", 0.5), np.random.default_rng(seed))
    glass = gt.n_modes() == 2
    assert 0 < glass.sum() < len(glass)
    dz = np.abs(pose.rays()[1][:, 2])
    expected = np.minimum(np.where(glass & info["front"], 1.0 / dz, 2.0 / dz), 3.0)  # t_far caps misses
    np.testing.assert_allclose(labels, expected, rtol=1e-12)


@given(arrays(np.float64, 10, elements=st.floats(0.5, 3.0)), st.floats(0.1, 5.0), st.floats(-1.0, 1.0))
def test_affine_is_invertible(d, a, b):
    np.testing.assert_allclose(invert_affine(a * d + b, a, b), d, atol=1e-12, rtol=0)


@pytest.mark.parametrize("kw", [dict(mode="sideways"), dict(mode="mixture", pi=1.5), dict(scale_range=(0.0, 1.0))])
def test_bad_policy(kw):
    with pytest.raises(UsageError):
        LabelPolicy(**kw)


# ------------------------------------------------------------------- dataset
def small(preset="wall", seed=0, **kw):
    return make_dataset(make_scene(preset, seed), 8, 2, LabelPolicy("mixture"), seed=seed, width=16, height=16, **kw)


def test_dataset_view_counts():
    ds = small()
    assert len(ds.train) == 8 and len(ds.test) == 2
    keys = {v.pose.matrix().tobytes() for v in ds.views}
    assert len(keys) == 10


def test_dataset_is_deterministic(tmp_path):
    write_dataset(small(seed=4), tmp_path / "a")
    write_dataset(small(seed=4), tmp_path / "b")
    for root, _, files in os.walk(tmp_path / "a"):
        for f in files:
            a = os.path.join(root, f)
            b = a.replace(str(tmp_path / "a"), str(tmp_path / "b"))
            assert open(a, "rb").read() == open(b, "rb").read(), f


def test_degenerate_orbit_rejected():
    with pytest.raises(ConfigurationError, match="degenerate"):
        small(arc_deg=0.0, jitter_deg=0.0)


def test_dataset_round_trip(tmp_path):
    ds = small("glass-wall", 3)
    write_dataset(ds, tmp_path)
    back = read_dataset(tmp_path)
    assert back.scene == ds.scene and back.policy == ds.policy
    for v, w in zip(ds.views, back.views):
        assert v.split == w.split
        np.testing.assert_array_equal(v.image, w.image)
        np.testing.assert_array_equal(v.labels, w.labels)
        np.testing.assert_allclose(v.pose.matrix(), w.pose.matrix(), atol=0)
        np.testing.assert_array_equal(v.gt.pmf, w.gt.pmf)
    packed = np.fromfile(tmp_path / "views" / "0" / "gt_pmf.f32", dtype="<f4").reshape(16 * 16, -1, 2)
    np.testing.assert_allclose(packed[..., 1].sum(axis=1), 1.0, atol=1e-6)


def test_scene_text_round_trip():
    for preset in PRESETS:
        scene = make_scene(preset, 9)
        assert scene_from_text(scene_to_text(scene)) == scene


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)) / 255.0
    write_ppm(tmp_path / "x.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm"), img)


def test_multimodal_fraction_equals_glass_hit_fraction():
    ds = make_dataset(make_scene("glass-wall", 0), 8, 2, LabelPolicy("front"), width=32, height=32)
    fractions = []
    for v in ds.views:
        origins, dirs = v.pose.rays()
        t = (1.0 - origins[:, 2]) / dirs[:, 2]
        p = origins + t[:, None] * dirs
        on_pane = (t > 0) & (np.abs(p[:, 0]) < 0.4) & (np.abs(p[:, 1]) < 0.4)
        assert np.mean(v.gt.n_modes() == 2) == np.mean(on_pane)
        fractions.append(np.mean(on_pane))
    assert 0.0 < np.mean(fractions) < 1.0
