import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from carvenerf.diffcore import ConfigurationError, ParamStore, Tape
from carvenerf.render import (DivergedFieldError, FieldSpec, QuadratureSamples, RadianceField, RayBatch, composite,
                              depth_moments, expected_depth, hierarchical_samples, render_image, render_rays,
                              sample_termination, stratified_samples, write_distribution_csv)
from carvenerf.scenesim import look_at

from helpers import check_gradients, dist_from_pmf, dist_from_sigma, grid


# ----------------------------------------------------------------- sampling
def test_stratified_points_one_per_quarter():
    s = stratified_samples(1, 1.0, 2.0, 4, np.random.default_rng(0))
    bins = np.floor((s.points[0] - 1.0) / 0.25).astype(int)
    np.testing.assert_array_equal(bins, [0, 1, 2, 3])


def test_stratified_mean_hits_bin_centres():
    rng = np.random.default_rng(1)
    s = stratified_samples(20_000, 1.0, 2.0, 4, rng)
    np.testing.assert_allclose(s.points.mean(axis=0), [1.125, 1.375, 1.625, 1.875], atol=0.01)


def test_zero_jitter_gives_exact_centres():
    np.testing.assert_array_equal(grid(1, 1.0, 2.0, 2).points, [[1.25, 1.75]])


def test_sampling_rejects_single_bin():
    with pytest.raises(ConfigurationError):
        stratified_samples(1, 1.0, 2.0, 1, jitter=False)


def test_ray_batch_validates():
    with pytest.raises(ConfigurationError, match="unit"):
        RayBatch(np.zeros((1, 3)), np.array([[1.0, 1.0, 0.0]]), 1.0, 2.0)
    with pytest.raises(ConfigurationError):
        RayBatch(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]]), 2.0, 1.0)


# ---------------------------------------------------------------- compositing
def test_empty_space_is_background():
    s = grid(3, 1.0, 2.0, 8)
    tape = Tape()
    rgb = tape.constant(np.ones((3, 8, 3)))
    out = composite(tape, tape.variable(np.zeros((3, 8))), rgb, s, 2.0, background=(0.2, 0.4, 0.6))
    np.testing.assert_allclose(out.rgb.value, np.tile([0.2, 0.4, 0.6], (3, 1)))
    np.testing.assert_array_equal(out.dist.residual.value, 1.0)
    np.testing.assert_array_equal(out.dist.pmf.value, 0.0)


def test_opaque_first_bin():
    s = grid(1, 1.0, 2.0, 4)
    tape = Tape()
    colors = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]]])
    out = composite(tape, tape.variable(np.array([[1e4, 1.0, 1.0, 1.0]])), tape.constant(colors), s, 2.0)
    np.testing.assert_allclose(out.rgb.value, [[1.0, 0.0, 0.0]], atol=1e-12)
    assert out.dist.pmf.value[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert expected_depth(tape, out.dist).value[0] == pytest.approx(1.125, abs=1e-12)


@pytest.mark.parametrize("sigma", [0.3, 1.0, 2.5])
def test_constant_density_transmittance(sigma):
    s = grid(1, 1.0, 2.0, 256)
    out = dist_from_sigma(np.full((1, 256), sigma), s, 2.0)
    assert out.dist.residual.value[0] == pytest.approx(np.exp(-sigma), abs=1e-3)


def test_non_finite_density_raises():
    with pytest.raises(DivergedFieldError):
        dist_from_sigma(np.array([[1.0, np.nan]]), grid(1, 1.0, 2.0, 2), 2.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (5, 16), elements=st.floats(0.0, 50.0)))
def test_pmf_normalizes_and_cdf_is_monotone(sigma):
    d = dist_from_sigma(sigma, grid(5, 0.5, 3.0, 16), 3.0).dist
    assert np.all(d.pmf.value >= 0)
    np.testing.assert_allclose(d.pmf.value.sum(axis=1) + d.residual.value, 1.0, atol=1e-9)
    assert np.all(np.diff(d.cdf(), axis=1) >= 0)
    t, p = d.support()
    assert t.shape == p.shape == (5, 17) and np.all(t[:, -1] == 3.0)


def test_pmf_normalizes_on_random_fields():
    spec = FieldSpec(hidden_widths=(16, 16), pe_frequencies=3)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        field = RadianceField(spec)
        params = field.init(ParamStore(), rng)
        dirs = rng.normal(size=(100, 3))
        rays = RayBatch(rng.uniform(-1, 1, (100, 3)), dirs / np.linalg.norm(dirs, axis=1, keepdims=True), 0.5, 3.0)
        tape = Tape()
        out = render_rays(tape, field, params.bind(tape), rays, stratified_samples(100, 0.5, 3.0, 32, rng))
        total = out.dist.pmf.value.sum(axis=1) + out.dist.residual.value
        np.testing.assert_allclose(total, 1.0, atol=1e-9)


# -------------------------------------------------------- inverse transform
def test_delta_pmf_samples_stay_in_bin():
    s = grid(1, 1.0, 2.0, 8)
    pmf = np.zeros((1, 8))
    pmf[0, 3] = 1.0
    d = dist_from_pmf(pmf, s, 2.0).dist
    x = sample_termination(Tape(record=False), d, np.random.default_rng(0).random((1, 500))).value
    assert np.all((x >= 1.375) & (x <= 1.5))


def piecewise_cdf(edges, pmf, residual, t_far):
    def cdf(x):
        c = np.interp(x, edges, np.concatenate([[0.0], np.cumsum(pmf)]))
        return np.where(x >= t_far, c + residual, c)
    return cdf


def test_uniform_pmf_ks():
    k = 32
    s = grid(1, 1.0, 2.0, k)
    d = dist_from_pmf(np.full((1, k), 1.0 / k), s, 2.0).dist
    x = sample_termination(Tape(record=False), d, np.random.default_rng(3).random((1, 10_000))).value[0]
    assert stats.kstest(x, stats.uniform(1.0, 1.0).cdf).statistic < 0.05


@pytest.mark.parametrize("seed", range(3))
def test_random_pmf_ks_against_own_cdf(seed):
    rng = np.random.default_rng(seed)
    s = grid(1, 0.5, 3.0, 64)
    d = dist_from_sigma(rng.gamma(0.3, 2.0, size=(1, 64)), s, 3.0).dist
    x = sample_termination(Tape(record=False), d, rng.random((1, 10_000))).value[0]
    res = d.residual.value[0]
    # the residual is an atom at t_far; KS applies to the continuous body
    far = x == 3.0
    assert abs(far.mean() - res) < 4 * np.sqrt(res * (1 - res) / x.size) + 1e-12
    body = piecewise_cdf(s.edges[0], d.pmf.value[0], 0.0, np.inf)
    assert stats.kstest(x[~far], lambda v: body(v) / (1.0 - res)).statistic < 0.05


def test_two_mode_fraction():
    s = grid(1, 0.5, 3.0, 50)
    pmf = np.zeros((1, 50))
    i1, i2 = np.searchsorted(s.edges[0], [1.0, 1.5], side="right") - 1
    pmf[0, i1], pmf[0, i2] = 0.4, 0.6
    d = dist_from_pmf(pmf, s, 3.0).dist
    x = sample_termination(Tape(record=False), d, np.random.default_rng(7).random((1, 10_000))).value[0]
    assert np.mean(x < 1.25) == pytest.approx(0.4, abs=0.02)


def test_residual_draws_land_on_far_plane():
    s = grid(1, 1.0, 2.0, 4)
    d = dist_from_sigma(np.full((1, 4), 0.1), s, 2.0).dist
    x = sample_termination(Tape(record=False), d, np.array([[0.999]])).value
    assert x[0, 0] == 2.0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (1, 12), elements=st.floats(0.05, 20.0)), st.floats(0.02, 0.98))
def test_inverse_cdf_round_trip(sigma, q):
    s = grid(1, 1.0, 2.0, 12)
    d = dist_from_sigma(sigma, s, 2.0).dist
    total = d.pmf.value.sum()
    u = q * total
    x = sample_termination(Tape(record=False), d, np.array([[u]])).value[0, 0]
    cdf = piecewise_cdf(s.edges[0], d.pmf.value[0], d.residual.value[0], 2.0)
    assert cdf(x) == pytest.approx(u, abs=1e-9)


# ---------------------------------------------------------- expected depth
@pytest.mark.parametrize("masses,points,expected", [
    ({1.3: 1.0}, None, 1.3),
    ({1.0: 0.5, 2.0: 0.5}, None, 1.5),
    ({1.0: 0.4, 2.0: 0.6}, None, 1.6),
])
def test_expected_depth_examples(masses, points, expected):
    # a bin centred exactly on each support point
    ts = sorted(masses)
    edges = np.array([[0.5] + [v for t in ts for v in (t - 0.05, t + 0.05)] + [2.5]])
    edges = np.unique(edges, axis=1)
    centres = 0.5 * (edges[:, 1:] + edges[:, :-1])
    pmf = np.array([[masses.get(round(c, 10), 0.0) for c in centres[0]]])
    d = dist_from_pmf(pmf, QuadratureSamples(edges, centres), 2.5).dist
    assert expected_depth(Tape(), d).value[0] == pytest.approx(expected, abs=1e-9)


def test_moments_of_two_point_mass():
    edges = np.array([[0.5, 0.95, 1.05, 1.95, 2.05, 3.0]])
    centres = 0.5 * (edges[:, 1:] + edges[:, :-1])
    d = dist_from_pmf(np.array([[0.0, 0.4, 0.0, 0.6, 0.0]]), QuadratureSamples(edges, centres), 3.0).dist
    mean, var = depth_moments(Tape(), d)
    assert mean.value[0] == pytest.approx(1.6, abs=1e-9)
    assert var.value[0] == pytest.approx(0.24, abs=1e-9)


def test_opaque_limit_expected_depth_to_midpoint():
    s = grid(1, 1.0, 2.0, 10)
    depths = []
    for big in (10.0, 100.0, 1000.0, 1e5):
        sigma = np.full((1, 10), 0.5)
        sigma[0, :3] = 0.0
        sigma[0, 3] = big
        depths.append(expected_depth(Tape(), dist_from_sigma(sigma, s, 2.0).dist).value[0])
    errs = np.abs(np.array(depths) - 1.35)
    assert np.all(np.diff(errs) <= 0) and errs[0] > 0.1 and errs[-1] < 1e-9


# -------------------------------------------------------------- hierarchical
def test_fine_samples_normalize():
    rng = np.random.default_rng(0)
    coarse = stratified_samples(4, 0.5, 3.0, 16, rng)
    c = dist_from_sigma(rng.gamma(0.5, 2.0, (4, 16)), coarse, 3.0).dist
    fine = hierarchical_samples(coarse, c.pmf.value, 32, rng)
    assert fine.points.shape == (4, 48) and np.all(np.diff(fine.edges, axis=1) > 0)
    f = dist_from_sigma(rng.gamma(0.5, 2.0, (4, 48)), fine, 3.0).dist
    np.testing.assert_allclose(f.pmf.value.sum(axis=1) + f.residual.value, 1.0, atol=1e-9)


# ------------------------------------------------------------------ gradients
def _field(seed=0):
    spec = FieldSpec(hidden_widths=(8, 8), pe_frequencies=2, density_bias=0.0)
    field = RadianceField(spec)
    params = field.init(ParamStore(), np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    o = np.tile([0.0, 0.0, 2.0], (6, 1)) + rng.normal(0, 0.1, (6, 3))
    d = np.tile([0.0, 0.0, -1.0], (6, 1)) + rng.normal(0, 0.1, (6, 3))
    rays = RayBatch(o, d / np.linalg.norm(d, axis=1, keepdims=True), 0.5, 3.0)
    return field, params, rays, stratified_samples(6, 0.5, 3.0, 16, rng)


def test_pixel_colour_gradient():
    field, params, rays, s = _field()
    w = np.random.default_rng(2).normal(size=(6, 3))

    def build(tape, nodes):
        return tape.sum(tape.mul(render_rays(tape, field, nodes, rays, s, (0.3, 0.3, 0.3)).rgb, w))

    worst, n = check_gradients(build, params.arrays)
    assert n == 64 and worst <= 0


def test_termination_sample_gradient():
    field, params, rays, s = _field(3)
    u = np.random.default_rng(4).uniform(0.05, 0.6, (6, 8))

    def build(tape, nodes):
        out = render_rays(tape, field, nodes, rays, s)
        return tape.sum(sample_termination(tape, out.dist, u))

    worst, n = check_gradients(build, params.arrays)
    assert n == 64 and worst <= 0


def test_termination_sample_gradient_wrt_density():
    s = grid(3, 1.0, 2.0, 10)
    u = np.random.default_rng(5).uniform(0.05, 0.7, (3, 6))
    sigma = np.random.default_rng(6).uniform(0.5, 3.0, (3, 10))

    def build(tape, nodes):
        return tape.sum(tape.mul(sample_termination(tape, dist_from_sigma(nodes["s"], s, 2.0, tape).dist, u),
                                 np.arange(1.0, 7.0)))

    worst, n = check_gradients(build, {"s": sigma})
    assert n == 30 and worst <= 0


# ----------------------------------------------------------------- rendering
def test_render_image_shapes_and_determinism():
    field, params, _, _ = _field()
    pose = look_at((0.0, 0.0, 2.0), (0, 0, 0), 6, 5, 6.0)
    img, t, p = render_image(field, params.arrays, pose, 0.5, 3.0, 16, chunk=7)
    img2, t2, p2 = render_image(field, params.arrays, pose, 0.5, 3.0, 16)
    assert img.shape == (5, 6, 3) and t.shape == p.shape == (30, 17)
    np.testing.assert_array_equal(img, img2)
    np.testing.assert_array_equal(p, p2)


def test_distribution_csv(tmp_path):
    write_distribution_csv(tmp_path / "d.csv", [1.0, 2.0], [0.25, 0.75])
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines == ["t,f,F", "1,0.25,0.25", "2,0.75,1"]
