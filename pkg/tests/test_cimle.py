import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carvenerf.cimle import (Generator, GeneratorSpec, PriorExample, PriorTrainConfig, cimle_objective,
                             coverage_metric, coverage_per_ray, draw_hypotheses, feature_dim, generate,
                             read_hypotheses, regression_objective, select_latents, view_features,
                             write_hypotheses)
from carvenerf.diffcore import ConfigurationError, ParamStore, Tape
from carvenerf.scenesim import look_at

from helpers import bimodal_toy, check_gradients


def make_gen(seed=0, feat=5, zero_head=True):
    rng = np.random.default_rng(seed)
    gen = Generator(GeneratorSpec(feat, (12, 12), 4))
    params = gen.init(ParamStore(), rng)
    if not zero_head:
        for k in ("gen/w2", "gen/b2"):
            params.arrays[k] = rng.normal(0, 0.5, params.arrays[k].shape)
    return gen, params


def examples(n=3, p=6, feat=5, seed=1):
    rng = np.random.default_rng(seed)
    return [PriorExample(rng.normal(size=(p, feat)), rng.uniform(1, 2, p), i) for i in range(n)]


def test_untrained_generator_outputs_log_two():
    gen, params = make_gen()
    out = generate(gen, params, np.random.default_rng(0).normal(size=(20, 5)), np.ones(4))
    np.testing.assert_allclose(out, np.log(2.0), rtol=0, atol=1e-15)


def test_same_latent_same_output():
    gen, params = make_gen(zero_head=False)
    feats = np.random.default_rng(0).normal(size=(9, 5))
    z = np.random.default_rng(1).normal(size=4)
    np.testing.assert_array_equal(generate(gen, params, feats, z), generate(gen, params, feats, z))
    assert not np.allclose(generate(gen, params, feats, z), generate(gen, params, feats, -z))


def test_single_latent_objective_is_regression():
    gen, params = make_gen(zero_head=False)
    exs = examples()
    z = np.random.default_rng(2).normal(size=(3, 1, 4))
    tape = Tape()
    val = cimle_objective(tape, gen, params.bind(tape), exs, z).value
    ref = np.mean([np.mean((generate(gen, params, e.features, z[i, 0]) - e.labels) ** 2) for i, e in enumerate(exs)])
    assert val == pytest.approx(ref, abs=1e-12)
    tape = Tape()
    assert regression_objective(tape, gen, params.bind(tape), exs, z[:, 0]).value == pytest.approx(ref, abs=1e-12)


def test_only_argmin_latent_receives_gradient():
    gen, params = make_gen(zero_head=False)
    exs = examples()
    zs = np.random.default_rng(3).normal(size=(3, 5, 4))
    best = [int(np.argmin([np.mean((generate(gen, params, e.features, z) - e.labels) ** 2) for z in zs[i]]))
            for i, e in enumerate(exs)]

    def grads(obj, z):
        tape = Tape()
        nodes = params.bind(tape)
        tape.backward(obj(tape, gen, nodes, exs, z))
        return {k: tape.grad(n) for k, n in nodes.items()}

    full = grads(cimle_objective, zs)
    picked = grads(regression_objective, np.stack([zs[i, best[i]] for i in range(3)]))
    for k in full:
        np.testing.assert_allclose(full[k], picked[k], rtol=1e-12, atol=1e-14)


def test_cimle_objective_gradient():
    gen, params = make_gen(zero_head=False)
    exs = examples()
    zs = np.random.default_rng(4).normal(size=(3, 4, 4))
    worst, n = check_gradients(lambda t, nodes: cimle_objective(t, gen, nodes, exs, zs), params.arrays)
    assert n == 64 and worst <= 0


def test_coverage_examples():
    assert coverage_metric([1.0, 2.0, 1.0], [1.0, 2.0]) == 0.0
    assert coverage_metric([1.0], [1.0, 2.0]) == 1.0
    np.testing.assert_array_equal(coverage_per_ray(np.array([[1.0, 2.0], [1.5, 1.5]]), [[1.0], [1.0, 2.0]]),
                                  [0.0, 0.5])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_coverage_is_monotone_in_m(seed):
    gen, params = make_gen(seed % 7, zero_head=False)
    feats = np.random.default_rng(seed).normal(size=(4, 5))
    hyps = draw_hypotheses(gen, params, feats, 16, seed=seed)
    # latents are drawn in order, so the first m columns are the m-sample draw
    np.testing.assert_array_equal(draw_hypotheses(gen, params, feats, 5, seed=seed), hyps[:, :5])
    for row in hyps:
        cov = [coverage_metric(row[:m], [1.0, 2.0]) for m in range(1, 17)]
        assert all(b <= a for a, b in zip(cov, cov[1:]))


def test_select_latents_singletons_and_determinism():
    gen, params = make_gen(zero_head=False)
    exs = examples()
    cfg = PriorTrainConfig(m_train=1)
    pairs = select_latents(gen, params, exs, cfg, np.random.default_rng(0))
    assert [i for i, _ in pairs] == [0, 1, 2]
    again = select_latents(gen, params, exs, PriorTrainConfig(m_train=6), np.random.default_rng(5))
    same = select_latents(gen, params, exs, PriorTrainConfig(m_train=6), np.random.default_rng(5))
    for (i, z), (j, w) in zip(again, same):
        assert i == j
        np.testing.assert_array_equal(z, w)


@pytest.mark.parametrize("kw", [dict(m_train=0), dict(resample_every=0), dict(objective="vae")])
def test_bad_prior_config(kw):
    with pytest.raises(ConfigurationError):
        PriorTrainConfig(**kw)


def test_draw_needs_one_hypothesis():
    gen, params = make_gen()
    with pytest.raises(ConfigurationError):
        draw_hypotheses(gen, params, np.zeros((2, 5)), 0, seed=0)


def test_bimodal_toy_cimle_covers_both_modes():
    coverage, hyps = bimodal_toy("cimle", seed=1)
    assert coverage < 0.1
    # distinct latents land near distinct modes
    assert np.any(np.abs(hyps - 1.0) < 0.1) and np.any(np.abs(hyps - 2.0) < 0.1)


def test_bimodal_toy_flipped_min_collapses():
    coverage, hyps = bimodal_toy("gan", seed=1)
    assert coverage >= 0.1
    near = [np.any(np.abs(hyps - m) < 0.1, axis=1) for m in (1.0, 2.0)]
    assert not np.all(near[0] & near[1])


def test_view_features_width():
    pose = look_at((0.3, 0.0, 2.0), (0, 0, 0), 6, 4, 5.0)
    img = np.random.default_rng(0).random((4, 6, 3))
    f = view_features(pose, img, frequencies=3)
    assert f.shape == (24, feature_dim(3))
    g = view_features(pose, img, frequencies=3, view_id=2, n_views=5)
    assert g.shape == (24, feature_dim(3, 5)) and np.all(g[:, -3] == 1.0)


def test_hypothesis_files_round_trip(tmp_path):
    hyps = np.random.default_rng(0).uniform(0.5, 3.0, (12, 3)).astype(np.float32).astype(np.float64)
    write_hypotheses(tmp_path, 4, hyps, 3, 4)
    assert sorted(p.name for p in (tmp_path / "4").iterdir()) == ["hyp_0.f32", "hyp_1.f32", "hyp_2.f32", "index.txt"]
    np.testing.assert_array_equal(read_hypotheses(tmp_path, 4, 3, 4), hyps)
    with pytest.raises(ConfigurationError):
        read_hypotheses(tmp_path, 4, 4, 4)
