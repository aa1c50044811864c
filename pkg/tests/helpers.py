"""Shared oracles: central finite differences and hand-built termination distributions."""
import numpy as np

from carvenerf.diffcore import Tape
from carvenerf.render import QuadratureSamples, composite, stratified_samples


def check_gradients(build, arrays, n_coords=64, h=1e-4, rtol=1e-3, atol=1e-6, seed=0):
    """Compare reverse-mode adjoints with central differences.

    ``build(tape, nodes)`` returns a scalar node; ``arrays`` maps names to the
    float64 inputs being differentiated. ``n_coords`` coordinates are drawn
    across all inputs (all of them when there are fewer).
    Returns ``(worst_excess, checked)`` where ``worst_excess <= 0`` means pass.
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    tape = Tape()
    nodes = {k: tape.variable(v, name=k) for k, v in arrays.items()}
    out = build(tape, nodes)
    tape.backward(out)
    analytic = {k: tape.grad(n) for k, n in nodes.items()}

    coords = [(k, i) for k, v in arrays.items() for i in range(v.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        coords = [coords[j] for j in rng.choice(len(coords), n_coords, replace=False)]

    def value(name, flat, delta):
        trial = {k: v.copy() for k, v in arrays.items()}
        trial[name].reshape(-1)[flat] += delta
        t = Tape(record=False)
        return float(build(t, {k: t.constant(v) for k, v in trial.items()}).value)

    worst = -np.inf
    for name, flat in coords:
        fd = (value(name, flat, h) - value(name, flat, -h)) / (2 * h)
        ad = analytic[name].reshape(-1)[flat]
        err = abs(ad - fd) - (rtol * max(abs(fd), abs(ad)) + atol)
        worst = max(worst, err)
    return worst, len(coords)


def grid(n_rays, t_near, t_far, k):
    return stratified_samples(n_rays, t_near, t_far, k, jitter=False)


def dist_from_sigma(sigma, samples, t_far, tape=None, rgb=None):
    tape = tape or Tape()
    sigma = sigma if hasattr(sigma, "value") else tape.variable(sigma)
    if rgb is None:
        rgb = tape.constant(np.zeros(sigma.value.shape + (3,)))
    return composite(tape, sigma, rgb, samples, t_far)


def dist_from_pmf(pmf, samples, t_far):
    """Termination distribution with a prescribed per-bin pmf (rows sum to <= 1)."""
    pmf = np.asarray(pmf, dtype=np.float64)
    tape = Tape()
    cum = np.cumsum(pmf, axis=1)
    before = 1.0 - np.concatenate([np.zeros((len(pmf), 1)), cum[:, :-1]], axis=1)
    with np.errstate(divide="ignore"):
        tau = -np.log(np.clip(1.0 - pmf / np.maximum(before, 1e-300), 1e-300, 1.0))
    sigma = tau / samples.widths
    return dist_from_sigma(sigma, samples, t_far, tape)


def point_masses(masses, t_near=0.5, t_far=3.0, width=0.01):
    """Distribution with ``masses[t]`` on the bin centred at ``t`` (one ray)."""
    n = int(round((t_far - t_near) / width))
    centres = t_near + width * np.arange(n + 1)
    edges = np.concatenate([centres - width / 2, [centres[-1] + width / 2]])
    pmf = np.zeros((1, n + 1))
    for t, p in masses.items():
        pmf[0, int(round((t - t_near) / width))] += p
    return dist_from_pmf(pmf, QuadratureSamples(edges[None], centres[None]), t_far)


def bimodal_toy(objective, seed=0, rounds=40):
    """Train a generator on one condition whose labels alternate 1.0 / 2.0.

    Returns ``(worst per-pixel coverage, hypotheses (16, 64))`` over 64 fresh latents.
    """
    from carvenerf.cimle import (Generator, GeneratorSpec, PriorExample, PriorTrainConfig, cimle_round,
                                 coverage_metric, draw_hypotheses)
    from carvenerf.diffcore import ParamStore

    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(16, 4))
    examples = [PriorExample(feats, np.full(16, 1.0 if i % 2 == 0 else 2.0), i) for i in range(8)]
    gen = Generator(GeneratorSpec(4, (32, 32), 8))
    params = ParamStore()
    gen.init(params, rng)
    cfg = PriorTrainConfig(m_train=8, resample_every=10, rounds=rounds, steps_per_epoch=5, pixels_per_example=16,
                           lr=3e-3, objective=objective)
    for _ in range(rounds):
        cimle_round(gen, params, examples, cfg, rng)
    hyps = draw_hypotheses(gen, params, feats, 64, seed=seed + 123)
    return max(coverage_metric(h, [1.0, 2.0]) for h in hyps), hyps


def tiny_config(**nerf):
    """A run configuration small enough for end-to-end CLI tests."""
    from dataclasses import replace

    from carvenerf import config

    base = config.default_config()
    scene = replace(base.scene, width=16, height=16, n_train_views=3, n_test_views=1)
    prior = replace(base.prior, n_views=3, rounds=2, steps_per_epoch=1, m_train=4, pixels_per_example=32,
                    select_pixels=32, hidden_widths=(8, 8), latent_dim=4)
    train = replace(base.nerf, iterations=20, rays_per_batch=16, k_coarse=16, n_termination=4, m_hypotheses=4,
                    hidden_widths=(16, 16), pe_frequencies=2, **nerf)
    ablation = replace(base.ablation, m_values=(4,), seeds=(0,), lambdas=(0.01,))
    return replace(base, scene=scene, prior=prior, nerf=train, ablation=ablation)


ACCEPTANCE = {}


def report(criterion, ok, detail):
    """Record and print one acceptance line; the terminal summary repeats them."""
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok
