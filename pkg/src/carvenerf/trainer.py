"""Prior training, NeRF training with the variant losses, and the ablation driver."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import cimle, losses
from .diffcore import ConfigurationError, DivergedError, ParamStore, Tape, adam_step, gradients
from .metrics import evaluate_view
from .render import FieldSpec, RadianceField, RayBatch, TerminationDistribution, hierarchical_samples
from .render import render_image, render_rays, sample_termination, stratified_samples

log = logging.getLogger(__name__)

VARIANTS = ("vanilla", "scade", "ours-single", "ddp-single", "ddp-multi", "monosdf")
DEPTH_VARIANTS = VARIANTS[1:]


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "scade"
    iterations: int = 20000
    rays_per_batch: int = 128
    k_coarse: int = 64
    n_fine: int = 0
    n_termination: int = 16
    m_hypotheses: int = 20
    lam: float = 0.01
    lr_start: float = 5e-4
    lr_end: float = 5e-5
    decay_fraction: float = 0.2
    align_freeze: float = 0.8
    align_lr_scale: float = 1.0
    ddp_min_std: float = 0.02
    per_sample_scale: bool = True
    fresh_u: bool = True
    depth_enabled: bool = True
    seed: int = 0
    hidden_widths: tuple = (64, 64, 64)
    pe_frequencies: int = 6
    density_bias: float = -1.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        for name in ("rays_per_batch", "k_coarse", "n_termination", "m_hypotheses"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.iterations < 0 or self.n_fine < 0:
            raise ConfigurationError("iterations and n_fine must be >= 0")
        if not 0.0 <= self.align_freeze <= 1.0 or not 0.0 <= self.decay_fraction <= 1.0:
            raise ConfigurationError("fractions must lie in [0, 1]")
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")

    @property
    def freeze_step(self):
        return int(round(self.align_freeze * self.iterations))

    def field_spec(self):
        return FieldSpec(tuple(self.hidden_widths), self.pe_frequencies, density_bias=self.density_bias)

    def uses_depth(self):
        return self.depth_enabled and self.variant in DEPTH_VARIANTS


def learning_rate(cfg: TrainConfig, step):
    """Constant, then log-linear decay to ``lr_end`` over the last ``decay_fraction``."""
    start = (1.0 - cfg.decay_fraction) * cfg.iterations
    if step < start or cfg.iterations == 0:
        return cfg.lr_start
    frac = min(1.0, (step - start) / max(1.0, cfg.iterations - start))
    return float(cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac)


# ------------------------------------------------------------------- prior
def prior_examples(dataset, frequencies=4, view_embedding=False):
    n = len(dataset.train) if view_embedding else 0
    out = []
    for k, v in enumerate(dataset.train):
        feats = cimle.view_features(v.pose, v.image, frequencies, view_id=k, n_views=n)
        out.append(cimle.PriorExample(feats, v.labels.reshape(-1), v.index))
    return out


@dataclass
class PriorResult:
    generator: cimle.Generator
    params: ParamStore
    history: list
    coverage: dict = field(default_factory=dict)


def train_prior(dataset, cfg: cimle.PriorTrainConfig, seed=0, hidden_widths=(64, 64), latent_dim=8,
                frequencies=4, view_embedding=False, m_report=20, dtype=np.float32):
    """Run ``cfg.rounds`` cIMLE rounds on the train views' label maps.

    The returned coverage report maps view index to the mean per-pixel
    coverage of ``m_report`` hypotheses against the label policy's clean modes.
    """
    rng = np.random.default_rng(seed)
    examples = prior_examples(dataset, frequencies, view_embedding)
    gen = cimle.Generator(cimle.GeneratorSpec(examples[0].features.shape[1], tuple(hidden_widths), latent_dim))
    params = ParamStore()
    gen.init(params, rng)
    history = []
    for r in range(cfg.rounds):
        try:
            history += cimle.cimle_round(gen, params, examples, cfg, rng, dtype)
        except DivergedError:
            log.error("prior diverged in round %d", r)
            raise
        log.info("prior round %d/%d loss %.5f", r + 1, cfg.rounds, history[-1])
    coverage = {}
    if cfg.rounds > 0:
        for ex, v in zip(examples, dataset.train):
            hyps = cimle.draw_hypotheses(gen, params, ex.features, m_report, seed=seed + 1)
            modes = clean_modes(v.gt, dataset.policy)
            coverage[v.index] = float(np.mean(cimle.coverage_per_ray(hyps, modes)))
    return PriorResult(gen, params, history, coverage)


def clean_modes(gt, policy):
    """Per-ray label modes the policy can emit (front and/or back surface)."""
    t = gt.distances
    hit = np.isfinite(t)
    front = np.where(hit[:, 0], t[:, 0], gt.t_far)
    opaque = hit & (gt.alphas >= 1.0)
    last = np.where(opaque.any(axis=1), t.shape[1] - 1 - np.argmax(opaque[:, ::-1], axis=1), -1)
    back = np.where(last >= 0, t[np.arange(len(t)), np.maximum(last, 0)], gt.t_far)
    if policy.mode == "front":
        return [np.array([f]) for f in front]
    if policy.mode == "back":
        return [np.array([b]) for b in back]
    return [np.unique([f, b]) for f, b in zip(front, back)]


def hypotheses_for(dataset, prior: PriorResult, m, seed=0, frequencies=4, view_embedding=False):
    """``{view index: (P, m)}`` hypotheses for every train view."""
    out = {}
    for k, ex in enumerate(prior_examples(dataset, frequencies, view_embedding)):
        out[ex.view] = cimle.draw_hypotheses(prior.generator, prior.params, ex.features, m, seed=seed + 1000 + k)
    return out


# --------------------------------------------------------------------- nerf
@dataclass
class RunState:
    params: ParamStore
    step: int
    rng_rays: np.random.Generator
    rng_depth: np.random.Generator
    history: list
    align_at_freeze: dict = field(default_factory=dict)

    def to_bytes(self, cfg: TrainConfig):
        extra = {"step": self.step, "rng_rays": self.rng_rays.bit_generator.state,
                 "rng_depth": self.rng_depth.bit_generator.state, "history": self.history,
                 "align_at_freeze": self.align_at_freeze, "config": _cfg_dict(cfg)}
        return self.params.to_bytes(extra)

    def save(self, path, cfg):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(cfg))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            params, extra = ParamStore.from_bytes(fh.read())
        rays = np.random.default_rng()
        rays.bit_generator.state = extra["rng_rays"]
        depth = np.random.default_rng()
        depth.bit_generator.state = extra["rng_depth"]
        history = [tuple(h) for h in extra["history"]]
        return cls(params, int(extra["step"]), rays, depth, history, extra.get("align_at_freeze", {})), extra


def _cfg_dict(cfg):
    d = asdict(cfg)
    d["hidden_widths"] = list(cfg.hidden_widths)
    return d


def init_state(dataset, cfg: TrainConfig):
    init_seq, rays_seq, depth_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    params = ParamStore()
    field_ = RadianceField(cfg.field_spec(), "field")
    field_.init(params, np.random.default_rng(init_seq))
    if cfg.n_fine > 0:
        RadianceField(cfg.field_spec(), "fine").init(params, np.random.default_rng(init_seq.spawn(1)[0]))
    if cfg.uses_depth():
        losses.ViewAlignment([v.index for v in dataset.train]).init(params)
    return RunState(params, 0, np.random.default_rng(rays_seq), np.random.default_rng(depth_seq), [])


class NerfTrainer:
    """Owns the ray pool, the hypothesis table and the per-step loss assembly."""

    def __init__(self, dataset, cfg: TrainConfig, hypotheses=None):
        self.ds = dataset
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.field = RadianceField(cfg.field_spec(), "field")
        self.fine = RadianceField(cfg.field_spec(), "fine") if cfg.n_fine > 0 else None
        train = dataset.train
        self.view_ids = np.array([v.index for v in train])
        rays = [v.pose.rays() for v in train]
        self.origins = np.concatenate([r[0] for r in rays])
        self.dirs = np.concatenate([r[1] for r in rays])
        self.colors = np.concatenate([v.image.reshape(-1, 3) for v in train])
        self.ray_view = np.repeat(self.view_ids, dataset.width * dataset.height)
        self.background = dataset.scene.background
        self.hyp = None
        if cfg.uses_depth():
            if hypotheses is None or any(v.index not in hypotheses for v in train):
                raise ConfigurationError(f"variant {cfg.variant!r} needs hypotheses for every train view")
            table = [np.asarray(hypotheses[v.index], dtype=np.float64) for v in train]
            if table[0].shape[1] < cfg.m_hypotheses:
                raise ConfigurationError(f"only {table[0].shape[1]} hypotheses per ray, config wants {cfg.m_hypotheses}")
            self.hyp = np.concatenate([h[:, :cfg.m_hypotheses] for h in table])

    # -------------------------------------------------------------- losses
    def depth_term(self, tape, dists, align_nodes, idx):
        """Variant-specific depth loss for ray indices ``idx``; summed over ``dists``."""
        cfg = self.cfg
        views = self.ray_view[idx]
        hyp = self.hyp[idx]
        rng = self.state.rng_depth
        u = rng.random((len(idx), cfg.n_termination)) if cfg.fresh_u else \
            np.broadcast_to((np.arange(cfg.n_termination) + 0.5) / cfg.n_termination, (len(idx), cfg.n_termination))
        terms = []
        for dist in dists:
            if cfg.variant == "scade":
                y = losses.apply_alignment(tape, hyp, align_nodes, views)
                terms.append(losses.space_carving_loss(tape, sample_termination(tape, dist, u), y))
            elif cfg.variant == "ours-single":
                y = losses.apply_alignment(tape, hyp[:, :1], align_nodes, views)
                terms.append(losses.space_carving_loss(tape, sample_termination(tape, dist, u), y))
            elif cfg.variant in ("ddp-single", "ddp-multi"):
                mean = hyp.mean(axis=1)
                std = np.maximum(hyp.std(axis=1), cfg.ddp_min_std)
                if cfg.variant == "ddp-single":
                    m_al = losses.apply_alignment(tape, mean, align_nodes, views)
                    s_al = tape.sub(losses.apply_alignment(tape, mean + std, align_nodes, views), m_al)
                    terms.append(losses.gaussian_nll(tape, dist, m_al, s_al))
                else:
                    draws = mean[:, None] + std[:, None] * rng.standard_normal(hyp.shape)
                    y = losses.apply_alignment(tape, draws, align_nodes, views)
                    terms.append(losses.space_carving_loss(tape, sample_termination(tape, dist, u), y))
            elif cfg.variant == "monosdf":
                terms.append(_per_view_expected(tape, dist, hyp.mean(axis=1), views))
        if cfg.per_sample_scale and cfg.variant in ("ddp-single", "monosdf"):
            # one value per ray; space carving sums n_termination values per ray
            terms = [tape.mul(t, float(cfg.n_termination)) for t in terms]
        out = terms[0]
        for t in terms[1:]:
            out = tape.add(out, t)
        return out

    # ---------------------------------------------------------------- step
    def step(self):
        cfg, st = self.cfg, self.state
        lr = learning_rate(cfg, st.step)
        idx = st.rng_rays.integers(0, len(self.origins), cfg.rays_per_batch)
        rays = RayBatch(self.origins[idx], self.dirs[idx], self.ds.scene.t_near, self.ds.scene.t_far)
        samples = stratified_samples(len(idx), rays.t_near, rays.t_far, cfg.k_coarse, st.rng_rays)
        tape = Tape(dtype=self.dtype)
        nodes = st.params.bind(tape, "field/")
        if self.fine is not None:
            nodes.update(st.params.bind(tape, "fine/"))
        out = render_rays(tape, self.field, nodes, rays, samples, self.background)
        photo = losses.photometric_loss(tape, out.rgb, self.colors[idx])
        dists = [out.dist]
        if self.fine is not None:
            fine = hierarchical_samples(samples, out.dist.pmf.value, cfg.n_fine, st.rng_rays)
            out_f = render_rays(tape, self.fine, nodes, rays, fine, self.background)
            photo = tape.add(photo, losses.photometric_loss(tape, out_f.rgb, self.colors[idx]))
            dists.append(out_f.dist)
        trainable_align = st.step < cfg.freeze_step
        if cfg.uses_depth():
            if trainable_align:
                align = st.params.bind(tape, "align/")
            else:
                align = {k: tape.constant(st.params[k]) for k in st.params.names("align/")}
            depth = self.depth_term(tape, dists, align, idx)
            total = losses.total_loss(tape, photo, depth, cfg.lam)
            sc = float(depth.value)
        else:
            align, total, sc = {}, photo, 0.0
        if not np.isfinite(total.value):
            raise DivergedError(f"non-finite loss at step {st.step}")
        tape.backward(total)
        grads = gradients(tape, nodes)
        scale = None
        if trainable_align and align:
            grads.update(gradients(tape, align))
            scale = {k: cfg.align_lr_scale for k in align}
        adam_step(st.params, grads, lr, lr_scale=scale)
        st.step += 1
        st.history.append((st.step, float(photo.value), sc, float(total.value), cfg.lam))
        if st.step == cfg.freeze_step and align:
            st.align_at_freeze = {k: st.params[k].tolist() for k in st.params.names("align/")}

    def run(self, state=None, until=None, checkpoint=None, log_every=0):
        self.state = state if state is not None else init_state(self.ds, self.cfg)
        end = self.cfg.iterations if until is None else min(until, self.cfg.iterations)
        t0 = time.perf_counter()
        while self.state.step < end:
            try:
                self.step()
            except DivergedError:
                if checkpoint:
                    self.state.save(checkpoint, self.cfg)
                raise
            if log_every and self.state.step % log_every == 0:
                h = self.state.history[-1]
                log.info("step %d photo %.5f depth %.5f (%.1fs)", h[0], h[1], h[2], time.perf_counter() - t0)
        if self.state.step == self.cfg.freeze_step and not self.state.align_at_freeze:
            self.state.align_at_freeze = {k: self.state.params[k].tolist() for k in self.state.params.names("align/")}
        if checkpoint:
            self.state.save(checkpoint, self.cfg)
        return self.state

    # ---------------------------------------------------------------- eval
    def render_view(self, view, params=None):
        params = params if params is not None else self.state.params
        scene = self.ds.scene
        field_arrays = {k: v for k, v in params.arrays.items() if k.startswith("field/")}
        fine_arrays = {k: v for k, v in params.arrays.items() if k.startswith("fine/")}
        return render_image(self.field, field_arrays, view.pose, scene.t_near, scene.t_far, self.cfg.k_coarse,
                            self.background, n_fine=self.cfg.n_fine, fine_field=self.fine, fine_arrays=fine_arrays)

    def evaluate(self, views=None, label=None):
        rows = []
        for v in views if views is not None else self.ds.test:
            img, t, p = self.render_view(v)
            rows += evaluate_view(label or self.cfg.variant, v, np.clip(img, 0, 1), t, p)
        return rows


def _per_view_expected(tape, dist, y_mean, views):
    """Ray-count weighted mean of per-view midas-aligned expected-depth losses."""
    total = None
    n = len(views)
    for v in np.unique(views):
        sel = np.flatnonzero(views == v)
        sub = TerminationDistribution(dist.edges[sel], dist.points[sel], tape.take(dist.pmf, sel),
                                      tape.take(dist.residual, sel), dist.t_far)
        term = tape.mul(losses.expected_depth_loss(tape, sub, y_mean[sel], "midas"), len(sel) / n)
        total = term if total is None else tape.add(total, term)
    return total


def train_nerf(dataset, hypotheses, cfg: TrainConfig, state=None, checkpoint=None, log_every=0):
    """Train to ``cfg.iterations`` and return ``(trainer, metrics rows)``."""
    trainer = NerfTrainer(dataset, cfg, hypotheses)
    trainer.run(state, checkpoint=checkpoint, log_every=log_every)
    return trainer, trainer.evaluate()


# ----------------------------------------------------------------- ablation
@dataclass
class AblationRow:
    variant: str
    m: int
    seed: int
    status: str
    rows: list = field(default_factory=list)
    message: str = ""


def run_ablation(dataset, hypotheses, base: TrainConfig, variants=("vanilla", "monosdf", "ddp-single", "ddp-multi",
                                                                  "ours-single", "scade"),
                 m_values=(), seeds=(0,), log_every=0):
    """Train every variant (and every M for scade) with shared data and seeds.

    Failures are recorded per row and do not stop the remaining runs.
    """
    jobs = [(v, base.m_hypotheses, s) for s in seeds for v in variants]
    jobs += [("scade", m, s) for s in seeds for m in m_values if ("scade", m, s) not in jobs]
    out = []
    for variant, m, seed in jobs:
        cfg = replace(base, variant=variant, m_hypotheses=m, seed=seed)
        label = variant if m == base.m_hypotheses else f"{variant}-m{m}"
        try:
            trainer = NerfTrainer(dataset, cfg, hypotheses)
            trainer.run(log_every=log_every)
            out.append(AblationRow(label, m, seed, "ok", trainer.evaluate(label=label)))
        except (DivergedError, ConfigurationError, FloatingPointError) as exc:
            log.error("ablation %s m=%d seed=%d failed: %s", variant, m, seed, exc)
            out.append(AblationRow(label, m, seed, "failed", [], str(exc)))
    return out
