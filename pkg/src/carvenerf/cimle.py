"""Conditional generator trained with the min-over-latents (cIMLE) objective.

One training example is a set of pixels sharing a single label map (one view).
A latent ``z`` is shared by every pixel of one draw, so each draw is one
coherent depth map. Each round selects, per example, the latent whose output
is closest to the labels, then trains only against those selections.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .diffcore import ConfigurationError, DivergedError, MlpSpec, ParamStore, Tape, adam_step, forward, gradients, init_mlp
from .diffcore.nn import positional_encoding


@dataclass(frozen=True)
class GeneratorSpec:
    feature_dim: int
    hidden_widths: tuple = (64, 64)
    latent_dim: int = 8
    film_init: float = 0.5

    def mlp(self):
        return MlpSpec(self.feature_dim, tuple(self.hidden_widths), 1, "softplus", 0)

    @property
    def film_width(self):
        return 2 * sum(self.hidden_widths)


@dataclass(frozen=True)
class PriorTrainConfig:
    m_train: int = 20
    resample_every: int = 10
    rounds: int = 4
    steps_per_epoch: int = 10
    pixels_per_example: int = 256
    select_pixels: int = 1024
    lr: float = 3e-3
    objective: str = "cimle"

    def __post_init__(self):
        if self.m_train < 1 or self.resample_every < 1:
            raise ConfigurationError("m_train and resample_every must be >= 1")
        if self.objective not in ("cimle", "gan"):
            raise ConfigurationError(f"unknown prior objective {self.objective!r}")


@dataclass
class PriorExample:
    features: np.ndarray  # (P, F)
    labels: np.ndarray  # (P,)
    view: int = -1


class Generator:
    prefix = "gen"

    def __init__(self, spec: GeneratorSpec):
        self.spec = spec
        self.mlp = spec.mlp()

    def init(self, params: ParamStore, rng):
        init_mlp(params, self.mlp, self.prefix, rng, zero_last=True)
        w = rng.normal(0.0, self.spec.film_init / np.sqrt(self.spec.latent_dim),
                       size=(self.spec.latent_dim, self.spec.film_width))
        params.add(f"{self.prefix}/film_w", w)
        params.add(f"{self.prefix}/film_b", np.zeros(self.spec.film_width))
        return params

    def output(self, tape, nodes, features, z, owner):
        """Depths for ``features (P, F)``; row ``p`` uses latent ``z[owner[p]]``.

        ``z`` is ``(Z, latent_dim)`` and ``owner`` a ``(P,)`` index array.
        """
        features = np.asarray(features, dtype=tape.dtype)
        z = np.asarray(z, dtype=tape.dtype).reshape(-1, self.spec.latent_dim)
        film = tape.affine(z, nodes[f"{self.prefix}/film_w"], nodes[f"{self.prefix}/film_b"])
        film = tape.take(film, np.asarray(owner))
        mods, at = [], 0
        for width in self.spec.hidden_widths:
            mods.append((film[:, at:at + width], film[:, at + width:at + 2 * width]))
            at += 2 * width
        out = forward(tape, self.mlp, nodes, features, self.prefix, encoded=True, modulation=mods)
        return tape.reshape(out, (-1,))


def generate(gen: Generator, params: ParamStore, features, z):
    """One hypothesis map for latent ``z``; deterministic in its inputs."""
    tape = Tape(record=False)
    nodes = {k: tape.constant(v) for k, v in params.arrays.items() if k.startswith(gen.prefix)}
    return gen.output(tape, nodes, features, np.asarray(z)[None], np.zeros(len(features), dtype=int)).value


def draw_latents(rng, m, dim):
    return rng.standard_normal((m, dim))


def draw_hypotheses(gen: Generator, params: ParamStore, features, m, seed=None, rng=None, chunk=16384):
    """``(P, M)`` hypotheses from ``M`` latents; column ``j`` is one full map."""
    if m < 1:
        raise ConfigurationError("need at least one hypothesis")
    rng = rng if rng is not None else np.random.default_rng(seed)
    zs = draw_latents(rng, m, gen.spec.latent_dim)
    out = np.empty((len(features), m))
    for j in range(m):
        for s in range(0, len(features), chunk):
            out[s:s + chunk, j] = generate(gen, params, features[s:s + chunk], zs[j])
    return out


def coverage_metric(hypotheses, modes):
    """``max_mode min_hyp |y - mode|``; lower is better."""
    h = np.asarray(hypotheses, dtype=np.float64).reshape(-1)
    modes = np.asarray(modes, dtype=np.float64).reshape(-1)
    return float(np.max(np.min(np.abs(h[None, :] - modes[:, None]), axis=1)))


def coverage_per_ray(hypotheses, modes_list):
    """Coverage for each row of ``(R, M)`` hypotheses against its own mode set."""
    return np.array([coverage_metric(h, m) for h, m in zip(hypotheses, modes_list)])


# ------------------------------------------------------------------ objective
def _bind(tape, params, gen):
    return params.bind(tape, gen.prefix + "/")


def cimle_objective(tape, gen, nodes, examples, zs):
    """Mean over examples of ``min_j d(G(I_e, z_{e,j}), D_e)``.

    ``examples`` is a list of :class:`PriorExample` with equal pixel counts;
    ``zs`` is ``(E, M, latent_dim)``; ``d`` is the mean per-pixel squared error.
    """
    e_count = len(examples)
    m = zs.shape[1]
    p = len(examples[0].labels)
    feats = np.concatenate([np.tile(ex.features, (m, 1)) for ex in examples], axis=0)
    owner = np.repeat(np.arange(e_count * m), p)
    out = gen.output(tape, nodes, feats, zs.reshape(e_count * m, -1), owner)
    labels = np.concatenate([np.tile(ex.labels, m) for ex in examples]).astype(tape.dtype)
    diff = tape.sub(out, labels)
    d = tape.mean(tape.reshape(tape.mul(diff, diff), (e_count, m, p)), axis=2)
    return tape.mean(tape.min_select(d, axis=1))


def regression_objective(tape, gen, nodes, examples, z):
    """Plain mean squared error with one fixed latent per example."""
    return cimle_objective(tape, gen, nodes, examples, np.asarray(z).reshape(len(examples), 1, -1))


def _distances(gen, params, examples, zs, rng, max_pixels):
    """``(E, Z)`` matrix of ``d(G(I_e, z_k), D_e)`` on a pixel subsample."""
    dist = np.empty((len(examples), len(zs)))
    for i, ex in enumerate(examples):
        idx = np.arange(len(ex.labels))
        if len(idx) > max_pixels:
            idx = np.sort(rng.choice(len(idx), max_pixels, replace=False))
        for k, z in enumerate(zs):
            pred = generate(gen, params, ex.features[idx], z)
            dist[i, k] = np.mean((pred - ex.labels[idx]) ** 2)
    return dist


def select_latents(gen, params, examples, cfg: PriorTrainConfig, rng):
    """Pairs ``(example index, latent)`` to train against this round.

    ``cimle``: per example, the best of ``m_train`` fresh latents. ``gan``
    (the flipped control): per latent, the nearest example.
    """
    if cfg.objective == "cimle":
        pairs = []
        for i, ex in enumerate(examples):
            zs = draw_latents(rng, cfg.m_train, gen.spec.latent_dim)
            d = _distances(gen, params, [ex], zs, rng, cfg.select_pixels)[0]
            pairs.append((i, zs[int(np.argmin(d))]))
        return pairs
    zs = draw_latents(rng, len(examples), gen.spec.latent_dim)
    d = _distances(gen, params, examples, zs, rng, cfg.select_pixels)
    return [(int(np.argmin(d[:, k])), zs[k]) for k in range(len(zs))]


def _train_step(gen, params, examples, pairs, cfg, rng, dtype):
    tape = Tape(dtype=dtype)
    nodes = _bind(tape, params, gen)
    feats, labels, owner, zs = [], [], [], []
    for k, (i, z) in enumerate(pairs):
        ex = examples[i]
        n = min(cfg.pixels_per_example, len(ex.labels))
        idx = rng.choice(len(ex.labels), n, replace=False)
        feats.append(ex.features[idx])
        labels.append(ex.labels[idx])
        owner.append(np.full(n, k))
        zs.append(z)
    out = gen.output(tape, nodes, np.concatenate(feats), np.stack(zs), np.concatenate(owner))
    diff = tape.sub(out, np.concatenate(labels).astype(dtype))
    loss = tape.mean(tape.mul(diff, diff))
    if not np.isfinite(loss.value):
        raise DivergedError("non-finite prior loss")
    tape.backward(loss)
    adam_step(params, gradients(tape, nodes), cfg.lr)
    return float(loss.value)


def cimle_round(gen, params, examples, cfg: PriorTrainConfig, rng, dtype=np.float32):
    """Latent selection followed by ``resample_every`` epochs of training.

    Returns the per-epoch mean training loss.
    """
    if not examples:
        raise ConfigurationError("prior training needs at least one example")
    pairs = select_latents(gen, params, examples, cfg, rng)
    history = []
    for _ in range(cfg.resample_every):
        losses = [_train_step(gen, params, examples, pairs, cfg, rng, dtype) for _ in range(cfg.steps_per_epoch)]
        history.append(float(np.mean(losses)))
    return history


# ------------------------------------------------------------------ features
def image_patches(image, radius=1):
    """Per-pixel ``(2r+1)^2`` RGB neighbourhood with edge padding, ``(H*W, 3(2r+1)^2)``."""
    img = np.asarray(image)[..., :3]
    pad = np.pad(img, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    h, w = img.shape[:2]
    cols = [pad[dy:dy + h, dx:dx + w] for dy in range(2 * radius + 1) for dx in range(2 * radius + 1)]
    return np.concatenate(cols, axis=-1).reshape(h * w, -1)


def view_features(pose, image, frequencies=4, position_scale=2.5, view_id=None, n_views=0):
    """Condition vector per pixel: encoded ray origin and direction, a 3x3 RGB
    patch, and optionally a one-hot view id."""
    origins, dirs = pose.rays()
    parts = [positional_encoding(origins / position_scale, frequencies),
             positional_encoding(dirs, frequencies), image_patches(image) - 0.5]
    if n_views > 0:
        onehot = np.zeros((len(origins), n_views))
        onehot[:, view_id] = 1.0
        parts.append(onehot)
    return np.concatenate(parts, axis=1)


def feature_dim(frequencies=4, n_views=0):
    return 2 * 3 * (2 * frequencies + 1) + 27 + n_views


def write_hypotheses(root, view_index, hyps, height, width):
    """Per-view ``hyp_{m}.f32`` grids plus an ``index.txt`` listing them."""
    d = os.path.join(root, str(view_index))
    os.makedirs(d, exist_ok=True)
    names = []
    for j in range(hyps.shape[1]):
        name = f"hyp_{j}.f32"
        hyps[:, j].reshape(height, width).astype("<f4").tofile(os.path.join(d, name))
        names.append(name)
    with open(os.path.join(d, "index.txt"), "w") as fh:
        fh.write(f"# {height} x {width} little-endian float32 depth grids\n")
        fh.write("\n".join(names) + "\n")


def read_hypotheses(root, view_index, height, width):
    d = os.path.join(root, str(view_index))
    with open(os.path.join(d, "index.txt")) as fh:
        names = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    cols = [np.fromfile(os.path.join(d, n), dtype="<f4").astype(np.float64) for n in names]
    if any(c.size != height * width for c in cols):
        raise ConfigurationError(f"hypothesis grid size mismatch in {d}")
    return np.stack(cols, axis=1)
