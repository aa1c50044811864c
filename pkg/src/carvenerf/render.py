"""Differentiable volume rendering and the ray termination distribution.

Everything works on batches: ``R`` rays with ``K`` quadrature bins each. The
field is queried once per batch so the tape sees a handful of large nodes
instead of one node per sample.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ConfigurationError, DivergedError, MlpSpec, Tape, forward, init_mlp
from .diffcore.nn import positional_encoding


class DivergedFieldError(DivergedError):
    """The field produced a non-finite density."""


@dataclass
class RayBatch:
    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3), unit length
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        self.dirs = np.asarray(self.dirs, dtype=np.float64).reshape(-1, 3)
        if self.origins.shape != self.dirs.shape:
            raise ConfigurationError("origins and directions differ in count")
        if not self.t_near < self.t_far:
            raise ConfigurationError("need t_near < t_far")
        if self.dirs.size and np.max(np.abs(np.linalg.norm(self.dirs, axis=1) - 1.0)) > 1e-9:
            raise ConfigurationError("ray directions must be unit length")

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, idx):
        return RayBatch(self.origins[idx], self.dirs[idx], self.t_near, self.t_far)


@dataclass
class QuadratureSamples:
    edges: np.ndarray  # (R, K + 1), strictly increasing
    points: np.ndarray  # (R, K), one point inside each bin

    @property
    def widths(self):
        return np.diff(self.edges, axis=1)

    @property
    def k(self):
        return self.points.shape[1]


def stratified_samples(n_rays, t_near, t_far, k, rng=None, jitter=True):
    """One uniform draw per equal-width bin; bin centres when ``jitter`` is off."""
    if k < 2:
        raise ConfigurationError("need at least 2 quadrature bins")
    edges = np.linspace(t_near, t_far, k + 1)
    edges = np.broadcast_to(edges, (n_rays, k + 1)).copy()
    if jitter:
        u = rng.random((n_rays, k))
    else:
        u = np.full((n_rays, k), 0.5)
    points = edges[:, :-1] + u * np.diff(edges, axis=1)
    return QuadratureSamples(edges, points)


def sample_pdf(edges, weights, n, rng=None):
    """Inverse-CDF draws from a piecewise-constant pdf (no gradients)."""
    w = np.asarray(weights, dtype=np.float64) + 1e-5
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((len(pdf), 1)), np.cumsum(pdf, axis=1)], axis=1)
    u = rng.random((len(pdf), n)) if rng is not None else np.broadcast_to((np.arange(n) + 0.5) / n, (len(pdf), n))
    idx = np.clip(np.sum(u[:, :, None] >= cdf[:, None, 1:], axis=2), 0, pdf.shape[1] - 1)
    lo = np.take_along_axis(cdf, idx, axis=1)
    p = np.take_along_axis(pdf, idx, axis=1)
    e0 = np.take_along_axis(edges, idx, axis=1)
    e1 = np.take_along_axis(edges, idx + 1, axis=1)
    return e0 + (u - lo) / p * (e1 - e0)


def hierarchical_samples(coarse: QuadratureSamples, coarse_pmf, n_fine, rng=None):
    """Merge coarse points with ``n_fine`` draws from the coarse pmf.

    The merged points are sorted; bin edges are the midpoints between
    neighbours, closed off by the original near/far bounds.
    """
    fine = sample_pdf(coarse.edges, coarse_pmf, n_fine, rng)
    pts = np.sort(np.concatenate([coarse.points, fine], axis=1), axis=1)
    # keep edges strictly increasing when two draws coincide
    pts = np.maximum.accumulate(pts + 1e-9 * np.arange(pts.shape[1]), axis=1)
    mids = 0.5 * (pts[:, 1:] + pts[:, :-1])
    edges = np.concatenate([coarse.edges[:, :1], mids, coarse.edges[:, -1:]], axis=1)
    return QuadratureSamples(edges, pts)


# --------------------------------------------------------------------- field
@dataclass(frozen=True)
class FieldSpec:
    hidden_widths: tuple = (64, 64, 64)
    pe_frequencies: int = 6
    use_viewdirs: bool = False
    dir_frequencies: int = 2
    center: tuple = (0.0, 0.0, 0.5)
    scale: float = 2.5
    density_bias: float = -1.0

    def mlp(self):
        extra = 3 * (2 * self.dir_frequencies + 1) if self.use_viewdirs else 0
        enc = 3 * (2 * self.pe_frequencies + 1) + extra
        return MlpSpec(enc, tuple(self.hidden_widths), 4, "none", 0)


class RadianceField:
    """Density ``softplus(raw + bias)`` and colour ``sigmoid`` heads on one MLP."""

    def __init__(self, spec: FieldSpec, prefix="field"):
        self.spec = spec
        self.prefix = prefix
        self.mlp = spec.mlp()

    def init(self, params, rng):
        return init_mlp(params, self.mlp, self.prefix, rng)

    def encode(self, positions, dirs=None):
        x = (positions - np.asarray(self.spec.center)) / self.spec.scale
        enc = positional_encoding(x, self.spec.pe_frequencies)
        if self.spec.use_viewdirs:
            enc = np.concatenate([enc, positional_encoding(dirs, self.spec.dir_frequencies)], axis=1)
        return enc

    def query(self, tape, nodes, positions, dirs=None):
        """Return ``(sigma, rgb)`` nodes for ``(P, 3)`` positions."""
        enc = self.encode(positions, dirs).astype(tape.dtype)
        raw = forward(tape, self.mlp, nodes, enc, self.prefix, encoded=True)
        sigma = tape.softplus(tape.add(raw[:, 0], self.spec.density_bias))
        rgb = tape.sigmoid(raw[:, 1:4])
        return sigma, rgb


# ------------------------------------------------------------- distributions
@dataclass
class TerminationDistribution:
    """Quadrature pmf over ``K`` bins plus the residual mass parked at ``t_far``."""

    edges: np.ndarray  # (R, K + 1) constants
    points: np.ndarray  # (R, K) constants
    pmf: object  # node (R, K)
    residual: object  # node (R,)
    t_far: float

    def cdf(self):
        return np.cumsum(self.pmf.value, axis=1)

    def support(self):
        """``(t, mass)`` arrays of shape ``(R, K + 1)``; last column is ``t_far``."""
        t = np.concatenate([self.points, np.full((len(self.points), 1), self.t_far)], axis=1)
        p = np.concatenate([self.pmf.value, self.residual.value[:, None]], axis=1)
        return t, p


@dataclass
class RenderOutput:
    rgb: object  # node (R, 3)
    dist: TerminationDistribution
    sigma: object  # node (R, K)


def composite(tape, sigma, rgb, samples: QuadratureSamples, t_far, background=(0.0, 0.0, 0.0)):
    """Alpha-composite ``sigma (R, K)`` and ``rgb (R, K, 3)`` nodes."""
    if not np.all(np.isfinite(sigma.value)):
        raise DivergedFieldError("non-finite density in field output")
    tau = tape.mul(sigma, samples.widths.astype(tape.dtype))
    cum = tape.cumsum(tau, axis=1)
    # T_i = exp(-sum_{j<i} tau_j); f_i = T_i - T_{i+1} telescopes to 1 - T_{K+1}
    trans = tape.exp(tape.neg(cum))
    excl = tape.exp(tape.neg(tape.sub(cum, tau)))
    pmf = tape.sub(excl, trans)
    residual = trans[:, -1]
    weights = tape.reshape(pmf, pmf.value.shape + (1,))
    color = tape.sum(tape.mul(weights, rgb), axis=1)
    bg = np.asarray(background, dtype=tape.dtype)
    if np.any(bg != 0):
        color = tape.add(color, tape.mul(tape.reshape(residual, (-1, 1)), bg))
    dist = TerminationDistribution(samples.edges, samples.points, pmf, residual, t_far)
    return RenderOutput(color, dist, sigma)


def render_rays(tape, field: RadianceField, nodes, rays: RayBatch, samples: QuadratureSamples,
                background=(0.0, 0.0, 0.0)):
    r, k = samples.points.shape
    pos = rays.origins[:, None, :] + samples.points[..., None] * rays.dirs[:, None, :]
    dirs = np.repeat(rays.dirs, k, axis=0) if field.spec.use_viewdirs else None
    sigma, rgb = field.query(tape, nodes, pos.reshape(-1, 3), dirs)
    sigma = tape.reshape(sigma, (r, k))
    rgb = tape.reshape(rgb, (r, k, 3))
    return composite(tape, sigma, rgb, samples, rays.t_far, background)


def render_image(field, arrays, pose, t_near, t_far, k, background=(0.0, 0.0, 0.0), chunk=4096, n_fine=0,
                 fine_field=None, fine_arrays=None):
    """Deterministic render of a full view (bin centres, no tape history).

    Returns ``(image (H, W, 3), t (P, K+1), mass (P, K+1))``.
    """
    origins, dirs = pose.rays()
    colors, ts, ps = [], [], []
    for s in range(0, len(origins), chunk):
        tape = Tape(record=False)
        rays = RayBatch(origins[s:s + chunk], dirs[s:s + chunk], t_near, t_far)
        samples = stratified_samples(len(rays), t_near, t_far, k, jitter=False)
        out = render_rays(tape, field, {n: tape.constant(a) for n, a in arrays.items()}, rays, samples, background)
        if n_fine > 0:
            fine = hierarchical_samples(samples, out.dist.pmf.value, n_fine)
            nodes = {n: tape.constant(a) for n, a in fine_arrays.items()}
            out = render_rays(tape, fine_field, nodes, rays, fine, background)
        colors.append(out.rgb.value)
        t, p = out.dist.support()
        ts.append(t)
        ps.append(p)
    return (np.concatenate(colors).reshape(pose.height, pose.width, 3),
            np.concatenate(ts), np.concatenate(ps))


def sample_termination(tape, dist: TerminationDistribution, u):
    """Inverse-transform samples ``x = F^-1(u)`` with piecewise-linear bins.

    ``u`` is a constant ``(R, N)`` array. Inside the selected bin ``k``,
    ``x = e_k + (u - F_{k-1}) / f_k * w_k``, so ``x`` is differentiable in the
    densities through ``F_{k-1}`` and ``f_k``. Draws landing in the residual
    mass return ``t_far``.
    """
    u = np.asarray(u, dtype=tape.dtype)
    pmf = dist.pmf
    k = pmf.value.shape[1]
    cdf = tape.cumsum(pmf, axis=1)
    idx = np.sum(u[:, :, None] >= cdf.value[:, None, :], axis=2)
    in_bins = idx < k
    safe = np.minimum(idx, k - 1)
    f_k = tape.take_along(pmf, safe, axis=1)
    c_k = tape.take_along(cdf, safe, axis=1)
    lower = tape.sub(c_k, f_k)
    e0 = np.take_along_axis(dist.edges, safe, axis=1).astype(tape.dtype)
    w = np.take_along_axis(np.diff(dist.edges, axis=1), safe, axis=1).astype(tape.dtype)
    f_safe = tape.maximum(f_k, 1e-12)
    frac = tape.div(tape.sub(u, lower), f_safe)
    frac = tape.minimum(tape.maximum(frac, 0.0), 1.0)
    x = tape.add(tape.mul(frac, w), e0)
    return tape.where(in_bins, x, np.full(u.shape, dist.t_far, dtype=tape.dtype))


def expected_depth(tape, dist: TerminationDistribution):
    """``sum_i f_i t_i + residual * t_far`` per ray."""
    body = tape.sum(tape.mul(dist.pmf, dist.points.astype(tape.dtype)), axis=1)
    return tape.add(body, tape.mul(dist.residual, dist.t_far))


def depth_moments(tape, dist: TerminationDistribution):
    """Mean and variance of the termination distance per ray."""
    mean = expected_depth(tape, dist)
    t2 = (dist.points ** 2).astype(tape.dtype)
    second = tape.add(tape.sum(tape.mul(dist.pmf, t2), axis=1), tape.mul(dist.residual, dist.t_far ** 2))
    return mean, tape.sub(second, tape.mul(mean, mean))


def write_distribution_csv(path, t, pmf):
    """Debug dump of one ray: ``t, f, F`` per support point."""
    cdf = np.cumsum(pmf)
    with open(path, "w") as fh:
        fh.write("t,f,F\n")
        for row in zip(t, pmf, cdf):
            fh.write("{:.9g},{:.9g},{:.9g}\n".format(*row))


def write_float_map(path, arr):
    np.asarray(arr, dtype="<f4").tofile(path)
