"""Supervision terms: photometric, space carving, alignment and the moment baselines."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .diffcore import ConfigurationError
from .render import depth_moments, expected_depth

VARIANCE_FLOOR = 1e-12


@dataclass
class LossReport:
    photometric: float
    space_carving: float
    total: float
    lam: float
    grad_norm: float = float("nan")

    def csv_row(self, step):
        return f"{step},{self.photometric!r},{self.space_carving!r},{self.total!r},{self.lam!r}"


def photometric_loss(tape, predicted, target):
    """Mean squared error over rays and channels."""
    target = np.asarray(target, dtype=tape.dtype)
    if predicted.value.shape != target.shape:
        raise ConfigurationError(f"pixel count mismatch: {predicted.value.shape} vs {target.shape}")
    diff = tape.sub(predicted, target)
    return tape.mean(tape.mul(diff, diff))


def space_carving_loss(tape, x, y, reduce="mean"):
    """``sum_i min_j (x_i - y_j)^2`` per ray.

    ``x`` is ``(R, N)`` and ``y`` is ``(R, M)``; either may be a node or a
    constant array. Only the argmin pair of each ``x_i`` receives gradient
    (ties go to the lowest ``j``). ``reduce`` is ``"mean"`` over rays,
    ``"sum"``, or ``"none"`` for the per-ray values.
    """
    x, y = tape.lift(x), tape.lift(y)
    if x.value.ndim == 1:
        x = tape.reshape(x, (1, -1))
    if y.value.ndim == 1:
        y = tape.reshape(y, (1, -1))
    r, n = x.value.shape
    m = y.value.shape[1]
    if n < 1 or m < 1:
        raise ConfigurationError("space carving needs at least one sample on each side")
    xe = tape.reshape(x, (r, n, 1))
    ye = tape.reshape(y, (r, 1, m))
    d = tape.sub(xe, ye)
    nearest = tape.min_select(tape.mul(d, d), axis=2)
    per_ray = tape.sum(nearest, axis=1)
    if reduce == "none":
        return per_ray
    return tape.sum(per_ray) if reduce == "sum" else tape.mean(per_ray)


# ---------------------------------------------------------------- alignment
class ViewAlignment:
    """Per-view ``(log a, b)`` parameters stored as ``align/<view>``.

    ``a = exp(log_a)`` keeps the scale positive without constraints.
    """

    prefix = "align"

    def __init__(self, view_ids):
        self.view_ids = [int(v) for v in view_ids]

    def name(self, view):
        return f"{self.prefix}/{int(view)}"

    def init(self, params, scale=1.0, shift=0.0):
        for v in self.view_ids:
            params.add(self.name(v), np.array([np.log(scale), shift]))
        return params

    def values(self, params, view):
        raw = params[self.name(view)]
        return float(np.exp(raw[0])), float(raw[1])


def apply_alignment(tape, y, nodes, view, prefix="align"):
    """``a * y + b`` with ``a = exp(log_a)``.

    ``view`` is one view id, or a per-ray array matching ``y``'s first axis.
    ``nodes`` maps ``align/<view>`` to tape variables, or to constants while
    the alignment is frozen.
    """
    y = np.asarray(y, dtype=tape.dtype)
    views = np.asarray(view)
    missing = sorted({int(v) for v in views.reshape(-1)} - {int(k.rsplit("/", 1)[1]) for k in nodes
                                                          if k.startswith(prefix + "/")})
    if missing:
        raise ConfigurationError(f"no alignment for view(s) {missing}")
    if views.ndim == 0:
        p = nodes[f"{prefix}/{int(views)}"]
        return tape.add(tape.mul(tape.exp(p[0]), y), p[1])
    uniq, inverse = np.unique(views, return_inverse=True)
    table = tape.stack([nodes[f"{prefix}/{int(v)}"] for v in uniq], axis=0)
    per = tape.take(table, inverse.reshape(-1))
    shape = (-1,) + (1,) * (y.ndim - 1)
    log_a = tape.reshape(per[:, 0], shape)
    b = tape.reshape(per[:, 1], shape)
    return tape.add(tape.mul(tape.exp(log_a), y), b)


# ----------------------------------------------------------------- baselines
def gaussian_nll(tape, dist, mu, sigma_prior, reduce="mean"):
    """Negative log density of ``mu`` under ``Normal(m, v + sigma_prior^2)``.

    ``m`` and ``v`` are the mean and variance of the rendered termination
    distribution. Variances below 1e-12 are clamped and a warning is issued.
    """
    mean, var = depth_moments(tape, dist)
    return gaussian_nll_moments(tape, mean, var, mu, sigma_prior, reduce)


def gaussian_nll_moments(tape, mean, var, mu, sigma_prior, reduce="mean"):
    """``sigma_prior`` may be a constant or a node (e.g. an aligned spread)."""
    sp = tape.lift(sigma_prior if hasattr(sigma_prior, "value") else np.asarray(sigma_prior, dtype=tape.dtype))
    if np.any(sp.value <= 0):
        raise ConfigurationError("prior standard deviation must be positive")
    s2 = tape.add(var, tape.mul(sp, sp))
    if np.any(s2.value < VARIANCE_FLOOR):
        warnings.warn("gaussian_nll: variance clamped to 1e-12", RuntimeWarning, stacklevel=2)
        s2 = tape.maximum(s2, VARIANCE_FLOOR)
    mu = mu if hasattr(mu, "value") else np.asarray(mu, dtype=tape.dtype)
    d = tape.sub(mu, mean)
    quad = tape.div(tape.mul(d, d), tape.mul(s2, 2.0))
    per_ray = tape.add(tape.mul(tape.log(tape.mul(s2, 2.0 * np.pi)), 0.5), quad)
    if reduce == "none":
        return per_ray
    return tape.mean(per_ray) if reduce == "mean" else tape.sum(per_ray)


def _affine_fit(tape, e, y):
    """Least-squares ``(s, t)`` minimising ``|s e + t - y|^2``, differentiable in ``e``.

    Falls back to shift only (``s = 1``) when the batch has no spread.
    """
    n = e.value.shape[0]
    em = tape.mean(e)
    ym = float(np.mean(y))
    ec = tape.sub(e, em)
    yc = y - ym
    var_e = tape.sum(tape.mul(ec, ec))
    if var_e.value < 1e-12 * n or np.sum(yc * yc) < 1e-12 * n:
        return None, tape.sub(ym, em)
    s = tape.div(tape.sum(tape.mul(ec, yc)), var_e)
    t = tape.sub(ym, tape.mul(s, em))
    return s, t


def expected_depth_loss(tape, dist, y_mean, mode="mse"):
    """Squared error between the expected termination distance and ``y_mean``.

    In ``midas`` mode the expected depths are first mapped through the
    closed-form least-squares scale and shift onto the targets.
    """
    y = np.asarray(y_mean, dtype=tape.dtype).reshape(-1)
    e = expected_depth(tape, dist)
    if mode == "midas":
        s, t = _affine_fit(tape, e, y)
        e = tape.add(e, t) if s is None else tape.add(tape.mul(e, s), t)
    elif mode != "mse":
        raise ConfigurationError(f"unknown expected-depth mode {mode!r}")
    d = tape.sub(e, y)
    return tape.mean(tape.mul(d, d))


def total_loss(tape, photometric, space_carving, lam):
    if lam < 0:
        raise ConfigurationError("lambda must be non-negative")
    return tape.add(photometric, tape.mul(space_carving, float(lam)))
