"""MLP blocks and positional encoding on top of the tape."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ConfigurationError, ParamStore

OUTPUT_ACTIVATIONS = ("none", "sigmoid", "softplus", "relu")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple = (64, 64)
    output_dim: int = 1
    output_activation: str = "none"
    pe_frequencies: int = 0
    include_input: bool = True

    def __post_init__(self):
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigurationError(f"unknown output activation {self.output_activation!r}")

    @property
    def encoded_dim(self):
        return encoded_width(self.input_dim, self.pe_frequencies, self.include_input)

    def layer_shapes(self):
        widths = [self.encoded_dim, *self.hidden_widths, self.output_dim]
        return [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]


def encoded_width(dim, frequencies, include_input=True):
    return dim * (2 * frequencies + int(include_input))


def positional_encoding(x, frequencies, include_input=True):
    """Map ``x`` to ``(x, sin(2^k pi x), cos(2^k pi x))`` for k < ``frequencies``.

    Works on plain arrays; use :func:`positional_encoding_node` when ``x``
    itself must carry gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    parts = [x] if include_input else []
    if frequencies > 0:
        # double-angle recurrence; error grows ~2^k ulp, fine for k < 16
        s = np.sin(np.pi * x)
        c = np.cos(np.pi * x)
        for _ in range(frequencies):
            parts.append(s)
            parts.append(c)
            s, c = 2.0 * s * c, (c - s) * (c + s)
    return np.concatenate(parts, axis=-1) if parts else x[..., :0]


def positional_encoding_node(tape, x, frequencies, include_input=True):
    parts = [x] if include_input else []
    for k in range(frequencies):
        scaled = x * ((2.0 ** k) * np.pi)
        parts.append(tape.sin(scaled))
        parts.append(tape.cos(scaled))
    return tape.concat(parts, axis=-1)


def init_mlp(params: ParamStore, spec: MlpSpec, prefix, rng, zero_last=False):
    """He-uniform hidden layers, Glorot-uniform output layer."""
    shapes = spec.layer_shapes()
    for i, (fan_in, fan_out) in enumerate(shapes):
        last = i == len(shapes) - 1
        if last and zero_last:
            w = np.zeros((fan_in, fan_out))
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out)) if last else np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params.add(f"{prefix}/w{i}", w)
        params.add(f"{prefix}/b{i}", np.zeros(fan_out))
    return params


def _activate(tape, h, kind):
    if kind == "none":
        return h
    return getattr(tape, kind)(h)


def forward(tape, spec: MlpSpec, nodes, x, prefix, encoded=False, modulation=None):
    """Run the MLP on a batch ``x`` of shape ``(B, input_dim)``.

    ``nodes`` maps parameter names to tape variables (see ``ParamStore.bind``).
    ``modulation`` optionally gives per-hidden-layer ``(scale, shift)`` nodes
    applied as ``h * (1 + scale) + shift`` before the ReLU.
    """
    shapes = spec.layer_shapes()
    xv = x.value if hasattr(x, "value") else np.asarray(x)
    expected = spec.encoded_dim if encoded else spec.input_dim
    if xv.ndim != 2 or xv.shape[1] != expected:
        raise ConfigurationError(f"input width {xv.shape[-1]} does not match spec ({expected})")
    if not encoded and spec.pe_frequencies > 0:
        if hasattr(x, "value"):
            x = positional_encoding_node(tape, x, spec.pe_frequencies, spec.include_input)
        else:
            x = positional_encoding(x, spec.pe_frequencies, spec.include_input)
    h = tape.lift(x)
    for i, (fan_in, fan_out) in enumerate(shapes):
        try:
            w = nodes[f"{prefix}/w{i}"]
            b = nodes[f"{prefix}/b{i}"]
        except KeyError as exc:
            raise ConfigurationError(f"missing layer parameter {exc.args[0]!r}") from None
        if w.value.shape != (fan_in, fan_out) or b.value.shape != (fan_out,):
            raise ConfigurationError(f"layer {prefix}/{i} has shape {w.value.shape}, spec wants {(fan_in, fan_out)}")
        h = tape.affine(h, w, b)
        if i < len(shapes) - 1:
            if modulation is not None:
                scale, shift = modulation[i]
                h = tape.add(tape.mul(h, tape.add(scale, 1.0)), shift)
            h = tape.relu(h)
    return _activate(tape, h, spec.output_activation)


def forward_numpy(spec: MlpSpec, arrays, x, prefix):
    """Straight-line evaluation without a tape (used as an independent check)."""
    h = np.asarray(x, dtype=np.float64)
    if spec.pe_frequencies > 0:
        parts = [h] if spec.include_input else []
        for k in range(spec.pe_frequencies):
            parts += [np.sin(2.0 ** k * np.pi * h), np.cos(2.0 ** k * np.pi * h)]
        h = np.concatenate(parts, axis=-1)
    n_layers = len(spec.layer_shapes())
    for i in range(n_layers):
        h = h @ arrays[f"{prefix}/w{i}"] + arrays[f"{prefix}/b{i}"]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    act = spec.output_activation
    if act == "sigmoid":
        h = 1.0 / (1.0 + np.exp(-h))
    elif act == "softplus":
        h = np.log1p(np.exp(h))
    elif act == "relu":
        h = np.maximum(h, 0.0)
    return h
