"""Named parameter store, Adam, and the checkpoint container."""
from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from .tape import Tape


class DivergedError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class ConfigurationError(ValueError):
    """Parameters or specs do not fit together."""


class ParamStore:
    """Dense float64 arrays keyed by owner name, plus Adam moment buffers."""

    def __init__(self, arrays=None):
        self.arrays = {}
        self.m = {}
        self.v = {}
        self.step = 0
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self.arrays:
            raise ConfigurationError(f"parameter {name!r} already owned")
        value = np.array(value, dtype=np.float64)
        self.arrays[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        try:
            return self.arrays[name]
        except KeyError:
            raise ConfigurationError(f"missing parameter {name!r}") from None

    def __contains__(self, name):
        return name in self.arrays

    def names(self, prefix=""):
        return [k for k in self.arrays if k.startswith(prefix)]

    def bind(self, tape: Tape, prefix=""):
        """Create tape variables for every parameter under ``prefix``."""
        return {k: tape.variable(self.arrays[k], name=k) for k in self.names(prefix)}

    def merge(self, other):
        for name in other.arrays:
            self.add(name, other.arrays[name])
            self.m[name] = other.m[name].copy()
            self.v[name] = other.v[name].copy()
        return self

    def copy(self):
        out = ParamStore()
        out.step = self.step
        for k in self.arrays:
            out.arrays[k] = self.arrays[k].copy()
            out.m[k] = self.m[k].copy()
            out.v[k] = self.v[k].copy()
        return out

    def num_scalars(self):
        return int(sum(a.size for a in self.arrays.values()))

    # ------------------------------------------------------------ checkpoint
    def to_bytes(self, extra=None):
        """Serialize to a zip of ``.npy`` members plus a JSON header."""
        buf = io.BytesIO()
        header = {"step": self.step, "names": list(self.arrays), "extra": extra or {}}
        with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
            _write_member(zf, "header.json", json.dumps(header, sort_keys=True).encode())
            for name in self.arrays:
                for kind, store in (("param", self.arrays), ("adam_m", self.m), ("adam_v", self.v)):
                    npy = io.BytesIO()
                    np.save(npy, store[name], allow_pickle=False)
                    _write_member(zf, f"{kind}/{name}.npy", npy.getvalue())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        store = cls()
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            header = json.loads(zf.read("header.json"))
            for name in header["names"]:
                store.arrays[name] = _read_npy(zf, f"param/{name}.npy")
                store.m[name] = _read_npy(zf, f"adam_m/{name}.npy")
                store.v[name] = _read_npy(zf, f"adam_v/{name}.npy")
        store.step = int(header["step"])
        return store, header["extra"]

    def save(self, path, extra=None):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(extra))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _write_member(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _read_npy(zf, name):
    return np.load(io.BytesIO(zf.read(name)), allow_pickle=False)


def adam_step(params: ParamStore, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, frozen=(), lr_scale=None):
    """One in-place Adam update.

    ``grads`` maps names to arrays; names absent from ``grads`` or listed in
    ``frozen`` keep their values and moments. ``lr_scale`` optionally maps
    names to learning-rate multipliers (scaling the gradient instead would
    cancel in Adam's normalization). Raises :class:`DivergedError` before
    touching anything if a gradient is non-finite.
    """
    for name, g in grads.items():
        if name not in params.arrays:
            raise ConfigurationError(f"gradient for unknown parameter {name!r}")
        if g.shape != params.arrays[name].shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter shape for {name!r}")
        if not np.all(np.isfinite(g)):
            raise DivergedError(f"non-finite gradient for {name!r}")
    params.step += 1
    t = params.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        if name in frozen:
            continue
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        rate = lr if lr_scale is None else lr * lr_scale.get(name, 1.0)
        params.arrays[name] -= rate * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


def gradients(tape: Tape, nodes):
    """Collect adjoints for a ``{name: node}`` mapping after ``tape.backward``."""
    return {name: tape.grad(node) for name, node in nodes.items()}
