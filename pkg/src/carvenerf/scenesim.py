"""Analytic scenes, cameras, ground-truth rays and label maps.

Surfaces are thin alpha-compositing sheets: a ray crossing a surface of
opacity ``alpha`` terminates there with probability ``alpha`` given that it
reached it. The background is an opaque sheet at ``t_far`` so every ray's
termination pmf sums to one.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .diffcore import ConfigurationError

AXES = {"x": 0, "y": 1, "z": 2}
PRESETS = ("empty", "wall", "glass-wall", "chair-box", "two-room")


class UsageError(ValueError):
    """Unknown preset, malformed scene file, or bad argument."""


@dataclass(frozen=True)
class Surface:
    """One surface; ``kind`` is ``plane``, ``sphere`` or ``box``.

    Planes are axis-aligned at ``offset`` along ``axis`` with an optional
    half-open rectangular ``extent`` ``(lo_u, hi_u, lo_v, hi_v)`` over the two
    remaining axes in increasing index order. Boxes contribute their entry and
    exit faces; spheres their two crossings. A non-empty ``palette`` with
    ``tile > 0`` paints a deterministic tile pattern over the surface instead
    of the flat ``color``.
    """

    kind: str
    color: tuple
    alpha: float = 1.0
    name: str = ""
    axis: int = 2
    offset: float = 0.0
    extent: tuple | None = None
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    lo: tuple = (0.0, 0.0, 0.0)
    hi: tuple = (0.0, 0.0, 0.0)
    tile: float = 0.0
    palette: tuple = ()

    def __post_init__(self):
        if self.kind not in ("plane", "sphere", "box"):
            raise UsageError(f"unknown surface kind {self.kind!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise UsageError(f"surface alpha must lie in (0, 1], got {self.alpha}")

    def color_at(self, points):
        """Colour at hit ``points (..., 3)``."""
        base = np.broadcast_to(np.asarray(self.color, dtype=np.float64), points.shape)
        if self.tile <= 0 or not self.palette:
            return base
        u, v = [i for i in range(3) if i != self.axis] if self.kind == "plane" else (0, 1)
        iu = np.floor(np.nan_to_num(points[..., u] / self.tile, posinf=0, neginf=0)).astype(np.int64)
        iv = np.floor(np.nan_to_num(points[..., v] / self.tile, posinf=0, neginf=0)).astype(np.int64)
        pal = np.asarray(self.palette, dtype=np.float64).reshape(-1, 3)
        return pal[((iu * 73856093) ^ (iv * 19349663)) % len(pal)]

    def intersect(self, origins, dirs):
        """Crossing distances, shape ``(R, c)``; ``inf`` where missed."""
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "plane":
                return self._plane(origins, dirs)[:, None]
            if self.kind == "sphere":
                return self._sphere(origins, dirs)
            return self._box(origins, dirs)

    def _plane(self, o, d):
        a = self.axis
        t = (self.offset - o[:, a]) / d[:, a]
        ok = np.isfinite(t) & (t > 0)
        if self.extent is not None:
            u, v = [i for i in range(3) if i != a]
            p = o + np.where(ok, t, 0.0)[:, None] * d
            lo_u, hi_u, lo_v, hi_v = self.extent
            ok &= (p[:, u] >= lo_u) & (p[:, u] < hi_u) & (p[:, v] >= lo_v) & (p[:, v] < hi_v)
        return np.where(ok, t, np.inf)

    def _sphere(self, o, d):
        oc = o - np.asarray(self.center)
        b = np.sum(oc * d, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius ** 2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        t = np.stack([-b - root, -b + root], axis=1)
        t[(disc <= 0)[:, None] | (t <= 0)] = np.inf
        return t

    def _box(self, o, d):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        t1 = (lo - o) / d
        t2 = (hi - o) / d
        t_in = np.nanmax(np.minimum(t1, t2), axis=1)
        t_out = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = t_out > np.maximum(t_in, 0.0)
        t = np.stack([t_in, t_out], axis=1)
        t[~hit] = np.inf
        t[t <= 0] = np.inf
        return t


@dataclass(frozen=True)
class SceneSpec:
    surfaces: tuple
    background: tuple = (0.5, 0.5, 0.5)
    t_near: float = 0.5
    t_far: float = 3.0
    name: str = "custom"
    center: tuple = (0.0, 0.0, 0.0)
    orbit_radius: float = 2.0

    def __post_init__(self):
        if not (self.t_near > 0 and self.t_far > self.t_near):
            raise ConfigurationError(f"need 0 < t_near < t_far, got {self.t_near}, {self.t_far}")


@dataclass(frozen=True)
class CameraPose:
    origin: np.ndarray
    rotation: np.ndarray
    focal: float
    width: int
    height: int

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ConfigurationError("camera rotation must be orthonormal")

    def matrix(self):
        """Row-major 3x4 camera-to-world matrix ``[R | o]``."""
        return np.concatenate([np.asarray(self.rotation), np.asarray(self.origin)[:, None]], axis=1)

    def rays(self):
        """Per-pixel world rays, row-major over the image. Camera looks down -z."""
        j, i = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        cam = np.stack([(i + 0.5 - 0.5 * self.width) / self.focal,
                        -(j + 0.5 - 0.5 * self.height) / self.focal,
                        -np.ones_like(i, dtype=np.float64)], axis=-1).reshape(-1, 3)
        dirs = cam @ np.asarray(self.rotation).T
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(np.asarray(self.origin, dtype=np.float64), dirs.shape).copy()
        return origins, dirs


def look_at(origin, target, width, height, focal, up=(0.0, 1.0, 0.0)):
    origin = np.asarray(origin, dtype=np.float64)
    back = origin - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    return CameraPose(origin, np.stack([right, true_up, back], axis=1), float(focal), int(width), int(height))


@dataclass
class GroundTruthRay:
    distances: np.ndarray
    alphas: np.ndarray
    colors: np.ndarray
    pmf: np.ndarray
    residual: float
    color: np.ndarray
    t_far: float

    @property
    def n_modes(self):
        return int(np.count_nonzero(self.pmf > 0)) + int(self.residual > 0)


@dataclass
class GroundTruthBatch:
    """Per-ray hits padded to a common slot count (``inf`` distance = no hit)."""

    distances: np.ndarray  # (R, S)
    alphas: np.ndarray  # (R, S)
    colors: np.ndarray  # (R, S, 3)
    pmf: np.ndarray  # (R, S)
    residual: np.ndarray  # (R,)
    color: np.ndarray  # (R, 3)
    t_far: float

    def __len__(self):
        return self.residual.shape[0]

    def ray(self, i):
        hit = np.isfinite(self.distances[i])
        return GroundTruthRay(self.distances[i][hit], self.alphas[i][hit], self.colors[i][hit],
                              self.pmf[i][hit], float(self.residual[i]), self.color[i], self.t_far)

    def n_modes(self):
        return np.count_nonzero(self.pmf > 0, axis=1) + (self.residual > 0)

    def modes(self, i):
        """Depths carrying positive termination mass (background included)."""
        g = self.ray(i)
        out = list(g.distances[g.pmf > 0])
        if g.residual > 0:
            out.append(self.t_far)
        return np.asarray(out)

    def packed_pmf(self):
        """``(R, S + 1, 2)`` array of ``(t, p)``; last slot is the background."""
        t = np.where(np.isfinite(self.distances), self.distances, self.t_far)
        t = np.concatenate([t, np.full((len(self), 1), self.t_far)], axis=1)
        p = np.concatenate([self.pmf, self.residual[:, None]], axis=1)
        return np.stack([t, p], axis=-1)


def trace(scene: SceneSpec, origins, dirs):
    """Intersect rays with every surface and composite front to back."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = origins.shape[0]
    ts, alphas, colors = [], [], []
    for s in scene.surfaces:
        t = s.intersect(origins, dirs)
        t = np.where((t >= scene.t_near) & (t <= scene.t_far), t, np.inf)
        ts.append(t)
        alphas.append(np.full(t.shape, s.alpha))
        with np.errstate(invalid="ignore"):
            hits = origins[:, None, :] + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs[:, None, :]
        colors.append(s.color_at(hits))
    if ts:
        t = np.concatenate(ts, axis=1)
        a = np.concatenate(alphas, axis=1)
        c = np.concatenate(colors, axis=1)
        order = np.argsort(t, axis=1, kind="stable")
        t = np.take_along_axis(t, order, axis=1)
        a = np.take_along_axis(a, order, axis=1)
        c = np.take_along_axis(c, order[..., None], axis=1)
        slots = max(1, int(np.max(np.sum(np.isfinite(t), axis=1))))
        t, a, c = t[:, :slots], a[:, :slots], c[:, :slots]
    else:
        t = np.full((n, 1), np.inf)
        a = np.zeros((n, 1))
        c = np.zeros((n, 1, 3))
    a = np.where(np.isfinite(t), a, 0.0)
    survive = np.cumprod(1.0 - a, axis=1)
    before = np.concatenate([np.ones((n, 1)), survive[:, :-1]], axis=1)
    pmf = a * before
    residual = survive[:, -1]
    color = np.sum(pmf[..., None] * c, axis=1) + residual[:, None] * np.asarray(scene.background)
    c = np.where(np.isfinite(t)[..., None], c, 0.0)
    return GroundTruthBatch(t, a, c, pmf, residual, color, scene.t_far)


def render_analytic(scene: SceneSpec, pose: CameraPose):
    """Return the ``(H, W, 3)`` image and the per-pixel ground truth."""
    origins, dirs = pose.rays()
    gt = trace(scene, origins, dirs)
    return gt.color.reshape(pose.height, pose.width, 3), gt


# --------------------------------------------------------------------- presets
_PALETTE = (0.85, 0.25, 0.20, 0.95, 0.75, 0.20, 0.20, 0.30, 0.80, 0.75, 0.75, 0.80,
            0.55, 0.25, 0.60, 0.90, 0.55, 0.35, 0.25, 0.25, 0.30, 0.30, 0.60, 0.85)


def _palette(rng, n=6):
    """``n`` distinct palette entries in a seed-dependent order."""
    pal = np.asarray(_PALETTE).reshape(-1, 3)
    return tuple(float(v) for v in pal[rng.permutation(len(pal))[:n]].reshape(-1))


def make_scene(preset, seed=0, glass_alpha=0.4):
    """Deterministic analytic scene for ``(preset, seed)``.

    Cameras orbit ``center`` at ``orbit_radius`` on the +z side; the wall
    sits at z = 0 so a frontal ray meets it at distance 2.
    """
    rng = np.random.default_rng(seed)
    wall_color = (0.2, 0.3, 0.8)
    if preset == "empty":
        return SceneSpec((), name=preset)
    if preset == "wall":
        wall = Surface("plane", wall_color, 1.0, "wall", axis=2, offset=0.0, tile=0.25, palette=_palette(rng))
        return SceneSpec((wall,), name=preset)
    if preset == "glass-wall":
        glass = Surface("plane", (0.1, 0.9, 0.2), float(glass_alpha), "glass", axis=2, offset=1.0,
                        extent=(-0.4, 0.4, -0.4, 0.4))
        wall = Surface("plane", wall_color, 1.0, "wall", axis=2, offset=0.0, tile=0.25, palette=_palette(rng))
        return SceneSpec((glass, wall), name=preset)
    if preset == "chair-box":
        box = Surface("box", (0.9, 0.8, 0.2), 1.0, "box", lo=(-0.3, -0.3, 0.6), hi=(0.3, 0.3, 1.0))
        wall = Surface("plane", wall_color, 1.0, "wall", axis=2, offset=0.0, tile=0.25, palette=_palette(rng))
        return SceneSpec((box, wall), name=preset)
    if preset == "two-room":
        pal = _palette(rng)
        big = 10.0
        # front wall with a 0.8 x 1.6 doorway, built from four slabs
        slabs = [(-big, -0.4, -big, big), (0.4, big, -big, big), (-0.4, 0.4, 0.8, big), (-0.4, 0.4, -big, -0.8)]
        front = [Surface("plane", wall_color, 1.0, f"front-{i}", axis=2, offset=0.0, extent=e, tile=0.25, palette=pal)
                 for i, e in enumerate(slabs)]
        far = Surface("plane", (0.3, 0.7, 0.6), 1.0, "back-room", axis=2, offset=-1.5, tile=0.5, palette=_palette(rng))
        return SceneSpec((*front, far), name=preset, t_far=4.5)
    raise UsageError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")


# ---------------------------------------------------------------------- labels
@dataclass(frozen=True)
class LabelPolicy:
    mode: str = "front"
    pi: float = 0.5
    noise_std: float = 0.0
    scale_range: tuple = (1.0, 1.0)
    shift_range: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.mode not in ("front", "back", "mixture"):
            raise UsageError(f"unknown label mode {self.mode!r}")
        if not 0.0 <= self.pi <= 1.0:
            raise UsageError("mixture weight must lie in [0, 1]")
        if min(self.scale_range) <= 0:
            raise UsageError("affine scale must be positive")


def front_depth(gt: GroundTruthRay):
    return float(gt.distances[0]) if len(gt.distances) else gt.t_far


def back_depth(gt: GroundTruthRay):
    opaque = gt.distances[gt.alphas >= 1.0]
    return float(opaque[-1]) if len(opaque) else gt.t_far


def sample_label(gt: GroundTruthRay, policy: LabelPolicy, seed=None, rng=None, affine=(1.0, 0.0)):
    """One depth label for one ray. ``affine`` is ``(a, b)`` applied as ``a*d + b``."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    if policy.mode == "front":
        take_front = True
    elif policy.mode == "back":
        take_front = False
    else:
        take_front = rng.random() < policy.pi
    d = front_depth(gt) if take_front else back_depth(gt)
    if policy.noise_std > 0:
        d += rng.normal(0.0, policy.noise_std)
    a, b = affine
    return a * d + b


def label_map(gt: GroundTruthBatch, policy: LabelPolicy, rng):
    """Labels for a whole view: one front/back choice and one ``(a, b)`` per view.

    Returns ``(labels, info)``; ``info`` records the choice and the affine pair.
    """
    t = gt.distances
    hit = np.isfinite(t)
    front = np.where(hit[:, 0], t[:, 0], gt.t_far)
    opaque = hit & (gt.alphas >= 1.0)
    last = np.where(opaque.any(axis=1), t.shape[1] - 1 - np.argmax(opaque[:, ::-1], axis=1), -1)
    back = np.where(last >= 0, t[np.arange(len(t)), np.maximum(last, 0)], gt.t_far)
    if policy.mode == "mixture":
        use_front = bool(rng.random() < policy.pi)
    else:
        use_front = policy.mode == "front"
    d = front if use_front else back
    if policy.noise_std > 0:
        d = d + rng.normal(0.0, policy.noise_std, size=d.shape)
    a = float(rng.uniform(*policy.scale_range)) if policy.scale_range[0] != policy.scale_range[1] else float(policy.scale_range[0])
    b = float(rng.uniform(*policy.shift_range)) if policy.shift_range[0] != policy.shift_range[1] else float(policy.shift_range[0])
    return a * d + b, {"front": use_front, "scale": a, "shift": b}


def invert_affine(labels, a, b):
    return (labels - b) / a


# --------------------------------------------------------------------- dataset
@dataclass
class View:
    index: int
    split: str
    pose: CameraPose
    image: np.ndarray  # (H, W, 3) in [0, 1], 8-bit quantized
    labels: np.ndarray  # (H, W) float32-representable
    gt: GroundTruthBatch
    label_info: dict = field(default_factory=dict)


@dataclass
class ViewDataset:
    scene: SceneSpec
    views: list
    policy: LabelPolicy
    focal: float
    width: int
    height: int
    seed: int = 0

    @property
    def train(self):
        return [v for v in self.views if v.split == "train"]

    @property
    def test(self):
        return [v for v in self.views if v.split == "test"]


def orbit_poses(scene, count, rng, width, height, focal, arc_deg, jitter, evenly=True):
    if count > 1 and arc_deg == 0 and jitter == 0:
        raise ConfigurationError("degenerate orbit: all poses identical")
    if evenly and count > 1:
        angles = np.linspace(-arc_deg, arc_deg, count)
    elif evenly:
        angles = np.zeros(1)
    else:
        angles = rng.uniform(-arc_deg, arc_deg, count)
    angles = np.radians(angles + rng.uniform(-jitter, jitter, count))
    heights = rng.uniform(-0.15, 0.15, count) if jitter > 0 else np.zeros(count)
    c = np.asarray(scene.center)
    poses = []
    for ang, h in zip(angles, heights):
        origin = c + np.array([scene.orbit_radius * np.sin(ang), h, scene.orbit_radius * np.cos(ang)])
        poses.append(look_at(origin, c, width, height, focal))
    return poses


def quantize8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def make_dataset(scene, n_train_views, n_test_views, policy, seed=0, width=64, height=64,
                 fov_deg=36.0, arc_deg=25.0, jitter_deg=2.0):
    """Render train/test views and one sampled label map per view.

    Train poses are spread evenly over the arc (plus jitter); test poses are
    drawn uniformly inside it. Images are 8-bit quantized and labels rounded
    to float32 so the on-disk layout round-trips exactly.
    """
    if n_train_views < 1 or n_test_views < 1:
        raise ConfigurationError("view counts must be >= 1")
    rng = np.random.default_rng(seed)
    focal = 0.5 * width / np.tan(np.radians(0.5 * fov_deg))
    poses = orbit_poses(scene, n_train_views, rng, width, height, focal, arc_deg, jitter_deg)
    poses += orbit_poses(scene, n_test_views, rng, width, height, focal, arc_deg, jitter_deg, evenly=False)
    keys = {np.round(p.matrix(), 12).tobytes() for p in poses}
    if len(keys) < len(poses):
        raise ConfigurationError("degenerate orbit: duplicate poses")
    views = []
    for idx, pose in enumerate(poses):
        image, gt = render_analytic(scene, pose)
        labels, info = label_map(gt, policy, rng)
        views.append(View(idx, "train" if idx < n_train_views else "test", pose, quantize8(image),
                          labels.reshape(height, width).astype(np.float32).astype(np.float64), gt, info))
    return ViewDataset(scene, views, policy, float(focal), width, height, seed)


# ------------------------------------------------------------------------ I/O
def write_ppm(path, img):
    img = np.asarray(img)
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.reshape(h, w, 3).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise UsageError(f"{path}: not a binary PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def _fmt(values):
    return " ".join(repr(float(v)) for v in values)


def scene_to_text(scene: SceneSpec):
    lines = ["# carvenerf scene; distances in world units, colors linear rgb in [0, 1]",
             f"name = {scene.name}", f"t_near = {scene.t_near!r}", f"t_far = {scene.t_far!r}",
             f"background = {_fmt(scene.background)}", f"center = {_fmt(scene.center)}",
             f"orbit_radius = {scene.orbit_radius!r}"]
    for s in scene.surfaces:
        lines += ["", "[surface]", f"name = {s.name}", f"kind = {s.kind}", f"color = {_fmt(s.color)}",
                  f"alpha = {s.alpha!r}"]
        if s.palette:
            lines += [f"tile = {s.tile!r}", f"palette = {_fmt(s.palette)}"]
        if s.kind == "plane":
            lines += [f"axis = {'xyz'[s.axis]}", f"offset = {s.offset!r}"]
            if s.extent is not None:
                lines.append(f"extent = {_fmt(s.extent)}")
        elif s.kind == "sphere":
            lines += [f"center = {_fmt(s.center)}", f"radius = {s.radius!r}"]
        else:
            lines += [f"lo = {_fmt(s.lo)}", f"hi = {_fmt(s.hi)}"]
    return "\n".join(lines) + "\n"


def scene_from_text(text):
    head, surfaces, current = {}, [], None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[surface]":
            current = {}
            surfaces.append(current)
            continue
        if "=" not in line:
            raise UsageError(f"scene file line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        (current if current is not None else head)[key] = value

    def vec(v):
        return tuple(float(x) for x in v.split())

    built = []
    for s in surfaces:
        kw = dict(kind=s["kind"], color=vec(s["color"]), alpha=float(s.get("alpha", 1.0)), name=s.get("name", ""))
        if "palette" in s:
            kw.update(tile=float(s["tile"]), palette=vec(s["palette"]))
        if s["kind"] == "plane":
            kw.update(axis=AXES[s["axis"]], offset=float(s["offset"]))
            if "extent" in s:
                kw["extent"] = vec(s["extent"])
        elif s["kind"] == "sphere":
            kw.update(center=vec(s["center"]), radius=float(s["radius"]))
        else:
            kw.update(lo=vec(s["lo"]), hi=vec(s["hi"]))
        built.append(Surface(**kw))
    return SceneSpec(tuple(built), background=vec(head["background"]), t_near=float(head["t_near"]),
                     t_far=float(head["t_far"]), name=head.get("name", "custom"),
                     center=vec(head.get("center", "0 0 0")), orbit_radius=float(head.get("orbit_radius", 2.0)))


def write_dataset(ds: ViewDataset, root):
    os.makedirs(os.path.join(root, "views"), exist_ok=True)
    with open(os.path.join(root, "scene.txt"), "w") as fh:
        fh.write(scene_to_text(ds.scene))
    p = ds.policy
    slots = max(v.gt.distances.shape[1] for v in ds.views) + 1
    meta = [f"t_near = {ds.scene.t_near!r}", f"t_far = {ds.scene.t_far!r}",
            f"width = {ds.width}", f"height = {ds.height}", f"focal = {ds.focal!r}",
            f"seed = {ds.seed}", f"label_mode = {p.mode}", f"label_pi = {p.pi!r}",
            f"label_noise_std = {p.noise_std!r}", f"label_scale_range = {_fmt(p.scale_range)}",
            f"label_shift_range = {_fmt(p.shift_range)}", f"gt_slots = {slots}",
            f"train = {' '.join(str(v.index) for v in ds.train)}",
            f"test = {' '.join(str(v.index) for v in ds.test)}"]
    with open(os.path.join(root, "meta.txt"), "w") as fh:
        fh.write("# carvenerf dataset; gt_pmf.f32 holds (H, W, gt_slots, 2) pairs of (t, mass)\n")
        fh.write("\n".join(meta) + "\n")
    for v in ds.views:
        d = os.path.join(root, "views", str(v.index))
        os.makedirs(d, exist_ok=True)
        write_ppm(os.path.join(d, "image.ppm"), v.image)
        np.savetxt(os.path.join(d, "pose.txt"), v.pose.matrix(), fmt="%.17g")
        v.labels.astype("<f4").tofile(os.path.join(d, "labels.f32"))
        packed = v.gt.packed_pmf()
        pad = np.zeros((packed.shape[0], slots, 2))
        pad[:, :, 0] = ds.scene.t_far
        pad[:, :packed.shape[1] - 1] = packed[:, :-1]
        pad[:, -1] = packed[:, -1]
        pad.astype("<f4").tofile(os.path.join(d, "gt_pmf.f32"))
        with open(os.path.join(d, "label_info.txt"), "w") as fh:
            fh.write(f"front = {int(v.label_info.get('front', True))}\n"
                     f"scale = {v.label_info.get('scale', 1.0)!r}\nshift = {v.label_info.get('shift', 0.0)!r}\n")


def _kv(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def read_dataset(root):
    """Load a dataset directory; ground truth is re-traced from ``scene.txt``."""
    with open(os.path.join(root, "scene.txt")) as fh:
        scene = scene_from_text(fh.read())
    meta = _kv(os.path.join(root, "meta.txt"))
    w, h, focal = int(meta["width"]), int(meta["height"]), float(meta["focal"])
    policy = LabelPolicy(meta["label_mode"], float(meta["label_pi"]), float(meta["label_noise_std"]),
                         tuple(float(x) for x in meta["label_scale_range"].split()),
                         tuple(float(x) for x in meta["label_shift_range"].split()))
    splits = {int(i): "train" for i in meta["train"].split()}
    splits.update({int(i): "test" for i in meta["test"].split()})
    views = []
    for idx in sorted(splits):
        d = os.path.join(root, "views", str(idx))
        m = np.loadtxt(os.path.join(d, "pose.txt"))
        pose = CameraPose(m[:, 3].copy(), m[:, :3].copy(), focal, w, h)
        image = read_ppm(os.path.join(d, "image.ppm"))
        labels = np.fromfile(os.path.join(d, "labels.f32"), dtype="<f4").astype(np.float64).reshape(h, w)
        _, gt = render_analytic(scene, pose)
        info = _kv(os.path.join(d, "label_info.txt"))
        info = {"front": bool(int(info["front"])), "scale": float(info["scale"]), "shift": float(info["shift"])}
        views.append(View(idx, splits[idx], pose, image, labels, gt, info))
    return ViewDataset(scene, views, policy, focal, w, h, int(meta["seed"]))


def with_policy(ds: ViewDataset, policy: LabelPolicy, seed):
    """Same views, labels redrawn under another policy."""
    rng = np.random.default_rng(seed)
    views = []
    for v in ds.views:
        labels, info = label_map(v.gt, policy, rng)
        views.append(replace(v, labels=labels.reshape(ds.height, ds.width).astype(np.float32).astype(np.float64),
                             label_info=info))
    return replace(ds, views=views, policy=policy)
