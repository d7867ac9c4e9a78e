"""Procedural dynamic scenes with exact ground truth.

Scenes are ray cast, not splatted: every pixel's ground-truth point is the
first analytic hit along its ray, so projecting it back lands on the pixel
lattice to rounding error. Surfaces carry canonical (object-local)
coordinates which makes tracks of any frame's pixels available at any time.

World convention: x right, y down, z away from the initial camera.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid, WindowTooLong
from .geometry import CameraModel, Pointmap, TrajectorySet, pixel_grid, so3_exp
from .semantic import FeatureMap, synth_features

log = logging.getLogger(__name__)

WALL, FLOOR = 0, 1
LABEL_BACKGROUND, LABEL_TEXTURELESS = 0, 1
WALL_Z = 2.0
FLOOR_Y = 0.9
MAX_STRIDE = 6
VIS_TOL = 1e-7
BUNDLE_FORMAT = "dino4d-scene"
BUNDLE_VERSION = 1


@dataclass
class SceneConfig:
    width: int = 112
    height: int = 112
    frames: int = 24
    num_objects: int = 3
    motion_amplitude: float = 0.3
    orbit_radius: float = 3.0
    angular_speed: float = 0.01
    textureless_fraction: float = 0.3
    seed: int = 0
    patch_size: int = 14
    feature_dim: int = 32
    feature_noise: float = 0.05
    focal: float = 100.0

    def validate(self) -> None:
        problems = []
        if self.frames < 2:
            problems.append("frames must be >= 2")
        if self.width <= 0 or self.height <= 0 or self.width % self.patch_size or self.height % self.patch_size:
            problems.append("width/height must be positive multiples of patch_size")
        if not 0.0 <= self.textureless_fraction <= 1.0:
            problems.append("textureless_fraction must lie in [0, 1]")
        if not 0 <= self.num_objects <= 12:
            problems.append("num_objects must be in [0, 12]")
        if self.orbit_radius <= 1.0:
            problems.append("orbit_radius must exceed 1 m")
        if self.feature_dim < 8:
            problems.append("feature_dim must be >= 8")
        if self.motion_amplitude < 0 or self.focal <= 0:
            problems.append("motion_amplitude must be >= 0 and focal > 0")
        if problems:
            raise ConfigInvalid("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------------

@dataclass
class RigidMotion:
    center: np.ndarray
    amplitude: np.ndarray  # per-axis sway in metres
    omega: float  # rad / frame
    phase: np.ndarray
    rot_axis: np.ndarray
    rot_speed: float  # rad / frame
    rot0: np.ndarray  # rotation vector at t = 0

    def rotation(self, t: float) -> np.ndarray:
        return so3_exp(self.rot_axis * self.rot_speed * t) @ so3_exp(self.rot0)

    def translation(self, t: float) -> np.ndarray:
        return self.center + self.amplitude * np.sin(self.omega * t + self.phase)

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidMotion":
        return cls(np.array(d["center"]), np.array(d["amplitude"]), d["omega"], np.array(d["phase"]),
                   np.array(d["rot_axis"]), d["rot_speed"], np.array(d["rot0"]))


class Primitive:
    kind = "primitive"
    label = 0

    def intersect(self, O, D, t):
        """Return (s, local): ray parameter of the first hit (inf on miss) and local coords."""
        raise NotImplementedError

    def position(self, local, t):
        raise NotImplementedError

    def intensity(self, local):
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


class Wall(Primitive):
    """Plane z = WALL_Z with a full-height textureless band."""

    kind = "wall"

    def __init__(self, band_lo: float, band_hi: float):
        self.band_lo, self.band_hi = float(band_lo), float(band_hi)

    def intersect(self, O, D, t):
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (WALL_Z - O[:, 2]) / D[:, 2]
        s = np.where((D[:, 2] > 0) & (s > 0), s, np.inf)
        local = O + np.where(np.isfinite(s), s, 0.0)[:, None] * D
        return s, local

    def position(self, local, t):
        return local

    def in_band(self, local):
        return (local[:, 0] >= self.band_lo) & (local[:, 0] <= self.band_hi)

    def labels(self, local):
        return np.where(self.in_band(local), LABEL_TEXTURELESS, LABEL_BACKGROUND)

    def intensity(self, local):
        x, y = local[:, 0], local[:, 1]
        tex = 0.5 + 0.3 * np.sign(np.sin(2 * np.pi * x / 0.7) * np.sin(2 * np.pi * y / 0.7)) * \
            (0.6 + 0.4 * np.cos(2 * np.pi * (x + y) / 0.45))
        return np.where(self.in_band(local), 0.5, tex)

    def to_dict(self):
        return {"kind": self.kind, "band_lo": self.band_lo, "band_hi": self.band_hi}


class Floor(Primitive):
    kind = "floor"

    def intersect(self, O, D, t):
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (FLOOR_Y - O[:, 1]) / D[:, 1]
        s = np.where((D[:, 1] > 0) & (s > 0), s, np.inf)
        local = O + np.where(np.isfinite(s), s, 0.0)[:, None] * D
        return s, local

    def position(self, local, t):
        return local

    def intensity(self, local):
        x, z = local[:, 0], local[:, 2]
        return 0.35 + 0.25 * (np.floor(x / 0.4) % 2 == np.floor(z / 0.4) % 2) + 0.05 * np.sin(7 * x)

    def to_dict(self):
        return {"kind": self.kind}


class Sphere(Primitive):
    kind = "sphere"

    def __init__(self, radius: float, motion: RigidMotion, label: int, shade: float):
        self.radius, self.motion, self.label, self.shade = float(radius), motion, int(label), float(shade)

    def _to_local(self, O, D, t):
        R = self.motion.rotation(t)
        return (O - self.motion.translation(t)) @ R, D @ R

    def intersect(self, O, D, t):
        o, d = self._to_local(O, D, t)
        a = np.sum(d * d, axis=1)
        b = 2 * np.sum(o * d, axis=1)
        c = np.sum(o * o, axis=1) - self.radius**2
        disc = b * b - 4 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        s0 = (-b - sq) / (2 * a)
        s = np.where(hit & (s0 > 0), s0, np.inf)
        local = o + np.where(np.isfinite(s), s, 0.0)[:, None] * d
        return s, local

    def position(self, local, t):
        return local @ self.motion.rotation(t).T + self.motion.translation(t)

    def intensity(self, local):
        r = self.radius
        lon = np.arctan2(local[:, 1], local[:, 0])
        return np.clip(self.shade + 0.3 * np.sin(5 * lon) * np.cos(4 * local[:, 2] / r), 0, 1)

    def to_dict(self):
        return {"kind": self.kind, "radius": self.radius, "label": self.label, "shade": self.shade,
                "motion": self.motion.to_dict()}


class Box(Primitive):
    kind = "box"

    def __init__(self, half: np.ndarray, motion: RigidMotion, label: int, shade: float):
        self.half, self.motion, self.label, self.shade = np.asarray(half, float), motion, int(label), float(shade)

    def intersect(self, O, D, t):
        R = self.motion.rotation(t)
        o = (O - self.motion.translation(t)) @ R
        d = D @ R
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-self.half - o) * inv
            t2 = (self.half - o) * inv
        tn = np.nanmax(np.minimum(t1, t2), axis=1)
        tf = np.nanmin(np.maximum(t1, t2), axis=1)
        s = np.where((tn <= tf) & (tn > 0), tn, np.inf)
        local = o + np.where(np.isfinite(s), s, 0.0)[:, None] * d
        return s, local

    def position(self, local, t):
        return local @ self.motion.rotation(t).T + self.motion.translation(t)

    def intensity(self, local):
        q = np.floor(local / (self.half / 2.0 + 1e-9)).sum(axis=1) % 2
        return np.clip(self.shade + 0.25 * (2 * q - 1), 0, 1)

    def to_dict(self):
        return {"kind": self.kind, "half": self.half.tolist(), "label": self.label, "shade": self.shade,
                "motion": self.motion.to_dict()}


class Sheet(Primitive):
    """Rectangular sheet facing -z whose normal displacement is a travelling sine wave."""

    kind = "sheet"

    def __init__(self, center, half_x, half_y, amp, wavenumber, omega, phase, label, shade):
        self.center = np.asarray(center, float)
        self.half_x, self.half_y = float(half_x), float(half_y)
        self.amp, self.k, self.omega, self.phase = float(amp), float(wavenumber), float(omega), float(phase)
        self.label, self.shade = int(label), float(shade)

    def height(self, x, y, t):
        return self.amp * np.sin(self.k * x + 0.5 * self.k * y + self.omega * t + self.phase)

    def _dheight(self, x, y, t):
        c = self.amp * np.cos(self.k * x + 0.5 * self.k * y + self.omega * t + self.phase)
        return c * self.k, c * 0.5 * self.k

    def intersect(self, O, D, t):
        o = O - self.center
        d = D
        dz = d[:, 2]
        ok = dz > 1e-9
        dzs = np.where(ok, dz, 1.0)
        lo = (-self.amp - o[:, 2]) / dzs
        hi = (self.amp - o[:, 2]) / dzs
        s = lo.copy()
        # safeguarded Newton on f(s) = z(s) - h(x(s), y(s)), monotone for the slopes used here
        for _ in range(60):
            x, y, z = o[:, 0] + s * d[:, 0], o[:, 1] + s * d[:, 1], o[:, 2] + s * dz
            f = z - self.height(x, y, t)
            hx, hy = self._dheight(x, y, t)
            fp = dz - hx * d[:, 0] - hy * d[:, 1]
            lo = np.where(f < 0, s, lo)
            hi = np.where(f >= 0, s, hi)
            s_new = s - f / np.where(np.abs(fp) > 1e-12, fp, 1e-12)
            bad = (s_new <= lo) | (s_new >= hi) | ~np.isfinite(s_new)
            s = np.where(bad, 0.5 * (lo + hi), s_new)
        local = o + s[:, None] * d
        inside = ok & (np.abs(local[:, 0]) <= self.half_x) & (np.abs(local[:, 1]) <= self.half_y) & (s > 0)
        s = np.where(inside, s, np.inf)
        return s, np.stack([local[:, 0], local[:, 1], np.zeros(len(s))], axis=1)

    def position(self, local, t):
        x, y = local[:, 0], local[:, 1]
        return self.center + np.stack([x, y, self.height(x, y, t)], axis=1)

    def intensity(self, local):
        return np.clip(self.shade + 0.3 * np.sin(9 * local[:, 0]) * np.sin(11 * local[:, 1]), 0, 1)

    def to_dict(self):
        return {"kind": self.kind, "center": self.center.tolist(), "half_x": self.half_x, "half_y": self.half_y,
                "amp": self.amp, "wavenumber": self.k, "omega": self.omega, "phase": self.phase,
                "label": self.label, "shade": self.shade}


def primitive_from_dict(d: dict) -> Primitive:
    kind = d["kind"]
    if kind == "wall":
        return Wall(d["band_lo"], d["band_hi"])
    if kind == "floor":
        return Floor()
    if kind == "sphere":
        return Sphere(d["radius"], RigidMotion.from_dict(d["motion"]), d["label"], d["shade"])
    if kind == "box":
        return Box(np.array(d["half"]), RigidMotion.from_dict(d["motion"]), d["label"], d["shade"])
    if kind == "sheet":
        return Sheet(d["center"], d["half_x"], d["half_y"], d["amp"], d["wavenumber"], d["omega"], d["phase"],
                     d["label"], d["shade"])
    raise ConfigInvalid(f"unknown primitive kind {kind!r}")


# ----------------------------------------------------------------------------
# the scene
# ----------------------------------------------------------------------------

@dataclass
class SceneSample:
    config: SceneConfig
    primitives: list
    cameras: list
    images: np.ndarray  # (T, H, W) float
    labels: np.ndarray  # (T, H, W) uint8
    pointmaps: np.ndarray  # (T, H, W, 3) world
    surface_ids: np.ndarray  # (T, H, W) primitive index
    local: np.ndarray  # (T, H, W, 3) canonical surface coordinates
    features: np.ndarray  # (T, Hp, Wp, D)
    query_pixels: np.ndarray  # (Q, 2) integer (u, v) in frame 0
    trajectories: TrajectorySet
    scene_id: str = ""
    feature_seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1:3]

    @property
    def intrinsics(self) -> CameraModel:
        return self.cameras[0]

    def gt_pointmap(self, t: int) -> Pointmap:
        return Pointmap(self.pointmaps[t], np.ones(self.shape, dtype=bool), t, t)

    def feature_map(self, t: int) -> FeatureMap:
        return FeatureMap(self.features[t], self.config.patch_size, t)

    def positions(self, ids: np.ndarray, local: np.ndarray, t: float) -> np.ndarray:
        out = np.zeros(local.shape[:-1] + (3,))
        ids_f = ids.reshape(-1)
        loc_f = local.reshape(-1, 3)
        flat = out.reshape(-1, 3)
        for k, prim in enumerate(self.primitives):
            m = ids_f == k
            if m.any():
                flat[m] = prim.position(loc_f[m], t)
        return out

    def track(self, s: int, t: int) -> np.ndarray:
        """World positions at time t of every pixel of frame s, (H, W, 3)."""
        return self.positions(self.surface_ids[s], self.local[s], t)

    def raycast(self, t: int, uv: np.ndarray):
        return raycast(self.primitives, self.cameras[t], t, uv)

    def visibility(self, t: int, points: np.ndarray) -> np.ndarray:
        return visibility(self.primitives, self.cameras[t], t, points, *self.shape)


def raycast(primitives, camera: CameraModel, t: float, uv: np.ndarray):
    """First hit for rays through continuous pixels (N, 2).

    Returns (points, depth, surface index, local coords); depth is the
    camera-frame z because rays have unit z in the camera frame.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d_cam = np.stack([(uv[:, 0] - camera.cx) / camera.fx, (uv[:, 1] - camera.cy) / camera.fy, np.ones(len(uv))], axis=1)
    D = d_cam @ camera.rotation  # camera -> world direction
    O = np.broadcast_to(camera.center(), D.shape)
    best = np.full(len(uv), np.inf)
    ids = np.full(len(uv), -1, dtype=np.int64)
    local = np.zeros((len(uv), 3))
    for k, prim in enumerate(primitives):
        s, loc = prim.intersect(O, D, t)
        closer = s < best
        best = np.where(closer, s, best)
        ids = np.where(closer, k, ids)
        local[closer] = loc[closer]
    pts = O + np.where(np.isfinite(best), best, 0.0)[:, None] * D
    return pts, best, ids, local


def visibility(primitives, camera: CameraModel, t: float, points: np.ndarray, H: int, W: int) -> np.ndarray:
    """A surface point is visible when it projects inside the image and no
    other surface along its pixel ray is strictly closer."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pc = pts @ camera.rotation.T + camera.translation
    z = pc[:, 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    uv = np.stack([camera.fx * pc[:, 0] / zs + camera.cx, camera.fy * pc[:, 1] / zs + camera.cy], axis=1)
    inside = front & (uv[:, 0] >= -0.5) & (uv[:, 0] <= W - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] <= H - 0.5)
    vis = np.zeros(len(pts), dtype=bool)
    if inside.any():
        _, depth, _, _ = raycast(primitives, camera, t, uv[inside])
        vis[inside] = depth >= z[inside] - VIS_TOL * np.maximum(1.0, z[inside])
    return vis.reshape(np.asarray(points).shape[:-1])


def look_at(center: np.ndarray, target: np.ndarray, cfg: SceneConfig) -> CameraModel:
    f = target - center
    f = f / np.linalg.norm(f)
    down = np.array([0.0, 1.0, 0.0])
    right = np.cross(down, f)
    right /= np.linalg.norm(right)
    y = np.cross(f, right)
    R = np.stack([right, y, f])  # rows: camera axes in world coords
    # polish to exact orthonormality
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return CameraModel(R, -R @ center, cfg.focal, cfg.focal, cfg.width / 2.0, cfg.height / 2.0, cfg.width, cfg.height)


def _random_motion(rng, center, amp, static_scale=1.0) -> RigidMotion:
    axis = rng.standard_normal(3)
    return RigidMotion(
        center=np.asarray(center, float),
        amplitude=amp * static_scale * np.array([1.0, 0.3, 0.5]) * rng.uniform(0.6, 1.0, 3),
        omega=float(rng.uniform(0.12, 0.25)),
        phase=rng.uniform(0, 2 * np.pi, 3),
        rot_axis=axis / np.linalg.norm(axis),
        rot_speed=float(rng.uniform(0.02, 0.06)) * static_scale,
        rot0=rng.standard_normal(3),
    )


def stage_seed(seed: int, stage: str) -> int:
    """Derive an independent 63-bit seed for a named stage."""
    h = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)


def build_primitives(cfg: SceneConfig, rng: np.random.Generator) -> list:
    visible_half = (WALL_Z + cfg.orbit_radius) * (cfg.width / 2.0) / cfg.focal
    band_w = cfg.textureless_fraction * 2 * visible_half
    band_c = rng.uniform(-visible_half + band_w / 2, visible_half - band_w / 2) if band_w < 2 * visible_half else 0.0
    prims: list = [Wall(band_c - band_w / 2, band_c + band_w / 2), Floor()]
    moving = 1.0 if cfg.motion_amplitude > 0 else 0.0
    slots = np.linspace(-0.9, 0.9, max(cfg.num_objects, 1))
    order = rng.permutation(len(slots))
    for k in range(cfg.num_objects):
        label = 2 + k
        shade = float(rng.uniform(0.3, 0.7))
        x = slots[order[k]] + rng.uniform(-0.15, 0.15)
        kind = ("sphere", "box", "sheet")[k % 3]
        if kind == "sheet":
            center = np.array([x, rng.uniform(-0.2, 0.2), rng.uniform(0.6, 1.0)])
            omega = float(rng.uniform(0.2, 0.35)) * moving
            prims.append(Sheet(center, rng.uniform(0.4, 0.55), rng.uniform(0.35, 0.5), amp=0.06,
                               wavenumber=2 * np.pi / 0.9, omega=omega, phase=rng.uniform(0, 2 * np.pi),
                               label=label, shade=shade))
            continue
        center = np.array([x, rng.uniform(-0.2, 0.35), rng.uniform(-0.5, 0.4)])
        motion = _random_motion(rng, center, cfg.motion_amplitude, moving)
        if kind == "sphere":
            prims.append(Sphere(rng.uniform(0.25, 0.4), motion, label, shade))
        else:
            prims.append(Box(rng.uniform(0.18, 0.3, 3), motion, label, shade))
    return prims


def render_frame(primitives, camera: CameraModel, t: int, H: int, W: int):
    uv = pixel_grid(H, W).reshape(-1, 2)
    pts, depth, ids, local = raycast(primitives, camera, t, uv)
    if not np.all(np.isfinite(depth)):
        raise ConfigInvalid("some pixel rays escape the scene; check camera placement")
    img = np.zeros(len(uv))
    lab = np.zeros(len(uv), dtype=np.uint8)
    for k, prim in enumerate(primitives):
        m = ids == k
        if not m.any():
            continue
        img[m] = prim.intensity(local[m])
        lab[m] = prim.labels(local[m]) if isinstance(prim, Wall) else prim.label
    return (pts.reshape(H, W, 3), ids.reshape(H, W), local.reshape(H, W, 3),
            img.reshape(H, W), lab.reshape(H, W))


def generate(config: SceneConfig, query_stride: int = 4) -> SceneSample:
    """Render a deterministic dynamic scene and its ground truth."""
    config.validate()
    rng = np.random.default_rng(stage_seed(config.seed, "scene"))
    prims = build_primitives(config, rng)
    theta0 = float(rng.uniform(-0.1, 0.1))
    target = np.array([0.0, 0.1, 0.0])
    H, W, T = config.height, config.width, config.frames

    cams = []
    for t in range(T):
        th = theta0 + config.angular_speed * t
        c = np.array([config.orbit_radius * np.sin(th), -0.4, -config.orbit_radius * np.cos(th)])
        cams.append(look_at(c, target, config))

    images = np.zeros((T, H, W))
    labels = np.zeros((T, H, W), dtype=np.uint8)
    pointmaps = np.zeros((T, H, W, 3))
    ids = np.zeros((T, H, W), dtype=np.int64)
    local = np.zeros((T, H, W, 3))
    for t in range(T):
        pointmaps[t], ids[t], local[t], images[t], labels[t] = render_frame(prims, cams[t], t, H, W)

    feature_seed = stage_seed(config.seed, "features")
    feats = np.stack([
        synth_features(labels[t], config.feature_dim, config.patch_size, feature_seed, t, config.feature_noise).data
        for t in range(T)
    ])

    qv, qu = np.meshgrid(np.arange(query_stride // 2, H, query_stride), np.arange(query_stride // 2, W, query_stride),
                         indexing="ij")
    query = np.stack([qu.ravel(), qv.ravel()], axis=1)
    q_ids, q_local = ids[0][query[:, 1], query[:, 0]], local[0][query[:, 1], query[:, 0]]
    pos = np.zeros((len(query), T, 3))
    vis = np.zeros((len(query), T), dtype=bool)
    for t in range(T):
        p = np.zeros((len(query), 3))
        for k, prim in enumerate(prims):
            m = q_ids == k
            if m.any():
                p[m] = prim.position(q_local[m], t)
        pos[:, t] = p
        vis[:, t] = visibility(prims, cams[t], t, p, H, W)
    vis[:, 0] = True  # queries are rendered surface points of frame 0

    sample = SceneSample(config, prims, cams, images, labels, pointmaps, ids, local, feats, query,
                         TrajectorySet(pos, vis), scene_id=f"scene_{config.seed:06d}", feature_seed=feature_seed)
    return sample


def sample_window(scene_or_T, window: int = 24, stride: int | None = None, seed: int = 0) -> list[int]:
    """Pick ``window`` frames with a uniform stride in [1, 6] and a uniform valid start."""
    T = scene_or_T.T if isinstance(scene_or_T, SceneSample) else int(scene_or_T)
    if window < 1:
        raise ValueError("window must be positive")

    def fits(s):
        return (window - 1) * s <= T - 1

    rng = np.random.default_rng(seed)
    if stride is None:
        options = [s for s in range(1, MAX_STRIDE + 1) if fits(s)]
        if not options:
            raise WindowTooLong(f"{window} frames do not fit in {T} at any stride")
        stride = int(rng.choice(options))
    elif not fits(stride):
        raise WindowTooLong(f"{window} frames at stride {stride} need {(window - 1) * stride + 1} > {T}")
    start = int(rng.integers(0, T - (window - 1) * stride))
    return [start + k * stride for k in range(window)]


# ----------------------------------------------------------------------------
# bundle I/O
# ----------------------------------------------------------------------------

_ARRAYS = {
    # name: (attribute, dtype on disk)
    "images": ("images", "<f4"),
    "labels": ("labels", "u1"),
    "pointmaps": ("pointmaps", "<f4"),
    "surface_ids": ("surface_ids", "u1"),
    "local": ("local", "<f4"),
    "features": ("features", "<f4"),
    "query_pixels": ("query_pixels", "<f4"),
    "trajectory_positions": (None, "<f4"),
    "trajectory_visible": (None, "u1"),
}


def _write_array(path: Path, arr: np.ndarray, dtype: str) -> dict:
    data = np.ascontiguousarray(arr, dtype=np.dtype(dtype))
    path.write_bytes(data.tobytes(order="C"))
    return {"file": path.name, "shape": list(arr.shape), "dtype": dtype,
            "sha256": hashlib.sha256(data.tobytes()).hexdigest()}


def _read_array(path: Path, entry: dict) -> np.ndarray:
    raw = path.read_bytes()
    arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
    return arr.reshape(entry["shape"])


def write_pgm(path: Path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    H, W = img.shape
    path.write_bytes(f"P5\n{W} {H}\n255\n".encode() + img.tobytes())


def save_scene(scene: SceneSample, directory: str | Path, export_pgm: bool = False) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, (attr, dtype) in _ARRAYS.items():
        if name == "trajectory_positions":
            arr = scene.trajectories.positions
        elif name == "trajectory_visible":
            arr = scene.trajectories.visible
        else:
            arr = getattr(scene, attr)
        arrays[name] = _write_array(out / f"{name}.bin", arr, dtype)
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "scene_id": scene.scene_id,
        "seed": scene.config.seed,
        "config": asdict(scene.config),
        "byte_order": "little",
        "layout": "row-major",
        "arrays": arrays,
        "features": {"dim": scene.config.feature_dim, "patch_size": scene.config.patch_size,
                     "seed": scene.feature_seed, "noise": scene.config.feature_noise},
        "cameras": [c.to_dict() for c in scene.cameras],
        "primitives": [p.to_dict() for p in scene.primitives],
        "labels": {"background": LABEL_BACKGROUND, "textureless": LABEL_TEXTURELESS,
                   "objects": [p.label for p in scene.primitives[2:]]},
        # external dataset adapters are declared but not implemented
        "source": {"kind": "synthetic", "adapters": {"point_odyssey": None, "tum_dynamics": None}},
        "files": sorted(a["file"] for a in arrays.values()),
    }
    if export_pgm:
        pgm_dir = out / "images"
        pgm_dir.mkdir(exist_ok=True)
        for t in range(scene.T):
            write_pgm(pgm_dir / f"frame_{t:03d}.pgm", scene.images[t])
        manifest["files"] += [f"images/frame_{t:03d}.pgm" for t in range(scene.T)]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_scene(directory: str | Path) -> SceneSample:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format") != BUNDLE_FORMAT:
        raise ConfigInvalid(f"{d} is not a scene bundle")
    arr = {name: _read_array(d / e["file"], e) for name, e in manifest["arrays"].items()}
    cfg = SceneConfig.from_dict(manifest["config"])
    prims = [primitive_from_dict(p) for p in manifest["primitives"]]
    cams = [CameraModel.from_dict(c) for c in manifest["cameras"]]
    return SceneSample(
        config=cfg, primitives=prims, cameras=cams,
        images=arr["images"].astype(np.float64),
        labels=arr["labels"].copy(),
        pointmaps=arr["pointmaps"].astype(np.float64),
        surface_ids=arr["surface_ids"].astype(np.int64),
        local=arr["local"].astype(np.float64),
        features=arr["features"].astype(np.float64),
        query_pixels=arr["query_pixels"].astype(np.int64),
        trajectories=TrajectorySet(arr["trajectory_positions"].astype(np.float64),
                                   arr["trajectory_visible"].astype(bool)),
        scene_id=manifest["scene_id"],
        feature_seed=manifest["features"]["seed"],
    )
