"""Joint optimisation, AdamW, checkpoints and evaluation.

A training step takes one window of frames from one scene, pairs the first
frame with every later frame, runs the adapter and predictor for each pair,
and combines the reprojection, geometric, semantic and diffusion losses with
fixed weights. All gradients come from the per-module backward functions.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .diffusion import DenoiserParams, DiffusionSchedule, Residual, build_condition, diffusion_loss_flat, refine
from .errors import CheckpointCorrupt, ConfigInvalid, Dino4DError, NonFiniteLoss, ShapeMismatch
from .fusion import AdapterParams, fuse, fuse_backward
from .geometry import (
    CameraModel,
    MetricReport,
    Pointmap,
    TrajectorySet,
    apd,
    chamfer_distance,
    compose_pose,
    invert_pose,
    pixel_grid,
)
from .predictor import (
    PredictorParams,
    encode_backward,
    encode_geometry,
    forward_pair,
    forward_pair_backward,
    geometric_loss,
    reprojection_loss,
    solve_pnp,
)
from .scene import SceneSample, sample_window, stage_seed
from .semantic import FeatureMap, SemanticLossConfig, semantic_consistency_loss

log = logging.getLogger(__name__)

COMPONENTS = ("reproj", "geo", "sem", "diff")
CKPT_MAGIC = b"D4DCKPT1"


@dataclass
class LossWeights:
    lambda_reproj: float = 1.0
    lambda_geo: float = 1.0
    lambda_sem: float = 0.5
    lambda_diff: float = 0.5

    def __post_init__(self):
        vals = self.as_tuple()
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ConfigInvalid("loss weights must be finite and non-negative")
        if not any(v > 0 for v in vals):
            raise ConfigInvalid("at least one loss weight must be positive")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda_reproj, self.lambda_geo, self.lambda_sem, self.lambda_diff)

    def weight(self, component: str) -> float:
        return getattr(self, f"lambda_{component}")


def total_loss(components: Mapping[str, tuple[float, Mapping[str, np.ndarray] | None]], weights: LossWeights):
    """Weighted sum of component losses and of their gradient dictionaries.

    ``components`` maps "reproj"/"geo"/"sem"/"diff" to ``(value, grads)``;
    ``grads`` may be None when only the scalar is of interest.
    """
    for name, (value, _) in components.items():
        if not math.isfinite(value):
            raise NonFiniteLoss(name, value)
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for name in COMPONENTS:
        if name not in components:
            continue
        value, g = components[name]
        lam = weights.weight(name)
        total += lam * value
        for key, arr in (g or {}).items():
            if key in grads:
                grads[key] = grads[key] + lam * arr
            else:
                grads[key] = lam * arr
    return total, grads


# ----------------------------------------------------------------------------
# AdamW
# ----------------------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 5e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimState):
    """Decoupled weight decay Adam; updates ``params`` in place and returns (params, state)."""
    for k, g in grads.items():
        if k not in params:
            raise ShapeMismatch(f"gradient for unknown parameter {k!r}")
        if np.shape(g) != np.shape(params[k]):
            raise ShapeMismatch(f"{k}: grad {np.shape(g)} vs param {np.shape(params[k])}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ----------------------------------------------------------------------------
# model container and configuration
# ----------------------------------------------------------------------------

@dataclass
class ModelParams:
    predictor: PredictorParams
    adapter: AdapterParams
    denoiser: DenoiserParams
    residual_scale: float = 1.0

    def named_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for prefix, group in (("predictor", self.predictor), ("adapter", self.adapter), ("denoiser", self.denoiser)):
            for k, v in group.arrays().items():
                out[f"{prefix}.{k}"] = v
        return out

    @classmethod
    def init(cls, cfg: "TrainConfig", feature_dim: int, seed: int) -> "ModelParams":
        rng = np.random.default_rng(stage_seed(seed, "init"))
        pred = PredictorParams.init(cfg.patch_size, cfg.d_geo, cfg.hidden, cfg.base_depth, rng)
        adapter = AdapterParams.init(cfg.d_geo, feature_dim, cfg.d_k, cfg.d_v, rng)
        den = DenoiserParams.init(3 + cfg.d_geo, cfg.denoiser_hidden, rng)
        return cls(pred, adapter, den)


@dataclass
class TrainConfig:
    steps: int = 500
    window: int = 24
    stride: int | None = None
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    diffusion_steps: int = 5
    beta_start: float = 1e-4
    beta_end: float = 0.2
    patch_size: int = 14
    d_geo: int = 32
    d_k: int = 32
    d_v: int = 32
    hidden: int = 128
    denoiser_hidden: int = 64
    base_depth: float = 3.0
    diffusion_pixels: int = 1024
    sem_stride: int = 2
    pnp_stride: int = 2
    residual_momentum: float = 0.9
    checkpoint_every: int = 100
    keep_checkpoints: int = 3
    skip_zero_weight: bool = False
    seed: int = 0

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule.linear(self.diffusion_steps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigInvalid(f"unknown train config keys: {sorted(unknown)}")
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


# ----------------------------------------------------------------------------
# per-window forward/backward
# ----------------------------------------------------------------------------

def relative_camera(cam_j: CameraModel, cam_i: CameraModel) -> CameraModel:
    """Camera j expressed with frame i's camera frame as its world frame."""
    return cam_j.with_pose(compose_pose(cam_j.pose, invert_pose(cam_i.pose)))


@dataclass
class FrameState:
    fused: FeatureMap
    enc_cache: object
    fuse_cache: object


class PairCounter:
    def __init__(self):
        self.count = 0

    def __call__(self, *args, **kwargs):
        self.count += 1
        return forward_pair(*args, **kwargs)


def _encode_frames(scene: SceneSample, frames: Iterable[int], model: ModelParams) -> dict[int, FrameState]:
    states = {}
    for f in frames:
        geo, enc_cache = encode_geometry(scene.images[f], model.predictor, f)
        fused, fcache = fuse(geo, scene.feature_map(f), model.adapter, return_cache=True)
        states[f] = FrameState(fused, enc_cache, fcache)
    return states


def window_losses(scene: SceneSample, frames: list[int], model: ModelParams, cfg: TrainConfig,
                  rng: np.random.Generator, need: frozenset = frozenset(COMPONENTS)):
    """Mean component losses over the window's pairs and their parameter gradients."""
    i = frames[0]
    states = _encode_frames(scene, frames, model)
    H, W = scene.shape
    intr = scene.intrinsics
    pose_i = scene.cameras[i].pose
    pixels = pixel_grid(H, W)
    schedule = cfg.schedule()
    pairs = frames[1:]
    n = len(pairs)
    vv, uu = np.mgrid[0:H:cfg.sem_stride, 0:W:cfg.sem_stride]
    sem_cfg = SemanticLossConfig(query_domain=np.stack([uu.ravel(), vv.ravel()], axis=-1))
    ps_ = cfg.pnp_stride

    values = {k: 0.0 for k in COMPONENTS if k in need}
    grads = {k: {} for k in values}
    d_fused = {f: np.zeros((states[f].fused.patch_height * states[f].fused.patch_width, model.predictor.d_geo))
               for f in frames}
    residuals = []
    diff_jobs = []

    def accumulate(comp, g):
        for key, arr in g.items():
            name = f"predictor.{key}"
            grads[comp][name] = grads[comp].get(name, 0.0) + arr / n

    for j in pairs:
        pred, cache = forward_pair(scene.images[i], scene.images[j], states[i].fused, states[j].fused,
                                   model.predictor, intr, i=i, j=j, return_cache=True)
        gt_track = Pointmap(pose_i.apply(scene.track(i, j)), np.ones((H, W), bool), i, j)
        gt_recon = Pointmap(pose_i.apply(scene.pointmaps[j]), np.ones((H, W), bool), j, j)
        zeros = np.zeros((H, W, 3))

        point_grads = {}
        if "geo" in values:
            lg, dt, dr = geometric_loss(pred, gt_track, gt_recon)
            values["geo"] += lg / n
            point_grads["geo"] = (dt, dr)
        if "reproj" in values:
            try:
                sub = pred.reconstruction.points[::ps_, ::ps_]
                pose = solve_pnp(sub, pixels[::ps_, ::ps_], intr).pose
                lr_, dr2, _ = reprojection_loss(pred, pixels, intr, pose)
            except Dino4DError as exc:
                log.warning("reprojection skipped for pair (%d, %d): %s", i, j, exc)
                lr_, dr2 = 0.0, zeros
            values["reproj"] += lr_ / n
            point_grads["reproj"] = (zeros, dr2)
        if "sem" in values:
            cam_rel = relative_camera(scene.cameras[j], scene.cameras[i])
            ls, dt2 = semantic_consistency_loss(scene.feature_map(i), scene.feature_map(j), pred.tracking, cam_rel,
                                                sem_cfg)
            values["sem"] += ls / n
            point_grads["sem"] = (dt2, zeros)

        for comp, (dt_, dr_) in point_grads.items():
            g, dfi, dfj = forward_pair_backward(dt_, dr_, cache, model.predictor)
            accumulate(comp, g)
            # fused-feature gradients are kept per component so they route back separately
            d_fused.setdefault((comp, i), np.zeros_like(d_fused[i]))
            d_fused.setdefault((comp, j), np.zeros_like(d_fused[j]))
            d_fused[(comp, i)] += dfi / n
            d_fused[(comp, j)] += dfj / n

        if "diff" in values:
            res = Residual.between(gt_recon, pred.reconstruction)
            residuals.append(res.values[res.valid])
            cond = build_condition(pred.reconstruction, states[j].fused)
            diff_jobs.append((res, cond))

    # route fused-feature gradients through the adapter and the geometric encoder
    for comp in values:
        if comp == "diff":
            continue
        for f in frames:
            g_tok = d_fused.get((comp, f))
            if g_tok is None or not np.any(g_tok):
                continue
            ag = fuse_backward(g_tok, states[f].fuse_cache, model.adapter)
            for key, arr in ag.params.items():
                grads[comp][f"adapter.{key}"] = grads[comp].get(f"adapter.{key}", 0.0) + arr
            for key, arr in encode_backward(ag.geo, states[f].enc_cache).items():
                grads[comp][f"predictor.{key}"] = grads[comp].get(f"predictor.{key}", 0.0) + arr

    if "diff" in values and diff_jobs:
        scale = float(np.std(np.concatenate(residuals))) if residuals else 1.0
        scale = max(scale, 1e-6)
        for res, cond in diff_jobs:
            idx = np.flatnonzero(res.valid.ravel())
            if cfg.diffusion_pixels and len(idx) > cfg.diffusion_pixels:
                idx = np.sort(rng.choice(idx, cfg.diffusion_pixels, replace=False))
            x0 = res.values.reshape(-1, 3)[idx] / scale
            c = cond.reshape(-1, cond.shape[-1])[idx]
            t = int(rng.integers(0, schedule.num_steps))
            noise = rng.standard_normal(x0.shape)
            ld, gd = diffusion_loss_flat(model.denoiser, x0, c, t, noise, schedule)
            values["diff"] += ld / n
            for key, arr in gd.items():
                grads["diff"][f"denoiser.{key}"] = grads["diff"].get(f"denoiser.{key}", 0.0) + arr / n
        values_scale = scale
    else:
        values_scale = None

    comps = {k: (values[k], grads[k]) for k in values}
    return comps, values_scale, n


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: ModelParams, step: int, hyper: dict) -> Path:
    arrays = model.named_arrays()
    header = {
        "format": "dino4d-checkpoint",
        "version": 1,
        "step": int(step),
        "dtype": "<f4",
        "residual_scale": float(model.residual_scale),
        "hyperparameters": hyper,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC or len(raw) < 16:
        raise CheckpointCorrupt(f"{path}: bad magic")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointCorrupt(f"{path}: unreadable header") from exc
    offset = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = 4 * count
        if offset + nbytes > len(raw):
            raise CheckpointCorrupt(f"{path}: truncated at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw[offset:offset + nbytes], dtype="<f4").astype(np.float64).reshape(
            entry["shape"])
        offset += nbytes
    if offset != len(raw):
        raise CheckpointCorrupt(f"{path}: {len(raw) - offset} trailing bytes")

    def group(prefix, cls):
        names = [f.name for f in cls.__dataclass_fields__.values()]
        try:
            return cls(**{n: arrays[f"{prefix}.{n}"] for n in names})
        except KeyError as exc:
            raise CheckpointCorrupt(f"{path}: missing array {exc}") from exc

    model = ModelParams(group("predictor", PredictorParams), group("adapter", AdapterParams),
                        group("denoiser", DenoiserParams), header.get("residual_scale", 1.0))
    return model, header


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ModelParams
    log: list[dict]
    checkpoint: Path | None
    state: OptimState


def _check_compatible(scenes: list[SceneSample], cfg: TrainConfig) -> None:
    if not scenes:
        raise ConfigInvalid("training needs at least one scene")
    ref = scenes[0]
    for s in scenes:
        if s.shape != ref.shape or s.config.feature_dim != ref.config.feature_dim:
            raise ConfigInvalid("all training scenes must share resolution and feature dim")
        if s.config.patch_size != cfg.patch_size:
            raise ConfigInvalid("scene patch size differs from model patch size")


def train(scenes: list[SceneSample], cfg: TrainConfig, out_dir: str | Path | None = None,
          model: ModelParams | None = None, log_path: str | Path | None = None) -> TrainResult:
    _check_compatible(scenes, cfg)
    seed = cfg.seed
    model = model or ModelParams.init(cfg, scenes[0].config.feature_dim, seed)
    params = model.named_arrays()
    state = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    scene_rng = np.random.default_rng(stage_seed(seed, "scene-order"))
    diff_rng = np.random.default_rng(stage_seed(seed, "diffusion"))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "w") if log_path is not None else None
    weights = cfg.weights
    need = frozenset(c for c in COMPONENTS if not (cfg.skip_zero_weight and weights.weight(c) == 0))
    hyper = cfg.to_dict()
    records = []
    kept: list[Path] = []
    last_ckpt = None
    try:
        for step in range(1, cfg.steps + 1):
            t0 = time.perf_counter()
            scene = scenes[int(scene_rng.integers(len(scenes)))]
            window = min(cfg.window, scene.T)
            frames = sample_window(scene, window, cfg.stride, stage_seed(seed, f"window:{step}"))
            comps, scale, _ = window_losses(scene, frames, model, cfg, diff_rng, need)
            total, grads = total_loss(comps, weights)
            if scale is not None:
                m = cfg.residual_momentum
                model.residual_scale = scale if step == 1 else m * model.residual_scale + (1 - m) * scale
            adamw_step(params, grads, state)
            rec = {"step": step}
            for c in COMPONENTS:
                rec[f"L_{c}"] = comps[c][0] if c in comps else None
            rec["L_total"] = total
            rec["wall_ms"] = round(1000 * (time.perf_counter() - t0), 3)
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if step % 25 == 0 or step == 1:
                log.info("step %d total %.4f geo %.4f sem %s diff %s", step, total, rec["L_geo"] or 0.0,
                         rec["L_sem"], rec["L_diff"])
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                last_ckpt = save_checkpoint(out / f"ckpt_{step:06d}.bin", model, step, hyper)
                kept.append(last_ckpt)
                while len(kept) > cfg.keep_checkpoints:
                    kept.pop(0).unlink(missing_ok=True)
    except NonFiniteLoss:
        log.error("non-finite loss; last checkpoint kept at %s", last_ckpt)
        raise
    finally:
        if log_fh:
            log_fh.close()
    final = save_checkpoint(out / "checkpoint.bin", model, cfg.steps, hyper) if out is not None else None
    return TrainResult(model, records, final, state)


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------

DEFAULT_THRESHOLDS = (0.1, 0.3, 0.5)


@dataclass
class SceneEval:
    scene_id: str
    coarse: MetricReport
    cd_refined_cm: float | None
    pairs_executed: int
    wall_time_s: float

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "apd": {f"{t:g}": v for t, v in zip(self.coarse.apd_thresholds, self.coarse.apd_values)},
            "cd_coarse_cm": self.coarse.chamfer_cm,
            "cd_refined_cm": self.cd_refined_cm,
            "pairs_executed": self.pairs_executed,
            "num_points": self.coarse.num_points,
            "wall_time_s": self.wall_time_s,
        }


def infer_sequence(scene: SceneSample, model: ModelParams, counter: PairCounter | None = None):
    """Pairwise inference against frame 0; returns per-frame predictions and fused features."""
    counter = counter or PairCounter()
    frames = list(range(scene.T))
    states = _encode_frames(scene, frames, model)
    preds = {}
    for j in frames[1:]:
        preds[j] = counter(scene.images[0], scene.images[j], states[0].fused, states[j].fused,
                           model.predictor, scene.intrinsics, i=0, j=j)
    return preds, states, counter


def evaluate_scene(scene: SceneSample, model: ModelParams, thresholds=DEFAULT_THRESHOLDS, do_refine: bool = False,
                   schedule: DiffusionSchedule | None = None, seed: int = 0, predictions=None) -> SceneEval:
    """Metrics for one sequence. ``predictions`` replaces the network with a
    callable ``(scene, j) -> (tracking, reconstruction)`` in frame-0 camera coordinates."""
    t0 = time.perf_counter()
    T = scene.T
    pose0 = scene.cameras[0].pose
    to_world = invert_pose(pose0)
    q = scene.query_pixels
    counter = PairCounter()
    if predictions is None:
        preds, states, _ = infer_sequence(scene, model, counter)
        get = lambda j: (preds[j].tracking, preds[j].reconstruction)  # noqa: E731
    else:
        states = None
        get = lambda j: predictions(scene, j)  # noqa: E731
        counter.count = T - 1

    pos = np.zeros((len(q), T - 1, 3))
    cds, cds_ref = [], []
    npts = 0
    for j in range(1, T):
        track, recon = get(j)
        pos[:, j - 1] = to_world.apply(track.points[q[:, 1], q[:, 0]])
        gt = scene.pointmaps[j]
        pred_world = to_world.apply(recon.valid_points())
        cds.append(chamfer_distance(pred_world, gt.reshape(-1, 3)))
        npts += len(pred_world)
        if do_refine:
            fused = states[j].fused if states is not None else None
            if fused is None:
                raise ConfigInvalid("refinement needs network features")
            refined = refine(recon, fused, model.denoiser, schedule, stage_seed(seed, f"refine:{scene.scene_id}:{j}"),
                             model.residual_scale)
            cds_ref.append(chamfer_distance(to_world.apply(refined.valid_points()), gt.reshape(-1, 3)))

    truth_pos = scene.trajectories.positions[:, 1:]
    truth_vis = scene.trajectories.visible[:, 1:]
    keep = truth_vis.any(axis=1)
    truth = TrajectorySet(truth_pos[keep], truth_vis[keep])
    predicted = TrajectorySet(pos[keep], truth_vis[keep])
    values = apd(predicted, truth, thresholds)
    report = MetricReport(list(thresholds), values, float(np.mean(cds)), npts)
    wall = time.perf_counter() - t0
    report.wall_time_s = wall
    return SceneEval(scene.scene_id, report, float(np.mean(cds_ref)) if do_refine else None, counter.count, wall)


def evaluate(model: ModelParams, scenes: list[SceneSample], thresholds=DEFAULT_THRESHOLDS, do_refine: bool = False,
             schedule: DiffusionSchedule | None = None, seed: int = 0) -> dict:
    schedule = schedule or DiffusionSchedule.linear()
    results = [evaluate_scene(s, model, thresholds, do_refine, schedule, seed) for s in scenes]
    return build_report(results, thresholds, do_refine)


def build_report(results: list[SceneEval], thresholds, refined: bool) -> dict:
    per_scene = [r.to_json() for r in results]
    apd_mean = np.mean([r.coarse.apd_values for r in results], axis=0)
    agg = {
        "apd": {f"{t:g}": float(v) for t, v in zip(thresholds, apd_mean)},
        "cd_coarse_cm": float(np.mean([r.coarse.chamfer_cm for r in results])),
        "cd_refined_cm": float(np.mean([r.cd_refined_cm for r in results])) if refined else None,
        "pairs_executed": int(sum(r.pairs_executed for r in results)),
        "wall_time_s": float(sum(r.wall_time_s for r in results)),
        "apd_pooling": "per-sequence, then averaged over sequences",
    }
    return {
        "format": "dino4d-report",
        "version": 1,
        "thresholds_m": [float(t) for t in thresholds],
        "scenes": per_scene,
        "aggregate": agg,
    }
