"""Two-branch pointmap predictor for a frame pair, its losses, and Gauss-Newton PnP.

The network is a per-token MLP. Each patch token sees the image patches of
both frames, the fused features of both frames and its normalised grid
position, and two linear heads emit per-pixel 3D offsets from a fronto-parallel
surface at a learned base depth. Everything is expressed in the camera frame
of the reference frame ``i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from .errors import DimMismatch, DivergedPnP, InsufficientCorrespondences, NoValidPixels, ShapeMismatch
from .geometry import EPS_DEPTH, CameraModel, Pointmap, Pose, pixel_grid, projection_jacobian, so3_exp
from .semantic import FeatureMap

log = logging.getLogger(__name__)

PNP_MIN_POINTS = 6
PNP_MAX_ITERS = 50
PNP_TOL = 1e-10


@dataclass
class PredictorParams:
    enc_w: np.ndarray  # (ps*ps, D_geo)   geometric patch encoder
    enc_b: np.ndarray
    w1: np.ndarray  # (2*ps*ps + 2*D_geo + 2, hidden)
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    track_w: np.ndarray  # (hidden, ps*ps*3)
    track_b: np.ndarray
    recon_w: np.ndarray
    recon_b: np.ndarray
    conf_w: np.ndarray  # (hidden, ps*ps), log-confidence
    conf_b: np.ndarray
    base_depth: np.ndarray  # (1,)

    @property
    def patch_size(self) -> int:
        return int(round(np.sqrt(self.enc_w.shape[0])))

    @property
    def d_geo(self) -> int:
        return self.enc_w.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def init(cls, patch_size: int = 14, d_geo: int = 32, hidden: int = 128, base_depth: float = 3.0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        pp = patch_size * patch_size
        d_in = 2 * pp + 2 * d_geo + 2

        def glorot(n_in, n_out):
            lim = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-lim, lim, (n_in, n_out))

        return cls(
            enc_w=glorot(pp, d_geo), enc_b=np.zeros(d_geo),
            w1=glorot(d_in, hidden), b1=np.zeros(hidden),
            w2=glorot(hidden, hidden), b2=np.zeros(hidden),
            track_w=np.zeros((hidden, pp * 3)), track_b=np.zeros(pp * 3),
            recon_w=np.zeros((hidden, pp * 3)), recon_b=np.zeros(pp * 3),
            conf_w=np.zeros((hidden, pp)), conf_b=np.zeros(pp),
            base_depth=np.array([float(base_depth)]),
        )


@dataclass
class PairPrediction:
    tracking: Pointmap
    reconstruction: Pointmap
    confidence: np.ndarray

    def __post_init__(self):
        if self.tracking.target_time != self.reconstruction.target_time:
            raise ValueError("tracking and reconstruction refer to different times")
        if not np.all(np.isfinite(self.confidence)) or np.any(self.confidence <= 0):
            raise ValueError("confidence must be positive and finite")


# ----------------------------------------------------------------------------
# patch helpers
# ----------------------------------------------------------------------------

def image_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(Hp*Wp, ps*ps) patch matrix, edge-padded, intensities centred on 0."""
    H, W = image.shape
    Hp, Wp = -(-H // patch_size), -(-W // patch_size)
    img = np.pad(np.asarray(image, dtype=np.float64), ((0, Hp * patch_size - H), (0, Wp * patch_size - W)), mode="edge")
    p = img.reshape(Hp, patch_size, Wp, patch_size).transpose(0, 2, 1, 3)
    return p.reshape(Hp * Wp, patch_size * patch_size) - 0.5


def tokens_to_pixels(tok: np.ndarray, grid: tuple[int, int], patch_size: int, H: int, W: int, ch: int) -> np.ndarray:
    Hp, Wp = grid
    x = tok.reshape(Hp, Wp, patch_size, patch_size, ch).transpose(0, 2, 1, 3, 4)
    return x.reshape(Hp * patch_size, Wp * patch_size, ch)[:H, :W]


def pixels_to_tokens(pix: np.ndarray, grid: tuple[int, int], patch_size: int) -> np.ndarray:
    Hp, Wp = grid
    H, W, ch = pix.shape
    full = np.zeros((Hp * patch_size, Wp * patch_size, ch))
    full[:H, :W] = pix
    return full.reshape(Hp, patch_size, Wp, patch_size, ch).transpose(0, 2, 1, 3, 4).reshape(Hp * Wp, -1)


def grid_positions(grid: tuple[int, int]) -> np.ndarray:
    Hp, Wp = grid
    gy, gx = np.meshgrid(np.linspace(-1, 1, Hp), np.linspace(-1, 1, Wp), indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def unit_rays(H: int, W: int, intrinsics: CameraModel) -> np.ndarray:
    """(H, W, 3) rays with unit z through every pixel centre."""
    uv = pixel_grid(H, W)
    return np.stack([(uv[..., 0] - intrinsics.cx) / intrinsics.fx,
                     (uv[..., 1] - intrinsics.cy) / intrinsics.fy,
                     np.ones((H, W))], axis=-1)


# ----------------------------------------------------------------------------
# geometric encoder
# ----------------------------------------------------------------------------

@dataclass
class EncodeCache:
    patches: np.ndarray
    act: np.ndarray


def encode_geometry(image: np.ndarray, params: PredictorParams, frame: int = 0) -> tuple[FeatureMap, EncodeCache]:
    ps = params.patch_size
    H, W = image.shape
    P = image_patches(image, ps)
    act = np.tanh(P @ params.enc_w + params.enc_b)
    fm = FeatureMap(act.reshape(-(-H // ps), -(-W // ps), params.d_geo), ps, frame)
    return fm, EncodeCache(P, act)


def encode_backward(d_tokens: np.ndarray, cache: EncodeCache) -> dict[str, np.ndarray]:
    d_pre = d_tokens.reshape(cache.act.shape) * (1.0 - cache.act**2)
    return {"enc_w": cache.patches.T @ d_pre, "enc_b": d_pre.sum(axis=0)}


# ----------------------------------------------------------------------------
# pair forward / backward
# ----------------------------------------------------------------------------

@dataclass
class PairCache:
    x: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    rays: np.ndarray
    grid: tuple[int, int]
    shape: tuple[int, int]
    d_geo: int


def forward_pair(
    frame_i: np.ndarray,
    frame_j: np.ndarray,
    f_fused_i: FeatureMap,
    f_fused_j: FeatureMap,
    params: PredictorParams,
    intrinsics: CameraModel,
    i: int = 0,
    j: int = 1,
    return_cache: bool = False,
):
    """Predict the tracking pointmap (frame-i pixels at time j) and the
    reconstruction pointmap (frame-j pixels at time j), both in frame i's camera frame."""
    if frame_i.shape != frame_j.shape:
        raise DimMismatch("frames differ in resolution")
    ps = params.patch_size
    H, W = frame_i.shape
    grid = (-(-H // ps), -(-W // ps))
    for fm in (f_fused_i, f_fused_j):
        if fm.data.shape[:2] != grid or fm.dim != params.d_geo:
            raise DimMismatch(f"fused grid {fm.data.shape} does not match frame grid {grid}x{params.d_geo}")

    x = np.concatenate([
        image_patches(frame_i, ps), image_patches(frame_j, ps),
        f_fused_i.tokens(), f_fused_j.tokens(), grid_positions(grid),
    ], axis=1)
    if x.shape[1] != params.w1.shape[0]:
        raise DimMismatch(f"token input width {x.shape[1]} != {params.w1.shape[0]}")
    h1 = np.tanh(x @ params.w1 + params.b1)
    h2 = np.tanh(h1 @ params.w2 + params.b2)
    off_t = tokens_to_pixels(h2 @ params.track_w + params.track_b, grid, ps, H, W, 3)
    off_r = tokens_to_pixels(h2 @ params.recon_w + params.recon_b, grid, ps, H, W, 3)
    conf = np.exp(tokens_to_pixels(h2 @ params.conf_w + params.conf_b, grid, ps, H, W, 1)[..., 0])

    rays = unit_rays(H, W, intrinsics)
    base = params.base_depth[0] * rays
    valid = np.ones((H, W), dtype=bool)
    pred = PairPrediction(
        tracking=Pointmap(base + off_t, valid, source_frame=i, target_time=j),
        reconstruction=Pointmap(base + off_r, valid.copy(), source_frame=j, target_time=j),
        confidence=conf,
    )
    if return_cache:
        return pred, PairCache(x, h1, h2, rays, grid, (H, W), params.d_geo)
    return pred


def forward_pair_backward(d_tracking: np.ndarray, d_recon: np.ndarray, cache: PairCache, params: PredictorParams):
    """Backprop point gradients; returns (param grads, d fused_i tokens, d fused_j tokens)."""
    ps = params.patch_size
    g = {}
    g["base_depth"] = np.array([np.sum((d_tracking + d_recon) * cache.rays)])
    dt_tok = pixels_to_tokens(d_tracking, cache.grid, ps)
    dr_tok = pixels_to_tokens(d_recon, cache.grid, ps)
    g["track_w"] = cache.h2.T @ dt_tok
    g["track_b"] = dt_tok.sum(axis=0)
    g["recon_w"] = cache.h2.T @ dr_tok
    g["recon_b"] = dr_tok.sum(axis=0)
    g["conf_w"] = np.zeros_like(params.conf_w)
    g["conf_b"] = np.zeros_like(params.conf_b)

    d_h2 = dt_tok @ params.track_w.T + dr_tok @ params.recon_w.T
    d_a2 = d_h2 * (1.0 - cache.h2**2)
    g["w2"] = cache.h1.T @ d_a2
    g["b2"] = d_a2.sum(axis=0)
    d_a1 = (d_a2 @ params.w2.T) * (1.0 - cache.h1**2)
    g["w1"] = cache.x.T @ d_a1
    g["b1"] = d_a1.sum(axis=0)
    d_x = d_a1 @ params.w1.T
    pp = ps * ps
    d_fi = d_x[:, 2 * pp:2 * pp + cache.d_geo]
    d_fj = d_x[:, 2 * pp + cache.d_geo:2 * pp + 2 * cache.d_geo]
    return g, d_fi, d_fj


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------

def _branch_mse(pred: Pointmap, gt: Pointmap) -> tuple[float, np.ndarray]:
    if pred.points.shape != gt.points.shape:
        raise ShapeMismatch(f"{pred.points.shape} vs {gt.points.shape}")
    mask = pred.valid & gt.valid
    n = int(mask.sum())
    if n == 0:
        raise NoValidPixels("no pixel valid in both prediction and ground truth")
    diff = np.where(mask[..., None], pred.points - gt.points, 0.0)
    return float(np.sum(diff**2) / n), 2.0 * diff / n


def geometric_loss(pred: PairPrediction, gt_tracking: Pointmap, gt_recon: Pointmap):
    """Mean squared 3D error over valid pixels, summed over both branches.

    Returns (loss, d/d tracking points, d/d reconstruction points).
    """
    lt, gt_ = _branch_mse(pred.tracking, gt_tracking)
    lr, gr = _branch_mse(pred.reconstruction, gt_recon)
    return lt + lr, gt_, gr


@dataclass
class PnPResult:
    pose: Pose
    iterations: int
    rms_px: float
    converged: bool


def solve_pnp(points: np.ndarray, pixels: np.ndarray, intrinsics: CameraModel, initial_pose: Pose | None = None) -> PnPResult:
    """Gauss-Newton on total squared reprojection error over (R, t).

    Rotation is updated by left-multiplied exponential-map increments.
    """
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(X) != len(uv):
        raise ShapeMismatch("points and pixels differ in count")
    keep = np.all(np.isfinite(X), axis=1) & np.all(np.isfinite(uv), axis=1)
    X, uv = X[keep], uv[keep]
    if len(X) < PNP_MIN_POINTS:
        raise InsufficientCorrespondences(f"need >= {PNP_MIN_POINTS} correspondences, got {len(X)}")

    pose = initial_pose or Pose.identity()
    R, t = pose.rotation.copy(), pose.translation.copy()
    fx, fy, cx, cy = intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy

    def residuals(R, t):
        pc = X @ R.T + t
        front = pc[:, 2] > EPS_DEPTH
        z = np.where(front, pc[:, 2], 1.0)
        r = np.stack([fx * pc[:, 0] / z + cx, fy * pc[:, 1] / z + cy], axis=-1) - uv
        return pc, front, r

    pc, front, r = residuals(R, t)
    cost = float(np.sum(r[front] ** 2))
    increases = 0
    converged = False
    it = 0
    for it in range(1, PNP_MAX_ITERS + 1):
        if front.sum() < PNP_MIN_POINTS:
            raise InsufficientCorrespondences("too few points in front of the camera")
        pcf, rf = pc[front], r[front]
        Jp = projection_jacobian(pcf, fx, fy)  # (n, 2, 3)
        # d pc / d(omega, dt) for the left increment pc -> exp(omega) pc + dt is [-[pc]x | I],
        # so the rotational columns of each Jacobian row a are pc x a
        J = np.concatenate([np.cross(pcf[:, None, :], Jp), Jp], axis=-1).reshape(-1, 6)
        H = J.T @ J
        b = J.T @ rf.reshape(-1)
        try:
            delta = -np.linalg.solve(H, b)
        except np.linalg.LinAlgError as exc:
            raise DivergedPnP("singular normal equations") from exc
        dR = so3_exp(delta[:3])
        R = dR @ R
        t = dR @ t + delta[3:]
        # re-orthonormalise to keep drift far below the 1e-9 rotation tolerance
        u_, _, vt = np.linalg.svd(R)
        R = u_ @ vt
        pc, front, r = residuals(R, t)
        new_cost = float(np.sum(r[front] ** 2))
        increases = increases + 1 if new_cost > cost else 0
        if increases >= 5:
            raise DivergedPnP(f"reprojection error increased {increases} iterations in a row")
        cost = new_cost
        if np.linalg.norm(delta) < PNP_TOL:
            converged = True
            break
    rms = float(np.sqrt(cost / max(int(front.sum()), 1)))
    return PnPResult(Pose(R, t), it, rms, converged)


def estimate_pose_pnp(recon: Pointmap, observed_pixels: np.ndarray, intrinsics: CameraModel,
                      initial_pose: Pose | None = None) -> Pose:
    """Pose mapping ``recon``'s coordinate frame into the camera that observed it."""
    obs = np.asarray(observed_pixels, dtype=np.float64)
    if obs.shape != recon.points.shape[:2] + (2,):
        raise ShapeMismatch("observed pixel grid does not match the pointmap")
    return solve_pnp(recon.points[recon.valid], obs[recon.valid], intrinsics, initial_pose).pose


def reprojection_loss(pred: PairPrediction, pixels: np.ndarray, intrinsics: CameraModel, pose: Pose | None = None):
    """Mean squared pixel error of the reconstruction branch under a PnP pose.

    With ``pose=None`` the pose is estimated by PnP; either way it is treated
    as a constant, so the returned gradient only covers the predicted points.
    Returns (loss, d/d reconstruction points, pose).
    """
    recon = pred.reconstruction
    if pose is None:
        pose = estimate_pose_pnp(recon, pixels, intrinsics)
    pc = recon.points @ pose.rotation.T + pose.translation
    mask = recon.valid & (pc[..., 2] > EPS_DEPTH)
    n = int(mask.sum())
    if n == 0:
        raise NoValidPixels("no reconstruction point in front of the estimated camera")
    z = np.where(mask, pc[..., 2], 1.0)
    proj = np.stack([intrinsics.fx * pc[..., 0] / z + intrinsics.cx, intrinsics.fy * pc[..., 1] / z + intrinsics.cy], axis=-1)
    r = np.where(mask[..., None], proj - pixels, 0.0)
    loss = float(np.sum(r**2) / n)
    pcs = np.where(mask[..., None], pc, np.array([0.0, 0.0, 1.0]))
    J = projection_jacobian(pcs, intrinsics.fx, intrinsics.fy)
    g_pc = r[..., :1] * J[..., 0, :] + r[..., 1:] * J[..., 1, :]
    grad = (2.0 / n) * (g_pc @ pose.rotation)
    return loss, grad, pose
