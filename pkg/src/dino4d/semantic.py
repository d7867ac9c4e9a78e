"""Synthetic dense semantic features, continuous feature lookup and the
semantic consistency loss between a source frame and a tracked target frame.

The synthetic field stands in for a frozen self-supervised ViT: every label id
owns a fixed random unit embedding, and each patch token is the pixel-fraction
weighted mix of the embeddings found inside it plus a little noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyOmega, ShapeMismatch
from .geometry import CameraModel, Pointmap, projection_jacobian

SIGMA_FEAT = 0.05
EPS_NORM = 1e-8
PATCH_SIZE = 14


@dataclass(frozen=True)
class FeatureMap:
    """Patch-grid of descriptors, ``data`` has shape (patch_height, patch_width, dim)."""

    data: np.ndarray
    patch_size: int
    frame: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ShapeMismatch(f"feature data must be (Hp, Wp, D), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature data must be finite")
        object.__setattr__(self, "data", data)

    @property
    def patch_height(self) -> int:
        return self.data.shape[0]

    @property
    def patch_width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def tokens(self) -> np.ndarray:
        return self.data.reshape(-1, self.dim)

    def covers(self, height: int, width: int) -> bool:
        return self.patch_width * self.patch_size >= width and self.patch_height * self.patch_size >= height


@dataclass(frozen=True)
class SemanticLossConfig:
    """``query_domain`` holds integer (u, v) pixels; None means every valid pixel."""

    query_domain: np.ndarray | None = None
    eps_norm: float = EPS_NORM
    reduction: str = "mean"


def label_embedding(label: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng((seed, 1, int(label)))
    e = rng.standard_normal(dim)
    return e / np.linalg.norm(e)


def synth_features(
    labels: np.ndarray,
    dim: int,
    patch_size: int = PATCH_SIZE,
    seed: int = 0,
    frame: int = 0,
    sigma: float = SIGMA_FEAT,
) -> FeatureMap:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeMismatch("labels must be a 2D map")
    if dim < 8:
        raise ValueError("feature dim must be >= 8")
    H, W = labels.shape
    Hp, Wp = -(-H // patch_size), -(-W // patch_size)

    ids = np.unique(labels)
    emb = np.stack([label_embedding(int(l), dim, seed) for l in ids])  # (L, D)
    onehot = (labels[..., None] == ids).astype(np.float64)  # (H, W, L)
    pad = np.zeros((Hp * patch_size, Wp * patch_size, len(ids)))
    pad[:H, :W] = onehot
    counts = pad.reshape(Hp, patch_size, Wp, patch_size, len(ids)).sum(axis=(1, 3))
    weights = counts / counts.sum(axis=-1, keepdims=True)
    data = weights @ emb

    if sigma > 0:
        rng = np.random.default_rng((seed, 2, int(frame)))
        data = data + sigma * rng.standard_normal(data.shape) / np.sqrt(dim)
    data = data / np.maximum(np.linalg.norm(data, axis=-1, keepdims=True), 1e-12)
    return FeatureMap(data, patch_size, frame)


def _grid_coords(fm: FeatureMap, uv: np.ndarray):
    """Continuous patch-grid coordinates, clamped, with corner indices and weights."""
    c0 = (fm.patch_size - 1) / 2.0
    g = (np.asarray(uv, dtype=np.float64) - c0) / fm.patch_size
    limits = np.array([fm.patch_width - 1, fm.patch_height - 1], dtype=np.float64)
    inside = (g >= 0.0) & (g <= limits)
    g = np.clip(g, 0.0, limits)
    i0 = np.minimum(np.floor(g).astype(np.int64), np.maximum(limits.astype(np.int64) - 1, 0))
    frac = g - i0
    i1 = np.minimum(i0 + 1, limits.astype(np.int64))
    return i0, i1, frac, inside


def sample_features(fm: FeatureMap, uv: np.ndarray, with_grad: bool = False):
    """Bilinear lookup at (N, 2) pixel positions.

    Returns (N, D) features, and with ``with_grad`` also d(feature)/d(u, v)
    of shape (N, D, 2); the derivative is zero along clamped axes.
    """
    uv = np.atleast_2d(uv)
    i0, i1, f, inside = _grid_coords(fm, uv)
    Wp = fm.patch_width
    F = fm.data.reshape(-1, fm.dim)
    x0, y0, x1, y1 = i0[:, 0], i0[:, 1], i1[:, 0], i1[:, 1]
    fx, fy = f[:, :1], f[:, 1:]
    f00, f10 = F[y0 * Wp + x0], F[y0 * Wp + x1]
    f01, f11 = F[y1 * Wp + x0], F[y1 * Wp + x1]
    top = f10 - f00
    bot = f11 - f01
    # convex-combination form so weights of exactly 0 or 1 reproduce corners bit for bit
    r0 = (1.0 - fx) * f00 + fx * f10
    r1 = (1.0 - fx) * f01 + fx * f11
    out = (1.0 - fy) * r0 + fy * r1
    if not with_grad:
        return out
    du = (top + fy * (bot - top)) * (inside[:, :1] / fm.patch_size)
    dv = (r1 - r0) * (inside[:, 1:] / fm.patch_size)
    return out, np.stack([du, dv], axis=-1)


def _axis_weights(n_pix: int, n_patch: int, patch_size: int) -> np.ndarray:
    """(n_pix, n_patch) linear-interpolation matrix along one image axis."""
    c0 = (patch_size - 1) / 2.0
    g = np.clip((np.arange(n_pix) - c0) / patch_size, 0.0, n_patch - 1)
    i0 = np.minimum(np.floor(g).astype(np.int64), max(n_patch - 2, 0))
    frac = g - i0
    w = np.zeros((n_pix, n_patch))
    w[np.arange(n_pix), i0] += 1.0 - frac
    w[np.arange(n_pix), np.minimum(i0 + 1, n_patch - 1)] += frac
    return w


def sample_grid(fm: FeatureMap, height: int, width: int) -> np.ndarray:
    """Bilinear lookup at every integer pixel of an (height, width) image.

    Same values as ``sample_features`` on the full lattice, computed with
    separable interpolation matrices.
    """
    wy = _axis_weights(height, fm.patch_height, fm.patch_size)
    wx = _axis_weights(width, fm.patch_width, fm.patch_size)
    tmp = np.tensordot(wy, fm.data, axes=(1, 0))  # (H, Wp, D)
    return np.einsum("wx,hxd->hwd", wx, tmp, optimize=True)


def sample_feature(fm: FeatureMap, pixel) -> np.ndarray:
    """Single-pixel bilinear lookup; out-of-range pixels clamp to the border."""
    return sample_features(fm, np.asarray(pixel, dtype=np.float64).reshape(1, 2))[0]


def _cosine_and_grad(a: np.ndarray, b: np.ndarray, eps: float):
    na = np.sqrt(np.sum(a * a, axis=-1) + eps**2)
    nb = np.sqrt(np.sum(b * b, axis=-1) + eps**2)
    dot = np.sum(a * b, axis=-1)
    cos = dot / (na * nb)
    dcos_db = a / (na * nb)[:, None] - (cos / nb**2)[:, None] * b
    return cos, dcos_db


def semantic_consistency_loss(
    f_src: FeatureMap,
    f_dst: FeatureMap,
    tracking: Pointmap,
    camera_j: CameraModel,
    cfg: SemanticLossConfig = SemanticLossConfig(),
) -> tuple[float, np.ndarray]:
    """Penalise tracks whose landing pixel in frame j carries a dissimilar descriptor.

    ``tracking`` holds frame-i pixels expressed at time j in the coordinate
    frame ``camera_j`` maps from. Returns the loss and its gradient w.r.t.
    ``tracking.points`` (same shape). Tracks landing behind the camera cost
    the maximum value 2 and carry no gradient.
    """
    H, W = tracking.height, tracking.width
    if not (f_src.covers(H, W) and f_dst.covers(H, W)):
        raise ShapeMismatch("feature grids do not cover the pointmap")
    if f_src.dim != f_dst.dim:
        raise ShapeMismatch("source and target descriptors differ in dimension")

    if cfg.query_domain is None:
        vv, uu = np.nonzero(tracking.valid)
        omega = np.stack([uu, vv], axis=-1)
    else:
        omega = np.asarray(cfg.query_domain, dtype=np.int64).reshape(-1, 2)
        if omega.size and (np.any(omega < 0) or np.any(omega[:, 0] >= W) or np.any(omega[:, 1] >= H)):
            raise ValueError("query pixels must lie inside the source image")
        omega = omega[tracking.valid[omega[:, 1], omega[:, 0]]]
    if len(omega) == 0:
        raise EmptyOmega("no valid query pixels")

    if cfg.query_domain is None:
        a = sample_grid(f_src, H, W)[omega[:, 1], omega[:, 0]]
    else:
        a = sample_features(f_src, omega.astype(np.float64))
    X = tracking.points[omega[:, 1], omega[:, 0]]
    pc = X @ camera_j.rotation.T + camera_j.translation
    front = pc[:, 2] > 1e-6

    terms = np.full(len(omega), 2.0)
    grad_pts = np.zeros_like(X)
    if front.any():
        pcf = pc[front]
        uv = np.stack([camera_j.fx * pcf[:, 0] / pcf[:, 2] + camera_j.cx,
                       camera_j.fy * pcf[:, 1] / pcf[:, 2] + camera_j.cy], axis=-1)
        b, db_duv = sample_features(f_dst, uv, with_grad=True)
        cos, dcos_db = _cosine_and_grad(a[front], b, cfg.eps_norm)
        terms[front] = 1.0 - cos
        dterm_du = -np.sum(dcos_db * db_duv[..., 0], axis=1)
        dterm_dv = -np.sum(dcos_db * db_duv[..., 1], axis=1)
        J = projection_jacobian(pcf, camera_j.fx, camera_j.fy)  # d uv / d pc
        g_pc = dterm_du[:, None] * J[:, 0] + dterm_dv[:, None] * J[:, 1]
        grad_pts[front] = g_pc @ camera_j.rotation

    if cfg.reduction == "mean":
        loss = float(np.mean(terms))
        grad_pts /= len(omega)
    elif cfg.reduction == "sum":
        loss = float(np.sum(terms))
    else:
        raise ValueError(f"unknown reduction {cfg.reduction!r}")

    grad = np.zeros_like(tracking.points)
    np.add.at(grad, (omega[:, 1], omega[:, 0]), grad_pts)
    return loss, grad
