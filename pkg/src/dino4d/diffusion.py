"""Conditional diffusion over pointmap residuals.

The denoiser is a per-pixel MLP on (noisy residual, timestep embedding,
coarse point, sampled fused feature). Refinement runs a short ancestral
reverse chain and adds the recovered residual to the coarse pointmap.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ShapeMismatch, StepOutOfRange
from .geometry import Pointmap
from .semantic import FeatureMap, sample_grid

TIME_EMBED_DIM = 16


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or len(beta) == 0 or np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("beta must be a non-empty vector in (0, 1)")
        object.__setattr__(self, "beta", beta)

    @classmethod
    def linear(cls, num_steps: int = 5, beta_start: float = 1e-4, beta_end: float = 0.2) -> "DiffusionSchedule":
        if num_steps == 1:
            return cls(np.array([beta_start]))
        return cls(np.linspace(beta_start, beta_end, num_steps))

    @property
    def num_steps(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(1.0 - self.beta)

    def posterior_variance(self, t: int) -> float:
        """Lower-bound reverse variance beta_tilde; zero at the final step."""
        if t == 0:
            return 0.0
        ab = self.alpha_bar
        return float(self.beta[t] * (1.0 - ab[t - 1]) / (1.0 - ab[t]))

    def check_step(self, t: int) -> None:
        if not 0 <= int(t) < self.num_steps:
            raise StepOutOfRange(f"step {t} outside [0, {self.num_steps})")


@dataclass
class Residual:
    values: np.ndarray  # (H, W, 3)
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape[:2] != self.valid.shape or self.values.shape[-1] != 3:
            raise ShapeMismatch("residual values/valid mask shapes disagree")
        if not np.all(np.isfinite(self.values[self.valid])):
            raise ValueError("residual must be finite on valid pixels")

    @classmethod
    def between(cls, gt: Pointmap, coarse: Pointmap) -> "Residual":
        valid = gt.valid & coarse.valid
        return cls(np.where(valid[..., None], gt.points - coarse.points, 0.0), valid)


def forward_noise(residual, t: int, noise: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Closed-form z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    schedule.check_step(t)
    x0 = residual.values if isinstance(residual, Residual) else np.asarray(residual, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ShapeMismatch(f"noise {noise.shape} vs residual {x0.shape}")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def time_embedding(t, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DenoiserParams:
    w1: np.ndarray  # (3 + TIME_EMBED_DIM + cond_dim, hidden)
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray  # (hidden, 3)
    b3: np.ndarray

    @property
    def cond_dim(self) -> int:
        return self.w1.shape[0] - 3 - TIME_EMBED_DIM

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def init(cls, cond_dim: int, hidden: int = 64, rng=None) -> "DenoiserParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        d_in = 3 + TIME_EMBED_DIM + cond_dim

        def glorot(n_in, n_out):
            lim = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-lim, lim, (n_in, n_out))

        return cls(glorot(d_in, hidden), np.zeros(hidden), glorot(hidden, hidden), np.zeros(hidden),
                   np.zeros((hidden, 3)), np.zeros(3))

    def _inputs(self, z, t, cond):
        z = np.asarray(z, dtype=np.float64).reshape(-1, 3)
        cond = np.asarray(cond, dtype=np.float64).reshape(len(z), -1)
        if cond.shape[1] != self.cond_dim:
            raise ShapeMismatch(f"condition width {cond.shape[1]} != {self.cond_dim}")
        temb = time_embedding(t)
        if len(temb) == 1:
            temb = np.broadcast_to(temb, (len(z), temb.shape[1]))
        return np.concatenate([z, temb, cond], axis=1)

    def forward(self, z, t, cond):
        x = self._inputs(z, t, cond)
        h1 = np.tanh(x @ self.w1 + self.b1)
        h2 = np.tanh(h1 @ self.w2 + self.b2)
        return h2 @ self.w3 + self.b3, (x, h1, h2)

    def predict_noise(self, z, t, cond) -> np.ndarray:
        return self.forward(z, t, cond)[0]

    def backward(self, d_out: np.ndarray, cache) -> dict[str, np.ndarray]:
        x, h1, h2 = cache
        g = {"w3": h2.T @ d_out, "b3": d_out.sum(axis=0)}
        d_a2 = (d_out @ self.w3.T) * (1.0 - h2**2)
        g["w2"] = h1.T @ d_a2
        g["b2"] = d_a2.sum(axis=0)
        d_a1 = (d_a2 @ self.w2.T) * (1.0 - h1**2)
        g["w1"] = x.T @ d_a1
        g["b1"] = d_a1.sum(axis=0)
        return g


class OracleDenoiser:
    """Returns exactly the noise that maps a known clean residual to z_t."""

    def __init__(self, x0: np.ndarray, schedule: DiffusionSchedule):
        self.x0 = np.asarray(x0, dtype=np.float64).reshape(-1, 3)
        self.schedule = schedule

    def predict_noise(self, z, t, cond=None) -> np.ndarray:
        ab = self.schedule.alpha_bar[int(t)]
        return (np.asarray(z).reshape(-1, 3) - np.sqrt(ab) * self.x0) / np.sqrt(1.0 - ab)


class ZeroDenoiser:
    def predict_noise(self, z, t, cond=None) -> np.ndarray:
        return np.zeros_like(np.asarray(z, dtype=np.float64).reshape(-1, 3))


def diffusion_loss_flat(params: DenoiserParams, x0: np.ndarray, cond: np.ndarray, t: int, noise: np.ndarray,
                        schedule: DiffusionSchedule) -> tuple[float, dict[str, np.ndarray]]:
    """Element-wise MSE between predicted and drawn noise over N pixels."""
    if len(x0) == 0:
        raise ShapeMismatch("no pixels to supervise")
    z = forward_noise(x0, t, noise, schedule)
    pred, cache = params.forward(z, t, cond)
    diff = pred - noise
    loss = float(np.mean(diff**2))
    grads = params.backward(2.0 * diff / diff.size, cache)
    return loss, grads


def diffusion_loss(params: DenoiserParams, residual: Residual, condition: np.ndarray, t: int, noise: np.ndarray,
                   schedule: DiffusionSchedule) -> tuple[float, dict[str, np.ndarray]]:
    """Noise-prediction loss on the valid pixels of a residual grid.

    ``condition`` is an (H, W, C) grid aligned with the residual.
    """
    condition = np.asarray(condition, dtype=np.float64)
    if condition.shape[:2] != residual.valid.shape or np.asarray(noise).shape != residual.values.shape:
        raise ShapeMismatch("condition/noise are not aligned with the residual")
    m = residual.valid
    return diffusion_loss_flat(params, residual.values[m], condition[m], t, np.asarray(noise)[m], schedule)


def build_condition(coarse: Pointmap, fused: FeatureMap) -> np.ndarray:
    """Per-pixel condition: coarse point concatenated with the bilinearly sampled fused feature."""
    feats = sample_grid(fused, coarse.height, coarse.width)
    return np.concatenate([coarse.points, feats], axis=-1)


def counter_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


def reverse_sample(denoiser, cond: np.ndarray, schedule: DiffusionSchedule, rng: np.random.Generator,
                   num_points: int) -> np.ndarray:
    """Ancestral sampling from z_K ~ N(0, I); returns z_0 for ``num_points`` pixels."""
    z = rng.standard_normal((num_points, 3))
    alpha, ab = schedule.alpha, schedule.alpha_bar
    for t in range(schedule.num_steps - 1, -1, -1):
        eps = denoiser.predict_noise(z, t, cond)
        mean = (z - schedule.beta[t] / np.sqrt(1.0 - ab[t]) * eps) / np.sqrt(alpha[t])
        noise = rng.standard_normal((num_points, 3))
        z = mean + np.sqrt(schedule.posterior_variance(t)) * noise if t > 0 else mean
    return z


def refine(coarse: Pointmap, features: FeatureMap, params, schedule: DiffusionSchedule, seed: int = 0,
           residual_scale: float = 1.0) -> Pointmap:
    """Add a sampled residual to the valid pixels of ``coarse``.

    ``params`` is anything with ``predict_noise(z, t, cond)``; the sample is
    produced in normalised units and multiplied by ``residual_scale``.
    """
    H, W = coarse.height, coarse.width
    cond = build_condition(coarse, features).reshape(H * W, -1)
    rng = counter_rng(seed)
    # every pixel draws noise so the stream does not depend on the mask
    z0 = reverse_sample(params, cond, schedule, rng, H * W).reshape(H, W, 3)
    points = np.where(coarse.valid[..., None], coarse.points + residual_scale * z0, coarse.points)
    return Pointmap(points, coarse.valid.copy(), coarse.source_frame, coarse.target_time)
