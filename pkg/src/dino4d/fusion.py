"""Single-head cross-attention adapter: geometric tokens query semantic tokens,
and the attended result is added back onto the geometric stream."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import DimMismatch, StaleCache
from .semantic import FeatureMap


@dataclass
class AdapterParams:
    w_q: np.ndarray  # (D_geo, D_k)
    w_k: np.ndarray  # (D_sem, D_k)
    w_v: np.ndarray  # (D_sem, D_v)
    w_o: np.ndarray  # (D_v, D_geo)

    def __post_init__(self):
        d_geo, d_k = self.w_q.shape
        d_sem = self.w_k.shape[0]
        d_v = self.w_v.shape[1]
        if self.w_k.shape != (d_sem, d_k) or self.w_v.shape[0] != d_sem or self.w_o.shape != (d_v, d_geo):
            raise DimMismatch("adapter projection shapes are inconsistent")
        for f in fields(self):
            if not np.all(np.isfinite(getattr(self, f.name))):
                raise ValueError(f"{f.name} has non-finite entries")

    @property
    def d_geo(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_sem(self) -> int:
        return self.w_k.shape[0]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    @classmethod
    def init(cls, d_geo: int, d_sem: int, d_k: int = 32, d_v: int = 32, rng=None, scale: float = 0.1):
        """Small uniform projections and a zero output map, so fuse starts as the identity."""
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(
            w_q=rng.uniform(-scale, scale, (d_geo, d_k)),
            w_k=rng.uniform(-scale, scale, (d_sem, d_k)),
            w_v=rng.uniform(-scale, scale, (d_sem, d_v)),
            w_o=np.zeros((d_v, d_geo)),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class FuseCache:
    geo: np.ndarray
    sem: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    ctx: np.ndarray
    params_snapshot: dict[str, np.ndarray]
    shape: tuple


@dataclass
class AdapterGrads:
    geo: np.ndarray
    sem: np.ndarray
    params: dict[str, np.ndarray]


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def fuse_tokens(geo: np.ndarray, sem: np.ndarray, params: AdapterParams) -> tuple[np.ndarray, FuseCache]:
    """Token-level forward: geo (N, D_geo), sem (M, D_sem)."""
    if geo.shape[1] != params.d_geo or sem.shape[1] != params.d_sem:
        raise DimMismatch(f"token dims {geo.shape[1]}/{sem.shape[1]} vs params {params.d_geo}/{params.d_sem}")
    q = geo @ params.w_q
    k = sem @ params.w_k
    v = sem @ params.w_v
    attn = softmax(q @ k.T / np.sqrt(params.d_k), axis=1)
    ctx = attn @ v
    out = geo + ctx @ params.w_o
    snap = {name: arr.copy() for name, arr in params.arrays().items()}
    return out, FuseCache(geo, sem, q, k, v, attn, ctx, snap, geo.shape)


def fuse(f_geo: FeatureMap, f_sem: FeatureMap, params: AdapterParams, return_cache: bool = False):
    """Fused map = f_geo + CrossAttn(Q=f_geo, K=V=f_sem) over all semantic tokens."""
    if f_geo.data.shape[:2] != f_sem.data.shape[:2]:
        raise DimMismatch("geometric and semantic patch grids are not aligned")
    out, cache = fuse_tokens(f_geo.tokens(), f_sem.tokens(), params)
    fm = FeatureMap(out.reshape(f_geo.data.shape[:2] + (params.d_geo,)), f_geo.patch_size, f_geo.frame)
    return (fm, cache) if return_cache else fm


def fuse_backward(upstream: np.ndarray, cache: FuseCache, params: AdapterParams) -> AdapterGrads:
    """Gradients of a scalar objective given d(objective)/d(fused tokens).

    ``upstream`` may be (N, D_geo) or the (Hp, Wp, D_geo) grid layout.
    """
    for name, arr in params.arrays().items():
        if not np.array_equal(arr, cache.params_snapshot[name]):
            raise StaleCache(f"adapter parameter {name} changed since forward")
    g = np.asarray(upstream, dtype=np.float64).reshape(cache.shape)
    scale = 1.0 / np.sqrt(params.d_k)

    d_wo = cache.ctx.T @ g
    d_ctx = g @ params.w_o.T
    d_attn = d_ctx @ cache.v.T
    d_v = cache.attn.T @ d_ctx
    # softmax backward, row-wise
    d_scores = cache.attn * (d_attn - np.sum(d_attn * cache.attn, axis=1, keepdims=True))
    d_q = d_scores @ cache.k * scale
    d_k = d_scores.T @ cache.q * scale

    d_wq = cache.geo.T @ d_q
    d_wk = cache.sem.T @ d_k
    d_wv = cache.sem.T @ d_v
    d_geo = g + d_q @ params.w_q.T
    d_sem = d_k @ params.w_k.T + d_v @ params.w_v.T
    return AdapterGrads(d_geo, d_sem, {"w_q": d_wq, "w_k": d_wk, "w_v": d_wv, "w_o": d_wo})
