"""Duality-based TV-L1 optical flow and flow-clip assembly.

Coarse-to-fine estimation: per pyramid level and warp, the data term is
linearized about the warped second frame, then the solver alternates a
closed-form thresholding update of the auxiliary field with dual ascent
steps, u <- v - theta * div(p). The solver is batched over frame pairs;
per-pair results are independent of batch composition.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# The classical lambda/theta defaults assume 0..255 intensities; inputs arrive
# in [0, 1], so the solver rescales internally.
INTENSITY_SCALE = 255.0

FLOW_MAGIC = b"FLO3"


class FlowError(ValueError):
    """Invalid input to the flow estimator."""


@dataclass
class TvL1Params:
    lambda_: float = 0.15
    theta: float = 0.3
    tau: float = 0.25
    warps_per_level: int = 3
    iterations_per_warp: int = 25
    pyramid_scale: float = 0.5
    min_level_size: int = 16
    clip_limit: float = 20.0

    def __post_init__(self):
        if self.tau > 0.25:
            raise ValueError(f"tau must be <= 0.25 for dual-ascent stability, got {self.tau}")
        if not 0 < self.pyramid_scale < 1:
            raise ValueError(f"pyramid_scale must be in (0, 1), got {self.pyramid_scale}")
        for name in ("lambda_", "theta", "tau", "clip_limit"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("warps_per_level", "iterations_per_warp"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.min_level_size < 2:
            raise ValueError(f"min_level_size must be >= 2, got {self.min_level_size}")


@dataclass
class FlowField:
    """Per-pixel displacement: u horizontal (x), v vertical (y), in pixels."""

    u: np.ndarray
    v: np.ndarray


def _bilinear_sample(imgs: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample (B, H, W) images at float coords; out-of-bounds clamp to border."""
    b, h, w = imgs.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(xs.astype(np.int64), w - 2) if w > 1 else np.zeros_like(xs, dtype=np.int64)
    y0 = np.minimum(ys.astype(np.int64), h - 2) if h > 1 else np.zeros_like(ys, dtype=np.int64)
    fx = (xs - x0).astype(imgs.dtype)
    fy = (ys - y0).astype(imgs.dtype)
    flat = imgs.reshape(b, -1)
    base = y0 * w + x0
    i00 = np.take_along_axis(flat, base.reshape(b, -1), axis=1).reshape(b, *xs.shape[1:])
    i01 = np.take_along_axis(flat, (base + 1).reshape(b, -1), axis=1).reshape(i00.shape)
    i10 = np.take_along_axis(flat, (base + w).reshape(b, -1), axis=1).reshape(i00.shape)
    i11 = np.take_along_axis(flat, (base + w + 1).reshape(b, -1), axis=1).reshape(i00.shape)
    top = i00 + fx * (i01 - i00)
    bot = i10 + fx * (i11 - i10)
    return top + fy * (bot - top)


def _warp_batch(imgs: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    b, h, w = imgs.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=imgs.dtype), np.arange(w, dtype=imgs.dtype), indexing="ij")
    return _bilinear_sample(imgs, xs[None] + u, ys[None] + v)


def warp_image(img: np.ndarray, flow: FlowField) -> np.ndarray:
    """Bilinear sampling of img at (x + u, y + v), border-clamped."""
    img = np.asarray(img, dtype=np.float32)
    if img.shape != flow.u.shape or img.shape != flow.v.shape:
        raise FlowError(f"image shape {img.shape} does not match flow {flow.u.shape}")
    return _warp_batch(img[None], flow.u[None].astype(np.float32), flow.v[None].astype(np.float32))[0]


def _gaussian_blur(imgs: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return imgs
    radius = max(1, int(np.ceil(2.5 * sigma)))
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    k = (k / k.sum()).astype(imgs.dtype)
    pad = np.pad(imgs, ((0, 0), (0, 0), (radius, radius)), mode="reflect")
    out = np.zeros_like(imgs)
    for i, kv in enumerate(k):
        out += kv * pad[:, :, i : i + imgs.shape[2]]
    pad = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    out = np.zeros_like(imgs)
    for i, kv in enumerate(k):
        out += kv * pad[:, i : i + imgs.shape[1], :]
    return out


def _resize_bilinear(imgs: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    b, h, w = imgs.shape
    xs = (np.arange(out_w, dtype=imgs.dtype) + 0.5) * (w / out_w) - 0.5
    ys = (np.arange(out_h, dtype=imgs.dtype) + 0.5) * (h / out_h) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return _bilinear_sample(imgs, np.broadcast_to(gx, (b, out_h, out_w)), np.broadcast_to(gy, (b, out_h, out_w)))


def pyramid_sizes(h: int, w: int, params: TvL1Params) -> list[tuple[int, int]]:
    """Level sizes, finest first; every level is >= min_level_size on both axes."""
    sizes = [(h, w)]
    while True:
        ph, pw = sizes[-1]
        nh, nw = int(round(ph * params.pyramid_scale)), int(round(pw * params.pyramid_scale))
        if min(nh, nw) < params.min_level_size or (nh, nw) == (ph, pw):
            break
        sizes.append((nh, nw))
    return sizes


def _forward_grad(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(f)
    gy = np.zeros_like(f)
    gx[:, :, :-1] = f[:, :, 1:] - f[:, :, :-1]
    gy[:, :-1, :] = f[:, 1:, :] - f[:, :-1, :]
    return gx, gy


def _divergence(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    d = p1.copy()
    d[:, :, 1:] -= p1[:, :, :-1]
    e = p2.copy()
    e[:, 1:, :] -= p2[:, :-1, :]
    return d + e


def tvl1_energy(frame0: np.ndarray, frame1: np.ndarray, u: np.ndarray, v: np.ndarray, lambda_: float) -> float:
    """lambda * sum |I1(x+u) - I0| + sum (|grad u| + |grad v|), float64 sums.

    Frames in [0, 1] are rescaled like the solver does, so values are
    comparable with compute_flow_trace energies.
    """
    scale = np.float32(INTENSITY_SCALE)
    e = _energy_batch(frame0[None].astype(np.float32) * scale,
                      frame1[None].astype(np.float32) * scale,
                      u[None].astype(np.float32), v[None].astype(np.float32), lambda_)
    return float(e[0])


def _energy_batch(i0, i1, u, v, lambda_):
    resid = _warp_batch(i1, u, v) - i0
    ux, uy = _forward_grad(u)
    vx, vy = _forward_grad(v)
    data = np.abs(resid).sum(axis=(1, 2), dtype=np.float64)
    smooth = np.sqrt(ux.astype(np.float64) ** 2 + uy.astype(np.float64) ** 2).sum(axis=(1, 2))
    smooth += np.sqrt(vx.astype(np.float64) ** 2 + vy.astype(np.float64) ** 2).sum(axis=(1, 2))
    return lambda_ * data + smooth


def _tvl1_level(i0, i1, u1, u2, params: TvL1Params, trace: list | None):
    """Run all warps at one level; the primal state is accepted per warp only
    if the true TV-L1 energy did not increase (keeps coarse levels stable)."""
    lam, theta, tau = params.lambda_, params.theta, params.tau
    taut = np.float32(tau / theta)
    lt = np.float32(lam * theta)
    theta32 = np.float32(theta)
    i1x = np.gradient(i1, axis=2).astype(np.float32)
    i1y = np.gradient(i1, axis=1).astype(np.float32)
    p11 = np.zeros_like(u1)
    p12 = np.zeros_like(u1)
    p21 = np.zeros_like(u1)
    p22 = np.zeros_like(u1)
    best = _energy_batch(i0, i1, u1, u2, lam)
    if trace is not None:
        trace.append(best.copy())
    for _ in range(params.warps_per_level):
        u1_0 = u1.copy()
        u2_0 = u2.copy()
        i1w = _warp_batch(i1, u1_0, u2_0)
        ixw = _warp_batch(i1x, u1_0, u2_0)
        iyw = _warp_batch(i1y, u1_0, u2_0)
        grad = ixw * ixw + iyw * iyw
        th = lt * grad
        grad_safe = np.maximum(grad, np.float32(1e-12))
        rho_c = i1w - ixw * u1_0 - iyw * u2_0 - i0
        for _ in range(params.iterations_per_warp):
            rho = rho_c + ixw * u1 + iyw * u2
            inner = np.where(grad > 1e-12, -rho / grad_safe, np.float32(0.0))
            coef = np.where(rho < -th, lt, np.where(rho > th, -lt, inner))
            v1 = u1 + coef * ixw
            v2 = u2 + coef * iyw
            u1 = v1 - theta32 * _divergence(p11, p12)
            u2 = v2 - theta32 * _divergence(p21, p22)
            g1x, g1y = _forward_grad(u1)
            g2x, g2y = _forward_grad(u2)
            n1 = 1.0 + taut * np.sqrt(g1x * g1x + g1y * g1y)
            n2 = 1.0 + taut * np.sqrt(g2x * g2x + g2y * g2y)
            p11 = (p11 - taut * g1x) / n1
            p12 = (p12 - taut * g1y) / n1
            p21 = (p21 - taut * g2x) / n2
            p22 = (p22 - taut * g2y) / n2
        energy = _energy_batch(i0, i1, u1, u2, lam)
        worse = energy > best
        if worse.any():
            u1 = np.where(worse[:, None, None], u1_0, u1)
            u2 = np.where(worse[:, None, None], u2_0, u2)
            energy = np.where(worse, best, energy)
        best = energy
        if trace is not None:
            trace.append(best.copy())
    return u1, u2


def compute_flow_batch(frames0: np.ndarray, frames1: np.ndarray,
                       params: TvL1Params | None = None,
                       trace: list | None = None) -> tuple[np.ndarray, np.ndarray]:
    """TV-L1 flow for a batch of frame pairs: (B, H, W) -> two (B, H, W) fields."""
    params = params or TvL1Params()
    f0 = np.ascontiguousarray(frames0, dtype=np.float32)
    f1 = np.ascontiguousarray(frames1, dtype=np.float32)
    if f0.shape != f1.shape:
        raise FlowError(f"frame shapes differ: {f0.shape} vs {f1.shape}")
    if f0.ndim != 3:
        raise FlowError(f"expected (B, H, W) frames, got {f0.ndim}-d")
    if not (np.isfinite(f0).all() and np.isfinite(f1).all()):
        raise FlowError("non-finite values in input frames")
    b, h, w = f0.shape
    if min(h, w) < params.min_level_size:
        raise FlowError(f"images of size {h}x{w} are smaller than min_level_size {params.min_level_size}")
    f0 = f0 * np.float32(INTENSITY_SCALE)
    f1 = f1 * np.float32(INTENSITY_SCALE)

    sizes = pyramid_sizes(h, w, params)
    sigma = 0.6 * np.sqrt(1.0 / params.pyramid_scale**2 - 1.0)
    levels = [(f0, f1)]
    for lh, lw in sizes[1:]:
        prev0, prev1 = levels[-1]
        levels.append((
            _resize_bilinear(_gaussian_blur(prev0, sigma), lh, lw),
            _resize_bilinear(_gaussian_blur(prev1, sigma), lh, lw),
        ))

    u1 = np.zeros((b, *sizes[-1]), dtype=np.float32)
    u2 = np.zeros_like(u1)
    for li in range(len(sizes) - 1, -1, -1):
        if li < len(sizes) - 1:
            lh, lw = sizes[li]
            ph, pw = sizes[li + 1]
            u1 = _resize_bilinear(u1, lh, lw) * np.float32(lw / pw)
            u2 = _resize_bilinear(u2, lh, lw) * np.float32(lh / ph)
        i0, i1 = levels[li]
        u1, u2 = _tvl1_level(i0, i1, u1, u2, params, trace if li == 0 else None)
    limit = np.float32(params.clip_limit)
    return np.clip(u1, -limit, limit), np.clip(u2, -limit, limit)


def compute_flow(frame0: np.ndarray, frame1: np.ndarray, params: TvL1Params | None = None) -> FlowField:
    """Flow between two grayscale frames with values in [0, 1]."""
    u, v = compute_flow_batch(np.asarray(frame0)[None], np.asarray(frame1)[None], params)
    return FlowField(u=u[0], v=v[0])


def compute_flow_trace(frame0: np.ndarray, frame1: np.ndarray,
                       params: TvL1Params | None = None) -> tuple[FlowField, list[float]]:
    """Flow plus the finest-level energy at each warp boundary (initial first)."""
    trace: list = []
    u, v = compute_flow_batch(np.asarray(frame0)[None], np.asarray(frame1)[None], params, trace=trace)
    return FlowField(u=u[0], v=v[0]), [float(e[0]) for e in trace]


def rgb_clip_to_gray(clip: np.ndarray) -> np.ndarray:
    """(3, T, H, W) in [0, 1] -> (T, H, W) luma."""
    if clip.ndim != 4 or clip.shape[0] != 3:
        raise FlowError(f"expected an RGB clip shaped (3, T, H, W), got {clip.shape}")
    r, g, b = LUMA_WEIGHTS
    return (r * clip[0] + g * clip[1] + b * clip[2]).astype(np.float32)


def flow_fields_for_clip(clip: np.ndarray, params: TvL1Params | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Unscaled per-timestep flow (u, v), each (T, H, W); the final field is
    the T-1'th repeated so the flow clip spans the full clip length."""
    params = params or TvL1Params()
    gray = rgb_clip_to_gray(np.asarray(clip, dtype=np.float32))
    t = gray.shape[0]
    if t < 2:
        raise FlowError(f"need at least 2 frames, got {t}")
    u, v = compute_flow_batch(gray[:-1], gray[1:], params)
    u = np.concatenate([u, u[-1:]], axis=0)
    v = np.concatenate([v, v[-1:]], axis=0)
    return u, v


def clip_to_flow_clip(clip: np.ndarray, params: TvL1Params | None = None) -> np.ndarray:
    """(3, T, H, W) RGB clip -> (2, T, H, W) flow clip scaled into [-1, 1]."""
    params = params or TvL1Params()
    u, v = flow_fields_for_clip(clip, params)
    return np.ascontiguousarray(np.stack([u, v]) / np.float32(params.clip_limit))


def write_flow_cache(path, u: np.ndarray, v: np.ndarray) -> None:
    """FLO3 cache: magic, u32 T/H/W, then the u and v planes as f32 LE."""
    if u.shape != v.shape or u.ndim != 3:
        raise FlowError(f"flow planes must share a (T, H, W) shape, got {u.shape} and {v.shape}")
    t, h, w = u.shape
    blob = FLOW_MAGIC + struct.pack("<III", t, h, w)
    blob += np.ascontiguousarray(u, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(v, dtype="<f4").tobytes()
    Path(path).write_bytes(blob)


def read_flow_cache(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FLOW_MAGIC:
        raise FlowError(f"not a flow cache file: {path}")
    t, h, w = struct.unpack("<III", raw[4:16])
    n = t * h * w
    if len(raw) != 16 + 8 * n:
        raise FlowError(f"flow cache has wrong length: {path}")
    u = np.frombuffer(raw, dtype="<f4", count=n, offset=16).reshape(t, h, w).astype(np.float32)
    v = np.frombuffer(raw, dtype="<f4", count=n, offset=16 + 4 * n).reshape(t, h, w).astype(np.float32)
    return u, v
