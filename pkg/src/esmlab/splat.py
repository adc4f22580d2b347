"""2D Gaussian-splat scene, a differentiable alpha compositor, and its exact VJP.

Splats are composited back-to-front in index order (the last splat is on
top) over a black background. Each kernel is a Gaussian truncated smoothly to
zero at four standard deviations.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .diffcore import ContractError

_CUT_Q = 16.0                       # Mahalanobis^2 at 4 sigma
_CUT_G = float(np.exp(-0.5 * _CUT_Q))
_MIN_SCALE = 1e-4

PARAM_FIELDS = ("centers", "log_scales", "angles", "colors", "opacity_logits")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


@dataclass
class SplatScene:
    centers: np.ndarray         # (N, 2) pixel coordinates (x, y)
    log_scales: np.ndarray      # (N, 2)
    angles: np.ndarray          # (N,)
    colors: np.ndarray          # (N, C), C in {1, 3}
    opacity_logits: np.ndarray  # (N,)

    def __post_init__(self):
        n = len(self.centers)
        if n < 1:
            raise ContractError("a scene needs at least one splat")
        if (self.centers.shape != (n, 2) or self.log_scales.shape != (n, 2) or self.angles.shape != (n,)
                or self.colors.ndim != 2 or self.colors.shape[0] != n or self.colors.shape[1] not in (1, 3)
                or self.opacity_logits.shape != (n,)):
            raise ContractError("inconsistent splat field shapes")

    @property
    def n(self) -> int:
        return len(self.centers)

    @property
    def channels(self) -> int:
        return self.colors.shape[1]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "SplatScene":
        return SplatScene(**{k: v.copy() for k, v in self.as_dict().items()})

    def astype(self, dtype) -> "SplatScene":
        return SplatScene(**{k: v.astype(dtype) for k, v in self.as_dict().items()})

    def permuted(self, order) -> "SplatScene":
        return SplatScene(**{k: v[np.asarray(order)].copy() for k, v in self.as_dict().items()})


@dataclass(frozen=True)
class CameraPose:
    angle: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    zoom: float = 1.0

    def __post_init__(self):
        if not self.zoom > 0:
            raise ContractError("zoom must be positive")


IDENTITY_POSE = CameraPose()


@dataclass
class RenderCache:
    image: np.ndarray
    raw: np.ndarray             # composite before clamping, (P, C)
    side: int
    alpha: np.ndarray           # (N, P)
    kernel: np.ndarray          # (N, P), truncated Gaussian before opacity
    u1: np.ndarray              # (N, P) pixel offsets in each splat's rotated frame
    u2: np.ndarray
    inv_s2: np.ndarray          # (N, 2) 1 / (zoom * scale)^2
    cos_phi: np.ndarray
    sin_phi: np.ndarray
    behind: np.ndarray          # (C, N, P) composite before each splat
    trans: np.ndarray           # (N, P) transmittance in front of each splat
    opacity: np.ndarray
    active: np.ndarray          # (N,) bool
    skipped: int = 0
    pose: CameraPose = field(default_factory=CameraPose)


def _pixel_grid(side: int, dtype) -> np.ndarray:
    c = np.arange(side, dtype=dtype) + 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)  # (P, 2)


def _transform_centers(scene: SplatScene, pose: CameraPose, side: int) -> np.ndarray:
    c = side / 2.0
    ca, sa = np.cos(pose.angle), np.sin(pose.angle)
    rot = np.array([[ca, -sa], [sa, ca]], dtype=scene.centers.dtype)
    return pose.zoom * (scene.centers - c) @ rot.T + c + np.asarray(pose.translation, dtype=scene.centers.dtype)


def render(scene: SplatScene, pose: CameraPose = IDENTITY_POSE, side: int = 32) -> tuple[np.ndarray, RenderCache]:
    """Rasterize and composite; returns (image, cache) with image (side, side[, 3]) in [0, 1]."""
    if side < 8:
        raise ContractError("side must be >= 8")
    dt = np.result_type(scene.centers.dtype, np.float32)
    pix = np.ascontiguousarray(_pixel_grid(side, dt).T)
    means = _transform_centers(scene, pose, side)
    scale = pose.zoom * np.exp(scene.log_scales)
    active = np.all(np.isfinite(scale) & (scale > _MIN_SCALE), axis=1)
    inv_s2 = np.where(active[:, None], 1.0 / np.where(active[:, None], scale, 1.0) ** 2, 0.0)
    phi = scene.angles + pose.angle
    cp, sp = np.cos(phi), np.sin(phi)
    dx = pix[0][None, :] - means[:, 0:1]                          # (N, P)
    dy = pix[1][None, :] - means[:, 1:2]
    u1 = cp[:, None] * dx + sp[:, None] * dy
    u2 = cp[:, None] * dy - sp[:, None] * dx
    q = u1 * u1 * inv_s2[:, :1] + u2 * u2 * inv_s2[:, 1:]
    kernel = np.where(q < _CUT_Q, (np.exp(-0.5 * q) - _CUT_G) / (1.0 - _CUT_G), 0.0)
    kernel[~active] = 0.0
    opacity = sigmoid(scene.opacity_logits)
    alpha = opacity[:, None] * kernel

    n, P, C = scene.n, side * side, scene.channels
    behind = np.empty((C, n, P), dtype=dt)
    colors = scene.colors.astype(dt, copy=False)
    acc = np.zeros((P, C), dtype=dt)
    for ch in range(C):
        a = np.zeros(P, dtype=dt)
        for i in range(n):
            behind[ch, i] = a
            a = a + alpha[i] * (colors[i, ch] - a)
        acc[:, ch] = a
    # plain loop: numpy's cumprod along the splat axis is slower at this size
    trans = np.empty((n, P), dtype=dt)
    front = np.ones(P, dtype=dt)
    for i in range(n - 1, -1, -1):
        trans[i] = front
        front = front * (1.0 - alpha[i])
    image = np.clip(acc, 0.0, 1.0).reshape(side, side, C)
    if C == 1:
        image = image[..., 0]
    cache = RenderCache(image, acc, side, alpha, kernel, u1, u2, inv_s2, cp, sp,
                        behind, trans, opacity, active, int((~active).sum()), pose)
    return image, cache


def render_vjp(scene: SplatScene, cache: RenderCache, cotangent: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of <cotangent, image> with respect to every splat field."""
    if np.shape(cotangent) != cache.image.shape:
        raise ContractError(f"cotangent shape {np.shape(cotangent)} != image shape {cache.image.shape}")
    C = scene.channels
    g = np.asarray(cotangent, dtype=cache.raw.dtype).reshape(-1, C)
    g = np.where((cache.raw >= 0.0) & (cache.raw <= 1.0), g, 0.0)    # clamp passes no gradient

    d_colors = (cache.alpha * cache.trans) @ g                      # (N, C)
    behind_g = cache.behind[0] * g[:, 0]
    for ch in range(1, C):
        behind_g += cache.behind[ch] * g[:, ch]
    d_alpha = cache.trans * (scene.colors.astype(g.dtype) @ g.T - behind_g)

    o = cache.opacity
    d_logits = (d_alpha * cache.kernel).sum(axis=1) * o * (1.0 - o)
    # dkernel/dq inside the truncation radius
    inside = cache.kernel > 0.0
    dk_dq = np.where(inside, -0.5 * (cache.kernel + _CUT_G / (1.0 - _CUT_G)), 0.0)
    d_q = d_alpha * o[:, None] * dk_dq                              # (N, P)

    u1, u2 = cache.u1, cache.u2
    a1, a2 = cache.inv_s2[:, :1], cache.inv_s2[:, 1:]
    d_log_scales = np.stack([(d_q * -2.0 * u1 * u1 * a1).sum(1), (d_q * -2.0 * u2 * u2 * a2).sum(1)], axis=1)
    d_angles = (d_q * 2.0 * u1 * u2 * (a1 - a2)).sum(axis=1)
    cp, sp = cache.cos_phi[:, None], cache.sin_phi[:, None]
    gx = 2.0 * u1 * a1 * cp - 2.0 * u2 * a2 * sp
    gy = 2.0 * u1 * a1 * sp + 2.0 * u2 * a2 * cp
    d_means = -np.stack([(d_q * gx).sum(1), (d_q * gy).sum(1)], axis=1)
    pose = cache.pose
    ca, sa = np.cos(pose.angle), np.sin(pose.angle)
    rot = np.array([[ca, -sa], [sa, ca]], dtype=d_means.dtype)
    d_centers = pose.zoom * d_means @ rot

    inactive = ~cache.active
    d_log_scales[inactive] = 0.0
    return {"centers": d_centers, "log_scales": d_log_scales, "angles": d_angles,
            "colors": d_colors, "opacity_logits": d_logits}


def render_image(scene: SplatScene, pose: CameraPose = IDENTITY_POSE, side: int = 32) -> np.ndarray:
    return render(scene, pose, side)[0]


def init_scene(mode: str, n: int, rng: np.random.Generator, side: int = 32, target: np.ndarray | None = None,
               channels: int = 1, dtype=np.float32) -> SplatScene:
    """``random``: uniform centers, moderate scales, low opacity.
    ``data_fitted``: splats on the brightest pixels of ``target`` (an image in [0, 1]).
    """
    if n < 1:
        raise ContractError("N must be >= 1")
    if mode == "random":
        centers = rng.uniform(0.0, side, size=(n, 2))
        log_scales = np.log(rng.uniform(0.04, 0.08, size=(n, 2)) * side)
        angles = rng.uniform(0.0, np.pi, size=n)
        colors = rng.uniform(0.3, 0.7, size=(n, channels))
        logits = np.full(n, -2.0) + 0.1 * rng.standard_normal(n)
    elif mode == "data_fitted":
        if target is None:
            raise ContractError("data_fitted init needs a target image")
        img = np.asarray(target, dtype=np.float64)
        gray = img if img.ndim == 2 else img.mean(axis=-1)
        w = np.clip(gray.ravel(), 0.0, None) ** 2
        if w.sum() <= 0:
            w = np.ones_like(w)
        support = int((gray > 0.5 * gray.max()).sum()) or gray.size
        idx = rng.choice(gray.size, size=n, replace=n > np.count_nonzero(w), p=w / w.sum())
        ys, xs = np.divmod(idx, side)
        centers = np.stack([xs + 0.5, ys + 0.5], axis=1) + rng.uniform(-0.3, 0.3, size=(n, 2))
        radius = max(0.6, 1.2 * np.sqrt(support / (np.pi * n)))
        log_scales = np.full((n, 2), np.log(radius)) + 0.05 * rng.standard_normal((n, 2))
        angles = rng.uniform(0.0, np.pi, size=n)
        flat = img.reshape(-1, channels) if img.ndim == 3 else gray.reshape(-1, 1)
        colors = np.clip(flat[idx], 0.05, 0.95)
        if colors.shape[1] != channels:
            colors = np.repeat(colors[:, :1], channels, axis=1)
        logits = np.full(n, 0.5)
    else:
        raise ContractError(f"unknown init mode {mode!r}")
    return SplatScene(centers.astype(dtype), log_scales.astype(dtype), angles.astype(dtype),
                      colors.astype(dtype), logits.astype(dtype))
