"""Primary ray marching, the volumetric-scattering estimator, and render modes.

A primary march takes 128 stratified-uniform samples inside the posed
bounding box plus two 16-sample importance rounds drawn from the running
weight histogram. Physically based shading importance-resamples scatter
points from the final histogram, traces one bundle of secondary rays per
point (zero-crossing search + 4-sample transmittance pass), and composes
incoming light from the indirect radiance cache and the environment term.

Everything is deterministic: all randomness flows from per-ray counter-based
keys, so images are identical for any tile size or worker count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import torch

from .articulation import EMPTY_SDF, Pose, Skeleton, blended_transform, warp_query
from .cameras import Camera
from .fields import DensityModel, MaterialField, OccupancyGrid, RadianceField, build_occupancy
from .rng import fold_key, stream_uniform
from .sampling import (
    EnvmapSampler,
    FOUR_PI,
    quadrature_weights,
    sample_from_histogram,
    stratification_grid,
    stratified_sphere_directions,
)
from .shading import EnvMap, SgMixture, brdf_eval, incoming_radiance

__all__ = [
    "MODES",
    "RenderConfig",
    "Scene",
    "SecondaryTraceResult",
    "PrimaryMarch",
    "march_primary",
    "trace_secondary",
    "zero_crossing_weights",
    "render_batch",
    "render_image",
    "tonemap",
]

MODES = ("rf", "pbr", "albedo", "normal", "roughness", "avmap", "relight")

# rng stream purposes
_P_UNIFORM = 11
_P_IMPORTANCE = 12
_P_SCATTER = 13
_P_DIRS = 14
_P_SECONDARY = 15


@dataclass
class RenderConfig:
    width: int = 64
    height: int = 64
    mode: str = "pbr"
    seed: int = 0
    n_uniform: int = 128
    n_importance: int = 16
    n_importance_rounds: int = 2
    n_scatter: int = 16
    n_light_dirs: int | None = None  # default: 512 train-style, 1024 relight
    secondary_n_uniform: int = 64
    secondary_n_importance: int = 4
    secondary_near: float = 0.0
    secondary_far: float = 1.5
    aabb_pad: float = 0.1
    env_background: bool = False
    use_occupancy: bool = True
    occupancy_sigma_threshold: float = 1e-5
    tile_size: int = 2048
    secondary_chunk: int = 16384
    threads: int = 0  # 0 = one worker per cpu

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown render mode {self.mode!r}")
        for name in ("width", "height", "n_uniform", "n_importance", "n_scatter", "secondary_n_uniform", "secondary_n_importance"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.secondary_near < self.secondary_far:
            raise ValueError("secondary near must be < far")

    @property
    def light_dirs(self) -> int:
        if self.n_light_dirs is not None:
            return self.n_light_dirs
        return 1024 if self.mode == "relight" else 512


@dataclass
class SecondaryTraceResult:
    escape_transmittance: torch.Tensor  # (S,)
    indirect_rgb: torch.Tensor  # (S, 3)
    visibility: torch.Tensor  # (S,) in {0, 1}


@dataclass
class Scene:
    """Immutable-during-render bundle of fields, articulation, and lights."""

    geometry: object = None
    density_model: DensityModel = None
    material: MaterialField = None
    radiance: RadianceField = None
    skeleton: Skeleton = None
    pose: Pose = None
    sg_light: SgMixture = None
    env_map: EnvMap = None
    occupancy: OccupancyGrid = None
    _env_sampler: EnvmapSampler = None

    def articulated(self) -> bool:
        return self.skeleton is not None and self.pose is not None

    def canonical_bounds(self):
        return self.geometry.bounds()

    def posed_bounds(self, pad: float = 0.0):
        lo, hi = self.canonical_bounds()
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        if self.articulated():
            mats = self.pose.transforms.detach().cpu().numpy()
            warped = np.einsum("bij,cj->bci", mats[:, :3, :3], corners) + mats[:, None, :3, 3]
            corners = warped.reshape(-1, 3)  # LBS output lies in the convex hull of per-bone images
        return corners.min(0) - pad, corners.max(0) + pad

    def warp(self, x_o: torch.Tensor):
        """(sdf, x_c, valid) at observation points."""
        if not self.articulated():
            sdf, _ = self.geometry.evaluate(x_o)
            return sdf, x_o, torch.ones(x_o.shape[0], dtype=torch.bool)
        return warp_query(self.geometry, self.skeleton, self.pose, x_o)

    def density_at(self, x_o: torch.Tensor, need_canonical: bool = False):
        """Density at observation points; occupancy-skipped points are empty."""
        n = x_o.shape[0]
        if self.geometry is None:
            sigma = torch.zeros(n, dtype=torch.float64)
            return (sigma, x_o) if need_canonical else sigma
        if self.occupancy is not None:
            keep = torch.as_tensor(self.occupancy.occupied_at(x_o))
        else:
            keep = torch.ones(n, dtype=torch.bool)
        sdf = torch.full((n,), EMPTY_SDF, dtype=torch.float64)
        x_c = x_o
        if bool(keep.any()):
            sub_sdf, sub_xc, _ = self.warp(x_o[keep])
            sdf = torch.masked_scatter(sdf, keep, sub_sdf)
            if need_canonical:
                x_c = x_o.clone()
                x_c[keep] = sub_xc
        sigma = self.density_model.density(sdf)
        return (sigma, x_c) if need_canonical else sigma

    def light(self, relight: bool):
        if relight:
            if self.env_map is None:
                raise ValueError("relighting requires an environment map")
            return self.env_map
        if self.sg_light is not None:
            return self.sg_light
        if self.env_map is not None:
            return self.env_map
        raise ValueError("scene has no light source")

    def env_sampler(self) -> EnvmapSampler:
        if self._env_sampler is None:
            self._env_sampler = EnvmapSampler(self.env_map.data)
        return self._env_sampler

    def ensure_occupancy(self, config: RenderConfig):
        if not config.use_occupancy or self.geometry is None or self.occupancy is not None:
            return
        lo, hi = self.posed_bounds(config.aabb_pad)

        def posed_sdf(points):
            sdf, _, _ = self.warp(points)
            return sdf

        self.occupancy = build_occupancy(
            posed_sdf,
            float(self.density_model.beta),
            (lo, hi),
            sigma_threshold=config.occupancy_sigma_threshold,
        )


def ray_box_intersection(origins: torch.Tensor, dirs: torch.Tensor, lo, hi):
    """(t_near, t_far, hit) of rays against an axis-aligned box."""
    lo = torch.as_tensor(np.asarray(lo), dtype=torch.float64)
    hi = torch.as_tensor(np.asarray(hi), dtype=torch.float64)
    safe = torch.where(dirs.abs() > 1e-12, dirs, torch.full_like(dirs, 1e-12))
    inv = 1.0 / safe
    ta = (lo - origins) * inv
    tb = (hi - origins) * inv
    t_near = torch.minimum(ta, tb).amax(-1).clamp_min(0.0)
    t_far = torch.maximum(ta, tb).amin(-1)
    hit = t_far > t_near + 1e-9
    return t_near, t_far, hit


@dataclass
class PrimaryMarch:
    offsets: torch.Tensor  # (R, N)
    deltas: torch.Tensor  # (R, N)
    sigmas: torch.Tensor  # (R, N)
    weights: torch.Tensor  # (R, N)
    residual: torch.Tensor  # (R,)
    points_canonical: torch.Tensor  # (R, N, 3)
    t_far: torch.Tensor  # (R,)
    hit: torch.Tensor  # (R,) bool

    @property
    def opacity(self) -> torch.Tensor:
        return 1.0 - self.residual


def march_primary(origins: torch.Tensor, dirs: torch.Tensor, scene: Scene, config: RenderConfig, keys: np.ndarray) -> PrimaryMarch:
    """128 uniform + two 16-sample importance rounds, all warped to canonical."""
    n_rays = origins.shape[0]
    if scene.geometry is None:
        n = config.n_uniform + config.n_importance_rounds * config.n_importance
        zeros = torch.zeros((n_rays, n), dtype=torch.float64)
        return PrimaryMarch(
            offsets=zeros.clone(), deltas=torch.full_like(zeros, 1e-12), sigmas=zeros.clone(),
            weights=zeros.clone(), residual=torch.ones(n_rays, dtype=torch.float64),
            points_canonical=torch.zeros((n_rays, n, 3), dtype=torch.float64),
            t_far=torch.ones(n_rays, dtype=torch.float64), hit=torch.zeros(n_rays, dtype=torch.bool),
        )

    lo, hi = scene.posed_bounds(config.aabb_pad)
    t_near, t_far, hit = ray_box_intersection(origins, dirs, lo, hi)
    t_far = torch.where(hit, t_far, t_near + 1.0)  # dummy unit span for misses
    span = t_far - t_near

    jitter = torch.as_tensor(stream_uniform(fold_key(keys, _P_UNIFORM), config.n_uniform))
    steps = (torch.arange(config.n_uniform, dtype=torch.float64) + jitter) / config.n_uniform
    offsets = t_near[:, None] + steps * span[:, None]

    def eval_sigma(t):
        pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        sigma, x_c = scene.density_at(pts.reshape(-1, 3), need_canonical=True)
        return sigma.reshape(t.shape), x_c.reshape(*t.shape, 3)

    sigmas, points = eval_sigma(offsets)

    for round_idx in range(config.n_importance_rounds):
        with torch.no_grad():
            deltas = _deltas_to(offsets, t_far)
            w, _ = quadrature_weights(sigmas, deltas)
        u = torch.as_tensor(stream_uniform(fold_key(keys, _P_IMPORTANCE, round_idx), config.n_importance))
        edges = torch.cat([offsets, t_far[:, None]], dim=-1)
        t_new = sample_from_histogram(edges.detach(), w, u)
        s_new, p_new = eval_sigma(t_new)
        offsets = torch.cat([offsets, t_new], dim=-1)
        sigmas = torch.cat([sigmas, s_new], dim=-1)
        points = torch.cat([points, p_new], dim=1)
        offsets, order = torch.sort(offsets, dim=-1)
        sigmas = torch.gather(sigmas, -1, order)
        points = torch.gather(points, 1, order[..., None].expand(-1, -1, 3))

    deltas = _deltas_to(offsets, t_far)
    weights, residual = quadrature_weights(sigmas, deltas)
    weights = torch.where(hit[:, None], weights, torch.zeros_like(weights))
    residual = torch.where(hit, residual, torch.ones_like(residual))
    return PrimaryMarch(offsets, deltas, sigmas, weights, residual, points, t_far, hit)


def _deltas_to(offsets: torch.Tensor, t_end: torch.Tensor) -> torch.Tensor:
    d = torch.diff(offsets, dim=-1)
    last = (t_end[..., None] - offsets[..., -1:]).clamp_min(1e-12)
    return torch.cat([d.clamp_min(1e-12), last], dim=-1)


def zero_crossing_weights(sdf: torch.Tensor, sigmas: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """Importance weights after the entering-crossing search (vectorized).

    sdf, sigmas: (S, N); deltas: (S, N-1) or (N-1,). Scans adjacent pairs
    0..N-3 (the search never checks the final pair) for the first iso-surface
    *hit* (sdf going + to -) and accumulates w_i = (1 - exp(-sigma_i delta_i)) * T
    from that index on; with no hit, only the final sample accumulates.

    Counting only entering crossings is what makes the search behave like
    sphere tracing: scatter points sit a few beta inside the level set, so
    their own exit crossing must not register as an occluder (a furnace test
    would otherwise lose half its energy to self-shadowing).
    Bit-equal to the sequential reference: identical exp/product chains.
    """
    n = sdf.shape[-1]
    entering = (sdf[..., : n - 2] > 0) & (sdf[..., 1 : n - 1] < 0)  # (S, N-2)
    start = ((~entering).cumprod(dim=-1)).sum(dim=-1)  # first hit index, N-2 if none
    start = torch.minimum(start, torch.full_like(start, n - 2))
    mask = torch.arange(n - 1)[None, :] >= start[:, None]

    att = torch.exp(-sigmas[..., : n - 1] * deltas)
    att_masked = torch.where(mask, att, torch.ones_like(att))
    accum = torch.cumprod(att_masked, dim=-1)
    trans = torch.cat([torch.ones_like(accum[..., :1]), accum[..., :-1]], dim=-1)
    return (1.0 - att) * trans * mask.to(att.dtype)


def trace_secondary(
    origins: torch.Tensor,
    dirs: torch.Tensor,
    scene: Scene,
    config: RenderConfig,
    keys: np.ndarray,
    relight: bool = False,
    need_radiance: bool = True,
) -> SecondaryTraceResult:
    """Zero-crossing search over 64 uniform offsets, then a 4-sample pass."""
    n_rays = origins.shape[0]
    n_u = config.secondary_n_uniform
    grid = torch.linspace(config.secondary_near, config.secondary_far, n_u, dtype=torch.float64)
    delta_u = torch.diff(grid)

    with torch.no_grad():
        pts = origins[:, None, :] + grid[None, :, None] * dirs[:, None, :]
        if scene.geometry is None:
            sdf_u = torch.full((n_rays, n_u), EMPTY_SDF, dtype=torch.float64)
        elif scene.occupancy is not None:
            flat = pts.reshape(-1, 3)
            keep = torch.as_tensor(scene.occupancy.occupied_at(flat))
            sdf_u = torch.full((n_rays * n_u,), EMPTY_SDF, dtype=torch.float64)
            if bool(keep.any()):
                sub, _, _ = scene.warp(flat[keep])
                sdf_u[keep] = sub
            sdf_u = sdf_u.reshape(n_rays, n_u)
        else:
            sdf_u, _, _ = scene.warp(pts.reshape(-1, 3))
            sdf_u = sdf_u.reshape(n_rays, n_u)
        sigma_u = scene.density_model.density(sdf_u)
        w_u = zero_crossing_weights(sdf_u, sigma_u, delta_u[None, :])

    u = torch.as_tensor(stream_uniform(keys, config.secondary_n_importance))
    t_imp = sample_from_histogram(grid[None, :].expand(n_rays, -1), w_u, u)
    t_imp, _ = torch.sort(t_imp, dim=-1)

    pts_imp = origins[:, None, :] + t_imp[..., None] * dirs[:, None, :]
    sigma_imp, x_c = scene.density_at(pts_imp.reshape(-1, 3), need_canonical=True)
    sigma_imp = sigma_imp.reshape(n_rays, -1)
    deltas = _deltas_to(t_imp, torch.full((n_rays,), config.secondary_far, dtype=torch.float64))
    w_imp, t_esc = quadrature_weights(sigma_imp, deltas)

    if need_radiance and not relight and scene.radiance is not None:
        emission = scene.radiance.evaluate(x_c).reshape(n_rays, -1, 3)
        c_rf = (w_imp[..., None] * emission).sum(dim=1)
    else:
        c_rf = torch.zeros((n_rays, 3), dtype=torch.float64)
    visibility = (t_esc > 0.5).to(torch.float64)
    return SecondaryTraceResult(t_esc, c_rf, visibility)


def _scatter_points(march: PrimaryMarch, origins, dirs, config: RenderConfig, keys):
    """Importance-resample scatter offsets and redo quadrature at them."""
    u = torch.as_tensor(stream_uniform(fold_key(keys, _P_SCATTER), config.n_scatter))
    edges = torch.cat([march.offsets, march.t_far[:, None]], dim=-1).detach()
    t_sc = sample_from_histogram(edges, march.weights.detach(), u)
    t_sc, _ = torch.sort(t_sc, dim=-1)
    return t_sc, origins[:, None, :] + t_sc[..., None] * dirs[:, None, :]


def _sample_light_dirs(scene: Scene, config: RenderConfig, keys, n_rays: int, m_total: int, relight: bool):
    """(dirs (R, M, 3) np, pdf (R, M) np) in the mode's strategy."""
    base = fold_key(keys, _P_DIRS)
    if relight:
        u = stream_uniform(base, 2 * m_total)
        sampler = scene.env_sampler()
        dirs, pdf = sampler.sample(u[:, :m_total].ravel(), u[:, m_total:].ravel())
        return dirs.reshape(n_rays, m_total, 3), pdf.reshape(n_rays, m_total)
    grid = stratification_grid(m_total)
    u1 = stream_uniform(fold_key(base, 1), m_total)
    u2 = stream_uniform(fold_key(base, 2), m_total)
    dirs = stratified_sphere_directions(u1, u2, grid)
    return dirs, np.full((n_rays, m_total), 1.0 / FOUR_PI)


def _observation_normals(scene: Scene, x_c: torch.Tensor):
    """Shading normals: canonical SDF gradient rotated by the blended bones."""
    _, grad = scene.geometry.evaluate(x_c)
    norm = grad.norm(dim=-1)
    n_c = grad / norm.clamp_min(1e-12)[:, None]
    ok = norm > 1e-8
    if scene.articulated():
        with torch.no_grad():
            rot = blended_transform(scene.skeleton, scene.pose, x_c)[:, :3, :3]
        n_o = (rot @ n_c[..., None])[..., 0]
        n_o = n_o / n_o.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return n_o, ok
    return n_c, ok


def _render_scatter(origins, dirs, scene, config, keys, march, relight, want_stats=False, want_visibility=False):
    """Shared core of the pbr/relight/avmap modes; background rays are skipped."""
    n_total = origins.shape[0]
    out = {}
    live = march.hit.nonzero(as_tuple=True)[0]
    if live.numel() == 0:
        if want_visibility:
            out["av"] = torch.zeros(n_total, dtype=torch.float64)
        else:
            out["color"] = torch.zeros((n_total, 3), dtype=torch.float64)
            if want_stats:
                out["stderr"] = torch.zeros((n_total, 3), dtype=torch.float64)
        return out

    live_np = live.numpy()
    origins, dirs, keys = origins[live], dirs[live], keys[live_np]
    sub = PrimaryMarch(
        march.offsets[live], march.deltas[live], march.sigmas[live], march.weights[live],
        march.residual[live], march.points_canonical[live], march.t_far[live], march.hit[live],
    )
    n_rays = live.numel()
    k = config.n_scatter
    m_per = max(config.light_dirs // k, 1)
    m_total = k * m_per

    t_sc, pts_sc = _scatter_points(sub, origins, dirs, config, keys)
    sigma_sc, x_c = scene.density_at(pts_sc.reshape(-1, 3), need_canonical=True)
    sigma_sc = sigma_sc.reshape(n_rays, k)
    deltas_sc = _deltas_to(t_sc, sub.t_far)
    w_sc, _ = quadrature_weights(sigma_sc, deltas_sc)

    dirs_l, pdf_l = _sample_light_dirs(scene, config, keys, n_rays, m_total, relight)
    dirs_l_t = torch.as_tensor(dirs_l)

    sec_origins = pts_sc[:, :, None, :].expand(n_rays, k, m_per, 3).reshape(-1, 3)
    sec_dirs = dirs_l_t.reshape(n_rays, k, m_per, 3).reshape(-1, 3)
    sec_keys = fold_key(keys[:, None], _P_SECONDARY, np.arange(m_total)[None, :]).reshape(-1)

    chunks = []
    for start in range(0, sec_origins.shape[0], config.secondary_chunk):
        sl = slice(start, start + config.secondary_chunk)
        chunks.append(
            trace_secondary(
                sec_origins[sl], sec_dirs[sl], scene, config, sec_keys[sl],
                relight=relight, need_radiance=not want_visibility,
            )
        )
    t_esc = torch.cat([c.escape_transmittance for c in chunks])
    c_rf = torch.cat([c.indirect_rgb for c in chunks])
    vis = torch.cat([c.visibility for c in chunks])

    if want_visibility:
        av = torch.zeros(n_total, dtype=torch.float64)
        av[live] = 2.0 * vis.reshape(n_rays, m_total).mean(dim=-1)
        out["av"] = av
        return out

    light = scene.light(relight)
    li = incoming_radiance(c_rf, t_esc, light, dirs_l.reshape(-1, 3), relight=relight)

    alb, rough, metal = scene.material.evaluate(x_c)
    n_obs, n_ok = _observation_normals(scene, x_c)

    def per_point(t):  # (R*K, ...) -> (R*K*m_per, ...)
        return t.reshape(n_rays, k, 1, *t.shape[1:]).expand(n_rays, k, m_per, *t.shape[1:]).reshape(-1, *t.shape[1:])

    omega_o = (-dirs)[:, None, None, :].expand(n_rays, k, m_per, 3).reshape(-1, 3)
    f = brdf_eval(
        omega_o, sec_dirs, per_point(n_obs),
        per_point(alb), per_point(rough), per_point(metal),
        specular=scene.material.specular,
    )
    f = torch.where(per_point(n_ok)[:, None], f, torch.zeros_like(f))

    pdf = torch.as_tensor(pdf_l).reshape(-1)
    inv_pdf = torch.where(pdf > 1e-12, 1.0 / pdf.clamp_min(1e-300), torch.zeros_like(pdf))
    g = (f * li * inv_pdf[:, None]).reshape(n_rays, k, m_per, 3)  # per-direction integrand
    l_s = g.mean(dim=2)  # (R, K, 3)
    color = torch.zeros((n_total, 3), dtype=torch.float64)
    color = torch.index_put(color, (live,), (w_sc[..., None] * l_s).sum(dim=1))
    out["color"] = color

    if want_stats:
        s = (w_sc[..., None, None] * g * k).reshape(n_rays, m_total, 3)
        mean = s.mean(dim=1)
        var = (s - mean[:, None, :]).pow(2).sum(dim=1) / max(m_total - 1, 1) / m_total
        stderr = torch.zeros((n_total, 3), dtype=torch.float64)
        stderr[live] = var.sqrt()
        out["stderr"] = stderr
    return out


def render_batch(origins, dirs, scene: Scene, config: RenderConfig, keys: np.ndarray, want_stats: bool = False) -> dict:
    """Render a batch of rays in the configured mode; returns torch tensors."""
    origins = origins if isinstance(origins, torch.Tensor) else torch.as_tensor(origins, dtype=torch.float64)
    dirs = dirs if isinstance(dirs, torch.Tensor) else torch.as_tensor(dirs, dtype=torch.float64)
    march = march_primary(origins, dirs, scene, config, keys)
    out = {"alpha": march.opacity, "march": march}
    mode = config.mode
    n_rays = origins.shape[0]

    if scene.geometry is None:
        out["color"] = torch.zeros(n_rays if mode in ("avmap", "roughness") else (n_rays, 3), dtype=torch.float64)
        if mode == "avmap":
            out["av"] = out.pop("color")
        return out

    if mode == "rf":
        emission = scene.radiance.evaluate(march.points_canonical.reshape(-1, 3)).reshape(*march.weights.shape, 3)
        out["color"] = (march.weights[..., None] * emission).sum(dim=1)
    elif mode == "albedo":
        alb, _, _ = scene.material.evaluate(march.points_canonical.reshape(-1, 3))
        out["color"] = (march.weights[..., None] * alb.reshape(*march.weights.shape, 3)).sum(dim=1)
    elif mode == "roughness":
        _, rough, _ = scene.material.evaluate(march.points_canonical.reshape(-1, 3))
        out["color"] = (march.weights * rough.reshape(march.weights.shape)).sum(dim=1)
    elif mode == "normal":
        n_obs, ok = _observation_normals(scene, march.points_canonical.reshape(-1, 3))
        n_obs = torch.where(ok[:, None], n_obs, torch.zeros_like(n_obs))
        acc = (march.weights[..., None] * n_obs.reshape(*march.weights.shape, 3)).sum(dim=1)
        out["color"] = acc / acc.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    elif mode in ("pbr", "relight"):
        res = _render_scatter(origins, dirs, scene, config, keys, march, relight=(mode == "relight"), want_stats=want_stats)
        out.update(res)
        if config.env_background:
            bg = scene.light(mode == "relight").evaluate(dirs)
            out["color"] = out["color"] + march.residual[:, None] * bg
    elif mode == "avmap":
        res = _render_scatter(origins, dirs, scene, config, keys, march, relight=False, want_visibility=True)
        out.update(res)
    return out


def tonemap(linear) -> np.ndarray:
    """Clip to [0, 1] first, then gamma-correct with 1/2.2."""
    arr = np.asarray(linear, dtype=np.float64)
    return np.clip(arr, 0.0, 1.0) ** (1.0 / 2.2)


@dataclass
class ImageRender:
    color: np.ndarray  # (H, W, 3) or (H, W) for scalar modes
    alpha: np.ndarray  # (H, W)
    stderr: np.ndarray = None


def resolve_threads(threads: int) -> int:
    if threads and threads > 0:
        return threads
    env = os.environ.get("SCATTER_AVATAR_THREADS", "")
    if env.strip():
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def render_image(scene: Scene, config: RenderConfig, camera: Camera, want_stats: bool = False) -> ImageRender:
    """Full-frame render, tiled over a worker pool; byte-stable for any pool size."""
    torch.set_num_threads(1)
    scene.ensure_occupancy(config)
    h, w = config.height, config.width
    origins, dirs = camera.all_rays()
    pixel_ids = np.arange(h * w, dtype=np.int64)
    keys = fold_key(config.seed, pixel_ids)

    scalar_mode = config.mode in ("avmap", "roughness")
    color = np.zeros((h * w,) if scalar_mode else (h * w, 3))
    alpha = np.zeros(h * w)
    stderr = np.zeros((h * w, 3)) if want_stats else None

    def run_tile(start):
        sl = slice(start, min(start + config.tile_size, h * w))
        with torch.no_grad():
            out = render_batch(origins[sl], dirs[sl], scene, config, keys[sl], want_stats=want_stats)
        return sl, out

    starts = range(0, h * w, config.tile_size)
    n_workers = resolve_threads(config.threads)
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run_tile, starts))
    else:
        results = [run_tile(s) for s in starts]

    for sl, out in results:
        value = out.get("color", out.get("av"))
        color[sl] = value.detach().cpu().numpy()
        alpha[sl] = out["alpha"].detach().cpu().numpy()
        if want_stats and "stderr" in out:
            stderr[sl] = out["stderr"].detach().cpu().numpy()

    color = color.reshape((h, w) if scalar_mode else (h, w, 3))
    return ImageRender(color, alpha.reshape(h, w), stderr.reshape(h, w, 3) if want_stats else None)
