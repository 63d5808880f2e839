"""Rays, transmittance quadrature, and the samplers used by the renderer.

Distance sampling follows Beer's law exactly (homogeneous) or a
piecewise-constant-density inverse CDF (heterogeneous). Directional sampling
covers stratified uniform-sphere draws and luminance-weighted equirectangular
importance sampling; every sampler returns the analytic pdf of its own draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .rng import RngStream

FOUR_PI = 4.0 * math.pi


@dataclass
class Ray:
    """A ray origin + unit direction, both float64 3-vectors."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        norm = float(np.linalg.norm(self.direction))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"ray direction must be unit length, got |d|={norm}")

    def at(self, t):
        return self.origin + np.asarray(t)[..., None] * self.direction


@dataclass
class RaySampleSet:
    """Strictly increasing offsets with densities and quadrature weights.

    Invariant: weights.sum(-1) + residual_transmittance == 1 (up to 1e-6).
    """

    offsets: torch.Tensor  # (..., N)
    deltas: torch.Tensor  # (..., N)
    densities: torch.Tensor  # (..., N)
    weights: torch.Tensor  # (..., N)
    residual_transmittance: torch.Tensor  # (...)

    @property
    def opacity(self) -> torch.Tensor:
        return 1.0 - self.residual_transmittance


def _to_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def quadrature_weights(densities, deltas):
    """Ray-marching quadrature: w_i = T_i (1 - exp(-sigma_i delta_i)).

    Computed as differences of the transmittance ladder so that
    sum(w) + residual telescopes to 1 exactly. Returns (weights, residual).
    """
    sigma = _to_tensor(densities)
    delta = _to_tensor(deltas)
    if sigma.shape != delta.shape:
        raise ValueError("densities and deltas must have equal shapes")
    if sigma.numel() and bool((sigma < 0).any()):
        raise ValueError("densities must be nonnegative")
    if delta.numel() and bool((delta <= 0).any()):
        raise ValueError("deltas must be positive")
    tau = sigma * delta
    accum = torch.cumsum(tau, dim=-1)
    zero = torch.zeros_like(accum[..., :1])
    trans = torch.exp(-torch.cat([zero, accum], dim=-1))  # (..., N+1)
    weights = trans[..., :-1] - trans[..., 1:]
    return weights, trans[..., -1]


@dataclass
class DistanceSample:
    """Free-flight sample; `escaped` marks draws beyond the last interval.

    For interacting draws `pdf` is sigma_t(t) * T(t_1, t); for escaped draws
    it is the residual escape probability mass.
    """

    t: np.ndarray
    escaped: np.ndarray
    pdf: np.ndarray


def sample_homogeneous_distance(u, sigma_t: float, t_n: float):
    """Invert P(t) = 1 - exp(-sigma_t |t - t_n|) at u in [0, 1)."""
    if sigma_t <= 0:
        raise ValueError("sigma_t must be positive")
    u = np.asarray(u, dtype=np.float64)
    if np.any((u < 0) | (u >= 1)):
        raise ValueError("u must lie in [0, 1)")
    return t_n - np.log1p(-u) / sigma_t


def sample_heterogeneous_distance(u, sigmas, bounds) -> DistanceSample:
    """Sample pdf(t) = sigma_t(t) T(t_1, t) with piecewise-constant sigma_t.

    bounds: (N,) increasing interval edges; sigmas: (N-1,) per-interval
    densities. Draws with u past the total interaction probability escape.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    bounds = np.asarray(bounds, dtype=np.float64)
    if sigmas.size == 0 or bounds.size < 2:
        raise ValueError("need at least one interval")
    if sigmas.size != bounds.size - 1:
        raise ValueError("sigmas must have one entry per interval")
    if np.any(np.diff(bounds) <= 0):
        raise ValueError("bounds must be strictly increasing")
    if np.any(sigmas < 0):
        raise ValueError("sigmas must be nonnegative")

    u = np.asarray(u, dtype=np.float64)
    scalar = u.ndim == 0
    u = np.atleast_1d(u)

    tau = sigmas * np.diff(bounds)
    cum = np.concatenate([[0.0], np.cumsum(tau)])
    t_start = np.exp(-cum)  # transmittance at interval starts, (N,)
    cdf_start = 1.0 - t_start
    p_total = cdf_start[-1]

    escaped = u >= p_total
    idx = np.searchsorted(cdf_start[1:-1], u, side="right") if sigmas.size > 1 else np.zeros_like(u, dtype=int)
    idx = np.clip(np.asarray(idx, dtype=int), 0, sigmas.size - 1)

    sig = sigmas[idx]
    with np.errstate(divide="ignore", invalid="ignore"):
        dt = -np.log((1.0 - u) / t_start[idx]) / sig
    t = bounds[idx] + dt
    t = np.minimum(t, bounds[idx + 1])
    pdf = sig * np.exp(-sig * dt) * t_start[idx]

    t = np.where(escaped, np.inf, t)
    pdf = np.where(escaped, t_start[-1], pdf)
    if scalar:
        return DistanceSample(t[0], bool(escaped[0]), pdf[0])
    return DistanceSample(t, escaped, pdf)


def stratification_grid(m: int):
    """Near-square (rows, cols) divisor pair with rows * cols == m."""
    if m < 1:
        raise ValueError("sample count must be >= 1")
    a = int(math.isqrt(m))
    while m % a != 0:
        a -= 1
    return a, m // a


def stratified_sphere_directions(u1: np.ndarray, u2: np.ndarray, grid):
    """Map per-cell jitters (..., M) onto unit directions (..., M, 3).

    Cells tile (cos theta, phi) as a rows x cols grid in row-major order.
    """
    rows, cols = grid
    m = rows * cols
    cell = np.arange(m)
    i, j = cell // cols, cell % cols
    cos_t = -1.0 + 2.0 * (i + u1) / rows
    cos_t = np.clip(cos_t, -1.0, 1.0)
    phi = -math.pi + 2.0 * math.pi * (j + u2) / cols
    sin_t = np.sqrt(1.0 - cos_t**2)
    return np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=-1)


def sample_sphere_stratified(rng: RngStream, m: int):
    """m jittered-stratified unit directions and their pdfs (1 / 4pi each)."""
    grid = stratification_grid(m)
    u1 = rng.uniform((m,))
    u2 = rng.uniform((m,))
    dirs = stratified_sphere_directions(u1, u2, grid)
    return dirs, np.full(m, 1.0 / FOUR_PI)


def direction_to_angles(d: np.ndarray):
    """(theta, phi) of unit directions; theta in [0, pi] from +z, phi in [-pi, pi)."""
    d = np.asarray(d, dtype=np.float64)
    theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
    phi = np.arctan2(d[..., 1], d[..., 0])
    phi = np.where(phi >= math.pi, phi - 2.0 * math.pi, phi)
    return theta, phi


def angles_to_direction(theta, phi):
    sin_t = np.sin(theta)
    return np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), np.cos(theta)], axis=-1)


_LUMA = np.array([0.299, 0.587, 0.114])


class EnvmapSampler:
    """Luminance * sin(theta) importance tables for an equirectangular map.

    Sampling is continuous within texels (piecewise-constant 2D pdf); the
    returned pdf is measured in solid angle at the sampled direction.
    """

    def __init__(self, radiance: np.ndarray):
        radiance = np.asarray(radiance, dtype=np.float64)
        if radiance.ndim == 2:
            radiance = radiance[..., None]
        if radiance.ndim != 3 or radiance.shape[0] < 1 or radiance.shape[1] < 1:
            raise ValueError("radiance map must be (H, W, C) with H, W >= 1")
        if np.any(radiance < 0):
            raise ValueError("radiance must be nonnegative")
        h, w = radiance.shape[:2]
        lum = radiance @ _LUMA if radiance.shape[2] == 3 else radiance.mean(-1)
        theta_c = (np.arange(h) + 0.5) * math.pi / h
        weights = lum * np.sin(theta_c)[:, None]  # (H, W)
        total = weights.sum()
        if total <= 0:
            raise ValueError("cannot importance sample an all-zero map")
        self.shape = (h, w)
        self._mass = weights / total  # per-texel probability
        row_mass = self._mass.sum(axis=1)
        self._row_cdf = np.cumsum(row_mass)
        self._row_mass = row_mass
        with np.errstate(invalid="ignore", divide="ignore"):
            cond = np.where(row_mass[:, None] > 0, self._mass / row_mass[:, None], 1.0 / w)
        self._col_cdf = np.cumsum(cond, axis=1)

    def sample(self, u1, u2):
        """Map uniforms to directions; returns (dirs (..., 3), pdf (...))."""
        u1 = np.atleast_1d(np.asarray(u1, dtype=np.float64))
        u2 = np.atleast_1d(np.asarray(u2, dtype=np.float64))
        h, w = self.shape
        i = np.minimum(np.searchsorted(self._row_cdf, u1, side="right"), h - 1)
        lo = np.where(i > 0, self._row_cdf[i - 1], 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            fi = np.where(self._row_mass[i] > 0, (u1 - lo) / self._row_mass[i], 0.5)
        fi = np.clip(fi, 0.0, 1.0 - 1e-12)

        col_cdf = self._col_cdf[i]  # (..., W)
        j = np.minimum(_rowwise_searchsorted(col_cdf, u2), w - 1)
        clo = np.where(j > 0, np.take_along_axis(col_cdf, np.maximum(j - 1, 0)[..., None], -1)[..., 0], 0.0)
        cmass = np.take_along_axis(col_cdf, j[..., None], -1)[..., 0] - clo
        with np.errstate(invalid="ignore", divide="ignore"):
            fj = np.where(cmass > 0, (u2 - clo) / cmass, 0.5)
        fj = np.clip(fj, 0.0, 1.0 - 1e-12)

        theta = (i + fi) * math.pi / h
        phi = -math.pi + (j + fj) * 2.0 * math.pi / w
        dirs = angles_to_direction(theta, phi)
        pdf = self._pdf_texel(i, j, theta)
        return dirs, pdf

    def pdf(self, dirs: np.ndarray):
        """Solid-angle pdf the sampler would report for the given directions."""
        theta, phi = direction_to_angles(dirs)
        h, w = self.shape
        i = np.clip((theta / math.pi * h).astype(int), 0, h - 1)
        j = np.clip(((phi + math.pi) / (2.0 * math.pi) * w).astype(int), 0, w - 1)
        return self._pdf_texel(i, j, theta)

    def _pdf_texel(self, i, j, theta):
        h, w = self.shape
        texel_area = (math.pi / h) * (2.0 * math.pi / w)
        sin_t = np.maximum(np.sin(theta), 1e-12)
        return self._mass[i, j] / (texel_area * sin_t)


def _rowwise_searchsorted(cdf: np.ndarray, u: np.ndarray):
    """searchsorted of u[k] into cdf[k, :] for each row k."""
    return (cdf < u[..., None]).sum(axis=-1)


def sample_from_histogram(edges: torch.Tensor, weights: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Inverse-CDF draws from a piecewise-constant pdf over [edges_i, edges_i+1].

    edges: (..., N+1), weights: (..., N) nonnegative, u: (..., K) in [0, 1).
    Zero-mass histograms fall back to uniform over the full span.
    """
    weights = weights.clamp_min(0.0)
    total = weights.sum(-1, keepdim=True)
    uniform = (edges[..., 1:] - edges[..., :-1]) / (edges[..., -1:] - edges[..., :1])
    probs = torch.where(total > 1e-12, weights / total.clamp_min(1e-300), uniform)
    cdf = torch.cumsum(probs, dim=-1)
    zero = torch.zeros_like(cdf[..., :1])
    cdf = torch.cat([zero, cdf], dim=-1)  # (..., N+1)
    idx = torch.searchsorted(cdf[..., :-1].contiguous(), u.contiguous(), right=True) - 1
    idx = idx.clamp(0, probs.shape[-1] - 1)
    lo = torch.gather(cdf, -1, idx)
    mass = torch.gather(probs, -1, idx)
    frac = ((u - lo) / mass.clamp_min(1e-300)).clamp(0.0, 1.0)
    e_lo = torch.gather(edges, -1, idx)
    e_hi = torch.gather(edges, -1, idx + 1)
    return e_lo + frac * (e_hi - e_lo)
