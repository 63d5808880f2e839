"""Reflectance and environment lighting.

The BRDF is the simplified Disney form: Lambertian diffuse plus a single
GGX specular lobe with a base-2 spherical-Gaussian Fresnel interpolation and
Schlick-GGX shadowing. Environment light is either a trainable mixture of
spherical Gaussians (fixed Fibonacci axes) or an equirectangular map.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from .fields import ROUGHNESS_MIN
from .sampling import direction_to_angles

__all__ = [
    "brdf_eval",
    "SgMixture",
    "sg_eval",
    "EnvMap",
    "envmap_eval",
    "incoming_radiance",
    "fibonacci_sphere",
]

_COS_EPS = 1e-6


def _dot(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(-1)


def brdf_eval(omega_o, omega_i, normal, albedo, roughness, metallic, specular: bool = True) -> torch.Tensor:
    """Reflectance density (N, 3), already multiplied by max(n . omega_i, 0).

    omega_o points toward the camera, omega_i toward the light; both unit.
    Backfacing view directions (n . omega_o <= 0) return zero.
    """
    n_o = _dot(normal, omega_o)
    n_i = _dot(normal, omega_i)
    cos_i = n_i.clamp_min(0.0)

    value = (1.0 - metallic)[..., None] * albedo / math.pi
    if specular:
        half = omega_o + omega_i
        half = half / half.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        o_h = _dot(omega_o, half)
        n_h = _dot(normal, half)
        f0 = 0.04 * (1.0 - metallic)[..., None] + albedo * metallic[..., None]
        fresnel = f0 + (1.0 - f0) * torch.exp2((-5.55473 * o_h - 6.98316) * o_h)[..., None]
        r = roughness.clamp(ROUGHNESS_MIN, 1.0)
        r2 = r * r
        dist = r2 / (math.pi * (n_h * n_h * (r2 - 1.0) + 1.0).pow(2).clamp_min(_COS_EPS))
        k = (r + 1.0) ** 2 / 8.0
        g1_o = n_o / (n_o * (1.0 - k) + k).clamp_min(_COS_EPS)
        g1_i = cos_i / (cos_i * (1.0 - k) + k).clamp_min(_COS_EPS)
        denom = (4.0 * n_o * n_i).clamp_min(_COS_EPS)
        value = value + fresnel * (dist * g1_o * g1_i / denom)[..., None]

    value = value * cos_i[..., None]
    return torch.where((n_o > 0.0)[..., None], value, torch.zeros_like(value))


def fibonacci_sphere(n: int) -> np.ndarray:
    """n near-uniform unit directions from the golden-angle spiral."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    s = np.sqrt(1.0 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


class SgMixture:
    """Sum of lobes amplitude * exp(sharpness * (d . axis - 1))."""

    def __init__(self, axes, sharpness, amplitudes):
        self.axes = _tensor(axes).reshape(-1, 3)
        self.sharpness = _tensor(sharpness).reshape(-1)
        self.amplitudes = _tensor(amplitudes).reshape(-1, 3)
        if not (self.axes.shape[0] == self.sharpness.shape[0] == self.amplitudes.shape[0]):
            raise ValueError("lobe parameter counts disagree")

    @classmethod
    def constant(cls, value, n_lobes: int = 64) -> "SgMixture":
        """Exact fit of a constant radiance: zero sharpness, split amplitude."""
        value = np.broadcast_to(np.asarray(value, dtype=np.float64), 3)
        axes = fibonacci_sphere(n_lobes)
        amps = np.tile(value / n_lobes, (n_lobes, 1))
        return cls(axes, np.zeros(n_lobes), amps)

    @classmethod
    def random(cls, rng, n_lobes: int = 64, max_sharpness: float = 30.0, max_amplitude: float = 1.0) -> "SgMixture":
        axes = fibonacci_sphere(n_lobes)
        lam = rng.uniform((n_lobes,)) * max_sharpness
        amp = rng.uniform((n_lobes, 3)) * max_amplitude
        return cls(axes, lam, amp)

    def evaluate(self, dirs) -> torch.Tensor:
        d = _tensor(dirs).reshape(-1, 3)
        lam = torch.relu(self.sharpness)
        amp = torch.relu(self.amplitudes)
        lobes = torch.exp(lam[None, :] * (d @ self.axes.T - 1.0))  # (N, K)
        return lobes @ amp

    def parameters(self):
        return [self.sharpness, self.amplitudes]

    def to_json(self) -> str:
        return json.dumps(
            {
                "axes": self.axes.detach().tolist(),
                "sharpness": self.sharpness.detach().tolist(),
                "amplitudes": self.amplitudes.detach().tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SgMixture":
        data = json.loads(text)
        return cls(np.array(data["axes"]), np.array(data["sharpness"]), np.array(data["amplitudes"]))


def sg_eval(mixture: SgMixture, dirs) -> torch.Tensor:
    return mixture.evaluate(dirs)


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


class EnvMap:
    """Equirectangular radiance: row 0 is theta=0 (+z), columns span phi=[-pi, pi)."""

    def __init__(self, data: np.ndarray):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError("environment map must be (H, W, 3)")
        if np.any(data < 0):
            raise ValueError("environment radiance must be nonnegative")
        self.data = data

    @property
    def shape(self):
        return self.data.shape[:2]

    def evaluate(self, dirs) -> torch.Tensor:
        """Bilinear lookup (N, 3); exact poles return the boundary-row average."""
        d = np.asarray(dirs.detach().cpu().numpy() if isinstance(dirs, torch.Tensor) else dirs, dtype=np.float64)
        d = d.reshape(-1, 3)
        theta, phi = direction_to_angles(d)
        h, w = self.shape
        u = theta / math.pi * h - 0.5
        v = (phi + math.pi) / (2.0 * math.pi) * w - 0.5

        i0 = np.floor(u).astype(int)
        fu = u - i0
        j0 = np.floor(v).astype(int)
        fv = v - j0
        i0c = np.clip(i0, 0, h - 1)
        i1c = np.clip(i0 + 1, 0, h - 1)
        j0w = j0 % w
        j1w = (j0 + 1) % w

        out = (
            self.data[i0c, j0w] * ((1 - fu) * (1 - fv))[:, None]
            + self.data[i0c, j1w] * ((1 - fu) * fv)[:, None]
            + self.data[i1c, j0w] * (fu * (1 - fv))[:, None]
            + self.data[i1c, j1w] * (fu * fv)[:, None]
        )

        at_top = d[:, 2] >= 1.0 - 1e-15
        at_bottom = d[:, 2] <= -1.0 + 1e-15
        if at_top.any():
            out[at_top] = self.data[0].mean(axis=0)
        if at_bottom.any():
            out[at_bottom] = self.data[-1].mean(axis=0)
        return torch.as_tensor(out)

    def scaled(self, factor: float) -> "EnvMap":
        return EnvMap(self.data * float(factor))


def envmap_eval(env: EnvMap, dirs) -> torch.Tensor:
    return env.evaluate(dirs)


def incoming_radiance(indirect_rgb, escape_transmittance, env, dirs, relight: bool = False) -> torch.Tensor:
    """L_i = C_rf + T_escape * Env(d); relighting drops the indirect term."""
    env_val = env.evaluate(dirs)
    t = escape_transmittance if isinstance(escape_transmittance, torch.Tensor) else torch.as_tensor(escape_transmittance, dtype=torch.float64)
    out = t[..., None] * env_val
    if not relight:
        ind = indirect_rgb if isinstance(indirect_rgb, torch.Tensor) else torch.as_tensor(indirect_rgb, dtype=torch.float64)
        out = out + ind
    return out
