"""Canonical-space fields: geometry, density conversion, materials, occupancy.

Geometry is either an analytic primitive tree (exact distances, closed-form
gradients) or a dense voxel grid with trilinear interpolation and the
matching per-cell analytic gradient. Material/radiance grids store raw
unconstrained parameters; values are squashed into range on evaluation so
that optimization never needs projection steps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

__all__ = [
    "DegenerateGradientError",
    "SphereSdf",
    "CapsuleSdf",
    "RoundedBoxSdf",
    "SmoothUnionSdf",
    "GridSdf",
    "sdf_eval",
    "sdf_normal",
    "DensityModel",
    "MaterialField",
    "RadianceField",
    "OccupancyGrid",
    "build_occupancy",
    "trilinear",
    "hardsig",
    "inverse_hardsig",
    "save_arrays",
    "load_arrays",
]

ROUGHNESS_MIN = 0.01


class DegenerateGradientError(RuntimeError):
    """Raised when a normal is requested where the SDF gradient vanishes."""


def _pts(x) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=torch.float64)
    return t.reshape(-1, 3) if t.ndim == 1 else t


# ---------------------------------------------------------------------------
# trilinear voxel interpolation (values live at voxel centers)
# ---------------------------------------------------------------------------


def _grid_coords(values: torch.Tensor, bounds, pts: torch.Tensor):
    lo = torch.as_tensor(np.asarray(bounds[0]), dtype=torch.float64)
    hi = torch.as_tensor(np.asarray(bounds[1]), dtype=torch.float64)
    res = torch.tensor(values.shape[:3], dtype=torch.float64)
    cell = (hi - lo) / res
    u = (pts - lo) / cell - 0.5  # continuous voxel-center coordinates
    u = torch.clamp(u, torch.zeros(3, dtype=torch.float64), res - 1.0)
    i0 = torch.clamp(u.floor(), max=res - 2.0).clamp(min=0.0)
    f = u - i0
    return i0.long(), f, cell


def _gather_corners(values: torch.Tensor, i0: torch.Tensor):
    x, y, z = values.shape[:3]
    flat = values.reshape(x * y * z, -1)  # (XYZ, C)
    base = (i0[:, 0] * y + i0[:, 1]) * z + i0[:, 2]
    corners = []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corners.append(flat[base + (dx * y + dy) * z + dz])
    return corners  # 8 x (N, C), ordered (dx, dy, dz) binary


def trilinear(values: torch.Tensor, bounds, pts, with_gradient: bool = False):
    """Interpolate a (X, Y, Z[, C]) grid at pts (N, 3); clamps at the faces.

    With `with_gradient`, also returns the in-cell spatial gradient (N, C, 3)
    (1-channel grids return (N, 3)). Both outputs are differentiable with
    respect to `values`.
    """
    squeeze = values.ndim == 3
    vals = values[..., None] if squeeze else values
    pts = _pts(pts)
    i0, f, cell = _grid_coords(vals, bounds, pts)
    c = _gather_corners(vals, i0)
    fx, fy, fz = (f[:, k : k + 1] for k in range(3))

    # collapse x, then y, then z
    c00 = c[0] + (c[4] - c[0]) * fx
    c01 = c[1] + (c[5] - c[1]) * fx
    c10 = c[2] + (c[6] - c[2]) * fx
    c11 = c[3] + (c[7] - c[3]) * fx
    c0 = c00 + (c10 - c00) * fy
    c1 = c01 + (c11 - c01) * fy
    out = c0 + (c1 - c0) * fz

    if not with_gradient:
        return out[..., 0] if squeeze else out

    gx = (c[4] - c[0]) + ((c[6] - c[2]) - (c[4] - c[0])) * fy
    gx = gx + (((c[5] - c[1]) + ((c[7] - c[3]) - (c[5] - c[1])) * fy) - gx) * fz
    dy0 = (c[2] - c[0]) + ((c[6] - c[4]) - (c[2] - c[0])) * fx
    dy1 = (c[3] - c[1]) + ((c[7] - c[5]) - (c[3] - c[1])) * fx
    gy = dy0 + (dy1 - dy0) * fz
    gz = c1 - c0
    grad = torch.stack([gx, gy, gz], dim=-1) / cell  # (N, C, 3)
    if squeeze:
        return out[..., 0], grad[:, 0, :]
    return out, grad


# ---------------------------------------------------------------------------
# analytic signed distance primitives
# ---------------------------------------------------------------------------


class SphereSdf:
    def __init__(self, center, radius: float):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def evaluate(self, x):
        x = _pts(x)
        q = x - torch.as_tensor(self.center)
        r = q.norm(dim=-1)
        grad = q / r.clamp_min(1e-12)[:, None]
        return r - self.radius, grad

    def bounds(self):
        return self.center - self.radius, self.center + self.radius


class CapsuleSdf:
    def __init__(self, a, b, radius: float):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.radius = float(radius)

    def evaluate(self, x):
        x = _pts(x)
        a = torch.as_tensor(self.a)
        ba = torch.as_tensor(self.b - self.a)
        pa = x - a
        h = ((pa @ ba) / (ba @ ba)).clamp(0.0, 1.0)
        q = pa - h[:, None] * ba
        r = q.norm(dim=-1)
        grad = q / r.clamp_min(1e-12)[:, None]
        return r - self.radius, grad

    def bounds(self):
        lo = np.minimum(self.a, self.b) - self.radius
        hi = np.maximum(self.a, self.b) + self.radius
        return lo, hi


class RoundedBoxSdf:
    def __init__(self, center, half_extents, radius: float = 0.0):
        self.center = np.asarray(center, dtype=np.float64)
        self.half_extents = np.asarray(half_extents, dtype=np.float64)
        self.radius = float(radius)

    def evaluate(self, x):
        x = _pts(x)
        p = x - torch.as_tensor(self.center)
        q = p.abs() - torch.as_tensor(self.half_extents)
        outside = q.clamp_min(0.0)
        d_out = outside.norm(dim=-1)
        inner_max = q.max(dim=-1)
        d_in = inner_max.values.clamp_max(0.0)
        d = d_out + d_in - self.radius

        sign = torch.where(p >= 0, 1.0, -1.0)
        g_out = sign * outside / d_out.clamp_min(1e-12)[:, None]
        onehot = torch.nn.functional.one_hot(inner_max.indices, 3).to(torch.float64)
        g_in = sign * onehot
        grad = torch.where((d_out > 0)[:, None], g_out, g_in)
        return d, grad

    def bounds(self):
        r = self.half_extents + self.radius
        return self.center - r, self.center + r


class SmoothUnionSdf:
    """Polynomial smooth-min union; exact min when blend radius k == 0."""

    def __init__(self, children, k: float = 0.0):
        if not children:
            raise ValueError("smooth union needs at least one child")
        self.children = list(children)
        self.k = float(k)

    def evaluate(self, x):
        x = _pts(x)
        d, g = self.children[0].evaluate(x)
        for child in self.children[1:]:
            d2, g2 = child.evaluate(x)
            d, g = _smooth_min(d, g, d2, g2, self.k)
        return d, g

    def bounds(self):
        los, his = zip(*(c.bounds() for c in self.children))
        return np.min(los, axis=0), np.max(his, axis=0)


def _smooth_min(a, ga, b, gb, k: float):
    if k <= 0.0:
        take_a = (a <= b)[:, None]
        return torch.minimum(a, b), torch.where(take_a, ga, gb)
    h = torch.clamp(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    d = b + (a - b) * h - k * h * (1.0 - h)
    inside = ((h > 0) & (h < 1)).to(torch.float64)
    dd_dh = (a - b) - k + 2.0 * k * h
    da = h + dd_dh * (-0.5 / k) * inside
    db = (1.0 - h) + dd_dh * (0.5 / k) * inside
    return d, da[:, None] * ga + db[:, None] * gb


class GridSdf:
    """Voxel-grid SDF; outside the bounds reports box distance + face value."""

    def __init__(self, values: torch.Tensor, bounds):
        self.values = values if isinstance(values, torch.Tensor) else torch.as_tensor(values, dtype=torch.float64)
        self._bounds = (np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64))

    @classmethod
    def from_field(cls, source, resolution: int, bounds=None):
        """Bake any SDF-like object onto a centered voxel grid."""
        if bounds is None:
            lo, hi = source.bounds()
        else:
            lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
        centers = grid_centers(resolution, (lo, hi))
        with torch.no_grad():
            d, _ = source.evaluate(centers)
        return cls(d.reshape(resolution, resolution, resolution), (lo, hi))

    def evaluate(self, x):
        x = _pts(x)
        lo = torch.as_tensor(self._bounds[0])
        hi = torch.as_tensor(self._bounds[1])
        proj = torch.clamp(x, lo, hi)
        out_vec = x - proj
        d_out = out_vec.norm(dim=-1)
        val, grad = trilinear(self.values, self._bounds, proj, with_gradient=True)
        outside = d_out > 0
        val = val + d_out
        grad = torch.where(outside[:, None], grad + out_vec / d_out.clamp_min(1e-12)[:, None], grad)
        return val, grad

    def bounds(self):
        return self._bounds


def grid_centers(resolution: int, bounds) -> torch.Tensor:
    """Voxel-center positions, shape (res**3, 3), x-major ordering."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    axes = [lo[k] + (hi[k] - lo[k]) * (np.arange(resolution) + 0.5) / resolution for k in range(3)]
    xx, yy, zz = np.meshgrid(*axes, indexing="ij")
    return torch.as_tensor(np.stack([xx, yy, zz], axis=-1).reshape(-1, 3))


def sdf_eval(field, x) -> torch.Tensor:
    d, _ = field.evaluate(x)
    return d


def sdf_normal(field, x) -> torch.Tensor:
    """Unit gradient of the SDF; raises if the gradient vanishes."""
    _, grad = field.evaluate(x)
    norms = grad.norm(dim=-1)
    if bool((norms <= 1e-8).any()):
        raise DegenerateGradientError("SDF gradient vanishes at a query point")
    return grad / norms[:, None]


# ---------------------------------------------------------------------------
# density, materials, radiance
# ---------------------------------------------------------------------------


@dataclass
class DensityModel:
    """VolSDF-style conversion: sigma_t = (1/beta) * LaplaceCDF(-sdf; beta)."""

    beta: torch.Tensor

    def __post_init__(self):
        if not isinstance(self.beta, torch.Tensor):
            self.beta = torch.tensor(float(self.beta), dtype=torch.float64)
        if float(self.beta) <= 0:
            raise ValueError("beta must be positive")

    def density(self, sdf: torch.Tensor) -> torch.Tensor:
        b = self.beta
        pos = 0.5 * torch.exp(-sdf.clamp_min(0.0) / b)
        neg = 1.0 - 0.5 * torch.exp(sdf.clamp_max(0.0) / b)
        return torch.where(sdf >= 0, pos, neg) / b


def density(model: DensityModel, sdf) -> torch.Tensor:
    return model.density(sdf if isinstance(sdf, torch.Tensor) else torch.as_tensor(sdf, dtype=torch.float64))


def hardsig(x: torch.Tensor) -> torch.Tensor:
    """Monotone squash onto [0, 1]; identity-slope window is raw (-3, 3)."""
    return torch.clamp((x + 3.0) / 6.0, 0.0, 1.0)


def inverse_hardsig(y) -> torch.Tensor:
    y = y if isinstance(y, torch.Tensor) else torch.as_tensor(np.array(y, dtype=np.float64))
    return 6.0 * y - 3.0


class MaterialField:
    """Albedo/roughness/metallic voxel grids storing raw pre-squash values."""

    def __init__(self, albedo_raw, roughness_raw, metallic_raw, bounds, calibrate_albedo=False, specular=True):
        self.albedo_raw = _param(albedo_raw)
        self.roughness_raw = _param(roughness_raw)
        self.metallic_raw = _param(metallic_raw)
        self.bounds = (np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64))
        self.calibrate_albedo = bool(calibrate_albedo)
        self.specular = bool(specular)

    @classmethod
    def constant(cls, albedo, roughness, metallic, bounds, resolution=2, **kw):
        shape = (resolution,) * 3
        alb = inverse_hardsig(np.broadcast_to(np.asarray(albedo, dtype=np.float64), 3)).expand(*shape, 3).clone()
        rr = inverse_hardsig((float(roughness) - ROUGHNESS_MIN) / (1.0 - ROUGHNESS_MIN)).expand(*shape).clone()
        mm = inverse_hardsig(float(metallic)).expand(*shape).clone()
        return cls(alb, rr, mm, bounds, **kw)

    def evaluate(self, x):
        """Returns (albedo (N, 3), roughness (N,), metallic (N,))."""
        x = _pts(x)
        alb = hardsig(trilinear(self.albedo_raw, self.bounds, x))
        if self.calibrate_albedo:
            alb = 0.03 + (0.8 - 0.03) * alb
        rough = ROUGHNESS_MIN + (1.0 - ROUGHNESS_MIN) * hardsig(trilinear(self.roughness_raw, self.bounds, x))
        metal = hardsig(trilinear(self.metallic_raw, self.bounds, x))
        return alb, rough, metal

    def parameters(self):
        return [self.albedo_raw, self.roughness_raw, self.metallic_raw]


def _param(x) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=torch.float64)
    return t.to(torch.float64)


def material_eval(field: MaterialField, x):
    return field.evaluate(x)


class RadianceField:
    """View-independent emission grid; nonnegativity via relu of raw values."""

    def __init__(self, emission_raw, bounds):
        self.emission_raw = _param(emission_raw)
        self.bounds = (np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64))

    @classmethod
    def constant(cls, value, bounds, resolution=2):
        vec = np.broadcast_to(np.asarray(value, dtype=np.float64), 3).copy()
        raw = torch.as_tensor(vec).expand(resolution, resolution, resolution, 3).clone()
        return cls(raw, bounds)

    def evaluate(self, x) -> torch.Tensor:
        return torch.relu(trilinear(self.emission_raw, self.bounds, _pts(x)))

    def parameters(self):
        return [self.emission_raw]


# ---------------------------------------------------------------------------
# occupancy acceleration
# ---------------------------------------------------------------------------


@dataclass
class OccupancyGrid:
    occupied: np.ndarray  # (R, R, R) bool
    bounds: tuple
    frame_id: int = 0

    def occupied_at(self, points) -> np.ndarray:
        pts = points.detach().cpu().numpy() if isinstance(points, torch.Tensor) else np.asarray(points)
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        res = np.array(self.occupied.shape)
        idx = np.floor((pts - lo) / (hi - lo) * res).astype(int)
        inside = np.all((idx >= 0) & (idx < res), axis=-1)
        idx = np.clip(idx, 0, res - 1)
        return inside & self.occupied[idx[..., 0], idx[..., 1], idx[..., 2]]

    def ray_intervals(self, origin, direction, t_near: float, t_far: float):
        """Merged [t0, t1] spans of occupied voxels along one ray (DDA walk)."""
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        o = np.asarray(origin, dtype=np.float64)
        d = np.asarray(direction, dtype=np.float64)
        res = self.occupied.shape[0]
        cell = (hi - lo) / res

        inv = np.where(np.abs(d) > 1e-15, 1.0 / np.where(d == 0, 1.0, d), np.inf)
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
        t_enter = max(float(np.minimum(t0, t1).max()), t_near)
        t_exit = min(float(np.maximum(t0, t1).min()), t_far)
        if t_enter >= t_exit:
            return []

        eps = 1e-12
        t = t_enter + eps
        spans = []
        cur = None
        while t < t_exit:
            p = o + t * d
            idx = np.clip(np.floor((p - lo) / cell).astype(int), 0, res - 1)
            # distance to next voxel boundary on each axis
            nxt = lo + (idx + (d > 0)) * cell
            t_step = np.where(np.abs(d) > 1e-15, (nxt - o) * inv, np.inf)
            t_next = min(float(t_step.min()) + eps, t_exit)
            if self.occupied[idx[0], idx[1], idx[2]]:
                if cur is None:
                    cur = t
            elif cur is not None:
                spans.append((cur, t))
                cur = None
            t = t_next
        if cur is not None:
            spans.append((cur, t_exit))
        return spans


def build_occupancy(sdf_fn, beta: float, bounds, resolution: int = 64, sigma_threshold: float = 1e-5, frame_id: int = 0) -> OccupancyGrid:
    """Mark voxels whose density can exceed sigma_threshold, then dilate once.

    sdf_fn maps (N, 3) points to SDF values in the same space as `bounds`
    (pass a warped query for posed frames). Marking uses the Laplace-density
    inverse plus a half-diagonal Lipschitz margin, so the grid is conservative
    for true distance fields.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    beta = float(beta)
    tau = min(sigma_threshold, 0.499 / beta)
    d_cut = -beta * math.log(2.0 * beta * tau) if 2.0 * beta * tau < 1.0 else 0.0
    half_diag = 0.5 * float(np.linalg.norm((hi - lo) / resolution))
    centers = grid_centers(resolution, (lo, hi))
    with torch.no_grad():
        d = sdf_fn(centers)
    d = d.detach().cpu().numpy().reshape(resolution, resolution, resolution)
    occ = d <= d_cut + half_diag
    occ = ndimage.binary_dilation(occ, structure=np.ones((3, 3, 3), dtype=bool))
    return OccupancyGrid(occ, (lo, hi), frame_id)


# ---------------------------------------------------------------------------
# checkpoint container: JSON manifest + raw float32 sidecars
# ---------------------------------------------------------------------------


def save_arrays(directory, arrays: dict, meta: dict | None = None):
    """Write named arrays as little-endian float32 sidecars with x fastest.

    arrays: name -> array or (array, (lo, hi)) for grids with world bounds.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"version": 1, "meta": meta or {}, "arrays": []}
    for name, entry in arrays.items():
        bounds = None
        arr = entry
        if isinstance(entry, tuple):
            arr, bounds = entry
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.asarray(arr, dtype=np.float64)
        fname = f"{name}.f32"
        flat = _x_fastest(arr).astype("<f4")
        (directory / fname).write_bytes(flat.tobytes())
        record = {"name": name, "shape": list(arr.shape), "file": fname}
        if bounds is not None:
            record["bounds"] = {"lo": list(map(float, bounds[0])), "hi": list(map(float, bounds[1]))}
        manifest["arrays"].append(record)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_arrays(directory):
    """Inverse of save_arrays; returns (arrays, bounds, meta)."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arrays, bounds = {}, {}
    for rec in manifest["arrays"]:
        flat = np.frombuffer((directory / rec["file"]).read_bytes(), dtype="<f4").astype(np.float64)
        arrays[rec["name"]] = _x_fastest_inverse(flat, rec["shape"])
        if "bounds" in rec:
            bounds[rec["name"]] = (np.array(rec["bounds"]["lo"]), np.array(rec["bounds"]["hi"]))
    return arrays, bounds, manifest.get("meta", {})


def _x_fastest(arr: np.ndarray) -> np.ndarray:
    if arr.ndim >= 3:
        perm = (2, 1, 0) + tuple(range(3, arr.ndim))
        return np.ascontiguousarray(np.transpose(arr, perm)).ravel()
    return np.ascontiguousarray(arr).ravel()


def _x_fastest_inverse(flat: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    if len(shape) >= 3:
        tshape = (shape[2], shape[1], shape[0]) + shape[3:]
        perm = (2, 1, 0) + tuple(range(3, len(shape)))
        return np.transpose(flat.reshape(tshape), perm).copy()
    return flat.reshape(shape)
