"""Pose representation, forward/inverse linear blend skinning, warped queries.

Skinning weights are analytic (softmax of negative point-to-bone distance),
so the inverse map needs no learned field: it is a damped fixed-point
iteration started from every nearby bone's rigid inverse, with duplicate
roots merged. Inverse results are pure functions of (skeleton, pose, point).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "Skeleton",
    "Pose",
    "skinning_weights",
    "lbs_forward",
    "lbs_inverse",
    "blended_transform",
    "warp_query",
    "warped_sdf",
    "parse_skeleton",
    "format_skeleton",
    "parse_pose",
    "format_pose",
    "EMPTY_SDF",
]

EMPTY_SDF = 1.0e3  # reported where the inverse warp fails: definitely empty space


@dataclass
class Skeleton:
    """Rest-pose bone segments (endpoints a, b per bone) and weight sharpness."""

    rest_a: np.ndarray  # (B, 3)
    rest_b: np.ndarray  # (B, 3)
    names: list
    tau: float = 0.05

    def __post_init__(self):
        self.rest_a = np.atleast_2d(np.asarray(self.rest_a, dtype=np.float64))
        self.rest_b = np.atleast_2d(np.asarray(self.rest_b, dtype=np.float64))
        if self.rest_a.shape != self.rest_b.shape or self.rest_a.shape[1] != 3:
            raise ValueError("bone endpoints must be (B, 3) arrays")
        if len(self.names) != self.rest_a.shape[0]:
            raise ValueError("one name per bone required")

    @property
    def n_bones(self) -> int:
        return self.rest_a.shape[0]

    def bounds(self, margin: float = 0.0):
        pts = np.concatenate([self.rest_a, self.rest_b], axis=0)
        return pts.min(0) - margin, pts.max(0) + margin


@dataclass
class Pose:
    """Per-bone rigid transforms as homogeneous 4x4 matrices."""

    transforms: torch.Tensor  # (B, 4, 4)

    def __post_init__(self):
        t = self.transforms
        if not isinstance(t, torch.Tensor):
            t = torch.as_tensor(np.asarray(t), dtype=torch.float64)
        self.transforms = t.reshape(-1, 4, 4).to(torch.float64)
        rot = self.transforms[:, :3, :3]
        eye = torch.eye(3, dtype=torch.float64)
        ortho = (rot @ rot.transpose(1, 2) - eye).abs().max()
        if float(ortho) > 1e-6:
            raise ValueError("pose rotations must be orthonormal")
        if bool((torch.linalg.det(rot) < 0).any()):
            raise ValueError("pose rotations must be proper (det = +1)")

    @classmethod
    def identity(cls, n_bones: int) -> "Pose":
        return cls(torch.eye(4, dtype=torch.float64).expand(n_bones, 4, 4).clone())

    @property
    def n_bones(self) -> int:
        return self.transforms.shape[0]

    def inverse_transforms(self) -> torch.Tensor:
        rot = self.transforms[:, :3, :3]
        trans = self.transforms[:, :3, 3]
        inv = torch.eye(4, dtype=torch.float64).repeat(self.n_bones, 1, 1)
        inv[:, :3, :3] = rot.transpose(1, 2)
        inv[:, :3, 3] = -(rot.transpose(1, 2) @ trans[..., None])[..., 0]
        return inv


def _segment_distances(points: torch.Tensor, seg_a: torch.Tensor, seg_b: torch.Tensor) -> torch.Tensor:
    """Distances (N, B) from points (N, 3) to segments (B, 3)-(B, 3)."""
    pa = points[:, None, :] - seg_a[None]
    ba = (seg_b - seg_a)[None]
    denom = (ba * ba).sum(-1).clamp_min(1e-12)
    h = ((pa * ba).sum(-1) / denom).clamp(0.0, 1.0)
    q = pa - h[..., None] * ba
    return q.norm(dim=-1)


def _as_points(x) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=torch.float64)
    return t.reshape(1, 3) if t.ndim == 1 else t


def skinning_weights(skel: Skeleton, x_c) -> torch.Tensor:
    """Softmax(-distance/tau) over bones; rows sum to 1 exactly."""
    x = _as_points(x_c)
    dist = _segment_distances(x, torch.as_tensor(skel.rest_a), torch.as_tensor(skel.rest_b))
    return torch.softmax(-dist / skel.tau, dim=-1)


def _blend(weights: torch.Tensor, transforms: torch.Tensor) -> torch.Tensor:
    return torch.einsum("nb,bij->nij", weights, transforms)


def blended_transform(skel: Skeleton, pose: Pose, x_c) -> torch.Tensor:
    """Weight-blended bone transform (N, 4, 4) at canonical points."""
    return _blend(skinning_weights(skel, x_c), pose.transforms)


def lbs_forward(skel: Skeleton, pose: Pose, x_c) -> torch.Tensor:
    x = _as_points(x_c)
    t = blended_transform(skel, pose, x)
    return (t[:, :3, :3] @ x[..., None])[..., 0] + t[:, :3, 3]


@torch.no_grad()
def lbs_inverse(
    skel: Skeleton,
    pose: Pose,
    x_o,
    candidate_radius: float = 0.35,
    damping: float = 0.8,
    max_iters: int = 20,
    tol: float = 1e-6,
    dedup: float = 1e-4,
):
    """All canonical roots of LBS(x_c) = x_o, one slot per candidate bone.

    Returns (roots (N, B, 3), valid (N, B)); valid marks converged,
    deduplicated roots. Candidates start from each nearby bone's rigid
    inverse and follow x <- x - damping * (LBS(x) - x_o).
    """
    x_o = _as_points(x_o)
    n = x_o.shape[0]
    b = skel.n_bones
    inv = pose.inverse_transforms()  # (B, 4, 4)

    posed_a = (pose.transforms[:, :3, :3] @ torch.as_tensor(skel.rest_a)[..., None])[..., 0] + pose.transforms[:, :3, 3]
    posed_b = (pose.transforms[:, :3, :3] @ torch.as_tensor(skel.rest_b)[..., None])[..., 0] + pose.transforms[:, :3, 3]
    dist = _segment_distances(x_o, posed_a, posed_b)  # (N, B)
    candidate = dist <= candidate_radius
    nearest = dist.argmin(dim=-1)
    candidate[torch.arange(n), nearest] = True

    init = (inv[None, :, :3, :3] @ x_o[:, None, :, None])[..., 0] + inv[None, :, :3, 3]  # (N, B, 3)
    roots = init.reshape(n * b, 3).clone()
    target = x_o[:, None, :].expand(n, b, 3).reshape(n * b, 3)
    active = candidate.reshape(n * b).clone()
    converged = torch.zeros(n * b, dtype=torch.bool)

    idx = active.nonzero(as_tuple=True)[0]
    for _ in range(max_iters + 1):
        if idx.numel() == 0:
            break
        cur = roots[idx]
        err = lbs_forward(skel, pose, cur) - target[idx]
        done = err.norm(dim=-1) < tol
        converged[idx[done]] = True
        idx = idx[~done]
        if idx.numel() == 0:
            break
        roots[idx] = roots[idx] - damping * err[~done]

    roots = roots.reshape(n, b, 3)
    valid = (converged & active).reshape(n, b)

    # merge duplicate roots: keep the lowest-bone-index representative
    for i in range(1, b):
        prior = roots[:, :i, :]  # (N, i, 3)
        near = (roots[:, i : i + 1, :] - prior).norm(dim=-1) < dedup
        dup = (near & valid[:, :i]).any(dim=-1)
        valid[:, i] &= ~dup
    return roots, valid


def warp_query(field, skel: Skeleton, pose: Pose, x_o, **inverse_kw):
    """Canonical SDF seen from observation space (min-|SDF| over roots).

    Returns (sdf (N,), x_c (N, 3), valid (N,)); non-convergent points report
    EMPTY_SDF with their rigid-inverse fallback position.
    """
    x_o = _as_points(x_o)
    roots, valid = lbs_inverse(skel, pose, x_o, **inverse_kw)
    n, b = valid.shape
    flat = roots.reshape(n * b, 3)
    sdf, _ = field.evaluate(flat)
    sdf = sdf.reshape(n, b)
    sdf = torch.where(valid, sdf, torch.full_like(sdf, EMPTY_SDF))
    pick = sdf.abs().argmin(dim=-1)
    rows = torch.arange(n)
    best_sdf = sdf[rows, pick]
    best_x = roots[rows, pick]
    any_valid = valid.any(dim=-1)
    best_sdf = torch.where(any_valid, best_sdf, torch.full_like(best_sdf, EMPTY_SDF))
    return best_sdf, best_x, any_valid


def warped_sdf(field, skel: Skeleton, pose: Pose, x_o, **inverse_kw) -> torch.Tensor:
    sdf, _, _ = warp_query(field, skel, pose, x_o, **inverse_kw)
    return sdf


# ---------------------------------------------------------------------------
# text file formats
# ---------------------------------------------------------------------------


def parse_skeleton(text: str, tau: float = 0.05) -> Skeleton:
    """Lines of `name ax ay az bx by bz`; '#' starts a comment."""
    names, seg_a, seg_b = [], [], []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"skeleton line needs name + 6 floats: {line!r}")
        names.append(parts[0])
        vals = [float(v) for v in parts[1:]]
        seg_a.append(vals[:3])
        seg_b.append(vals[3:])
    if not names:
        raise ValueError("skeleton file defines no bones")
    return Skeleton(np.array(seg_a), np.array(seg_b), names, tau=tau)


def format_skeleton(skel: Skeleton) -> str:
    lines = []
    for name, a, b in zip(skel.names, skel.rest_a, skel.rest_b):
        coords = " ".join(f"{v:.17g}" for v in (*a, *b))
        lines.append(f"{name} {coords}")
    return "\n".join(lines) + "\n"


def parse_pose(text: str) -> Pose:
    """Whitespace-separated floats forming B row-major 4x4 matrices."""
    vals = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        vals.extend(float(v) for v in line.split())
    if not vals or len(vals) % 16 != 0:
        raise ValueError("pose file must contain a multiple of 16 floats")
    mats = np.array(vals, dtype=np.float64).reshape(-1, 4, 4)
    return Pose(torch.as_tensor(mats))


def format_pose(pose: Pose) -> str:
    blocks = []
    for mat in pose.transforms.detach().cpu().numpy():
        blocks.append("\n".join(" ".join(f"{v:.17g}" for v in row) for row in mat))
    return "\n\n".join(blocks) + "\n"
