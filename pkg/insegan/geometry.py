"""Differentiable SE(3) geometry: Rodrigues rotations, pull-back sampling
grids, trilinear resampling and Z-buffer compositing.

Vectors are ordered (x, y, z) and map onto the (W, H, D) axes of a volume,
the convention of ``torch.nn.functional.grid_sample``. Rigid transforms act
as x' = R x + t.
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

SMALL_ANGLE: float = 1e-8


@dataclass
class RigidTransform:
    """Rotation ``R`` (..., 3, 3) and translation ``t`` (..., 3)."""

    R: torch.Tensor
    t: torch.Tensor

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Return self ∘ first, i.e. apply ``first`` then ``self``."""
        R = self.R @ first.R
        t = (self.R @ first.t.unsqueeze(-1)).squeeze(-1) + self.t
        return RigidTransform(R=R, t=t)

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        """Map points (..., 3) forward through the transform."""
        return points @ self.R.transpose(-1, -2) + self.t

    def apply_inverse(self, points: torch.Tensor) -> torch.Tensor:
        """Map points (..., 3) through the inverse transform: Rᵀ(x − t)."""
        return (points - self.t) @ self.R


def _check_finite(tensor: torch.Tensor, name: str) -> None:
    if not torch.isfinite(tensor).all():
        raise ValueError(f"{name} contains non-finite entries")


def skew(omega: torch.Tensor) -> torch.Tensor:
    """Skew-symmetric cross-product matrices for omega (..., 3)."""
    zero = torch.zeros_like(omega[..., 0])
    wx, wy, wz = omega[..., 0], omega[..., 1], omega[..., 2]
    rows = [
        torch.stack([zero, -wz, wy], dim=-1),
        torch.stack([wz, zero, -wx], dim=-1),
        torch.stack([-wy, wx, zero], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def axis_angle_to_rotation(omega: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula: axis-angle vectors (..., 3) to rotations (..., 3, 3).

    Below an angle of 1e-8 the coefficients switch to their second-order
    series so both value and gradient stay finite at the origin.

    Raises:
        ValueError: If omega is not (..., 3) or has non-finite entries.
    """
    omega = torch.as_tensor(omega)
    if omega.shape[-1:] != (3,):
        raise ValueError(f"omega must have trailing dimension 3, got {tuple(omega.shape)}")
    _check_finite(omega, "omega")

    theta_sq = (omega * omega).sum(dim=-1)
    small = theta_sq < SMALL_ANGLE ** 2
    safe_sq = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = torch.sqrt(safe_sq)
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / safe_sq)

    K = skew(omega)
    eye = torch.eye(3, dtype=omega.dtype, device=omega.device).expand_as(K)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def pose_to_transform(pose: torch.Tensor) -> RigidTransform:
    """The Λ operator: 6-D pose (omega, tau) to a rigid transform.

    Args:
        pose: Tensor (..., 6); first three entries axis-angle, last three the
            translation in normalized volume coordinates.
    """
    pose = torch.as_tensor(pose)
    if pose.shape[-1:] != (6,):
        raise ValueError(f"pose must have trailing dimension 6, got {tuple(pose.shape)}")
    _check_finite(pose, "pose")
    return RigidTransform(R=axis_angle_to_rotation(pose[..., :3]), t=pose[..., 3:])


def _check_shape(shape: Sequence[int]) -> Tuple[int, int, int]:
    if len(shape) != 3 or any(int(s) < 1 for s in shape):
        raise ValueError(f"volume shape must be three sizes >= 1, got {tuple(shape)}")
    return int(shape[0]), int(shape[1]), int(shape[2])


def affine_grid(transform: RigidTransform, shape: Sequence[int]) -> torch.Tensor:
    """Pull-back sampling grid for a volume of size (D, H, W).

    Every voxel centre x is mapped to Rᵀ(x − t), so that sampling a volume
    through the grid moves its content by the transform. Voxel centres sit at
    (2i + 1)/S − 1.

    Returns:
        Grid (D, H, W, 3) for an unbatched transform, else (N, D, H, W, 3).
    """
    depth, height, width = _check_shape(shape)
    R, t = transform.R, transform.t
    batched = R.dim() == 3
    if not batched:
        R, t = R.unsqueeze(0), t.unsqueeze(0)
    R_inv = R.transpose(-1, -2)
    theta = torch.cat([R_inv, -(R_inv @ t.unsqueeze(-1))], dim=-1)
    grid = F.affine_grid(
        theta, size=[theta.shape[0], 1, depth, height, width], align_corners=False
    )
    return grid if batched else grid[0]


def trilinear_sample(volume: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Resample ``volume`` (C, D, H, W) or (N, C, D, H, W) at ``grid`` coords.

    Out-of-range coordinates read zeros. Differentiable in volume and grid.

    Raises:
        ValueError: If the grid does not match the volume's spatial size.
    """
    batched = volume.dim() == 5
    if not batched:
        if volume.dim() != 4 or grid.dim() != 4:
            raise ValueError(
                f"expected volume (C,D,H,W) and grid (D,H,W,3), got "
                f"{tuple(volume.shape)} and {tuple(grid.shape)}"
            )
        volume, grid = volume.unsqueeze(0), grid.unsqueeze(0)
    if grid.dim() != 5 or grid.shape[-1] != 3:
        raise ValueError(f"grid must be (N, D, H, W, 3), got {tuple(grid.shape)}")
    if grid.shape[1:4] != volume.shape[2:] or grid.shape[0] != volume.shape[0]:
        raise ValueError(
            f"grid {tuple(grid.shape)} does not match volume {tuple(volume.shape)}"
        )
    out = F.grid_sample(
        volume, grid, mode="bilinear", padding_mode="zeros", align_corners=False
    )
    return out if batched else out[0]


def zbuffer_composite(stack: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Depth-wise max pooling over instances.

    Args:
        stack: Per-instance height rasters (n, H, W), or (B, n, H, W).
            Larger values are nearer the camera.

    Returns:
        ``(composite, labels)``: the pointwise maximum, and 1 + index of the
        instance attaining it (lowest index on ties). No background yet.

    Raises:
        ValueError: On an empty stack.
    """
    stack = torch.as_tensor(stack)
    if stack.dim() not in (3, 4) or stack.shape[-3] < 1:
        raise ValueError(f"stack must be (n, H, W) with n >= 1, got {tuple(stack.shape)}")
    n = stack.shape[-3]
    composite = stack.max(dim=-3).values
    index = torch.arange(n, device=stack.device).view(n, 1, 1)
    hits = stack == composite.unsqueeze(-3)
    labels = torch.where(hits, index, torch.full_like(index, n)).min(dim=-3).values
    return composite, labels + 1
