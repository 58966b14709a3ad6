"""Core scene representation: Gaussians, quaternion algebra, covariances, SH color.

Conventions used throughout the package:
  - quaternions are stored (w, x, y, z) and kept unit-norm between optimizer steps;
  - scales are stored in log space, opacities as logits;
  - the movable mask ``m`` is an integer label: 0 = static base, k >= 1 = movable part k.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import ConfigError

# Real spherical harmonics constants (degree 0 and 1).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


def sh_band_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_bands(bands: int) -> int:
    degree = int(round(bands ** 0.5)) - 1
    if sh_band_count(degree) != bands:
        raise ConfigError(f"{bands} SH coefficients per channel do not match any degree")
    return degree


def quat_normalize(q: Tensor) -> Tensor:
    """Normalize quaternions along the last axis."""
    return q / q.norm(dim=-1, keepdim=True)


def quat_to_rotmat(q: Tensor) -> Tensor:
    """Convert unit quaternions (..., 4) in (w, x, y, z) order to (..., 3, 3) matrices.

    Callers guarantee normalization; no renormalization happens here so that
    gradients of optimized quaternions stay exact.
    """
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def quat_multiply(a: Tensor, b: Tensor) -> Tensor:
    """Hamilton product a ⊗ b for (..., 4) quaternions, (w, x, y, z) order."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def axis_angle_to_quat(axis: Tensor, angle: Tensor | float) -> Tensor:
    """Unit quaternion rotating by ``angle`` radians about ``axis`` (normalized here)."""
    if not torch.is_tensor(angle):
        angle = torch.as_tensor(angle, dtype=axis.dtype)
    direction = axis / axis.norm(dim=-1, keepdim=True)
    half = 0.5 * angle
    w = torch.cos(half).reshape(axis.shape[:-1] + (1,))
    xyz = direction * torch.sin(half).reshape(axis.shape[:-1] + (1,))
    return torch.cat([w, xyz], dim=-1)


def covariance3d(r: Tensor, s: Tensor) -> Tensor:
    """3D covariance R S Sᵀ Rᵀ from unit quaternion(s) and log-scale vector(s).

    Eigenvalues are exp(2 s) up to permutation for any rotation.
    """
    rot = quat_to_rotmat(r)
    scale = torch.exp(s)
    m = rot * scale.unsqueeze(-2)  # R @ diag(exp(s))
    return m @ m.transpose(-1, -2)


def sh_eval(sh: Tensor, view_dir: Tensor) -> Tensor:
    """Evaluate SH color for coefficients (..., B, 3) and unit directions (..., 3).

    Returns the raw color Σ sh_b · Y_b(dir) + 0.5 per channel (3D-GS offset
    convention); clamping to [0, 1] is the renderer's job.
    """
    bands = sh.shape[-2]
    degree = sh_degree_from_bands(bands)
    color = SH_C0 * sh[..., 0, :]
    if degree >= 1:
        x, y, z = view_dir[..., 0:1], view_dir[..., 1:2], view_dir[..., 2:3]
        color = color + SH_C1 * (y * sh[..., 1, :] + z * sh[..., 2, :] + x * sh[..., 3, :])
    if degree >= 2:
        raise ConfigError("SH degree > 1 is not supported")
    return color + 0.5


@dataclass(frozen=True)
class Gaussian:
    """A single Gaussian primitive (value type; clouds are the workhorse)."""

    x: Tensor        # (3,) position
    r: Tensor        # (4,) unit quaternion, w first
    s: Tensor        # (3,) log-scale
    sigma: Tensor    # () opacity logit
    sh: Tensor       # (B, 3) SH coefficients
    m: int = 0       # movable-mask label

    @property
    def opacity(self) -> Tensor:
        return torch.sigmoid(self.sigma)


class GaussianCloud:
    """Ordered collection of Gaussians stored as per-attribute tensors.

    Ordering is stable within an optimization step; gradients index by position.
    """

    def __init__(
        self,
        positions: Tensor,
        rotations: Tensor,
        log_scales: Tensor,
        opacity_logits: Tensor,
        sh: Tensor,
        mask: Tensor,
    ):
        n = positions.shape[0]
        if positions.shape != (n, 3):
            raise ConfigError(f"positions must be (N, 3), got {tuple(positions.shape)}")
        if rotations.shape != (n, 4):
            raise ConfigError(f"rotations must be (N, 4), got {tuple(rotations.shape)}")
        if log_scales.shape != (n, 3):
            raise ConfigError(f"log_scales must be (N, 3), got {tuple(log_scales.shape)}")
        if opacity_logits.shape != (n,):
            raise ConfigError(f"opacity_logits must be (N,), got {tuple(opacity_logits.shape)}")
        if sh.ndim != 3 or sh.shape[0] != n or sh.shape[2] != 3:
            raise ConfigError(f"sh must be (N, B, 3), got {tuple(sh.shape)}")
        sh_degree_from_bands(sh.shape[1])  # validates B
        if mask.shape != (n,):
            raise ConfigError(f"mask must be (N,), got {tuple(mask.shape)}")
        self.positions = positions
        self.rotations = rotations
        self.log_scales = log_scales
        self.opacity_logits = opacity_logits
        self.sh = sh
        self.mask = mask.to(torch.int64)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def count(self) -> int:
        return len(self)

    @property
    def dtype(self) -> torch.dtype:
        return self.positions.dtype

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_bands(self.sh.shape[1])

    @property
    def opacities(self) -> Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def scales(self) -> Tensor:
        return torch.exp(self.log_scales)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            x=self.positions[i],
            r=self.rotations[i],
            s=self.log_scales[i],
            sigma=self.opacity_logits[i],
            sh=self.sh[i],
            m=int(self.mask[i]),
        )

    def select(self, idx: Tensor) -> "GaussianCloud":
        """Cloud restricted to ``idx`` (boolean or integer index), order preserved."""
        return GaussianCloud(
            self.positions[idx],
            self.rotations[idx],
            self.log_scales[idx],
            self.opacity_logits[idx],
            self.sh[idx],
            self.mask[idx],
        )

    def clone(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.clone(),
            self.rotations.clone(),
            self.log_scales.clone(),
            self.opacity_logits.clone(),
            self.sh.clone(),
            self.mask.clone(),
        )

    def detach(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.detach(),
            self.rotations.detach(),
            self.log_scales.detach(),
            self.opacity_logits.detach(),
            self.sh.detach(),
            self.mask.detach(),
        )

    def to(self, dtype: torch.dtype) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.to(dtype),
            self.rotations.to(dtype),
            self.log_scales.to(dtype),
            self.opacity_logits.to(dtype),
            self.sh.to(dtype),
            self.mask,
        )

    def with_attrs(self, **kwargs) -> "GaussianCloud":
        """Copy of the cloud with some attribute tensors replaced."""
        fields = {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "sh": self.sh,
            "mask": self.mask,
        }
        fields.update(kwargs)
        return GaussianCloud(**fields)

    @staticmethod
    def from_gaussians(gaussians: list[Gaussian]) -> "GaussianCloud":
        return GaussianCloud(
            torch.stack([g.x for g in gaussians]),
            torch.stack([g.r for g in gaussians]),
            torch.stack([g.s for g in gaussians]),
            torch.stack([g.sigma.reshape(()) for g in gaussians]),
            torch.stack([g.sh for g in gaussians]),
            torch.tensor([g.m for g in gaussians], dtype=torch.int64),
        )

    @staticmethod
    def concatenate(clouds: list["GaussianCloud"]) -> "GaussianCloud":
        return GaussianCloud(
            torch.cat([c.positions for c in clouds]),
            torch.cat([c.rotations for c in clouds]),
            torch.cat([c.log_scales for c in clouds]),
            torch.cat([c.opacity_logits for c in clouds]),
            torch.cat([c.sh for c in clouds]),
            torch.cat([c.mask for c in clouds]),
        )

    def renormalize_rotations_(self) -> None:
        """In-place quaternion renormalization (applied after optimizer steps)."""
        with torch.no_grad():
            self.rotations /= self.rotations.norm(dim=-1, keepdim=True)


def split_by_mask(cloud: GaussianCloud, part_id: int) -> tuple[GaussianCloud, GaussianCloud]:
    """Partition into (movable, unmovable) views for one part id.

    The movable view holds exactly the Gaussians with m == part_id; ordering
    is preserved within both views. An empty movable view is legal and signals
    a degenerate mask to callers.
    """
    if part_id < 1:
        raise ConfigError("part_id must be >= 1")
    sel = cloud.mask == part_id
    return cloud.select(sel), cloud.select(~sel)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with world-to-camera extrinsics.

    A world point p maps to camera space as R @ p + t (z forward), then to
    pixels (fx x/z + cx, fy y/z + cy). Pixel (row i, col j) is centered at
    (x=j, y=i).
    """

    rotation: Tensor    # (3, 3) world-to-camera
    translation: Tensor  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        rot = torch.as_tensor(self.rotation, dtype=torch.float64)
        if rot.shape != (3, 3):
            raise ConfigError("camera rotation must be 3x3")
        err = (rot @ rot.T - torch.eye(3, dtype=torch.float64)).abs().max()
        if err > 1e-5 or abs(torch.linalg.det(rot).item() - 1.0) > 1e-5:
            raise ConfigError("camera rotation must be orthonormal with det +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", torch.as_tensor(self.translation, dtype=torch.float64).reshape(3))

    @property
    def center(self) -> Tensor:
        """Camera center in world coordinates (−Rᵀ t)."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            rotation=torch.tensor(d["rotation"], dtype=torch.float64).reshape(3, 3),
            translation=torch.tensor(d["translation"], dtype=torch.float64),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )
