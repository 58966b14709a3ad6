"""Joint parameterizations, movable-mask classification, and motion fitting.

Two joint types: revolute (axis direction, pivot point, angle) and prismatic
(axis direction, signed distance). Axes are stored unnormalized so the fitting
loop works in unconstrained coordinates; they are normalized on use.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
from torch import Tensor

from .errors import (
    ConfigError,
    DegenerateFieldError,
    DegenerateMaskError,
    DivergenceError,
)
from .gaussians import GaussianCloud, axis_angle_to_quat, quat_multiply, quat_normalize, quat_to_rotmat
from .optim import AdamState, adam_step
from .render import AppearanceLossConfig, RasterSettings, FAST_RASTER, _render_graph, loss_app

REVOLUTE = "revolute"
PRISMATIC = "prismatic"

_AXIS_EPS = 1e-8


def _as_vec3(v, dtype=torch.float64) -> Tensor:
    t = torch.as_tensor(v, dtype=dtype) if not torch.is_tensor(v) else v
    return t.reshape(3)


@dataclass(frozen=True)
class Revolute:
    axis: Tensor   # (3,) direction, normalized on use
    pivot: Tensor  # (3,)
    theta: Tensor  # () radians

    kind = REVOLUTE

    def __post_init__(self):
        object.__setattr__(self, "axis", _as_vec3(self.axis))
        object.__setattr__(self, "pivot", _as_vec3(self.pivot))
        theta = self.theta if torch.is_tensor(self.theta) else torch.tensor(float(self.theta), dtype=torch.float64)
        object.__setattr__(self, "theta", theta.reshape(()))
        if float(self.axis.norm()) <= _AXIS_EPS:
            raise ConfigError("revolute axis is degenerate (norm ~ 0)")

    def normalized_axis(self) -> Tensor:
        return self.axis / self.axis.norm()

    def scaled(self, t: float) -> "Revolute":
        return replace(self, theta=self.theta * t)

    def to_dict(self) -> dict:
        return {"type": REVOLUTE, "axis": [float(v) for v in self.axis],
                "pivot": [float(v) for v in self.pivot], "magnitude": float(self.theta)}


@dataclass(frozen=True)
class Prismatic:
    axis: Tensor      # (3,) direction, normalized on use
    distance: Tensor  # () scene units

    kind = PRISMATIC

    def __post_init__(self):
        object.__setattr__(self, "axis", _as_vec3(self.axis))
        d = self.distance if torch.is_tensor(self.distance) else torch.tensor(float(self.distance), dtype=torch.float64)
        object.__setattr__(self, "distance", d.reshape(()))
        if float(self.axis.norm()) <= _AXIS_EPS:
            raise ConfigError("prismatic axis is degenerate (norm ~ 0)")

    def normalized_axis(self) -> Tensor:
        return self.axis / self.axis.norm()

    def scaled(self, t: float) -> "Prismatic":
        return replace(self, distance=self.distance * t)

    def to_dict(self) -> dict:
        return {"type": PRISMATIC, "axis": [float(v) for v in self.axis],
                "magnitude": float(self.distance)}


MotionParams = Revolute | Prismatic


def motion_from_dict(d: dict) -> MotionParams:
    if d["type"] == REVOLUTE:
        return Revolute(axis=d["axis"], pivot=d["pivot"], theta=d["magnitude"])
    if d["type"] == PRISMATIC:
        return Prismatic(axis=d["axis"], distance=d["magnitude"])
    raise ConfigError(f"unknown motion type {d['type']!r}")


@dataclass(frozen=True)
class MaskConfig:
    """Thresholds of the displacement classifier and the motion-type rule."""

    tau: float = 0.3
    pivot_radius: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie strictly inside (0, 1)")
        if self.pivot_radius <= 0:
            raise ConfigError("pivot_radius must be positive")


def transform_revolute(x: Tensor, r: Tensor, params: Revolute) -> tuple[Tensor, Tensor]:
    """Rotate positions about the pivot and compose the rotation into quaternions."""
    dtype = x.dtype
    axis = params.normalized_axis().to(dtype)
    theta = params.theta.to(dtype)
    q = axis_angle_to_quat(axis, theta)
    rot = quat_to_rotmat(q)
    pivot = params.pivot.to(dtype)
    x_new = (x - pivot) @ rot.T + pivot
    r_new = quat_normalize(quat_multiply(q.expand_as(r) if r.ndim > 1 else q, r))
    return x_new, r_new


def transform_prismatic(x: Tensor, params: Prismatic) -> Tensor:
    """Translate positions along the normalized axis; rotations are unchanged."""
    axis = params.normalized_axis().to(x.dtype)
    return x + params.distance.to(x.dtype) * axis


def transform_cloud(cloud: GaussianCloud, part_id: int, params: MotionParams, t: float = 1.0) -> GaussianCloud:
    """Apply the joint motion scaled by t in [0, 1] to the Gaussians of one part."""
    if not 0.0 <= t <= 1.0:
        raise ConfigError("interpolation parameter t must lie in [0, 1]")
    sel = (cloud.mask == part_id).unsqueeze(-1)
    scaled = params.scaled(t)
    if isinstance(scaled, Revolute):
        x_new, r_new = transform_revolute(cloud.positions, cloud.rotations, scaled)
        return cloud.with_attrs(
            positions=torch.where(sel, x_new, cloud.positions),
            rotations=torch.where(sel, r_new, cloud.rotations),
        )
    x_new = transform_prismatic(cloud.positions, scaled)
    return cloud.with_attrs(positions=torch.where(sel, x_new, cloud.positions))


def classify_movable(
    field_or_norms, tau: float, part_id: int = 1, base_labels: Tensor | None = None
) -> Tensor:
    """Label Gaussians whose min-max-normalized displacement reaches ``tau``.

    Below-threshold Gaussians keep ``base_labels`` (default 0), which lets
    multi-part runs add a new part id without erasing earlier ones.
    """
    norms = field_or_norms if torch.is_tensor(field_or_norms) else field_or_norms.displacement_norms()
    if norms.numel() < 2:
        raise DegenerateFieldError("need at least two Gaussians to classify")
    lo, hi = norms.min(), norms.max()
    if float(hi - lo) < 1e-12:
        raise DegenerateFieldError("all displacements are equal: no motion detected")
    normalized = (norms - lo) / (hi - lo)
    if base_labels is None:
        base_labels = torch.zeros(norms.numel(), dtype=torch.int64)
    return torch.where(normalized >= tau, torch.full_like(base_labels, part_id), base_labels)


def detect_motion_type(params: Revolute, radius: float) -> str:
    """Pivot-norm rule: a runaway pivot indicates the motion is prismatic."""
    return PRISMATIC if float(params.pivot.norm()) > radius else REVOLUTE


def chamfer_distance(a: Tensor, b: Tensor, chunk: int = 4096) -> Tensor:
    """Symmetric Chamfer: mean squared nearest distance A->B plus B->A.

    Gradients flow through the nearest-neighbor assignments held fixed per
    evaluation (the min picks an index; its argument is differentiable).
    """
    if a.numel() == 0 or b.numel() == 0:
        raise ConfigError("chamfer_distance requires nonempty point sets")

    def directed(src: Tensor, dst: Tensor) -> Tensor:
        mins = []
        dst_sq = dst.pow(2).sum(-1)
        for start in range(0, src.shape[0], chunk):
            block = src[start:start + chunk]
            d2 = block.pow(2).sum(-1, keepdim=True) + dst_sq.unsqueeze(0) - 2.0 * block @ dst.T
            mins.append(d2.clamp(min=0).min(dim=1).values)
        return torch.cat(mins).mean()

    return directed(a, b) + directed(b, a)


@dataclass
class MotionConfig:
    steps: int = 1000
    lr_axis: float = 0.02
    lr_pivot: float = 0.05
    lr_magnitude: float = 0.02
    type_check_frac: float = 0.4
    min_movable: int = 10
    mask: MaskConfig = field(default_factory=MaskConfig)
    loss: AppearanceLossConfig = field(default_factory=AppearanceLossConfig)
    raster: RasterSettings = FAST_RASTER
    seed: int = 0


def _fit_axis_from_displacements(x: Tensor, dx: Tensor) -> Tensor:
    """Rotation-axis seed: right singular vector of the position/displacement
    cross-covariance with the smallest singular value (the direction along
    which displacement does not correlate with position)."""
    xc = x - x.mean(dim=0)
    dc = dx - dx.mean(dim=0)
    cross = xc.T @ dc
    _, _, vh = torch.linalg.svd(cross)
    return vh[-1]


def optimize_motion_params(
    cloud: GaussianCloud,
    labels: Tensor,
    part_id: int,
    end_images: list[Tensor],
    end_cameras: list,
    deform_targets: Tensor,
    cfg: MotionConfig = MotionConfig(),
) -> tuple[MotionParams, str, list[float]]:
    """Fit joint parameters by descending appearance + Chamfer geometric loss.

    Starts revolute; at the type-check iteration the pivot-norm rule may switch
    to prismatic, reinitializing from the mean target displacement. Returns
    converged parameters, the final motion type, and the loss trace.
    """
    movable_idx = torch.nonzero(labels == part_id, as_tuple=False).squeeze(-1)
    if movable_idx.numel() < cfg.min_movable:
        raise DegenerateMaskError(
            f"only {movable_idx.numel()} movable Gaussians (need {cfg.min_movable})"
        )
    work = cloud.detach().with_attrs(mask=labels)
    dtype = work.dtype
    x_m = work.positions[movable_idx]
    targets = deform_targets.detach().to(dtype)
    if targets.shape != x_m.shape:
        raise ConfigError("deform_targets must hold x + dx for the movable set")

    disp = targets - x_m
    axis = _fit_axis_from_displacements(x_m, disp).to(dtype).clone().requires_grad_(True)
    pivot = x_m.mean(dim=0).clone().requires_grad_(True)
    magnitude = torch.zeros((), dtype=dtype, requires_grad=True)

    kind = REVOLUTE
    params = [axis, pivot, magnitude]
    lrs = [cfg.lr_axis, cfg.lr_pivot, cfg.lr_magnitude]
    states = [AdamState.zeros_like(p) for p in params]
    gen = torch.Generator().manual_seed(cfg.seed)
    check_at = int(cfg.steps * cfg.type_check_frac)
    trace: list[float] = []

    def current() -> MotionParams:
        if kind == REVOLUTE:
            return Revolute(axis=axis.detach().clone(), pivot=pivot.detach().clone(),
                            theta=magnitude.detach().clone())
        return Prismatic(axis=axis.detach().clone(), distance=magnitude.detach().clone())

    for step in range(cfg.steps):
        if step == check_at and kind == REVOLUTE:
            probe = Revolute(axis=axis.detach(), pivot=pivot.detach(), theta=magnitude.detach())
            if detect_motion_type(probe, cfg.mask.pivot_radius) == PRISMATIC:
                kind = PRISMATIC
                mean_disp = disp.mean(dim=0)
                axis = (mean_disp / mean_disp.norm().clamp(min=_AXIS_EPS)).clone().requires_grad_(True)
                magnitude = mean_disp.norm().clone().requires_grad_(True)
                params = [axis, magnitude]
                lrs = [cfg.lr_axis, cfg.lr_magnitude]
                states = [AdamState.zeros_like(p) for p in params]

        unit_axis = axis / axis.norm().clamp(min=_AXIS_EPS)
        if kind == REVOLUTE:
            q = axis_angle_to_quat(unit_axis, magnitude)
            rot = quat_to_rotmat(q)
            moved = (x_m - pivot) @ rot.T + pivot
            live = Revolute(axis=unit_axis, pivot=pivot, theta=magnitude)
        else:
            moved = x_m + magnitude * unit_axis
            live = Prismatic(axis=unit_axis, distance=magnitude)

        geo = chamfer_distance(moved, targets)
        cam_i = int(torch.randint(len(end_images), (1,), generator=gen))
        shifted = _transform_cloud_live(work, part_id, live)
        pixels, _, _ = _render_graph(shifted, end_cameras[cam_i], cfg.loss, cfg.raster)
        app = loss_app(pixels, end_images[cam_i].to(dtype), cfg.loss)
        loss = app + geo  # unit weights: appearance plus geometric term
        if not torch.isfinite(loss):
            raise DivergenceError(f"motion loss non-finite at step {step}")
        loss.backward()
        for p, st, lr in zip(params, states, lrs):
            if p.grad is None:
                continue
            new_p, _ = adam_step(p.detach(), p.grad, st, lr, "motion-params")
            with torch.no_grad():
                p.copy_(new_p)
            p.grad = None
        trace.append(float(loss))

    return current(), kind, trace


def _transform_cloud_live(cloud: GaussianCloud, part_id: int, params: MotionParams) -> GaussianCloud:
    """transform_cloud variant keeping autograd through live parameter tensors."""
    sel = (cloud.mask == part_id).unsqueeze(-1)
    if isinstance(params, Revolute):
        q = axis_angle_to_quat(params.axis / params.axis.norm().clamp(min=_AXIS_EPS), params.theta)
        rot = quat_to_rotmat(q)
        x_new = (cloud.positions - params.pivot) @ rot.T + params.pivot
        r_new = quat_normalize(quat_multiply(q.expand(cloud.rotations.shape[0], 4), cloud.rotations))
        return cloud.with_attrs(
            positions=torch.where(sel, x_new, cloud.positions),
            rotations=torch.where(sel, r_new, cloud.rotations),
        )
    x_new = cloud.positions + params.distance * (params.axis / params.axis.norm().clamp(min=_AXIS_EPS))
    return cloud.with_attrs(positions=torch.where(sel, x_new, cloud.positions))
