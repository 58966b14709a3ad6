"""Synthetic articulated scenes with exact ground truth.

Templates build box-shaped parts out of small isotropic Gaussians sampled on
the box faces, attach ground-truth joint parameters, and render multi-view
supervision images with the package's own renderer, so recovering the motion
is a pure inverse problem.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError
from .gaussians import Camera, GaussianCloud, sh_band_count
from .motion import MotionParams, Prismatic, Revolute, transform_cloud
from .render import AppearanceLossConfig, RasterSettings, rasterize


@dataclass(frozen=True)
class BoxPart:
    """An axis-aligned box of Gaussians with one base color per face."""

    label: int                       # 0 = static, k >= 1 = movable part k
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    face_colors: tuple[tuple[float, float, float], ...]  # 6 faces: -x,+x,-y,+y,-z,+z


@dataclass(frozen=True)
class SceneSpec:
    template: str
    parts: tuple[BoxPart, ...]
    gt_motion: dict[int, MotionParams]
    states: tuple[tuple[float, ...], ...]   # states[s][k] = t of part k+1 at state s
    gaussians_per_part: int = 500
    normalize: bool = True
    sh_degree: int = 1
    color_jitter: float = 0.06
    sh_rest_amplitude: float = 0.04


@dataclass
class GroundTruth:
    labels: Tensor                       # (N,) part label per generated Gaussian
    motions: dict[int, MotionParams]
    states: tuple[tuple[float, ...], ...]
    state_points: list[dict[int, Tensor]]  # per state: part label -> posed positions
    scale: float = 1.0                   # normalization factor applied to the template

    def points_for(self, state: int, label: int) -> Tensor:
        return self.state_points[state][label]

    def whole_points(self, state: int) -> Tensor:
        return torch.cat(list(self.state_points[state].values()))


_PALETTES = [
    ((0.85, 0.15, 0.15), (0.95, 0.55, 0.10), (0.90, 0.85, 0.15),
     (0.60, 0.20, 0.60), (0.80, 0.35, 0.30), (0.75, 0.10, 0.40)),
    ((0.15, 0.30, 0.85), (0.10, 0.70, 0.90), (0.20, 0.85, 0.45),
     (0.10, 0.50, 0.35), (0.35, 0.30, 0.80), (0.05, 0.60, 0.65)),
    ((0.55, 0.45, 0.20), (0.75, 0.65, 0.35), (0.45, 0.55, 0.15),
     (0.65, 0.50, 0.45), (0.50, 0.40, 0.30), (0.70, 0.60, 0.20)),
]


def _boxes_overlap(p: BoxPart, q: BoxPart) -> bool:
    return all(p.lo[i] < q.hi[i] and q.lo[i] < p.hi[i] for i in range(3))


def door_spec(gaussians_per_part: int = 500) -> SceneSpec:
    """Hinged panel swinging 40 degrees about the +z axis through (0.5, 0, 0)."""
    frame = BoxPart(0, (0.52, -0.06, -0.52), (0.64, 0.06, 0.52), _PALETTES[1])
    sill = BoxPart(0, (-0.50, -0.06, -0.64), (0.50, 0.06, -0.54), _PALETTES[2])
    panel = BoxPart(1, (-0.42, -0.025, -0.44), (0.48, 0.025, 0.44), _PALETTES[0])
    motion = Revolute(axis=(0.0, 0.0, 1.0), pivot=(0.5, 0.0, 0.0), theta=math.radians(40.0))
    return SceneSpec(
        template="door",
        parts=(frame, sill, panel),
        gt_motion={1: motion},
        states=((0.0,), (1.0,)),
        gaussians_per_part=gaussians_per_part,
    )


def drawer_spec(gaussians_per_part: int = 500) -> SceneSpec:
    """Open tray sliding 0.4 units along +x out of a static shell."""
    back = BoxPart(0, (-0.62, -0.40, -0.40), (-0.50, 0.40, 0.40), _PALETTES[1])
    base = BoxPart(0, (-0.50, -0.40, -0.46), (0.30, 0.40, -0.36), _PALETTES[2])
    tray = BoxPart(1, (-0.48, -0.30, -0.34), (0.28, 0.30, 0.05), _PALETTES[0])
    motion = Prismatic(axis=(1.0, 0.0, 0.0), distance=0.4)
    return SceneSpec(
        template="drawer",
        parts=(back, base, tray),
        gt_motion={1: motion},
        states=((0.0,), (1.0,)),
        gaussians_per_part=gaussians_per_part,
    )


def laptop_spec(gaussians_per_part: int = 500) -> SceneSpec:
    """Screen slab rotating 50 degrees about the y axis through the hinge line."""
    base = BoxPart(0, (-0.42, -0.32, -0.50), (0.42, 0.32, -0.40), _PALETTES[2])
    screen = BoxPart(1, (-0.40, -0.30, -0.38), (-0.32, 0.30, 0.42), _PALETTES[0])
    motion = Revolute(axis=(0.0, 1.0, 0.0), pivot=(-0.36, 0.0, -0.39), theta=math.radians(50.0))
    return SceneSpec(
        template="laptop",
        parts=(base, screen),
        gt_motion={1: motion},
        states=((0.0,), (1.0,)),
        gaussians_per_part=gaussians_per_part,
    )


def two_drawer_spec(gaussians_per_part: int = 400) -> SceneSpec:
    """Two stacked trays sliding +x one after the other over three states."""
    back = BoxPart(0, (-0.62, -0.40, -0.52), (-0.50, 0.40, 0.52), _PALETTES[1])
    shelf = BoxPart(0, (-0.50, -0.40, -0.06), (0.30, 0.40, 0.04), _PALETTES[2])
    low = BoxPart(1, (-0.48, -0.30, -0.48), (0.28, 0.30, -0.12), _PALETTES[0])
    high = BoxPart(2, (-0.48, -0.30, 0.10), (0.28, 0.30, 0.46),
                   ((0.20, 0.75, 0.75), (0.15, 0.55, 0.80), (0.30, 0.80, 0.50),
                    (0.10, 0.65, 0.60), (0.25, 0.70, 0.85), (0.15, 0.80, 0.65)))
    return SceneSpec(
        template="two-drawer",
        parts=(back, shelf, low, high),
        gt_motion={
            1: Prismatic(axis=(1.0, 0.0, 0.0), distance=0.42),
            2: Prismatic(axis=(1.0, 0.0, 0.0), distance=0.38),
        },
        states=((0.0, 0.0), (1.0, 0.0), (1.0, 1.0)),
        gaussians_per_part=gaussians_per_part,
    )


TEMPLATES = {
    "door": door_spec,
    "drawer": drawer_spec,
    "laptop": laptop_spec,
    "two-drawer": two_drawer_spec,
}


def scene_spec(template: str, gaussians_per_part: int | None = None) -> SceneSpec:
    if template not in TEMPLATES:
        raise ConfigError(f"unknown template {template!r}; choose from {sorted(TEMPLATES)}")
    if gaussians_per_part is None:
        return TEMPLATES[template]()
    return TEMPLATES[template](gaussians_per_part)


def _sample_box_faces(part: BoxPart, count: int, rng: np.random.Generator):
    """Uniform area-weighted samples on the 6 faces; returns positions, face ids."""
    lo = np.asarray(part.lo)
    hi = np.asarray(part.hi)
    ext = hi - lo
    areas = np.array([
        ext[1] * ext[2], ext[1] * ext[2],
        ext[0] * ext[2], ext[0] * ext[2],
        ext[0] * ext[1], ext[0] * ext[1],
    ])
    probs = areas / areas.sum()
    faces = rng.choice(6, size=count, p=probs)
    uv = rng.random((count, 2))
    pts = np.empty((count, 3))
    for f in range(6):
        sel = faces == f
        axis = f // 2
        other = [i for i in range(3) if i != axis]
        pts[sel, axis] = lo[axis] if f % 2 == 0 else hi[axis]
        pts[sel, other[0]] = lo[other[0]] + uv[sel, 0] * ext[other[0]]
        pts[sel, other[1]] = lo[other[1]] + uv[sel, 1] * ext[other[1]]
    total_area = areas.sum()
    spacing = math.sqrt(total_area / count)
    return pts, faces, spacing


def make_scene(spec: SceneSpec, seed: int = 0, dtype: torch.dtype = torch.float32):
    """Build the rest-state cloud and its ground truth. Deterministic per seed."""
    for i, p in enumerate(spec.parts):
        for q in spec.parts[i + 1:]:
            if _boxes_overlap(p, q):
                raise ConfigError(f"parts overlap at rest: {p.label} and {q.label}")
    n_states = len(spec.states)
    part_ids = sorted(spec.gt_motion)
    for s in spec.states:
        if len(s) != len(part_ids):
            raise ConfigError("each state must list one t value per movable part")

    rng = np.random.default_rng(seed)
    positions, colors, labels, log_scales = [], [], [], []
    for part in spec.parts:
        pts, faces, spacing = _sample_box_faces(part, spec.gaussians_per_part, rng)
        base = np.asarray(part.face_colors)[faces]
        jitter = rng.uniform(-spec.color_jitter, spec.color_jitter, (len(pts), 3))
        colors.append(np.clip(base + jitter, 0.02, 0.98))
        positions.append(pts)
        labels.extend([part.label] * len(pts))
        log_scales.append(np.full((len(pts), 3), math.log(spacing * 0.6)))

    pos = np.concatenate(positions)
    col = np.concatenate(colors)
    ls = np.concatenate(log_scales)
    n = len(pos)

    scale = 1.0
    if spec.normalize:
        max_r = float(np.linalg.norm(pos, axis=1).max())
        if max_r > 1.0:
            scale = 1.0 / max_r
            pos = pos * scale
            ls = ls + math.log(scale)

    bands = sh_band_count(spec.sh_degree)
    sh = np.zeros((n, bands, 3))
    sh[:, 0, :] = (col - 0.5) / 0.28209479177387814
    if spec.sh_degree >= 1:
        sh[:, 1:, :] = rng.uniform(-spec.sh_rest_amplitude, spec.sh_rest_amplitude, (n, bands - 1, 3))

    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    cloud = GaussianCloud(
        positions=torch.tensor(pos, dtype=dtype),
        rotations=torch.tensor(rot, dtype=dtype),
        log_scales=torch.tensor(ls, dtype=dtype),
        opacity_logits=torch.full((n,), 4.0, dtype=dtype),
        sh=torch.tensor(sh, dtype=dtype),
        mask=torch.tensor(labels, dtype=torch.int64),
    )

    motions = {}
    for pid, m in spec.gt_motion.items():
        if isinstance(m, Revolute):
            motions[pid] = Revolute(axis=m.axis, pivot=m.pivot * scale, theta=m.theta)
        else:
            motions[pid] = Prismatic(axis=m.axis, distance=m.distance * scale)

    gt = GroundTruth(labels=cloud.mask.clone(), motions=motions, states=spec.states,
                     state_points=[], scale=scale)
    for s in range(n_states):
        posed = pose_scene(cloud, gt, s)
        per_part = {}
        for lbl in sorted(set(int(v) for v in cloud.mask)):
            per_part[lbl] = posed.positions[cloud.mask == lbl].detach().clone()
        gt.state_points.append(per_part)
    return cloud, gt


def pose_scene(cloud: GaussianCloud, gt: GroundTruth, state: int) -> GaussianCloud:
    """Apply the ground-truth motions at the given state's interpolation values."""
    if not 0 <= state < len(gt.states):
        raise ConfigError(f"state index {state} out of range")
    posed = cloud
    part_ids = sorted(gt.motions)
    for k, pid in enumerate(part_ids):
        t = gt.states[state][k]
        if t != 0.0:
            posed = transform_cloud(posed, pid, gt.motions[pid], t)
    return posed


def fibonacci_directions(n: int) -> np.ndarray:
    """n roughly uniform unit vectors on the sphere (golden-angle lattice)."""
    i = np.arange(n)
    golden = (1 + math.sqrt(5)) / 2
    z = 1 - (2 * i + 1) / n
    r = np.sqrt(np.clip(1 - z * z, 0, None))
    phi = 2 * math.pi * i / golden
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def look_at_camera(position: np.ndarray, resolution: int, coverage: float = 1.25) -> Camera:
    """Camera at ``position`` looking at the origin, framing the unit sphere."""
    pos = np.asarray(position, dtype=np.float64)
    forward = -pos / np.linalg.norm(pos)
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 0.98:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])   # world-to-camera rows
    trans = -rot @ pos
    dist = float(np.linalg.norm(pos))
    tan_half = coverage / math.sqrt(max(dist * dist - coverage * coverage, 1e-6))
    f = (resolution / 2) / tan_half
    return Camera(rotation=torch.tensor(rot), translation=torch.tensor(trans),
                  fx=f, fy=f, cx=resolution / 2, cy=resolution / 2,
                  width=resolution, height=resolution)


@dataclass(frozen=True)
class CameraRig:
    radius: float = 2.5
    coverage: float = 1.25


def render_dataset(
    cloud: GaussianCloud,
    n_views: int,
    resolution: int,
    rig: CameraRig = CameraRig(),
    cfg: AppearanceLossConfig = AppearanceLossConfig(),
    settings: RasterSettings = RasterSettings(bbox_sigmas=3.3),
) -> tuple[list[Tensor], list[Camera]]:
    """Render supervision views from a Fibonacci sphere of cameras."""
    if n_views < 8:
        raise ConfigError("need at least 8 views")
    cams = [look_at_camera(d * rig.radius, resolution, rig.coverage)
            for d in fibonacci_directions(n_views)]
    images = [rasterize(cloud, cam, cfg, settings).pixels for cam in cams]
    return images, cams
