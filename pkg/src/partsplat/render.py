"""Differentiable CPU rasterizer for Gaussian clouds plus the appearance losses.

The forward pass projects every Gaussian to an EWA splat (mean, 2x2 covariance),
sorts splats front-to-back, and alpha-composites them per pixel. Reverse-mode
gradients with respect to every Gaussian attribute come from the autograd graph
built by the same forward code; ``rasterize_backward`` exposes them behind a
functional interface and is validated against central finite differences in the
test suite.

Compositing per pixel p, splats sorted by (depth, index):
    alpha_i = opacity_i * exp(-0.5 d^T cov2d_i^{-1} d),  d = p - mean2d_i
    C(p)    = sum_i color_i * alpha_i * T_i + T_final * background,
    T_i     = prod_{j<i} (1 - alpha_j), stop once T < transmittance_min.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError, ContractViolation
from .gaussians import Camera, GaussianCloud, covariance3d, sh_eval


@dataclass(frozen=True)
class AppearanceLossConfig:
    """Weights and SSIM window for the L1 + D-SSIM appearance loss."""

    lambda_dssim: float = 0.2
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ConfigError("lambda_dssim must lie in [0, 1]")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ConfigError("ssim_window must be an odd integer >= 3")


@dataclass(frozen=True)
class RasterSettings:
    """Numerical knobs of the rasterizer.

    ``bbox_sigmas=None`` makes every visible splat contribute to every pixel
    (the exact reference mode used by gradient tests); a finite value restricts
    each splat to the pixels within that many standard deviations, which is the
    fast mode used in training loops. ``alpha_min`` additionally skips
    contributions whose alpha falls below it (0 disables the cutoff).
    """

    near: float = 0.01
    blur: float = 0.3            # px^2 anti-aliasing floor added to cov2d
    alpha_clamp: float = 0.99
    transmittance_min: float = 1e-4
    bbox_sigmas: float | None = None
    alpha_min: float = 0.0
    max_cond: float = 1e12


FAST_RASTER = RasterSettings(bbox_sigmas=3.3, alpha_min=1.0 / 255.0)


@dataclass
class ProjectedSplats:
    mean2d: Tensor   # (N, 2) pixel coordinates
    cov2d: Tensor    # (N, 2, 2)
    depth: Tensor    # (N,) camera-space z
    visible: Tensor  # (N,) bool


@dataclass
class RenderedImage:
    """Forward output plus the per-pixel buffers the backward pass checks against."""

    pixels: Tensor        # (H, W, 3) in [0, 1]
    t_final: Tensor       # (H, W) leftover transmittance
    n_contrib: Tensor     # (H, W) int32, composited splat contributions per pixel
    skipped_singular: int  # splats dropped for ill-conditioned cov2d


@dataclass
class GaussianGrads:
    """Per-Gaussian partials of a scalar image loss."""

    dx: Tensor       # (N, 3)
    dr: Tensor       # (N, 4)
    ds: Tensor       # (N, 3)
    dsigma: Tensor   # (N,)
    dsh: Tensor      # (N, B, 3)
    view_grad_norm: Tensor  # (N,) |dL/dmean2d|, densification signal

    def assert_finite(self) -> None:
        for name in ("dx", "dr", "ds", "dsigma", "dsh"):
            if not torch.isfinite(getattr(self, name)).all():
                raise ContractViolation(f"non-finite gradient in {name}")


def project_gaussians(
    cloud: GaussianCloud, cam: Camera, settings: RasterSettings = RasterSettings()
) -> ProjectedSplats:
    """EWA projection of all Gaussians into the camera's pixel plane.

    cov2d = J W Sigma W^T J^T + blur*I with W the camera rotation and J the
    pinhole Jacobian at the camera-space position. A splat is invisible when
    its depth is at or behind the near plane or its 3-sigma extent misses the
    image.
    """
    dtype = cloud.dtype
    rot = cam.rotation.to(dtype)
    trans = cam.translation.to(dtype)
    xyz = cloud.positions @ rot.T + trans
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    in_front = z > settings.near
    z_safe = torch.where(in_front, z, torch.ones_like(z))

    u = cam.fx * x / z_safe + cam.cx
    v = cam.fy * y / z_safe + cam.cy
    mean2d = torch.stack([u, v], dim=-1)

    cov3d = covariance3d(cloud.rotations, cloud.log_scales)
    zero = torch.zeros_like(z_safe)
    j_row0 = torch.stack([cam.fx / z_safe, zero, -cam.fx * x / z_safe**2], dim=-1)
    j_row1 = torch.stack([zero, cam.fy / z_safe, -cam.fy * y / z_safe**2], dim=-1)
    jac = torch.stack([j_row0, j_row1], dim=-2)           # (N, 2, 3)
    m = jac @ rot                                          # (N, 2, 3)
    cov2d = m @ cov3d @ m.transpose(-1, -2)
    cov2d = cov2d + settings.blur * torch.eye(2, dtype=dtype)

    rx = 3.0 * torch.sqrt(cov2d[:, 0, 0].detach().clamp(min=0))
    ry = 3.0 * torch.sqrt(cov2d[:, 1, 1].detach().clamp(min=0))
    u_d, v_d = u.detach(), v.detach()
    on_image = (
        (u_d + rx >= 0)
        & (u_d - rx <= cam.width - 1)
        & (v_d + ry >= 0)
        & (v_d - ry <= cam.height - 1)
    )
    visible = in_front & on_image
    return ProjectedSplats(mean2d=mean2d, cov2d=cov2d, depth=z, visible=visible)


def project_gaussian(g, cam: Camera, settings: RasterSettings = RasterSettings()):
    """Single-Gaussian convenience wrapper: (mean2d, cov2d, depth, visible)."""
    cloud = GaussianCloud(
        g.x.unsqueeze(0), g.r.unsqueeze(0), g.s.unsqueeze(0),
        g.sigma.reshape(1), g.sh.unsqueeze(0), torch.tensor([g.m]),
    )
    proj = project_gaussians(cloud, cam, settings)
    return proj.mean2d[0], proj.cov2d[0], proj.depth[0], bool(proj.visible[0])


def _render_graph(
    cloud: GaussianCloud,
    cam: Camera,
    cfg: AppearanceLossConfig,
    settings: RasterSettings,
    view_dirs: Tensor | None = None,
) -> tuple[Tensor, Tensor, dict]:
    """Differentiable forward pass.

    Returns (pixels (H,W,3), mean2d (N,2), aux) where mean2d is the tensor to
    ``retain_grad`` on for densification statistics. aux holds detached
    per-pixel buffers. ``view_dirs`` (N, 3) overrides the per-splat SH view
    directions; the finite-difference oracle passes the unperturbed directions
    because color is differentiated with the view direction held fixed.
    """
    dtype = cloud.dtype
    h, w = cam.height, cam.width
    n_pix = h * w
    bg = torch.tensor(cfg.background, dtype=dtype)

    empty_aux = {
        "t_final": torch.ones(h, w, dtype=dtype),
        "n_contrib": torch.zeros(h, w, dtype=torch.int32),
        "skipped_singular": 0,
    }
    if len(cloud) == 0:
        pixels = bg.expand(h, w, 3).clone()
        return pixels, torch.zeros(0, 2, dtype=dtype), empty_aux

    proj = project_gaussians(cloud, cam, settings)
    mean2d = proj.mean2d

    a = proj.cov2d[:, 0, 0]
    b = proj.cov2d[:, 0, 1]
    d = proj.cov2d[:, 1, 1]
    det = a * d - b * b
    with torch.no_grad():
        tr = a + d
        disc = torch.sqrt(((a - d) ** 2 + 4 * b * b).clamp(min=0))
        lam_min = 0.5 * (tr - disc)
        lam_max = 0.5 * (tr + disc)
        singular = (lam_min <= 0) | (lam_max > settings.max_cond * lam_min)
    skipped = int((singular & proj.visible).sum())

    valid = proj.visible & ~singular
    idx = torch.nonzero(valid, as_tuple=False).squeeze(-1)
    if idx.numel() == 0:
        pixels = bg.expand(h, w, 3).clone()
        empty_aux["skipped_singular"] = skipped
        return pixels, mean2d, empty_aux

    # Stable front-to-back order with ties broken by cloud index.
    order = torch.argsort(proj.depth[idx].detach(), stable=True)
    ranked = idx[order]

    # View-dependent colors, direction held fixed per splat (no grad to it).
    if view_dirs is None:
        center = cam.center.to(dtype)
        view_dir = cloud.positions[ranked].detach() - center
        view_dir = view_dir / view_dir.norm(dim=-1, keepdim=True).clamp(min=1e-12)
    else:
        view_dir = view_dirs[ranked].to(dtype)
    colors = sh_eval(cloud.sh[ranked], view_dir).clamp(0.0, 1.0)   # (K, 3)
    opacity = torch.sigmoid(cloud.opacity_logits[ranked])

    mu = mean2d[ranked]
    ar, br, dr = a[ranked], b[ranked], d[ranked]
    det_r = det[ranked]

    # Pixel footprint of each splat.
    if settings.bbox_sigmas is None:
        x0 = torch.zeros_like(ranked)
        x1 = torch.full_like(ranked, w - 1)
        y0 = torch.zeros_like(ranked)
        y1 = torch.full_like(ranked, h - 1)
    else:
        with torch.no_grad():
            rx = settings.bbox_sigmas * torch.sqrt(ar.clamp(min=0))
            ry = settings.bbox_sigmas * torch.sqrt(dr.clamp(min=0))
            x0 = (mu[:, 0] - rx).ceil().clamp(0, w - 1).long()
            x1 = (mu[:, 0] + rx).floor().clamp(0, w - 1).long()
            y0 = (mu[:, 1] - ry).ceil().clamp(0, h - 1).long()
            y1 = (mu[:, 1] + ry).floor().clamp(0, h - 1).long()

    box_w = (x1 - x0 + 1).clamp(min=0)
    box_h = (y1 - y0 + 1).clamp(min=0)
    counts = box_w * box_h
    total = int(counts.sum())
    if total == 0:
        pixels = bg.expand(h, w, 3).clone()
        empty_aux["skipped_singular"] = skipped
        return pixels, mean2d, empty_aux

    starts = torch.cumsum(counts, 0) - counts
    pair_splat = torch.repeat_interleave(torch.arange(counts.numel()), counts)
    local = torch.arange(total) - starts[pair_splat]
    px = x0[pair_splat] + local % box_w[pair_splat]
    py = y0[pair_splat] + local // box_w[pair_splat]

    dx = px.to(dtype) - mu[pair_splat, 0]
    dy = py.to(dtype) - mu[pair_splat, 1]
    inv_det = 1.0 / det_r[pair_splat]
    quad = (dr[pair_splat] * dx * dx - 2 * br[pair_splat] * dx * dy + ar[pair_splat] * dy * dy) * inv_det
    alpha = opacity[pair_splat] * torch.exp(-0.5 * quad)
    alpha = alpha.clamp(max=settings.alpha_clamp)

    if settings.alpha_min > 0:
        keep = alpha.detach() >= settings.alpha_min
        alpha = alpha[keep]
        pair_splat = pair_splat[keep]
        px, py = px[keep], py[keep]

    pix_id = py * w + px
    # Stable sort by pixel keeps the depth-rank order within each pixel.
    reorder = torch.argsort(pix_id, stable=True)
    pix_s = pix_id[reorder]
    alpha_s = alpha[reorder]
    splat_s = pair_splat[reorder]

    log_t = torch.log1p(-alpha_s)
    csum = torch.cumsum(log_t, 0)
    excl = csum - log_t
    seg_new = torch.ones_like(pix_s, dtype=torch.bool)
    seg_new[1:] = pix_s[1:] != pix_s[:-1]
    seg_id = torch.cumsum(seg_new.long(), 0) - 1
    seg_base = excl[seg_new][seg_id]
    t_before = torch.exp(excl - seg_base)

    include = (t_before.detach() >= settings.transmittance_min).to(dtype)
    weights = alpha_s * t_before * include

    img = torch.zeros(n_pix, 3, dtype=dtype)
    img = img.index_add(0, pix_s, weights.unsqueeze(-1) * colors[splat_s])
    log_t_final = torch.zeros(n_pix, dtype=dtype).index_add(0, pix_s, log_t * include)
    t_final = torch.exp(log_t_final)
    pixels = (img + t_final.unsqueeze(-1) * bg).clamp(0.0, 1.0).reshape(h, w, 3)

    with torch.no_grad():
        n_contrib = torch.zeros(n_pix, dtype=torch.int32).index_add(
            0, pix_s, include.to(torch.int32)
        )
    aux = {
        "t_final": t_final.detach().reshape(h, w),
        "n_contrib": n_contrib.reshape(h, w),
        "skipped_singular": skipped,
    }
    return pixels, mean2d, aux


def sh_view_dirs(cloud: GaussianCloud, cam: Camera) -> Tensor:
    """Unit directions from the camera center to every Gaussian (N, 3), no grad."""
    center = cam.center.to(cloud.dtype)
    d = cloud.positions.detach() - center
    return d / d.norm(dim=-1, keepdim=True).clamp(min=1e-12)


def rasterize(
    cloud: GaussianCloud,
    cam: Camera,
    cfg: AppearanceLossConfig = AppearanceLossConfig(),
    settings: RasterSettings = RasterSettings(),
) -> RenderedImage:
    """Forward rasterization into an RGB image (values in [0, 1])."""
    with torch.no_grad():
        pixels, _, aux = _render_graph(cloud, cam, cfg, settings)
    return RenderedImage(
        pixels=pixels,
        t_final=aux["t_final"],
        n_contrib=aux["n_contrib"],
        skipped_singular=aux["skipped_singular"],
    )


def rasterize_backward(
    cloud: GaussianCloud,
    cam: Camera,
    image: RenderedImage,
    dL_dpixels: Tensor,
    cfg: AppearanceLossConfig = AppearanceLossConfig(),
    settings: RasterSettings = RasterSettings(),
) -> GaussianGrads:
    """Analytic partials of a scalar loss given dL/dpixels for ``image``.

    The image must come from ``rasterize`` on this exact cloud/camera/config;
    the pass re-runs the forward and raises ContractViolation if the stored
    buffers do not reproduce.
    """
    if dL_dpixels.shape != image.pixels.shape:
        raise ContractViolation("dL_dpixels shape does not match the rendered image")
    leaves = {
        "positions": cloud.positions.detach().clone().requires_grad_(True),
        "rotations": cloud.rotations.detach().clone().requires_grad_(True),
        "log_scales": cloud.log_scales.detach().clone().requires_grad_(True),
        "opacity_logits": cloud.opacity_logits.detach().clone().requires_grad_(True),
        "sh": cloud.sh.detach().clone().requires_grad_(True),
    }
    live = cloud.with_attrs(**leaves)
    pixels, mean2d, aux = _render_graph(live, cam, cfg, settings)
    if not torch.equal(pixels.detach(), image.pixels) or not torch.equal(
        aux["n_contrib"], image.n_contrib
    ):
        raise ContractViolation(
            "auxiliary buffers do not match this cloud/camera: "
            "the image was rendered from different inputs"
        )
    n = len(cloud)
    dtype = cloud.dtype
    if not pixels.requires_grad:
        # Nothing visible: the image is pure background, all partials vanish.
        return GaussianGrads(
            dx=torch.zeros(n, 3, dtype=dtype),
            dr=torch.zeros(n, 4, dtype=dtype),
            ds=torch.zeros(n, 3, dtype=dtype),
            dsigma=torch.zeros(n, dtype=dtype),
            dsh=torch.zeros_like(cloud.sh),
            view_grad_norm=torch.zeros(n, dtype=dtype),
        )
    grab = [leaves["positions"], leaves["rotations"], leaves["log_scales"],
            leaves["opacity_logits"], leaves["sh"], mean2d]
    grads = torch.autograd.grad(
        pixels, grab, grad_outputs=dL_dpixels.to(pixels.dtype), allow_unused=True
    )

    def _or_zeros(g: Tensor | None, like: Tensor) -> Tensor:
        return g if g is not None else torch.zeros_like(like)

    view_grad = _or_zeros(grads[5], mean2d.detach() if mean2d.numel() else torch.zeros(n, 2, dtype=dtype))
    out = GaussianGrads(
        dx=_or_zeros(grads[0], leaves["positions"]),
        dr=_or_zeros(grads[1], leaves["rotations"]),
        ds=_or_zeros(grads[2], leaves["log_scales"]),
        dsigma=_or_zeros(grads[3], leaves["opacity_logits"]),
        dsh=_or_zeros(grads[4], leaves["sh"]),
        view_grad_norm=view_grad.norm(dim=-1) if view_grad.numel() else torch.zeros(n, dtype=dtype),
    )
    out.assert_finite()
    return out


# ---------------------------------------------------------------------------
# Appearance losses


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ConfigError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_l1(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all pixels and channels."""
    _check_same_shape(a, b)
    return (a - b).abs().mean()


def gaussian_window(size: int, sigma: float, dtype: torch.dtype = torch.float64) -> Tensor:
    """Normalized 2D Gaussian window (size, size)."""
    half = (size - 1) / 2.0
    coords = torch.arange(size, dtype=dtype) - half
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_mean(a: Tensor, b: Tensor, window: int = 11, sigma: float = 1.5) -> Tensor:
    """Mean SSIM over valid window positions, unit dynamic range.

    Accepts (H, W, 3) images; constants C1 = 0.01^2, C2 = 0.03^2.
    """
    _check_same_shape(a, b)
    h, w = a.shape[0], a.shape[1]
    if h < window or w < window:
        raise ConfigError(f"image {h}x{w} smaller than SSIM window {window}")
    dtype = a.dtype
    kernel = gaussian_window(window, sigma, dtype).reshape(1, 1, window, window).repeat(3, 1, 1, 1)
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)

    def blur(t: Tensor) -> Tensor:
        return F.conv2d(t, kernel, groups=3)

    c1, c2 = 0.01**2, 0.03**2
    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x * mu_x
    syy = blur(y * y) - mu_y * mu_y
    sxy = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return (num / den).mean()


def loss_dssim(a: Tensor, b: Tensor, cfg: AppearanceLossConfig = AppearanceLossConfig()) -> Tensor:
    """Structural dissimilarity (1 - SSIM) / 2."""
    return (1.0 - ssim_mean(a, b, cfg.ssim_window, cfg.ssim_sigma)) / 2.0


def loss_app(a: Tensor, b: Tensor, cfg: AppearanceLossConfig = AppearanceLossConfig()) -> Tensor:
    """(1 - lambda) L1 + lambda D-SSIM."""
    lam = cfg.lambda_dssim
    if lam == 0.0:
        return loss_l1(a, b)
    if lam == 1.0:
        return loss_dssim(a, b, cfg)
    return (1.0 - lam) * loss_l1(a, b) + lam * loss_dssim(a, b, cfg)
