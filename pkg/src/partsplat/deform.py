"""Per-Gaussian rigid deformation field and its training stage.

A small per-point network predicts a translation and quaternion increment for
every Gaussian of the converged start-state cloud, supervised by end-state
images plus a local-rigidity (ARAP) penalty over a frozen k-nearest-neighbor
graph.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .errors import DegenerateRotationError, DivergenceError
from .gaussians import GaussianCloud, quat_normalize, quat_to_rotmat
from .optim import AdamState, adam_step
from .render import AppearanceLossConfig, RasterSettings, FAST_RASTER, _render_graph, loss_app

CONV_WIDTHS = [3, 64, 64, 64, 64]
MLP_WIDTHS = [128, 128, 128, 7]


@dataclass
class DeformationField:
    """Evaluated field: per-Gaussian position and quaternion increments."""

    dx: Tensor  # (N, 3)
    dr: Tensor  # (N, 4)

    def detach(self) -> "DeformationField":
        return DeformationField(self.dx.detach(), self.dr.detach())

    def displacement_norms(self) -> Tensor:
        return self.dx.norm(dim=-1)


def positional_encoding(x: Tensor, bands: int) -> Tensor:
    """sin/cos features at octave frequencies: (N, 3) -> (N, 6 * bands)."""
    if bands == 0:
        return x.new_zeros(x.shape[0], 0)
    freqs = (2.0 ** torch.arange(bands, dtype=x.dtype)) * math.pi
    scaled = x.unsqueeze(-1) * freqs          # (N, 3, bands)
    enc = torch.cat([torch.sin(scaled), torch.cos(scaled)], dim=-1)
    return enc.reshape(x.shape[0], -1)


class DeformNet(torch.nn.Module):
    """Pointwise deformation network: a stack of kernel-size-1 conv layers
    (shared per-point linear maps) followed by an MLP over the feature joined
    with a positional encoding of the input position.

    The final layer is zero-initialized so the untrained field is exactly the
    identity deformation.
    """

    def __init__(self, pe_bands: int = 4, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.pe_bands = pe_bands
        gen = torch.Generator().manual_seed(seed)
        conv = []
        for cin, cout in zip(CONV_WIDTHS[:-1], CONV_WIDTHS[1:]):
            conv.append(self._linear(cin, cout, gen, dtype))
        self.conv_layers = torch.nn.ModuleList(conv)
        mlp_in = CONV_WIDTHS[-1] + 6 * pe_bands
        widths = [mlp_in] + MLP_WIDTHS
        mlp = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            mlp.append(self._linear(cin, cout, gen, dtype))
        self.mlp_layers = torch.nn.ModuleList(mlp)
        with torch.no_grad():
            self.mlp_layers[-1].weight.zero_()
            self.mlp_layers[-1].bias.zero_()

    @staticmethod
    def _linear(cin: int, cout: int, gen: torch.Generator, dtype: torch.dtype) -> torch.nn.Linear:
        layer = torch.nn.Linear(cin, cout, dtype=dtype)
        bound = 1.0 / math.sqrt(cin)
        with torch.no_grad():
            layer.weight.uniform_(-bound, bound, generator=gen)
            layer.bias.uniform_(-bound, bound, generator=gen)
        return layer

    def forward(self, positions: Tensor) -> DeformationField:
        x = positions.detach()  # stop-gradient: the field never moves its query points
        h = x
        for layer in self.conv_layers:
            h = torch.relu(layer(h))
        h = torch.cat([h, positional_encoding(x, self.pe_bands)], dim=-1)
        for layer in self.mlp_layers[:-1]:
            h = torch.relu(layer(h))
        out = self.mlp_layers[-1](h)
        return DeformationField(dx=out[:, 0:3], dr=out[:, 3:7])

    def params_vector(self) -> Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def load_params_vector(self, vec: Tensor) -> None:
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(vec[offset:offset + n].reshape(p.shape).to(p.dtype))
                offset += n
        if offset != vec.numel():
            raise DivergenceError("parameter vector length does not match the architecture")

    def architecture(self) -> dict:
        return {"conv": CONV_WIDTHS, "mlp": [CONV_WIDTHS[-1] + 6 * self.pe_bands] + MLP_WIDTHS,
                "pe_bands": self.pe_bands}


def deform_forward(net: DeformNet, positions: Tensor) -> DeformationField:
    """Evaluate the field; gradients reach network parameters only."""
    return net(positions)


def apply_deformation(cloud: GaussianCloud, fld: DeformationField) -> GaussianCloud:
    """Shift positions by dx and add dr to quaternions (renormalized for rendering)."""
    if fld.dx.shape[0] != len(cloud):
        raise DivergenceError("deformation field size does not match the cloud")
    q = cloud.rotations + fld.dr
    norms = q.norm(dim=-1)
    if (norms < 1e-8).any():
        raise DegenerateRotationError("quaternion increment collapsed r + dr to zero")
    return cloud.with_attrs(
        positions=cloud.positions + fld.dx,
        rotations=q / norms.unsqueeze(-1),
    )


@dataclass
class KnnGraph:
    """Frozen nearest-neighbor structure over start-state positions."""

    indices: Tensor  # (N, k) neighbor indices
    weights: Tensor  # (N, k) exp(-lambda * squared distance)
    k: int
    lambda_omega: float


def knn_build(positions: Tensor, k: int = 20, lambda_omega: float = 20.0) -> KnnGraph:
    """Exact k-nearest neighbors by Euclidean distance, ties broken by index."""
    n = positions.shape[0]
    k_eff = min(k, n - 1)
    pos = positions.detach()
    idx_chunks, w_chunks = [], []
    chunk = max(1, min(n, 2_000_000 // max(n, 1)))
    for start in range(0, n, chunk):
        block = pos[start:start + chunk]
        d2 = (block.unsqueeze(1) - pos.unsqueeze(0)).pow(2).sum(-1)  # (c, n)
        rows = torch.arange(start, start + block.shape[0])
        d2[torch.arange(block.shape[0]), rows] = float("inf")
        # stable sort on distances keeps index order among ties
        order = torch.argsort(d2, dim=1, stable=True)[:, :k_eff]
        idx_chunks.append(order)
        w_chunks.append(torch.exp(-lambda_omega * torch.gather(d2, 1, order)))
    return KnnGraph(indices=torch.cat(idx_chunks), weights=torch.cat(w_chunks),
                    k=k_eff, lambda_omega=lambda_omega)


def _safe_norm(d: Tensor) -> Tensor:
    """Row-wise 2-norm with exact zeros (and zero gradient) at zero rows."""
    sq = d.pow(2).sum(-1)
    positive = sq > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))),
                       torch.zeros_like(sq))


def arap_loss(
    cloud_before: GaussianCloud,
    cloud_after: GaussianCloud,
    graph: KnnGraph,
    sample: Tensor | None = None,
) -> Tensor:
    """As-rigid-as-possible penalty over neighbor pairs.

    For each sampled node i and neighbor j:
        w_ij * || (x_j - x_i) - R_i Rhat_i^{-1} (xhat_j - xhat_i) ||_2
    averaged with 1/(k |S|). Exactly zero under any global rigid motion.
    """
    if sample is None:
        sample = torch.arange(len(cloud_before))
    nbr = graph.indices[sample]              # (S, k)
    w = graph.weights[sample]

    x = cloud_before.positions
    xh = cloud_after.positions
    rel_before = x[nbr] - x[sample].unsqueeze(1)
    rel_after = xh[nbr] - xh[sample].unsqueeze(1)

    rot_before = quat_to_rotmat(quat_normalize(cloud_before.rotations[sample]))
    rot_after = quat_to_rotmat(quat_normalize(cloud_after.rotations[sample]))
    # R_i Rhat_i^{-1} applied to the deformed edge
    realigned = torch.einsum("sab,scb,skc->ska", rot_before, rot_after, rel_after)
    residual = _safe_norm(rel_before - realigned)
    return (w * residual).sum() / (graph.k * sample.numel())


@dataclass
class DeformConfig:
    steps: int = 2000
    lr: float = 1e-3
    lambda_arap: float = 1.0
    knn_k: int = 20
    lambda_omega: float = 20.0
    arap_sample: int = 5000
    pe_bands: int = 4
    seed: int = 0
    loss: AppearanceLossConfig = field(default_factory=AppearanceLossConfig)
    raster: RasterSettings = FAST_RASTER


def train_deform(
    cloud: GaussianCloud,
    end_images: list[Tensor],
    end_cameras: list,
    net: DeformNet | None = None,
    cfg: DeformConfig = DeformConfig(),
) -> tuple[DeformNet, DeformationField, list[float]]:
    """Fit the deformation field against end-state images.

    The cloud is frozen: only network parameters receive gradients. Each step
    samples one end-state camera, renders the deformed cloud, and minimizes
    appearance loss + lambda_arap * ARAP. Returns the trained network, the
    field evaluated on all Gaussians, and the loss trace.
    """
    frozen = cloud.detach()
    if net is None:
        net = DeformNet(pe_bands=cfg.pe_bands, seed=cfg.seed, dtype=frozen.dtype)
    graph = knn_build(frozen.positions, cfg.knn_k, cfg.lambda_omega)
    gen = torch.Generator().manual_seed(cfg.seed)
    params = list(net.parameters())
    states = [AdamState.zeros_like(p) for p in params]
    n = len(frozen)
    trace: list[float] = []

    for step in range(cfg.steps):
        cam_i = int(torch.randint(len(end_images), (1,), generator=gen))
        fld = deform_forward(net, frozen.positions)
        deformed = apply_deformation(frozen, fld)
        pixels, _, _ = _render_graph(deformed, end_cameras[cam_i], cfg.loss, cfg.raster)
        loss = loss_app(pixels, end_images[cam_i].to(frozen.dtype), cfg.loss)
        if cfg.lambda_arap > 0:
            if n > cfg.arap_sample:
                sample = torch.randperm(n, generator=gen)[: cfg.arap_sample]
            else:
                sample = torch.arange(n)
            loss = loss + cfg.lambda_arap * arap_loss(frozen, deformed, graph, sample)
        if not torch.isfinite(loss):
            raise DivergenceError(f"deformation loss non-finite at step {step}, camera {cam_i}")
        loss.backward()
        for p, st in zip(params, states):
            if p.grad is None:
                continue
            new_p, _ = adam_step(p.detach(), p.grad, st, cfg.lr, "deform-net")
            with torch.no_grad():
                p.copy_(new_p)
            p.grad = None
        trace.append(float(loss))

    with torch.no_grad():
        final = deform_forward(net, frozen.positions)
    return net, final.detach(), trace
