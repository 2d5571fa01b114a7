"""Training objective: perceptual reconstruction, rotation equivariance,
keypoint separation, and the curriculum-weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import rotate_maps


@dataclass
class LossWeights:
    w_r: float = 1.0
    w_s: float = 1.0
    curriculum_epoch: int = 5  # auxiliary losses activate strictly after this epoch
    sigma_s: float = 0.05

    def __post_init__(self):
        if self.w_r < 0 or self.w_s < 0:
            raise ValueError("loss weights must be non-negative")
        if self.curriculum_epoch < 0:
            raise ValueError("curriculum_epoch must be >= 0")
        if self.sigma_s <= 0:
            raise ValueError("sigma_s must be positive")


@dataclass
class LossReport:
    recon: float
    rotation: float
    separation: float
    total: float
    curriculum_active: bool


class FeaturePyramid(nn.Module):
    """Fixed-weight convolutional feature stack for the perceptual loss.

    Two-conv blocks with pooling in between, weights drawn once from a
    seeded generator and frozen, so runs are hermetic and reproducible.
    Genuine pretrained features can be swapped in via `vgg_features`.
    """

    def __init__(self, widths=(8, 16), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        blocks = []
        prev = 3
        for w in widths:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(prev, w, kernel_size=3, padding=1),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(w, w, kernel_size=3, padding=1),
                    nn.ReLU(inplace=True),
                )
            )
            prev = w
        self.blocks = nn.ModuleList(blocks)
        for p in self.parameters():
            fan_in = p.shape[1] * 9 if p.dim() == 4 else p.shape[0]
            with torch.no_grad():
                p.copy_(torch.randn(p.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = F.avg_pool2d(x, 2)
            x = block(x)
            feats.append(x)
        return feats


def vgg_features(weights_path: str) -> nn.Module:
    """VGG16 feature trunk loaded from a local state dict (optional)."""
    from torchvision.models import vgg16

    net = vgg16(weights=None)
    net.load_state_dict(torch.load(weights_path, map_location="cpu"))
    trunk = net.features[:16]
    for p in trunk.parameters():
        p.requires_grad_(False)

    class _Wrapper(nn.Module):
        def __init__(self, trunk):
            super().__init__()
            self.trunk = trunk

        def forward(self, x):
            feats = []
            for i, layer in enumerate(self.trunk):
                x = layer(x)
                if i in (3, 8, 15):
                    feats.append(x)
            return feats

    return _Wrapper(trunk)


def _as_feature_input(x) -> torch.Tensor:
    """Coerce a map to (B, 3, H, W): tile channels, add batch dim."""
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    if x.dim() == 2:
        x = x.unsqueeze(0).unsqueeze(0)
    elif x.dim() == 3:
        x = x.unsqueeze(0)
    if x.shape[1] == 1:
        x = x.expand(-1, 3, -1, -1)
    return x


def perceptual_loss(s, s_hat, feature_extractor: nn.Module) -> torch.Tensor:
    """Sum over feature blocks of the MSE between extracted features.

    Both maps are tiled to the extractor's 3-channel input. Symmetric in
    its two arguments and zero iff the feature stacks agree.
    """
    a = _as_feature_input(s)
    b = _as_feature_input(s_hat)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    loss = 0.0
    for fa, fb in zip(feature_extractor(a), feature_extractor(b)):
        loss = loss + F.mse_loss(fa, fb)
    return loss


def rotation_equivariance_loss(
    model,
    frames: torch.Tensor,
    masks: torch.Tensor,
    degrees=(90, 180, 270),
    base: torch.Tensor | None = None,
) -> torch.Tensor:
    """Penalty for keypoints that do not rotate with the image.

    For each rotation, the frame and its masks are rotated on the grid and
    the model's predicted geometry bottleneck is compared (MSE) against the
    rotated original bottleneck used as a pseudo-label. Averaged over
    degrees. Frames must be square so rotations are grid-exact.
    """
    if frames.shape[-1] != frames.shape[-2]:
        raise ValueError("rotation equivariance requires square frames")
    for d in degrees:
        if d % 90 != 0 or d % 360 == 0:
            raise ValueError(f"degrees must be non-trivial multiples of 90, got {d}")
    if base is None:
        base, _ = model.bottleneck(frames, masks)
    base = base.detach()

    loss = 0.0
    for d in degrees:
        k = (d // 90) % 4
        pseudo = rotate_maps(base, k)
        pred, _ = model.bottleneck(rotate_maps(frames, k), rotate_maps(masks, k))
        loss = loss + F.mse_loss(pred, pseudo)
    return loss / len(degrees)


def separation_loss(points, sigma_s: float) -> torch.Tensor:
    """Gaussian repulsion between every ordered pair of an agent's keypoints.

    points: (N, K, 2) or batched (B, N, K, 2) normalized coordinates.
    Returns the sum over agents (mean over the batch dim when present) of
    sum_{i != j} exp(-|p_i - p_j|^2 / (2 sigma_s^2)).
    """
    if not isinstance(points, torch.Tensor):
        points = torch.as_tensor(np.asarray(points), dtype=torch.float64)
    if sigma_s <= 0:
        raise ValueError("sigma_s must be positive")
    k = points.shape[-2]
    diff = points.unsqueeze(-2) - points.unsqueeze(-3)  # (..., K, K, 2)
    d2 = (diff**2).sum(dim=-1)
    off_diag = 1.0 - torch.eye(k, dtype=points.dtype, device=points.device)
    per_agent = (torch.exp(-d2 / (2.0 * sigma_s**2)) * off_diag).sum(dim=(-2, -1))
    per_sample = per_agent.sum(dim=-1)  # sum over agents
    return per_sample.mean() if per_sample.dim() > 0 else per_sample


def total_loss(recon, rot, sep, weights: LossWeights, epoch: int) -> LossReport:
    """Combine loss terms under the curriculum indicator.

    Auxiliary terms contribute only when epoch > weights.curriculum_epoch.
    Accepts floats or scalar tensors; the report carries whichever was given.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    active = epoch > weights.curriculum_epoch
    if active:
        total = recon + weights.w_r * rot + weights.w_s * sep
    else:
        total = recon
    return LossReport(
        recon=recon, rotation=rot, separation=sep, total=total, curriculum_active=active
    )
