"""Keypoint discovery network: encoder, pose decoder, masked spatial
softmax bottleneck, and difference-image reconstruction decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

# Off-mask fill for heatmaps before spatial softmax. Multiplying raw (possibly
# negative) heatmaps by a 0/1 mask would not exclude cells under softmax, so
# off-mask cells are pushed to a large negative value instead.
MASK_FILL = -1.0e4


@dataclass
class ModelConfig:
    num_keypoints: int = 10
    num_agents: int = 2
    resolution: int = 256
    gaussian_sigma: float = 0.1  # std-dev of bottleneck Gaussians, normalized units
    encoder: str = "resnet50"  # "resnet50" or "tiny"
    mask_appearance: bool = False
    pretrained_backbone: str | None = None

    def __post_init__(self):
        if self.num_keypoints < 2:
            raise ValueError("num_keypoints must be >= 2")
        if self.num_agents < 1:
            raise ValueError("num_agents must be >= 1")
        stride = encoder_stride(self.encoder)
        if self.resolution % stride != 0:
            raise ValueError(
                f"resolution {self.resolution} must be a multiple of the "
                f"encoder stride {stride}"
            )

    @property
    def heatmap_size(self) -> int:
        # pose decoder emits quarter-resolution maps
        return self.resolution // 4


@dataclass
class KeypointSet:
    """Discovered keypoints for one frame: N agents x K keypoints."""

    points: np.ndarray  # (N, K, 2) normalized (u, v) in [-1, 1]
    confidence: np.ndarray  # (N, K)
    covariance: np.ndarray  # (N, K, 2, 2)


def encoder_stride(name: str) -> int:
    if name == "resnet50":
        return 32
    if name == "tiny":
        return 8
    raise ValueError(f"unknown encoder: {name!r}")


# ---------------------------------------------------------------------------
# Coordinate grids. Cells cover [-1, 1] uniformly; coordinate i maps to the
# cell center (2i + 1)/n - 1, which keeps grids symmetric under flips and
# exact 90-degree rotations and aligns block centers across resolutions.


def grid_coords(n: int, dtype=torch.float32, device=None) -> torch.Tensor:
    i = torch.arange(n, dtype=dtype, device=device)
    return (2.0 * i + 1.0) / n - 1.0


def normalized_to_pixels(points: np.ndarray, resolution: int) -> np.ndarray:
    """Map normalized [-1, 1] coordinates to pixel coordinates."""
    return (np.asarray(points) + 1.0) / 2.0 * resolution - 0.5


def pixels_to_normalized(points_px: np.ndarray, resolution: int) -> np.ndarray:
    return (np.asarray(points_px) + 0.5) / resolution * 2.0 - 1.0


def spatial_softmax(maps: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax a response map into a probability map and its coordinate mean.

    maps: (..., h, w) with at least one cell above MASK_FILL.
    Returns (points (..., 2) as (u, v), probs (..., h, w)).
    """
    h, w = maps.shape[-2:]
    flat = maps.reshape(*maps.shape[:-2], h * w)
    if not torch.isfinite(flat).all():
        raise ValueError("heatmap contains non-finite values")
    if (flat.max(dim=-1).values <= MASK_FILL).any():
        raise ValueError("all cells masked; spatial softmax undefined")
    probs = torch.softmax(flat, dim=-1).reshape(*maps.shape[:-2], h, w)
    gx = grid_coords(w, dtype=maps.dtype, device=maps.device)
    gy = grid_coords(h, dtype=maps.dtype, device=maps.device)
    u = (probs.sum(dim=-2) * gx).sum(dim=-1)
    v = (probs.sum(dim=-1) * gy).sum(dim=-1)
    return torch.stack([u, v], dim=-1), probs


def mask_heatmaps(heatmaps: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Copy the K shared heatmaps per agent and confine each to its mask.

    heatmaps: (..., K, h, w); masks: (..., N, h, w) binary.
    Returns (..., N, K, h, w) with off-mask cells at MASK_FILL.
    """
    if masks.shape[-2:] != heatmaps.shape[-2:]:
        raise ValueError(
            f"mask resolution {tuple(masks.shape[-2:])} does not match "
            f"heatmap resolution {tuple(heatmaps.shape[-2:])}"
        )
    m = masks.to(dtype=heatmaps.dtype)
    flat = m.reshape(*m.shape[:-2], -1)
    if (flat.sum(dim=-1) == 0).any():
        raise ValueError("empty agent mask; every agent needs at least one cell")
    hm = heatmaps.unsqueeze(-4)  # (..., 1, K, h, w)
    mm = m.unsqueeze(-3)  # (..., N, 1, h, w)
    return hm * mm + (1.0 - mm) * MASK_FILL


def geometry_bottleneck(
    points: torch.Tensor, sigma: float, shape: tuple[int, int]
) -> torch.Tensor:
    """Render one 2D Gaussian per keypoint on the normalized grid.

    points: (..., 2) in [-1, 1]; output (..., h, w) with channel max at the
    cell nearest the keypoint.
    """
    h, w = shape
    gx = grid_coords(w, dtype=points.dtype, device=points.device)
    gy = grid_coords(h, dtype=points.dtype, device=points.device)
    u = points[..., 0].unsqueeze(-1).unsqueeze(-1)
    v = points[..., 1].unsqueeze(-1).unsqueeze(-1)
    d2 = (gx.view(1, -1) - u) ** 2 + (gy.view(-1, 1) - v) ** 2
    return torch.exp(-d2 / (2.0 * sigma**2))


def rotate_maps(x: torch.Tensor, quarter_turns: int) -> torch.Tensor:
    """Rotate (..., h, w) maps counter-clockwise by 90-degree steps."""
    return torch.rot90(x, quarter_turns % 4, dims=(-2, -1))


def rotate_points(points: torch.Tensor, quarter_turns: int) -> torch.Tensor:
    """Rotate normalized (u, v) points the same way rotate_maps rotates maps:
    one counter-clockwise quarter turn maps (u, v) -> (v, -u)."""
    p = points
    for _ in range(quarter_turns % 4):
        p = torch.stack([p[..., 1], -p[..., 0]], dim=-1)
    return p


# ---------------------------------------------------------------------------
# Network blocks


def conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    """3x3 convolution + batch norm + ReLU."""
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class TinyEncoder(nn.Module):
    """Small strided CNN for desk-scale runs; stride 8."""

    out_channels = 64

    def __init__(self, widths=(16, 32, 64)):
        super().__init__()
        layers = []
        prev = 3
        for w in widths:
            layers.append(nn.Conv2d(prev, w, kernel_size=3, stride=2, padding=1, bias=False))
            layers.append(nn.BatchNorm2d(w))
            layers.append(nn.ReLU(inplace=True))
            prev = w
        self.net = nn.Sequential(*layers)
        self.out_channels = widths[-1]

    def forward(self, x):
        return self.net(x)


class ResNet50Encoder(nn.Module):
    """Torchvision ResNet-50 trunk; stride 32, 2048 channels.

    Randomly initialized by default; `weights_path` loads a local state
    dict when pretrained features are wanted.
    """

    out_channels = 2048

    def __init__(self, weights_path: str | None = None):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        if weights_path:
            net.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.trunk = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool,
            net.layer1, net.layer2, net.layer3, net.layer4,
        )

    def forward(self, x):
        return self.trunk(x)


class PoseDecoder(nn.Module):
    """Upsamples encoder features to quarter resolution and emits K raw
    heatmaps (lateral projection + refinement convs)."""

    def __init__(self, in_channels: int, num_keypoints: int, ups: int, mid: int):
        super().__init__()
        self.lateral = nn.Conv2d(in_channels, mid, kernel_size=1)
        self.stages = nn.ModuleList([conv_block(mid, mid) for _ in range(ups)])
        self.head = nn.Conv2d(mid, num_keypoints, kernel_size=3, padding=1)

    def forward(self, feat):
        x = self.lateral(feat)
        for stage in self.stages:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = stage(x)
        return self.head(x)


class ReconstructionDecoder(nn.Module):
    """Upsampling decoder; every stage sees the appearance stream
    concatenated with both frames' geometry bottlenecks."""

    def __init__(self, in_channels: int, geo_channels: int, stages: list[int]):
        super().__init__()
        self.geo_channels = geo_channels
        blocks = []
        prev = in_channels
        for out_ch in stages:
            blocks.append(conv_block(prev + 2 * geo_channels, out_ch))
            prev = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.final = nn.Conv2d(prev, 3, kernel_size=3, padding=1)

    def forward(self, appearance, geo_ref, geo_future):
        x = appearance
        for block in self.blocks:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            size = x.shape[-2:]
            g_ref = F.interpolate(geo_ref, size=size, mode="bilinear", align_corners=False)
            g_fut = F.interpolate(geo_future, size=size, mode="bilinear", align_corners=False)
            x = block(torch.cat([x, g_ref, g_fut], dim=1))
        return self.final(x)


class KeypointModel(nn.Module):
    """Full discovery model for frame pairs.

    The reference frame contributes appearance and geometry; the future
    frame contributes geometry only. Per-agent masks confine each agent's
    copy of the shared K heatmaps before the spatial softmax, so keypoint k
    means the same thing on every agent.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.encoder == "resnet50":
            self.encoder = ResNet50Encoder(config.pretrained_backbone)
            pose_mid = 256
        else:
            self.encoder = TinyEncoder()
            pose_mid = 32
        stride = encoder_stride(config.encoder)
        enc_size = config.resolution // stride
        pose_ups = int(math.log2(stride // 4))
        self.pose_decoder = PoseDecoder(
            self.encoder.out_channels, config.num_keypoints, pose_ups, pose_mid
        )
        n_recon = int(math.log2(config.resolution // enc_size))
        stages = [max(self.encoder.out_channels >> (i + 1), 8) for i in range(n_recon)]
        geo_ch = config.num_agents * config.num_keypoints
        self.recon_decoder = ReconstructionDecoder(
            self.encoder.out_channels, geo_ch, stages
        )
        # audit trail: frame tags whose appearance reached the decoder
        self.appearance_audit: list = []

    # -- pieces -------------------------------------------------------------

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        """Appearance features for (B, 3, H, W) frames at config resolution."""
        if frames.shape[-1] != self.config.resolution:
            raise ValueError(
                f"expected resolution {self.config.resolution}, got {frames.shape[-1]}"
            )
        return self.encoder(frames)

    def pose_heatmaps(self, features: torch.Tensor) -> torch.Tensor:
        """K raw heatmaps (B, K, h, w) at quarter resolution."""
        return self.pose_decoder(features)

    def keypoints_from_heatmaps(self, heatmaps, masks):
        """Masked softmax keypoints: points (B, N, K, 2), probs, masked maps."""
        masked = mask_heatmaps(heatmaps, masks)
        points, probs = spatial_softmax(masked)
        return points, probs, masked

    def bottleneck(self, frames, masks):
        """Geometry bottleneck (B, N*K, h, w) for frames with agent masks."""
        heatmaps = self.pose_heatmaps(self.encode(frames))
        points, _, _ = self.keypoints_from_heatmaps(heatmaps, masks)
        g = geometry_bottleneck(
            points, self.config.gaussian_sigma,
            (self.config.heatmap_size, self.config.heatmap_size),
        )
        b = frames.shape[0]
        return g.reshape(b, -1, *g.shape[-2:]), points

    def reconstruct(self, appearance, geo_ref, geo_future) -> torch.Tensor:
        """Predicted difference image (B, 1, H, W); 3-channel decoder output
        averaged down to the single-channel target."""
        out = self.recon_decoder(appearance, geo_ref, geo_future)
        return out.mean(dim=1, keepdim=True)

    # -- full pass ----------------------------------------------------------

    def forward_pair(self, ref, future, masks_ref, masks_future, audit_tags=None):
        """Run the discovery pipeline on a batch of frame pairs.

        ref/future: (B, 3, H, W); masks_*: (B, N, h, w) at heatmap size with
        agent order aligned between the two frames.
        """
        feat_ref = self.encode(ref)
        if audit_tags is not None:
            self.appearance_audit.extend(audit_tags)
        heat_ref = self.pose_heatmaps(feat_ref)
        points_ref, probs_ref, masked_ref = self.keypoints_from_heatmaps(heat_ref, masks_ref)

        heat_fut = self.pose_heatmaps(self.encode(future))
        points_fut, probs_fut, masked_fut = self.keypoints_from_heatmaps(heat_fut, masks_future)

        hw = (self.config.heatmap_size, self.config.heatmap_size)
        b = ref.shape[0]
        geo_ref = geometry_bottleneck(points_ref, self.config.gaussian_sigma, hw)
        geo_fut = geometry_bottleneck(points_fut, self.config.gaussian_sigma, hw)
        geo_ref = geo_ref.reshape(b, -1, *hw)
        geo_fut = geo_fut.reshape(b, -1, *hw)

        appearance = feat_ref
        if self.config.mask_appearance:
            union = masks_ref.to(feat_ref.dtype).amax(dim=1, keepdim=True)
            union = F.interpolate(union, size=feat_ref.shape[-2:], mode="nearest")
            appearance = feat_ref * union

        s_hat = self.reconstruct(appearance, geo_ref, geo_fut)
        return {
            "s_hat": s_hat,
            "points_ref": points_ref,
            "points_future": points_fut,
            "probs_ref": probs_ref,
            "probs_future": probs_fut,
            "masked_ref": masked_ref,
            "masked_future": masked_fut,
            "heatmaps_ref": heat_ref,
            "bottleneck_ref": geo_ref,
            "bottleneck_future": geo_fut,
        }

    @torch.no_grad()
    def extract_keypoints(self, frames: torch.Tensor, masks: torch.Tensor) -> list[KeypointSet]:
        """Eval-mode keypoints with confidence and covariance per agent."""
        from .features import heatmap_moments

        was_training = self.training
        self.eval()
        try:
            heatmaps = self.pose_heatmaps(self.encode(frames))
            points, probs, masked = self.keypoints_from_heatmaps(heatmaps, masks)
        finally:
            self.train(was_training)

        sets = []
        n, k = self.config.num_agents, self.config.num_keypoints
        for b in range(frames.shape[0]):
            conf = np.zeros((points.shape[1], k))
            cov = np.zeros((points.shape[1], k, 2, 2))
            for ai in range(points.shape[1]):
                for ki in range(k):
                    feats = heatmap_moments(
                        probs[b, ai, ki].cpu().numpy(),
                        points[b, ai, ki].cpu().numpy(),
                        raw_map=masked[b, ai, ki].cpu().numpy(),
                    )
                    conf[ai, ki] = feats.confidence
                    cov[ai, ki] = feats.cov
            sets.append(
                KeypointSet(
                    points=points[b].cpu().numpy().copy(),
                    confidence=conf,
                    covariance=cov,
                )
            )
        return sets
