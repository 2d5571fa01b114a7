"""Training loop, run configuration, checkpointing, and inference."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch

from .features import heatmap_moments
from .losses import (
    FeaturePyramid,
    LossWeights,
    perceptual_loss,
    rotation_equivariance_loss,
    separation_loss,
    total_loss,
)
from .model import KeypointModel, KeypointSet, ModelConfig, normalized_to_pixels
from .segmentation import AgentMaskSet, read_masks, split_and_downsample
from .target import SSIM_DISSIMILARITY, TARGET_KINDS, difference_target
from .video_io import Frame, FramePair, load_sequence, sample_pairs

INFERENCE_COLUMNS = (
    "frame,agent,kp,x_px,y_px,confidence,cov_xx,cov_xy,cov_yy"
)
LOSS_COLUMNS = "step,epoch,recon,rot,sep,total,curriculum_active"


@dataclass
class TrainConfig:
    batch_size: int = 5
    resolution: int = 256
    frame_gap: int = 6
    learning_rate: float = 0.001
    num_agents: int = 2
    num_keypoints: int = 10
    epochs: int = 30
    w_r: float = 1.0
    w_s: float = 1.0
    curriculum_epoch: int = 5
    sigma_s: float = 0.05
    target_kind: str = SSIM_DISSIMILARITY
    seed: int = 0
    gaussian_sigma: float = 0.1
    encoder: str = "resnet50"
    pair_stride: int = 1
    full_frame_mask: bool = False
    mask_appearance: bool = False
    early_stop: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.target_kind not in TARGET_KINDS:
            raise ValueError(f"target_kind must be one of {TARGET_KINDS}")
        if self.full_frame_mask and self.num_agents != 1:
            raise ValueError("full_frame_mask implies num_agents == 1")

    @classmethod
    def tiny(cls, **overrides) -> "TrainConfig":
        """Desk-scale profile: small encoder at 64px, larger batches for
        CPU throughput."""
        base = dict(
            resolution=64, encoder="tiny", num_keypoints=4, batch_size=16
        )
        base.update(overrides)
        return cls(**base)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            w_r=self.w_r, w_s=self.w_s,
            curriculum_epoch=self.curriculum_epoch, sigma_s=self.sigma_s,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_keypoints=self.num_keypoints,
            num_agents=self.num_agents,
            resolution=self.resolution,
            gaussian_sigma=self.gaussian_sigma,
            encoder=self.encoder,
            mask_appearance=self.mask_appearance,
        )


def write_config_snapshot(config: TrainConfig, path: str) -> None:
    """Flat key = value snapshot; replaying it reproduces the run."""
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        for f in fields(config):
            fh.write(f"{f.name} = {getattr(config, f.name)}\n")
    os.replace(tmp, path)


def parse_config_file(path: str) -> dict:
    """Read flat key = value lines; '#' starts a comment."""
    known = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _coerce(key, value)
    return out


def _coerce(key: str, value: str):
    for f in fields(TrainConfig):
        if f.name != key:
            continue
        default = f.default
        if isinstance(default, bool):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"bad boolean for {key}: {value!r}")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    raise KeyError(key)


def load_config(path: str | None = None, **overrides) -> TrainConfig:
    """Config file values overridden by explicit keyword flags."""
    values = parse_config_file(path) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# Dataset


class PairDataset:
    """Frame pairs with precomputed targets and heatmap-resolution masks.

    Frames whose tracked agents do not line up with the configured count
    (or whose ids differ between the two frames of a pair) are skipped and
    counted in `skipped_pairs`.
    """

    def __init__(
        self,
        config: TrainConfig,
        frames: list[Frame],
        mask_sets: list[AgentMaskSet] | None,
    ):
        self.config = config
        self.frames = frames
        hm = config.model_config().heatmap_size

        by_frame: dict[int, AgentMaskSet] = {}
        if mask_sets is not None:
            by_frame = {ms.frame_index: ms for ms in mask_sets}

        self.masks: dict[int, np.ndarray] = {}
        self.mask_ids: dict[int, tuple] = {}
        for f in frames:
            if config.full_frame_mask:
                self.masks[f.index] = np.ones((1, hm, hm), dtype=np.float32)
                self.mask_ids[f.index] = (0,)
                continue
            ms = by_frame.get(f.index)
            if ms is None:
                raise ValueError(f"no masks for frame {f.index}")
            segs = sorted(ms.segments, key=lambda s: s.id)[: config.num_agents]
            if len(segs) < config.num_agents:
                continue  # tracker lost an agent here; pairs through it are skipped
            subset = AgentMaskSet(frame_index=ms.frame_index, segments=segs)
            low = split_and_downsample(subset, hm)
            self.masks[f.index] = np.stack(low).astype(np.float32)
            self.mask_ids[f.index] = tuple(s.id for s in segs)

        candidates = sample_pairs(frames, config.frame_gap, config.pair_stride)
        self.pairs: list[FramePair] = []
        self.skipped_pairs = 0
        for pair in candidates:
            ids_a = self.mask_ids.get(pair.reference.index)
            ids_b = self.mask_ids.get(pair.future.index)
            if ids_a is None or ids_b is None or ids_a != ids_b:
                self.skipped_pairs += 1
                continue
            self.pairs.append(pair)

        if self.pairs:
            self.targets = np.stack(
                [
                    difference_target(pair, config.target_kind).values
                    for pair in self.pairs
                ]
            )[:, None, :, :]
        else:
            res = config.resolution
            self.targets = np.zeros((0, 1, res, res), dtype=np.float32)

    def __len__(self) -> int:
        return len(self.pairs)

    def batch(self, indices) -> dict[str, torch.Tensor]:
        ref = np.stack([self.pairs[i].reference.pixels for i in indices])
        fut = np.stack([self.pairs[i].future.pixels for i in indices])
        m_ref = np.stack([self.masks[self.pairs[i].reference.index] for i in indices])
        m_fut = np.stack([self.masks[self.pairs[i].future.index] for i in indices])
        return {
            "ref": torch.from_numpy(ref).permute(0, 3, 1, 2).contiguous(),
            "future": torch.from_numpy(fut).permute(0, 3, 1, 2).contiguous(),
            "masks_ref": torch.from_numpy(m_ref),
            "masks_future": torch.from_numpy(m_fut),
            "target": torch.from_numpy(self.targets[list(indices)]),
            "ref_indices": [self.pairs[i].reference.index for i in indices],
        }


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    model: KeypointModel
    config: TrainConfig
    epoch: int
    loss_history: list = field(default_factory=list)
    path: str | None = None
    optimizer_state: dict | None = None


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    tmp = path + ".tmp"
    torch.save(
        {
            "model_state": ckpt.model.state_dict(),
            "optimizer_state": ckpt.optimizer_state,
            "epoch": ckpt.epoch,
            "config": asdict(ckpt.config),
            "loss_history": ckpt.loss_history,
        },
        tmp,
    )
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    config = TrainConfig(**blob["config"])
    model = KeypointModel(config.model_config())
    model.load_state_dict(blob["model_state"])
    model.eval()
    return Checkpoint(
        model=model,
        config=config,
        epoch=blob["epoch"],
        loss_history=blob["loss_history"],
        path=path,
        optimizer_state=blob["optimizer_state"],
    )


# ---------------------------------------------------------------------------
# Training


def train(
    config: TrainConfig,
    frames: list[Frame] | str | None,
    masks: list[AgentMaskSet] | str | None,
    run_dir: str,
    log_every: int = 1,
    dataset: PairDataset | None = None,
) -> Checkpoint:
    """Mini-batch gradient descent on the curriculum objective.

    `frames`/`masks` accept loaded objects or directories; a prebuilt
    PairDataset skips preprocessing. Artifacts land in run_dir:
    config.snapshot, losses.csv, epoch_%04d.ckpt. Deterministic for a
    fixed seed and thread count.
    """
    os.makedirs(run_dir, exist_ok=True)
    write_config_snapshot(config, os.path.join(run_dir, "config.snapshot"))

    if dataset is None:
        if isinstance(frames, str):
            frames = load_sequence(frames, config.resolution)
        if isinstance(masks, str):
            masks = read_masks(masks)
        dataset = PairDataset(config, frames, masks)
    if len(dataset) == 0:
        raise ValueError("no usable training pairs")

    torch.manual_seed(config.seed)
    model = KeypointModel(config.model_config())
    feature_net = FeaturePyramid()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    weights = config.loss_weights()
    rng = np.random.default_rng(config.seed)

    loss_history = []
    epoch_means = []
    step = 0
    loss_path = os.path.join(run_dir, "losses.csv")
    with open(loss_path, "w", newline="") as loss_file:
        loss_file.write(LOSS_COLUMNS + "\n")
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(dataset))
            active = epoch > weights.curriculum_epoch
            epoch_totals = []
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                batch = dataset.batch(idx)
                model.train()
                out = model.forward_pair(
                    batch["ref"], batch["future"],
                    batch["masks_ref"], batch["masks_future"],
                    audit_tags=batch["ref_indices"],
                )
                recon = perceptual_loss(batch["target"], out["s_hat"], feature_net)
                if active:
                    sep = separation_loss(out["points_ref"], weights.sigma_s)
                    rot = rotation_equivariance_loss(
                        model, batch["ref"], batch["masks_ref"],
                        base=out["bottleneck_ref"],
                    )
                else:
                    with torch.no_grad():
                        sep = separation_loss(out["points_ref"], weights.sigma_s)
                        rot = rotation_equivariance_loss(
                            model, batch["ref"], batch["masks_ref"],
                            base=out["bottleneck_ref"],
                        )
                report = total_loss(recon, rot, sep, weights, epoch)

                if not torch.isfinite(report.total):
                    dump = {
                        "step": step, "epoch": epoch,
                        "recon": report.recon.detach().item(),
                        "rot": report.rotation.detach().item(),
                        "sep": report.separation.detach().item(),
                        "pair_indices": [int(i) for i in idx],
                    }
                    with open(os.path.join(run_dir, "nan_dump.json"), "w") as fh:
                        json.dump(dump, fh, indent=1)
                    raise RuntimeError(
                        f"non-finite loss at step {step} (epoch {epoch}); "
                        f"diagnostics in {run_dir}/nan_dump.json"
                    )

                optimizer.zero_grad()
                report.total.backward()
                optimizer.step()

                row = (
                    step, epoch,
                    report.recon.detach().item(), report.rotation.detach().item(),
                    report.separation.detach().item(), report.total.detach().item(),
                    int(report.curriculum_active),
                )
                loss_history.append(row)
                epoch_totals.append(row[5])
                if step % log_every == 0:
                    loss_file.write(
                        f"{step},{epoch},{row[2]:.8f},{row[3]:.8f},"
                        f"{row[4]:.8f},{row[5]:.8f},{row[6]}\n"
                    )
                step += 1
            loss_file.flush()

            ckpt = Checkpoint(
                model=model, config=config, epoch=epoch,
                loss_history=loss_history,
                optimizer_state=optimizer.state_dict(),
            )
            path = os.path.join(run_dir, f"epoch_{epoch:04d}.ckpt")
            save_checkpoint(ckpt, path)
            ckpt.path = path

            epoch_means.append(float(np.mean(epoch_totals)))
            if config.early_stop and len(epoch_means) >= 4:
                recent = epoch_means[-4:]
                improvements = [
                    (recent[i] - recent[i + 1]) / max(abs(recent[i]), 1e-12)
                    for i in range(3)
                ]
                if all(imp < 0.01 for imp in improvements):
                    break

    model.eval()
    return ckpt


# ---------------------------------------------------------------------------
# Inference


def infer(
    checkpoint: Checkpoint,
    frames: list[Frame] | str,
    masks: list[AgentMaskSet] | str,
) -> list[tuple[int, tuple, KeypointSet]]:
    """Per-frame keypoints in eval mode: (frame_index, agent_ids, keypoints)."""
    config = checkpoint.config
    if isinstance(frames, str):
        frames = load_sequence(frames, config.resolution)
    if isinstance(masks, str):
        masks = read_masks(masks)
    model = checkpoint.model
    model.eval()
    hm = config.model_config().heatmap_size
    by_frame = {ms.frame_index: ms for ms in masks}

    results = []
    for f in frames:
        if config.full_frame_mask:
            ids = (0,)
            low = np.ones((1, hm, hm), dtype=np.float32)
        else:
            ms = by_frame.get(f.index)
            if ms is None:
                raise ValueError(f"no masks for frame {f.index}")
            segs = sorted(ms.segments, key=lambda s: s.id)[: config.num_agents]
            if len(segs) < config.num_agents:
                raise ValueError(
                    f"frame {f.index} has {len(segs)} agents; "
                    f"checkpoint expects {config.num_agents}"
                )
            ids = tuple(s.id for s in segs)
            subset = AgentMaskSet(frame_index=ms.frame_index, segments=segs)
            low = np.stack(split_and_downsample(subset, hm)).astype(np.float32)

        img = torch.from_numpy(f.pixels).permute(2, 0, 1).unsqueeze(0)
        kps = model.extract_keypoints(img, torch.from_numpy(low).unsqueeze(0))[0]
        results.append((f.index, ids, kps))
    return results


def write_inference_csv(
    results: list[tuple[int, tuple, KeypointSet]],
    path: str,
    coord_resolution: int,
) -> None:
    """Keypoint CSV with pixel coordinates at coord_resolution."""
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(INFERENCE_COLUMNS + "\n")
        for frame_index, ids, kps in results:
            px = normalized_to_pixels(kps.points, coord_resolution)
            for a, agent_id in enumerate(ids):
                for k in range(kps.points.shape[1]):
                    c = kps.covariance[a, k]
                    fh.write(
                        f"{frame_index},{agent_id},{k},"
                        f"{px[a, k, 0]:.4f},{px[a, k, 1]:.4f},"
                        f"{kps.confidence[a, k]:.6f},"
                        f"{c[0, 0]:.6e},{c[0, 1]:.6e},{c[1, 1]:.6e}\n"
                    )
    os.replace(tmp, path)


def read_inference_csv(path: str):
    """Inference CSV back into {frame: {agent_id: dict of arrays}}."""
    frames: dict[int, dict[int, dict]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t = int(row["frame"])
            agent = int(row["agent"])
            entry = frames.setdefault(t, {}).setdefault(
                agent, {"xy": [], "confidence": [], "cov": []}
            )
            entry["xy"].append([float(row["x_px"]), float(row["y_px"])])
            entry["confidence"].append(float(row["confidence"]))
            entry["cov"].append(
                [float(row["cov_xx"]), float(row["cov_xy"]), float(row["cov_yy"])]
            )
    return frames
