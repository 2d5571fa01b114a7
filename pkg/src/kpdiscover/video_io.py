"""Frame ingestion, training-pair sampling, and synthetic scene generation."""

from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass, field

import cv2
import numpy as np

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


@dataclass
class Frame:
    """One video frame, float RGB in [0, 1], square after preprocessing."""

    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    index: int
    sequence_id: str = ""

    @property
    def resolution(self) -> int:
        return self.pixels.shape[0]


@dataclass
class FramePair:
    """Reference frame plus a future frame a fixed number of frames later."""

    reference: Frame
    future: Frame
    gap: int

    def __post_init__(self):
        if self.gap < 1:
            raise ValueError(f"gap must be >= 1, got {self.gap}")
        if self.future.index - self.reference.index != self.gap:
            raise ValueError(
                f"index difference {self.future.index - self.reference.index} "
                f"does not match gap {self.gap}"
            )
        if self.future.sequence_id != self.reference.sequence_id:
            raise ValueError("frames of a pair must come from the same sequence")


def _natural_key(name: str):
    parts = re.split(r"(\d+)", name)
    return [int(p) if p.isdigit() else p for p in parts]


def _resize_square(img: np.ndarray, resolution: int) -> np.ndarray:
    # Non-square inputs are stretched, not letterboxed.
    if img.shape[0] == resolution and img.shape[1] == resolution:
        return img
    shrinking = img.shape[0] > resolution or img.shape[1] > resolution
    interp = cv2.INTER_AREA if shrinking else cv2.INTER_LINEAR
    return cv2.resize(img, (resolution, resolution), interpolation=interp)


class DirectoryDecoder:
    """Decodes a directory of image files, numerically sorted."""

    def __init__(self, path: str):
        self.path = path

    def frames(self):
        names = [
            n for n in os.listdir(self.path)
            if os.path.splitext(n)[1].lower() in IMAGE_EXTENSIONS
        ]
        if not names:
            raise IOError(f"no decodable frames in directory: {self.path}")
        names.sort(key=_natural_key)
        for name in names:
            img = cv2.imread(os.path.join(self.path, name), cv2.IMREAD_COLOR)
            if img is None:
                raise IOError(f"undecodable frame: {os.path.join(self.path, name)}")
            yield name, img


class VideoDecoder:
    """Decodes a single video file via OpenCV."""

    def __init__(self, path: str):
        self.path = path

    def frames(self):
        cap = cv2.VideoCapture(self.path)
        if not cap.isOpened():
            raise IOError(f"cannot open video: {self.path}")
        i = 0
        while True:
            ok, img = cap.read()
            if not ok:
                break
            yield f"{i:06d}", img
            i += 1
        cap.release()
        if i == 0:
            raise IOError(f"no decodable frames in video: {self.path}")


def load_sequence(path: str, resolution: int, decoder=None) -> list[Frame]:
    """Load an image directory or video file as a list of square frames.

    Frames are resized (stretched) to ``resolution`` x ``resolution`` and
    normalized to float RGB in [0, 1]. Indices run consecutively from 0.
    """
    if decoder is None:
        if os.path.isdir(path):
            # Allow pointing at a synth output dir that contains frames/.
            sub = os.path.join(path, "frames")
            decoder = DirectoryDecoder(sub if os.path.isdir(sub) else path)
        elif os.path.isfile(path):
            decoder = VideoDecoder(path)
        else:
            raise IOError(f"no such frame source: {path}")

    seq_id = os.path.basename(os.path.normpath(path))
    frames = []
    for i, (_, img) in enumerate(decoder.frames()):
        img = _resize_square(img, resolution)
        rgb = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
        pixels = rgb.astype(np.float32) / 255.0
        frames.append(Frame(pixels=pixels, index=i, sequence_id=seq_id))
    return frames


def sample_pairs(sequence: list[Frame], gap: int, stride: int = 1) -> list[FramePair]:
    """Sample (reference, future) pairs separated by ``gap`` frames.

    Reference indices advance by ``stride`` within each sequence_id; pairs
    never span two sequences. A sequence shorter than gap+1 yields no pairs.
    """
    if gap < 1:
        raise ValueError(f"gap must be >= 1, got {gap}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")

    by_seq: dict[str, list[Frame]] = {}
    for f in sequence:
        by_seq.setdefault(f.sequence_id, []).append(f)

    pairs = []
    for frames in by_seq.values():
        frames = sorted(frames, key=lambda f: f.index)
        pos = {f.index: k for k, f in enumerate(frames)}
        for k in range(0, len(frames), stride):
            ref = frames[k]
            j = pos.get(ref.index + gap)
            if j is None:
                continue
            pairs.append(FramePair(reference=ref, future=frames[j], gap=gap))
    return pairs


# ---------------------------------------------------------------------------
# Synthetic multi-agent scenes


@dataclass
class SceneConfig:
    """Parameters for a synthetic multi-agent scene."""

    num_agents: int = 2
    num_frames: int = 64
    resolution: int = 256
    seed: int = 0
    # Body is an ellipse; axes are semi-axes in pixels at `resolution`.
    major_axis: tuple[float, float] = (16.0, 20.0)
    minor_axis: tuple[float, float] = (9.0, 12.0)
    speed: float = 2.5  # pixels per frame
    turn_rate: float = 0.05  # std of per-frame heading noise, radians
    max_body_turn: float = 0.10  # cap on body re-orientation per frame, radians
    allow_overlap: bool = False  # if True, agents may pass over each other

    def __post_init__(self):
        if self.num_agents < 1:
            raise ValueError("num_agents must be >= 1")
        if self.num_frames < 2:
            raise ValueError("num_frames must be >= 2")


KEYPOINT_NAMES = ("head", "center", "tail")


@dataclass
class SyntheticScene:
    """Scripted trajectories plus ground truth for a synthetic scene.

    Frames and masks are rendered on demand from the analytic trajectories,
    so long scenes do not hold pixel data in memory.
    """

    config: SceneConfig
    centers: np.ndarray  # (F, N, 2) pixel coords (x, y)
    orientations: np.ndarray  # (F, N) radians
    axes: np.ndarray  # (N, 2) semi-axes (major, minor)
    ground_truth_keypoints: np.ndarray  # (F, N, 3, 2) pixel coords (x, y)
    background: np.ndarray = field(repr=False)  # (H, W, 3) float32

    @property
    def agent_count(self) -> int:
        return self.config.num_agents

    def body_region(self, t: int, n: int) -> np.ndarray:
        """Full (possibly occluded) body support of agent n at frame t."""
        r = self.config.resolution
        cx, cy = self.centers[t, n]
        a, b = self.axes[n]
        th = self.orientations[t, n]
        ys, xs = np.mgrid[0:r, 0:r]
        dx, dy = xs - cx, ys - cy
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0

    def agent_mask(self, t: int, n: int) -> np.ndarray:
        """Visible ground-truth mask: own body minus agents drawn on top."""
        mask = self.body_region(t, n)
        for m in range(n + 1, self.agent_count):
            mask &= ~self.body_region(t, m)
        return mask

    def label_map(self, t: int) -> np.ndarray:
        """Per-pixel agent labels; 0 = background, n+1 = agent n."""
        r = self.config.resolution
        labels = np.zeros((r, r), dtype=np.uint8)
        for n in range(self.agent_count):
            labels[self.body_region(t, n)] = n + 1
        return labels

    def occluded(self, t: int) -> bool:
        """True when any two agents overlap at frame t."""
        regions = [self.body_region(t, n) for n in range(self.agent_count)]
        for i in range(len(regions)):
            for j in range(i + 1, len(regions)):
                if np.any(regions[i] & regions[j]):
                    return True
        return False

    def render_frame(self, t: int) -> np.ndarray:
        """Render frame t as (H, W, 3) float32 in [0, 1]."""
        img = self.background.copy()
        r = self.config.resolution
        ys, xs = np.mgrid[0:r, 0:r]
        for n in range(self.agent_count):
            cx, cy = self.centers[t, n]
            a, b = self.axes[n]
            th = self.orientations[t, n]
            dx, dy = xs - cx, ys - cy
            u = dx * np.cos(th) + dy * np.sin(th)
            v = -dx * np.sin(th) + dy * np.cos(th)
            d = np.sqrt((u / a) ** 2 + (v / b) ** 2)
            # body with ~1px soft edge and a mild front-to-back shading
            alpha = np.clip((1.0 - d) * min(a, b), 0.0, 1.0)
            shade = 0.22 + 0.10 * np.clip(u / a, -1.0, 1.0)
            img = img * (1 - alpha[..., None]) + alpha[..., None] * shade[..., None]
            # bright head dot anchors orientation
            hx, hy = self.ground_truth_keypoints[t, n, 0]
            hd = np.sqrt((xs - hx) ** 2 + (ys - hy) ** 2)
            head_r = max(3.0, 0.28 * b)
            ha = np.clip(head_r + 0.5 - hd, 0.0, 1.0)
            img = img * (1 - ha[..., None]) + ha[..., None] * 0.92
        return np.clip(img, 0.0, 1.0).astype(np.float32)


def _make_background(resolution: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    base = 0.58 + 0.05 * np.cos(2 * np.pi * xs / resolution) * np.cos(
        2 * np.pi * ys / resolution
    )
    noise = rng.normal(0.0, 0.012, size=(resolution, resolution))
    bg = np.clip(base + noise, 0.0, 1.0)
    return np.repeat(bg[..., None], 3, axis=2).astype(np.float32)


def _wrap_angle(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def render_scene(config: SceneConfig) -> SyntheticScene:
    """Script trajectories for a scene; deterministic in config.seed."""
    rng = np.random.default_rng(config.seed)
    n_agents, n_frames, res = config.num_agents, config.num_frames, config.resolution

    axes = np.stack(
        [
            rng.uniform(*config.major_axis, size=n_agents),
            rng.uniform(*config.minor_axis, size=n_agents),
        ],
        axis=1,
    )
    margin = axes[:, 0] + 2.0

    # Rejection-sample disjoint starting positions.
    centers0 = np.zeros((n_agents, 2))
    for n in range(n_agents):
        if 2 * margin[n] >= res:
            raise ValueError(
                f"cannot place agent {n} without overlap at frame 0 "
                f"(agent larger than the {res}px frame)"
            )
        for attempt in range(200):
            c = rng.uniform(margin[n], res - margin[n], size=2)
            if all(
                np.linalg.norm(c - centers0[m]) > axes[n, 0] + axes[m, 0] + 4
                for m in range(n)
            ):
                centers0[n] = c
                break
        else:
            raise ValueError(
                f"cannot place agent {n} without overlap at frame 0 "
                f"(resolution {res} too small for {n_agents} agents)"
            )

    headings = rng.uniform(-np.pi, np.pi, size=n_agents)
    centers = np.zeros((n_frames, n_agents, 2))
    orientations = np.zeros((n_frames, n_agents))
    centers[0] = centers0
    orientations[0] = headings.copy()

    pos = centers0.copy()
    body = headings.copy()
    for t in range(1, n_frames):
        headings += rng.normal(0.0, config.turn_rate, size=n_agents)
        vel = config.speed * np.stack([np.cos(headings), np.sin(headings)], axis=1)
        pos = pos + vel
        # bounce off walls
        for n in range(n_agents):
            for d in range(2):
                lo, hi = margin[n], res - margin[n]
                if pos[n, d] < lo:
                    pos[n, d] = 2 * lo - pos[n, d]
                    headings[n] = _wrap_angle(np.pi - headings[n]) if d == 0 else -headings[n]
                elif pos[n, d] > hi:
                    pos[n, d] = 2 * hi - pos[n, d]
                    headings[n] = _wrap_angle(np.pi - headings[n]) if d == 0 else -headings[n]
        # bounce agents off each other unless overlap is allowed
        if not config.allow_overlap:
            for i in range(n_agents):
                for j in range(i + 1, n_agents):
                    gap = axes[i, 0] + axes[j, 0] + 2
                    delta = pos[i] - pos[j]
                    dist = np.linalg.norm(delta)
                    if dist < gap and dist > 1e-9:
                        push = (gap - dist) / 2 + 0.5
                        pos[i] += delta / dist * push
                        pos[j] -= delta / dist * push
                        headings[i], headings[j] = headings[j], headings[i]
        pos = np.clip(pos, margin[:, None], res - margin[:, None])
        # body orientation follows heading with bounded turn rate
        diff = _wrap_angle(headings - body)
        body = body + np.clip(diff, -config.max_body_turn, config.max_body_turn)
        centers[t] = pos
        orientations[t] = body

    # head / center / tail along the body's major axis
    dirs = np.stack([np.cos(orientations), np.sin(orientations)], axis=-1)
    offsets = np.array([0.62, 0.0, -0.70])
    kps = (
        centers[:, :, None, :]
        + offsets[None, None, :, None] * dirs[:, :, None, :] * axes[None, :, None, 0:1]
    )

    background = _make_background(res, rng)
    return SyntheticScene(
        config=config,
        centers=centers,
        orientations=orientations,
        axes=axes,
        ground_truth_keypoints=kps,
        background=background,
    )


def generate_synthetic(config: SceneConfig) -> tuple[list[Frame], SyntheticScene]:
    """Render a full synthetic scene into memory (small scenes only)."""
    scene = render_scene(config)
    seq_id = f"synthetic-{config.seed}"
    frames = [
        Frame(pixels=scene.render_frame(t), index=t, sequence_id=seq_id)
        for t in range(config.num_frames)
    ]
    return frames, scene


def write_scene(scene: SyntheticScene, out_dir: str) -> None:
    """Write frames, mask label maps, and a keypoint CSV for a scene.

    Layout: frames/frame_%06d.png, masks/mask_%06d.png (pixel value = agent
    id, 0 = background), keypoints.csv with columns frame,agent,kp,x,y.
    """
    frames_dir = os.path.join(out_dir, "frames")
    masks_dir = os.path.join(out_dir, "masks")
    os.makedirs(frames_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)

    for t in range(scene.config.num_frames):
        img = scene.render_frame(t)
        bgr = cv2.cvtColor((img * 255).round().astype(np.uint8), cv2.COLOR_RGB2BGR)
        cv2.imwrite(os.path.join(frames_dir, f"frame_{t:06d}.png"), bgr)
        cv2.imwrite(os.path.join(masks_dir, f"mask_{t:06d}.png"), scene.label_map(t))

    tmp = os.path.join(out_dir, ".keypoints.csv.tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "agent", "kp", "x", "y"])
        for t in range(scene.config.num_frames):
            for n in range(scene.agent_count):
                for k in range(scene.ground_truth_keypoints.shape[2]):
                    x, y = scene.ground_truth_keypoints[t, n, k]
                    writer.writerow([t, n + 1, k, f"{x:.3f}", f"{y:.3f}"])
    os.replace(tmp, os.path.join(out_dir, "keypoints.csv"))


def read_keypoint_csv(path: str) -> dict[int, np.ndarray]:
    """Read a keypoint CSV into {frame: (num_rows, 2) array} keyed by frame.

    Rows are ordered by (agent, kp), matching the writer's layout.
    """
    rows: dict[int, list[tuple[int, int, float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        xcol = "x" if "x" in reader.fieldnames else "x_px"
        ycol = "y" if "y" in reader.fieldnames else "y_px"
        for row in reader:
            t = int(row["frame"])
            rows.setdefault(t, []).append(
                (int(row["agent"]), int(row["kp"]), float(row[xcol]), float(row[ycol]))
            )
    out = {}
    for t, items in rows.items():
        items.sort()
        out[t] = np.array([[x, y] for _, _, x, y in items], dtype=np.float64)
    return out
