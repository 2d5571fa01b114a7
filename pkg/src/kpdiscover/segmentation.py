"""Temporally consistent per-agent masks from per-frame proposals.

The tracker mirrors a propagation/consensus design: proposals from a short
clip of future frames are aligned to the current frame, a 0/1 selection
problem picks a denoised consensus, and the consensus is merged with the
propagated previous state under persistent agent ids. The learned detector
and propagation network are replaced by a pluggable detector interface and
a centroid-translation warp.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field, replace

import cv2
import numpy as np

from .video_io import Frame, SyntheticScene


@dataclass
class MaskProposal:
    mask: np.ndarray  # (H, W) bool
    score: float
    source_frame: int


@dataclass
class TrackedSegment:
    id: int
    mask: np.ndarray  # (H, W) bool
    misses: int = 0


@dataclass
class AgentMaskSet:
    frame_index: int
    segments: list[TrackedSegment] = field(default_factory=list)

    def by_id(self) -> dict[int, np.ndarray]:
        return {s.id: s.mask for s in self.segments}


@dataclass
class SegmentationParams:
    support_threshold: float = 0.5
    overlap_threshold: float = 0.5
    overlap_penalty: float = 10.0
    assoc_threshold: float = 0.3
    max_misses: int = 5
    fixed_agents: int | None = None
    max_exact: int = 20
    size: int = 480  # internal processing resolution


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 0 when both are empty."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def mask_centroid(mask: np.ndarray) -> np.ndarray:
    """(x, y) centroid of a nonempty binary mask."""
    ys, xs = np.nonzero(mask)
    return np.array([xs.mean(), ys.mean()])


def translate_mask(mask: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift a mask by integer pixels; content leaving the frame is lost."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    src_x = slice(max(0, -dx), min(w, w - dx))
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_x = slice(max(0, dx), min(w, w + dx))
    dst_y = slice(max(0, dy), min(h, h + dy))
    if src_x.start < src_x.stop and src_y.start < src_y.stop:
        out[dst_y, dst_x] = mask[src_y, src_x]
    return out


# ---------------------------------------------------------------------------
# Detectors


class OracleDetector:
    """Returns ground-truth agent masks; for synthetic scenes only.

    Accepts either a SyntheticScene or a directory of label-map PNGs
    (pixel value = agent id, 0 = background).
    """

    def __init__(self, source):
        self.scene = source if isinstance(source, SyntheticScene) else None
        self.masks_dir = None if self.scene is not None else str(source)
        self._files: dict[int, str] = {}
        if self.masks_dir is not None:
            for name in os.listdir(self.masks_dir):
                m = re.match(r".*?(\d+)\.png$", name)
                if m:
                    self._files[int(m.group(1))] = os.path.join(self.masks_dir, name)
            if not self._files:
                raise IOError(f"no mask label maps in {self.masks_dir}")

    def detect(self, frame: Frame) -> list[MaskProposal]:
        t = frame.index
        proposals = []
        if self.scene is not None:
            for n in range(self.scene.agent_count):
                mask = self.scene.agent_mask(t, n)
                if mask.any():
                    proposals.append(MaskProposal(mask=mask, score=1.0, source_frame=t))
            return proposals
        path = self._files.get(t)
        if path is None:
            return proposals
        labels = cv2.imread(path, cv2.IMREAD_UNCHANGED)
        if labels is None:
            raise IOError(f"undecodable mask label map: {path}")
        if frame.resolution != labels.shape[0]:
            labels = cv2.resize(
                labels, (frame.resolution, frame.resolution), interpolation=cv2.INTER_NEAREST
            )
        for agent_id in np.unique(labels):
            if agent_id == 0:
                continue
            mask = labels == agent_id
            if mask.any():
                proposals.append(MaskProposal(mask=mask, score=1.0, source_frame=t))
        return proposals


class ThresholdDetector:
    """Intensity threshold + connected components, for simple lab footage."""

    def __init__(
        self,
        level: float = 0.5,
        dark_agents: bool = True,
        threshold: float = 0.45,
        min_area: int = 25,
    ):
        self.level = level
        self.dark_agents = dark_agents
        self.threshold = threshold
        self.min_area = min_area

    def detect(self, frame: Frame) -> list[MaskProposal]:
        gray = (
            0.299 * frame.pixels[..., 0]
            + 0.587 * frame.pixels[..., 1]
            + 0.114 * frame.pixels[..., 2]
        )
        binary = gray < self.level if self.dark_agents else gray > self.level
        n_labels, labels = cv2.connectedComponents(binary.astype(np.uint8))
        proposals = []
        scale = max(self.level, 1.0 - self.level)
        for lab in range(1, n_labels):
            mask = labels == lab
            if mask.sum() < self.min_area:
                continue
            score = float(np.clip(np.abs(gray[mask] - self.level).mean() / scale, 0.0, 1.0))
            if score >= self.threshold:
                proposals.append(
                    MaskProposal(mask=mask, score=score, source_frame=frame.index)
                )
        return proposals


# ---------------------------------------------------------------------------
# Spatial alignment


def align_proposals(
    clip: list[tuple[Frame, list[MaskProposal]]], target_index: int
) -> list[MaskProposal]:
    """Warp every proposal in the clip to the target frame.

    The warp is a pure translation: each proposal is chained through greedy
    best-IoU matches across adjacent frames and shifted by the accumulated
    centroid displacement. Proposals whose warp leaves the frame are dropped.
    """
    if not 0 <= target_index < len(clip):
        raise ValueError(f"target_index {target_index} outside clip of {len(clip)}")

    aligned = list(clip[target_index][1])
    for s in range(len(clip)):
        if s == target_index:
            continue
        step = -1 if s > target_index else 1
        for prop in clip[s][1]:
            if not prop.mask.any():
                continue
            current = prop.mask
            displacement = np.zeros(2)
            f = s
            while f != target_index:
                nxt = f + step
                candidates = clip[nxt][1]
                if not candidates:
                    break
                overlaps = [iou(current, q.mask) for q in candidates]
                best = int(np.argmax(overlaps))
                if overlaps[best] <= 0.0:
                    break
                displacement += mask_centroid(candidates[best].mask) - mask_centroid(current)
                current = candidates[best].mask
                f = nxt
            dx, dy = np.rint(displacement).astype(int)
            warped = translate_mask(prop.mask, dx, dy)
            if warped.any():
                aligned.append(
                    MaskProposal(mask=warped, score=prop.score, source_frame=prop.source_frame)
                )
    return aligned


# ---------------------------------------------------------------------------
# In-clip consensus


def proposal_supports(
    proposals: list[MaskProposal], support_threshold: float = 0.5
) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise IoU matrix and per-proposal support counts.

    Proposal j supports i when iou(i, j) > support_threshold (j != i).
    """
    n = len(proposals)
    mat = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            mat[i, j] = mat[j, i] = iou(proposals[i].mask, proposals[j].mask)
    supports = (mat > support_threshold).sum(axis=1)
    return mat, supports


def solve_selection(
    iou_matrix: np.ndarray,
    supports: np.ndarray,
    overlap_threshold: float = 0.5,
    overlap_penalty: float = 10.0,
    max_exact: int = 20,
) -> tuple[list[int], float]:
    """Select proposals maximizing support minus pairwise-overlap penalties.

    objective(X) = sum_{i in X} supports[i]
                   - overlap_penalty * #{(i<j) in X : iou[i,j] > overlap_threshold}

    Only supported proposals (supports > 0) are candidates; unsupported ones
    contribute nothing positive, so the optimum objective is unaffected.
    Exact subset enumeration up to max_exact candidates, greedy above. Ties
    resolve toward fewer selected proposals.
    """
    n = len(supports)
    candidates = [i for i in range(n) if supports[i] > 0]
    if not candidates:
        return [], 0.0

    conflict = iou_matrix > overlap_threshold
    c = len(candidates)
    if c <= max_exact:
        subsets = np.arange(1 << c, dtype=np.int64)
        objective = np.zeros(1 << c)
        popcount = np.zeros(1 << c, dtype=np.int64)
        bits = []
        for k, i in enumerate(candidates):
            bit = (subsets >> k) & 1
            bits.append(bit)
            objective += supports[i] * bit
            popcount += bit
        for k1 in range(c):
            for k2 in range(k1 + 1, c):
                if conflict[candidates[k1], candidates[k2]]:
                    objective -= overlap_penalty * (bits[k1] & bits[k2])
        best_obj = objective.max()
        tied = np.flatnonzero(objective == best_obj)
        best = tied[np.argmin(popcount[tied])]
        selected = [candidates[k] for k in range(c) if (int(best) >> k) & 1]
        return selected, float(best_obj)

    # greedy: take high-support proposals that do not conflict with picks
    order = sorted(candidates, key=lambda i: (-supports[i], i))
    selected = []
    for i in order:
        if all(not conflict[i, j] for j in selected):
            selected.append(i)
    obj = float(sum(supports[i] for i in selected))
    return sorted(selected), obj


def in_clip_consensus(
    proposals: list[MaskProposal],
    support_threshold: float = 0.5,
    overlap_threshold: float = 0.5,
    overlap_penalty: float = 10.0,
    max_exact: int = 20,
) -> list[np.ndarray]:
    """Denoise aligned proposals into a consensus set of masks.

    Each selected proposal is fused with its supporters by pixelwise
    majority (ties count as foreground). When no proposal supports any
    other, selection degenerates to per-frame mode: proposals are kept
    greedily as long as they do not conflict with an earlier pick.
    """
    if not proposals:
        return []
    mat, supports = proposal_supports(proposals, support_threshold)
    selected, _ = solve_selection(
        mat, supports, overlap_threshold, overlap_penalty, max_exact
    )

    if not selected:
        conflict = mat > overlap_threshold
        order = sorted(
            range(len(proposals)),
            key=lambda i: (-proposals[i].score, -int(proposals[i].mask.sum()), i),
        )
        kept: list[int] = []
        for i in order:
            if all(not conflict[i, j] for j in kept):
                kept.append(i)
        return [proposals[i].mask.copy() for i in sorted(kept)]

    fused = []
    for i in selected:
        group = [i] + [j for j in range(len(proposals)) if j != i and mat[i, j] > support_threshold]
        stack = np.stack([proposals[j].mask for j in group]).astype(np.float32)
        vote = stack.mean(axis=0) >= 0.5
        fused.append(vote if vote.any() else proposals[i].mask.copy())
    return fused


# ---------------------------------------------------------------------------
# Propagation / consensus merging


def merge_propagation_consensus(
    previous: AgentMaskSet | None,
    consensus: list[np.ndarray],
    assoc_threshold: float = 0.3,
    max_misses: int = 5,
    frame_index: int | None = None,
    next_id: int | None = None,
    fixed_agents: int | None = None,
) -> AgentMaskSet:
    """Associate the propagated previous state with consensus masks.

    Previous segments are propagated by a centroid-translation warp toward
    their best-overlapping consensus mask, then matched greedily by IoU
    (highest first, threshold assoc_threshold). Matched segments keep their
    id and adopt the consensus mask; unmatched segments keep the propagated
    mask and gain a miss; segments exceeding max_misses are deleted;
    unmatched consensus masks spawn fresh ids.
    """
    if previous is None:
        previous = AgentMaskSet(frame_index=-1, segments=[])
    if frame_index is None:
        frame_index = previous.frame_index + 1
    if next_id is None:
        next_id = max((s.id for s in previous.segments), default=0) + 1

    propagated = []
    for seg in previous.segments:
        mask = seg.mask
        if mask.any() and consensus:
            overlaps = [iou(mask, c) for c in consensus]
            best = int(np.argmax(overlaps))
            if overlaps[best] > 0.0:
                dx, dy = np.rint(
                    mask_centroid(consensus[best]) - mask_centroid(mask)
                ).astype(int)
                shifted = translate_mask(mask, dx, dy)
                if shifted.any():
                    mask = shifted
        propagated.append(mask)

    # greedy highest-IoU-first matching
    pairs = []
    for si, mask in enumerate(propagated):
        for ci, cons in enumerate(consensus):
            v = iou(mask, cons)
            if v >= assoc_threshold:
                pairs.append((v, si, ci))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    matched_seg: dict[int, int] = {}
    matched_cons: set[int] = set()
    for v, si, ci in pairs:
        if si in matched_seg or ci in matched_cons:
            continue
        matched_seg[si] = ci
        matched_cons.add(ci)

    segments = []
    for si, seg in enumerate(previous.segments):
        if si in matched_seg:
            segments.append(
                TrackedSegment(id=seg.id, mask=consensus[matched_seg[si]].copy(), misses=0)
            )
        else:
            kept = TrackedSegment(id=seg.id, mask=propagated[si], misses=seg.misses + 1)
            if kept.misses <= max_misses and kept.mask.any():
                segments.append(kept)

    unmatched = [ci for ci in range(len(consensus)) if ci not in matched_cons]
    unmatched.sort(key=lambda ci: -int(consensus[ci].sum()))
    for ci in unmatched:
        if fixed_agents is not None and len(segments) >= fixed_agents:
            break
        segments.append(TrackedSegment(id=next_id, mask=consensus[ci].copy(), misses=0))
        next_id += 1

    if fixed_agents is not None and len(segments) > fixed_agents:
        segments.sort(key=lambda s: -int(s.mask.sum()))
        segments = segments[:fixed_agents]

    segments.sort(key=lambda s: s.id)
    return AgentMaskSet(frame_index=frame_index, segments=segments)


def segment_video(
    frames: list[Frame],
    detector,
    clip_size: int = 3,
    params: SegmentationParams | None = None,
) -> list[AgentMaskSet]:
    """Track per-agent masks over a frame sequence with persistent ids."""
    if clip_size < 1:
        raise ValueError(f"clip_size must be >= 1, got {clip_size}")
    params = params or SegmentationParams()

    native = frames[0].resolution if frames else 0
    work = frames
    if native > params.size:
        work = [
            Frame(
                pixels=cv2.resize(
                    f.pixels, (params.size, params.size), interpolation=cv2.INTER_AREA
                ),
                index=f.index,
                sequence_id=f.sequence_id,
            )
            for f in frames
        ]

    proposals = [detector.detect(f) for f in work]

    out = []
    state: AgentMaskSet | None = None
    next_id = 1
    for t in range(len(work)):
        clip = [(work[u], proposals[u]) for u in range(t, min(t + clip_size, len(work)))]
        aligned = align_proposals(clip, target_index=0)
        consensus = in_clip_consensus(
            aligned,
            support_threshold=params.support_threshold,
            overlap_threshold=params.overlap_threshold,
            overlap_penalty=params.overlap_penalty,
            max_exact=params.max_exact,
        )
        state = merge_propagation_consensus(
            state,
            consensus,
            assoc_threshold=params.assoc_threshold,
            max_misses=params.max_misses,
            frame_index=t,
            next_id=next_id,
            fixed_agents=params.fixed_agents,
        )
        next_id = max([next_id] + [s.id + 1 for s in state.segments])
        if native > params.size:
            restored = [
                TrackedSegment(
                    id=s.id,
                    mask=cv2.resize(
                        s.mask.astype(np.uint8), (native, native),
                        interpolation=cv2.INTER_NEAREST,
                    ).astype(bool),
                    misses=s.misses,
                )
                for s in state.segments
            ]
            out.append(AgentMaskSet(frame_index=t, segments=restored))
        else:
            out.append(
                AgentMaskSet(frame_index=t, segments=[replace(s, mask=s.mask.copy()) for s in state.segments])
            )
    return out


def split_and_downsample(masks: AgentMaskSet, target_size: int) -> list[np.ndarray]:
    """Per-agent masks downsampled to target_size (area-average >= 0.5).

    An agent whose downsampled mask would be empty gets its single highest
    coverage cell set instead, so no nonempty agent vanishes.
    """
    out = []
    for seg in masks.segments:
        avg = cv2.resize(
            seg.mask.astype(np.float32), (target_size, target_size),
            interpolation=cv2.INTER_AREA,
        )
        low = avg >= 0.5
        if not low.any() and seg.mask.any():
            low = np.zeros_like(low)
            low[np.unravel_index(np.argmax(avg), avg.shape)] = True
        out.append(low)
    return out


# ---------------------------------------------------------------------------
# Disk I/O


def write_masks(mask_sets: list[AgentMaskSet], out_dir: str) -> None:
    """Write label-map PNGs (pixel value = agent id) plus a JSON index."""
    os.makedirs(out_dir, exist_ok=True)
    max_id = max((s.id for ms in mask_sets for s in ms.segments), default=0)
    dtype = np.uint8 if max_id < 256 else np.uint16
    index = []
    for ms in mask_sets:
        if ms.segments:
            h, w = ms.segments[0].mask.shape
        else:
            h = w = 0
        labels = np.zeros((h, w), dtype=dtype) if h else np.zeros((1, 1), dtype=dtype)
        agents = []
        for seg in sorted(ms.segments, key=lambda s: s.id):
            labels[seg.mask] = seg.id
            ys, xs = np.nonzero(seg.mask)
            bbox = (
                [int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())]
                if len(xs)
                else [0, 0, 0, 0]
            )
            agents.append({"id": seg.id, "area": int(seg.mask.sum()), "bbox": bbox})
        cv2.imwrite(os.path.join(out_dir, f"mask_{ms.frame_index:06d}.png"), labels)
        index.append({"frame": ms.frame_index, "agents": agents})
    tmp = os.path.join(out_dir, ".index.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(index, fh, indent=1)
    os.replace(tmp, os.path.join(out_dir, "index.json"))


def read_masks(masks_dir: str) -> list[AgentMaskSet]:
    """Read label-map PNGs back into per-frame mask sets."""
    files = {}
    for name in os.listdir(masks_dir):
        m = re.match(r".*?(\d+)\.png$", name)
        if m:
            files[int(m.group(1))] = os.path.join(masks_dir, name)
    if not files:
        raise IOError(f"no mask label maps in {masks_dir}")
    out = []
    for t in sorted(files):
        labels = cv2.imread(files[t], cv2.IMREAD_UNCHANGED)
        if labels is None:
            raise IOError(f"undecodable mask label map: {files[t]}")
        segments = [
            TrackedSegment(id=int(i), mask=labels == i)
            for i in np.unique(labels)
            if i != 0
        ]
        out.append(AgentMaskSet(frame_index=t, segments=segments))
    return out
