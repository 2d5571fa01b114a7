"""Quantitative evaluation: linear keypoint regression and behavior
classification with mean average precision."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class RegressionResult:
    weights: np.ndarray  # (D_in, D_out) bias-free linear map
    pct_mse: float
    rank_deficient: bool = False


def fit_keypoint_regression(
    discovered: np.ndarray,
    ground_truth: np.ndarray,
    image_size: float,
    coord_columns=None,
) -> RegressionResult:
    """Bias-free least squares from discovered features to true keypoints.

    ground_truth coordinates are divided by image_size before fitting;
    coord_columns marks discovered columns that are pixel coordinates and
    should be normalized the same way. pct_mse is 100x the mean squared
    residual over all frames and target coordinates. Rank-deficient inputs
    are solved by pseudo-inverse and flagged.
    """
    x = np.asarray(discovered, dtype=np.float64).copy()
    y = np.asarray(ground_truth, dtype=np.float64) / image_size
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"frame count mismatch: {x.shape[0]} vs {y.shape[0]}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("inputs contain missing or non-finite values")
    if coord_columns is not None:
        x[:, np.asarray(coord_columns)] /= image_size

    weights, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    residual = x @ weights - y
    pct_mse = 100.0 * float(np.mean(residual**2))
    return RegressionResult(
        weights=weights, pct_mse=pct_mse, rank_deficient=bool(rank < x.shape[1])
    )


# ---------------------------------------------------------------------------
# Mean average precision


@dataclass
class ClassifierResult:
    per_class_ap: dict = field(default_factory=dict)
    map: float = 0.0
    excluded_classes: list = field(default_factory=list)


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """All-points average precision of a ranked list.

    Thresholds sweep the distinct score values from high to low; ties enter
    together, AP = sum of precision * recall-increment at each threshold.
    Constant scores therefore give AP equal to the class prevalence.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise ValueError("no positive labels; AP undefined")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = positives[order]

    tp = np.cumsum(sorted_pos)
    retrieved = np.arange(1, len(scores) + 1)
    # indices where a threshold block ends (last element of each tie group)
    block_end = np.flatnonzero(
        np.concatenate([sorted_scores[1:] != sorted_scores[:-1], [True]])
    )
    ap = 0.0
    prev_recall = 0.0
    for e in block_end:
        recall = tp[e] / n_pos
        precision = tp[e] / retrieved[e]
        ap += precision * (recall - prev_recall)
        prev_recall = recall
    return float(ap)


def precision_recall_curve(scores: np.ndarray, positives: np.ndarray):
    """(precision, recall, threshold) points at each distinct score level."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = positives[order]
    tp = np.cumsum(sorted_pos)
    retrieved = np.arange(1, len(scores) + 1)
    block_end = np.flatnonzero(
        np.concatenate([sorted_scores[1:] != sorted_scores[:-1], [True]])
    )
    precision = tp[block_end] / retrieved[block_end]
    recall = tp[block_end] / max(n_pos, 1)
    return precision, recall, sorted_scores[block_end]


def mean_average_precision(scores: np.ndarray, labels) -> ClassifierResult:
    """Per-class AP of score columns against categorical labels.

    Classes absent from the labels are excluded and flagged; the mean is
    unweighted over the remaining classes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError("scores must be (frames, classes) aligned with labels")

    result = ClassifierResult()
    aps = []
    for c in range(scores.shape[1]):
        positives = labels == c
        if not positives.any():
            result.excluded_classes.append(c)
            continue
        ap = average_precision(scores[:, c], positives)
        result.per_class_ap[c] = ap
        aps.append(ap)
    if not aps:
        raise ValueError("no class present in labels")
    result.map = float(np.mean(aps))
    return result


# ---------------------------------------------------------------------------
# 1D convolutional behavior classifier


@dataclass
class BehaviorDataset:
    features: np.ndarray  # (F, D)
    labels: np.ndarray  # (F,) integer class per frame

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels must align by frame")


class Conv1dClassifier(nn.Module):
    """Temporal conv net over centered sliding windows of the feature stream."""

    def __init__(self, in_features: int, n_classes: int, window: int = 31, hidden: int = 32):
        super().__init__()
        if window % 2 == 0:
            raise ValueError("window must be odd so it can center on a frame")
        self.window = window
        self.mean = nn.Parameter(torch.zeros(in_features), requires_grad=False)
        self.std = nn.Parameter(torch.ones(in_features), requires_grad=False)
        self.net = nn.Sequential(
            nn.Conv1d(in_features, hidden, kernel_size=5, padding=2),
            nn.ReLU(inplace=True),
            nn.Conv1d(hidden, hidden, kernel_size=5, padding=2),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool1d(1),
            nn.Flatten(),
            nn.Linear(hidden, n_classes),
        )

    def windows(self, features: np.ndarray) -> torch.Tensor:
        """Edge-padded (F, D, window) tensor of centered windows."""
        x = torch.as_tensor(features, dtype=torch.float32)
        x = (x - self.mean) / self.std
        half = self.window // 2
        padded = torch.cat([x[:1].repeat(half, 1), x, x[-1:].repeat(half, 1)], dim=0)
        return padded.unfold(0, self.window, 1).contiguous()  # (F, D, window)

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        return self.net(windows)

    @torch.no_grad()
    def scores(self, features: np.ndarray, batch: int = 512) -> np.ndarray:
        """Per-frame class scores (softmax probabilities)."""
        self.eval()
        wins = self.windows(features)
        out = []
        for i in range(0, len(wins), batch):
            out.append(torch.softmax(self(wins[i : i + batch]), dim=1))
        return torch.cat(out).numpy()


def train_behavior_classifier(
    train: BehaviorDataset,
    window: int = 31,
    hidden: int = 32,
    epochs: int = 30,
    learning_rate: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
) -> Conv1dClassifier:
    """Fit the temporal classifier; deterministic for a given seed."""
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise ValueError("need at least 2 classes to train a classifier")
    n_classes = int(train.labels.max()) + 1

    torch.manual_seed(seed)
    clf = Conv1dClassifier(train.features.shape[1], n_classes, window, hidden)
    with torch.no_grad():
        clf.mean.copy_(torch.as_tensor(train.features.mean(axis=0)))
        clf.std.copy_(torch.as_tensor(train.features.std(axis=0) + 1e-6))

    wins = clf.windows(train.features)
    labels = torch.as_tensor(train.labels)
    opt = torch.optim.Adam(clf.parameters(), lr=learning_rate)
    rng = np.random.default_rng(seed)
    clf.train()
    for _ in range(epochs):
        order = rng.permutation(len(wins))
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            logits = clf(wins[idx])
            loss = F.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    clf.eval()
    return clf
