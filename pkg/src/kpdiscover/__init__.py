"""Self-supervised keypoint discovery for multi-agent behavioral video.

Pipeline: segment agents with a consensus tracker, discover per-agent
keypoints by reconstructing frame-difference targets through a masked
heatmap bottleneck, then evaluate the keypoints with linear regression
and behavior classification.
"""

__version__ = "0.1.0"
