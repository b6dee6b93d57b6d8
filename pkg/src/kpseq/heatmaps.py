"""Ground-truth heatmap rendering, the training loss, decoding, and PCK.

Targets are per-keypoint Gaussians peak-normalized to 1, so they are valid
labels for the sigmoid cross-entropy loss.  Heatmaps are rendered for every
keypoint regardless of visibility; visibility only filters evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor, astensor, mean_all, sigmoid_ce_map


@dataclass
class KeypointSet:
    """K real-valued pixel locations (u, v) plus visibility flags.

    Coordinates may lie outside the image (truncated objects); visibility
    handles evaluation filtering.
    """

    points: np.ndarray  # [K, 2] as (u, v) = (x, y)
    visible: np.ndarray  # [K] bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ShapeError(f"points must be [K,2], got {self.points.shape}")
        if self.visible.shape != (len(self.points),):
            raise ShapeError("visible flags must match keypoint count")

    def __len__(self):
        return len(self.points)


@dataclass
class PckConfig:
    """Correctness radius alpha * L, L being the larger image dimension."""

    alpha: float
    L: float

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in (0,1], got {self.alpha}")
        if self.L <= 0:
            raise ValueError(f"L must be positive, got {self.L}")

    @property
    def radius(self) -> float:
        return self.alpha * self.L


@dataclass
class PckReport:
    """PCK values per alpha plus the visible-keypoint count."""

    entries: list = field(default_factory=list)  # (alpha, value-or-None, n_visible)

    def add(self, alpha, value, n_visible):
        self.entries.append((float(alpha), value, int(n_visible)))

    def value_at(self, alpha):
        for a, v, _ in self.entries:
            if a == alpha:
                return v
        raise KeyError(f"no entry for alpha={alpha}")

    def lines(self):
        out = []
        for a, v, n in self.entries:
            val = "nan" if v is None else f"{v:.6f}"
            out.append(f"pck alpha={a:g} value={val} n_visible={n}")
        return out

    def __str__(self):
        header = f"{'alpha':>8} {'pck':>10} {'n_visible':>10}"
        rows = [
            f"{a:>8g} {('nan' if v is None else format(v, '.4f')):>10} {n:>10d}"
            for a, v, n in self.entries
        ]
        return "\n".join([header] + rows)


def render_heatmap(kps: KeypointSet, H: int, W: int, sigma: float = 1.0) -> np.ndarray:
    """Gaussian target maps [K,H,W], one per keypoint.

    Map k holds exp(-((x-u)^2 + (y-v)^2) / (2 sigma^2)); for keypoints
    inside the image the channel is rescaled so its peak pixel is exactly 1.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    pts = kps.points
    ys = np.arange(H, dtype=np.float64)[None, :, None]
    xs = np.arange(W, dtype=np.float64)[None, None, :]
    du = xs - pts[:, 0, None, None]
    dv = ys - pts[:, 1, None, None]
    maps = np.exp(-(du * du + dv * dv) / (2.0 * sigma * sigma))
    inside = (
        (pts[:, 0] >= 0) & (pts[:, 0] <= W - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= H - 1)
    )
    for k in np.flatnonzero(inside):
        peak = maps[k].max()
        if peak > 0:
            maps[k] /= peak
    return maps


def sigmoid_ce_loss(logits, targets) -> Tensor:
    """Sigmoid cross entropy, averaged over elements.

    ``logits``/``targets`` are matching stacks (single [K,H,W] / [N,K,H,W]
    tensors, or equal-length lists of them, e.g. per stack or per frame).
    List entries contribute a per-entry elementwise mean, summed across the
    list, matching intermediate supervision over stacks and frames.
    """
    if isinstance(logits, (list, tuple)):
        if not isinstance(targets, (list, tuple)) or len(logits) != len(targets):
            raise ShapeError("logit and target lists must have equal length")
        if not logits:
            raise ShapeError("empty loss term list")
        total = None
        for x, z in zip(logits, targets):
            term = mean_all(sigmoid_ce_map(x, z))
            total = term if total is None else total + term
        return total
    return mean_all(sigmoid_ce_map(astensor(logits), targets))


def decode_keypoints(heatmaps) -> np.ndarray:
    """Per-channel argmax locations [K,2] as (u,v); row-major first on ties."""
    maps = heatmaps.data if isinstance(heatmaps, Tensor) else np.asarray(heatmaps)
    if maps.ndim != 3:
        raise ShapeError(f"expected [K,H,W] heatmaps, got {maps.shape}")
    K, H, W = maps.shape
    flat = maps.reshape(K, -1).argmax(axis=1)
    return np.stack([flat % W, flat // W], axis=1).astype(np.float64)


def pck(pred_points, gt: KeypointSet, cfg: PckConfig):
    """Fraction of visible keypoints within radius alpha*L (inclusive).

    Returns None when the ground truth has no visible keypoints.
    """
    pred = np.asarray(pred_points, dtype=np.float64)
    if pred.shape != gt.points.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth {gt.points.shape}")
    vis = gt.visible
    n = int(vis.sum())
    if n == 0:
        return None
    d = np.linalg.norm(pred[vis] - gt.points[vis], axis=1)
    return float((d <= cfg.radius).sum()) / n


def pck_counts(pred_points, gt: KeypointSet, radius: float):
    """(hits, visible) pair for aggregating PCK across many samples."""
    pred = np.asarray(pred_points, dtype=np.float64)
    vis = gt.visible
    n = int(vis.sum())
    if n == 0:
        return 0, 0
    d = np.linalg.norm(pred[vis] - gt.points[vis], axis=1)
    return int((d <= radius).sum()), n
