"""Training objectives: weighted multi-class focal loss, generalized dice loss,
their sum, heatmap regression MSE, and the binary focal+dice ROI loss.

All losses accept channels-first torch tensors (numpy arrays are converted,
preserving dtype) and return scalar tensors so they can sit on the autograd
path during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

PROB_CLAMP = 1e-7  # probability floor/ceiling applied before logarithms

VALID_COMPONENTS = ("focal", "dice")


@dataclass
class LossConfig:
    gamma: float = 2.0
    alpha_mode: str = "inverse-size"  # "uniform" or "inverse-size"
    dice_epsilon: float = 1e-5
    components: tuple[str, ...] = ("focal", "dice")

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.dice_epsilon <= 0:
            raise ValueError("dice_epsilon must be > 0")
        if self.alpha_mode not in ("uniform", "inverse-size"):
            raise ValueError(f"unknown alpha_mode {self.alpha_mode!r}")
        self.components = tuple(self.components)
        if not self.components:
            raise ValueError("at least one loss component must be enabled")
        unknown = set(self.components) - set(VALID_COMPONENTS)
        if unknown:
            raise ValueError(f"unknown loss components {sorted(unknown)}")


def _as_tensor(x, dtype=None):
    if torch.is_tensor(x):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x) if not isinstance(x, np.ndarray) else x)


def compute_alphas(voxel_counts) -> np.ndarray:
    """Class weights proportional to inverse mean size, normalized to mean 1.

    ``voxel_counts`` is ordered by class id and includes background at index 0.
    """
    counts = np.asarray(voxel_counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError("all mean voxel counts must be positive")
    inv = 1.0 / counts
    return inv / inv.mean()


def focal_loss(probs, labels, alphas=None, gamma: float = 2.0):
    """Mean over voxels of  -alpha[y] * (1 - p_y)**gamma * log(p_y).

    ``probs`` is (C+1, D, H, W) on the per-voxel simplex, ``labels`` an integer
    grid of the same spatial shape.  Probabilities are clamped away from 0 and
    1 before the log.
    """
    probs = _as_tensor(probs)
    labels = _as_tensor(labels).long()
    if probs.shape[1:] != labels.shape:
        raise ValueError(
            f"geometry mismatch: probs {tuple(probs.shape[1:])} vs labels {tuple(labels.shape)}"
        )
    if alphas is None:
        alphas = torch.ones(probs.shape[0], dtype=probs.dtype)
    else:
        alphas = _as_tensor(alphas).to(probs.dtype)
    p_true = torch.take_along_dim(probs, labels.unsqueeze(0), dim=0).squeeze(0)
    p_true = p_true.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    weight = alphas[labels]
    return (-weight * (1.0 - p_true) ** gamma * torch.log(p_true)).mean()


def generalized_dice_loss(probs, target, epsilon: float = 1e-5):
    """Sum over classes t of  1 - (2 * sum(y_t p_t) + eps) / (sum y_t + sum p_t + eps).

    ``target`` may be an integer label grid (converted to one-hot) or an
    already one-hot rank-4 grid.  The smoothing term keeps classes absent from
    both grids near zero contribution.
    """
    probs = _as_tensor(probs)
    target = _as_tensor(target)
    num_classes = probs.shape[0]
    if target.dim() == 3:
        if probs.shape[1:] != target.shape:
            raise ValueError("geometry mismatch between probs and labels")
        target = (
            target.long().unsqueeze(0)
            == torch.arange(num_classes).view(-1, 1, 1, 1)
        ).to(probs.dtype)
    elif target.shape != probs.shape:
        raise ValueError("geometry mismatch between probs and one-hot target")
    target = target.to(probs.dtype)
    inter = (target * probs).sum(dim=(1, 2, 3))
    denom = target.sum(dim=(1, 2, 3)) + probs.sum(dim=(1, 2, 3))
    per_class = 1.0 - (2.0 * inter + epsilon) / (denom + epsilon)
    return per_class.sum()


def total_loss(probs, labels, cfg: LossConfig, alphas=None):
    """Sum of the enabled components with unit weights."""
    if not cfg.components:
        raise ValueError("empty loss component set")
    if cfg.alpha_mode == "uniform":
        alphas = None
    elif alphas is None:
        raise ValueError("alpha_mode 'inverse-size' requires per-class alphas")
    out = None
    if "focal" in cfg.components:
        out = focal_loss(probs, labels, alphas=alphas, gamma=cfg.gamma)
    if "dice" in cfg.components:
        dice = generalized_dice_loss(probs, labels, epsilon=cfg.dice_epsilon)
        out = dice if out is None else out + dice
    return out


def total_loss_from_logits(logits, labels, cfg: LossConfig, alphas=None):
    """Convenience wrapper applying a channel softmax before the total loss."""
    logits = _as_tensor(logits)
    return total_loss(torch.softmax(logits, dim=0), labels, cfg, alphas=alphas)


def heatmap_mse(pred, target):
    """Mean squared error over all channels and voxels."""
    pred = _as_tensor(pred)
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def binary_focal_dice_loss(probs, target, gamma: float = 2.0, epsilon: float = 1e-5):
    """ROI loss for one binary head: focal (alpha 1) plus binary dice.

    ``probs`` holds foreground probabilities in (0, 1); ``target`` is a 0/1
    mask of the same shape.
    """
    probs = _as_tensor(probs)
    target = _as_tensor(target).to(probs.dtype)
    if probs.shape != target.shape:
        raise ValueError("shape mismatch between probabilities and target mask")
    p_true = torch.where(target > 0.5, probs, 1.0 - probs)
    p_true = p_true.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    focal = (-((1.0 - p_true) ** gamma) * torch.log(p_true)).mean()
    inter = (probs * target).sum()
    dice = 1.0 - (2.0 * inter + epsilon) / (probs.sum() + target.sum() + epsilon)
    return focal + dice
