"""Small-organ localization branch.

Regresses one 3D Gaussian center heatmap per small organ from the backbone's
stride-1 decoder features.  Targets put an exact 1.0 at the voxel nearest the
organ centroid and fall off as exp(-d^2 / (2 sigma^2)) in voxel units, with
sigma tied to the organ's equivalent diameter unless overridden.  Peaks are
read back with a lexicographic-argmax rule plus a presence threshold so truly
absent organs yield "no location" rather than a garbage box.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .snet import FeatureVolume, SEResBlock
from .voldata import LabelMap, OrganSpec

DEFAULT_PRESENCE_THRESHOLD = 0.1
_MIN_SIGMA = 2.0


@dataclass(frozen=True)
class HeatmapSet:
    data: np.ndarray  # (num_small, D, H, W), values in [0, 1]
    organ_ids: tuple[int, ...]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4:
            raise ValueError(f"heatmaps must be rank 4, got shape {data.shape}")
        if data.shape[0] != len(self.organ_ids):
            raise ValueError("one channel per organ id required")
        if data.size and (data.min() < 0 or data.max() > 1):
            raise ValueError("heatmap values must lie in [0, 1]")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "organ_ids", tuple(int(i) for i in self.organ_ids))

    def channel(self, organ_id: int) -> np.ndarray:
        return self.data[self.organ_ids.index(organ_id)]


def organ_sigma(organ: OrganSpec) -> float:
    """Heatmap spread in voxels: half the equivalent diameter, floored at 2."""
    return max(_MIN_SIGMA, organ.mean_diameter / 2.0)


def snap_to_voxel(center: Sequence[float]) -> tuple[int, int, int]:
    """Nearest lattice point, half-values rounding up."""
    return tuple(int(np.floor(c + 0.5)) for c in center)


def make_target_heatmaps(
    lm: LabelMap,
    small_organs: Sequence[OrganSpec],
    sigma: Optional[float] = None,
) -> HeatmapSet:
    """Gaussian center heatmaps, one channel per small organ.

    A shared ``sigma`` overrides the per-organ default.  Absent organs get an
    all-zero channel.
    """
    if sigma is not None and sigma <= 0:
        raise ValueError("sigma must be positive")
    shape = lm.data.shape
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    channels = np.zeros((len(small_organs), *shape), dtype=np.float32)
    for i, organ in enumerate(small_organs):
        coords = np.argwhere(lm.data == organ.id)
        if coords.size == 0:
            continue
        cz, cy, cx = snap_to_voxel(coords.mean(axis=0))
        s = sigma if sigma is not None else organ_sigma(organ)
        d2 = (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2
        channels[i] = np.exp(-d2 / (2.0 * s * s))
    return HeatmapSet(channels, tuple(o.id for o in small_organs))


def locate_peak(
    heatmap, presence_threshold: float = DEFAULT_PRESENCE_THRESHOLD
) -> Optional[tuple[int, int, int]]:
    """Coordinate of the maximum, or None when the maximum falls below the
    presence threshold.  Equal maxima resolve to the lexicographically
    smallest (z, y, x)."""
    arr = np.asarray(
        heatmap.detach().cpu() if isinstance(heatmap, torch.Tensor) else heatmap
    )
    if arr.ndim != 3:
        raise ValueError(f"expected a single-channel 3D heatmap, got {arr.shape}")
    flat_idx = int(arr.argmax())
    if arr.flat[flat_idx] < presence_threshold:
        return None
    return tuple(int(c) for c in np.unravel_index(flat_idx, arr.shape))


class SOLNet(nn.Module):
    """Two SE-residual blocks and a sigmoid 1x1x1 head over decoder features."""

    def __init__(
        self,
        num_small: int,
        in_channels: int,
        organ_ids: Optional[Sequence[int]] = None,
        width: Optional[int] = None,
        se_reduction: int = 4,
    ):
        super().__init__()
        if num_small < 1:
            raise ValueError("num_small must be >= 1")
        if organ_ids is None:
            organ_ids = tuple(range(1, num_small + 1))
        organ_ids = tuple(int(i) for i in organ_ids)
        if len(organ_ids) != num_small:
            raise ValueError("organ_ids length must equal num_small")
        width = in_channels if width is None else width
        self.organ_ids = organ_ids
        self.block1 = SEResBlock(in_channels, width, se_reduction)
        self.block2 = SEResBlock(width, width, se_reduction)
        self.head = nn.Conv3d(width, num_small, 1)
        # Start every voxel near the sparse background value. Backbone
        # features at distinctive structures run tens of units, so default
        # head weights saturate the sigmoid there from the first step and
        # the rare positive targets never get gradient; a tight weight scale
        # plus a negative bias keeps the whole map in the responsive range.
        nn.init.normal_(self.head.weight, std=0.01)
        nn.init.constant_(self.head.bias, -2.0)

    def forward(self, features):  # (N, C, D, H, W) -> (N, num_small, D, H, W)
        return torch.sigmoid(self.head(self.block2(self.block1(features))))


def build_solnet(
    num_small: int,
    in_channels: int,
    seed: int = 0,
    organ_ids: Optional[Sequence[int]] = None,
    width: Optional[int] = None,
    se_reduction: int = 4,
) -> SOLNet:
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = SOLNet(num_small, in_channels, organ_ids, width, se_reduction)
    finally:
        torch.random.set_rng_state(state)
    return model


def sol_forward(model: SOLNet, decoder_features: FeatureVolume) -> HeatmapSet:
    """Inference on one feature volume; gradients are not tracked."""
    if decoder_features.stride != 1:
        raise ValueError(
            f"SOL consumes stride-1 features, got stride {decoder_features.stride}"
        )
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            maps = model(decoder_features.data[None])[0]
    finally:
        model.train(was_training)
    return HeatmapSet(maps.cpu().numpy(), model.organ_ids)
