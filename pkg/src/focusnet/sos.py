"""Small-organ segmentation branch.

Each small organ gets a fixed-size cubic region of interest centered on its
(predicted or ground-truth) center, a stack of stride-1 input channels cropped
to that box, and its own binary head.  Fusion overwrites backbone labels
inside each box where the head is confident and clears stray small-organ
labels outside the boxes.

ROI geometry is a function of the organ statistics alone: the side length is
``factor`` times the organ's equivalent diameter (rounded half-up, floored at
8, bumped to even), so every sample of an organ yields the same block shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .snet import FeatureVolume, SEResBlock
from .sol import snap_to_voxel
from .voldata import LabelMap, OrganSpec, Volume

DEFAULT_ROI_FACTOR = 3.0
MIN_ROI_SIDE = 8


@dataclass(frozen=True)
class RoiBox:
    organ_id: int
    start: tuple[int, int, int]  # in-volume, inclusive
    size: tuple[int, int, int]  # fixed extracted block shape
    pad_before: tuple[int, int, int]
    pad_after: tuple[int, int, int]

    def __post_init__(self):
        for name in ("start", "size", "pad_before", "pad_after"):
            object.__setattr__(
                self, name, tuple(int(v) for v in getattr(self, name))
            )
        if any(s < 0 for s in self.start):
            raise ValueError("start must be non-negative")
        if any(s < 1 for s in self.size):
            raise ValueError("size must be positive")
        if any(p < 0 for p in self.pad_before + self.pad_after):
            raise ValueError("padding must be non-negative")

    @property
    def volume_slices(self) -> tuple[slice, slice, slice]:
        """Extent of the box that lies inside the volume."""
        return tuple(
            slice(s, s + n - pb - pa)
            for s, n, pb, pa in zip(
                self.start, self.size, self.pad_before, self.pad_after
            )
        )

    @property
    def roi_slices(self) -> tuple[slice, slice, slice]:
        """Where the in-volume extent lands inside the extracted block."""
        return tuple(
            slice(pb, n - pa)
            for n, pb, pa in zip(self.size, self.pad_before, self.pad_after)
        )


def roi_side(organ: OrganSpec, factor: float = DEFAULT_ROI_FACTOR) -> int:
    """Fixed cube side for one organ: factor x equivalent diameter."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    side = int(math.floor(factor * organ.mean_diameter + 0.5))
    side = max(MIN_ROI_SIDE, side)
    return side + side % 2


def cube_box(center, side: int, volume_shape, organ_id: int = 0) -> RoiBox:
    """Cubic box of the given side centered at ``center``, clamped to the
    volume with the clipped amounts recorded as zero padding."""
    center = snap_to_voxel(center)
    shape = tuple(int(s) for s in volume_shape)
    if any(not 0 <= c < s for c, s in zip(center, shape)):
        raise ValueError(f"center {center} outside volume {shape}")
    start, pad_before, pad_after = [], [], []
    for c, dim in zip(center, shape):
        lo = c - side // 2
        hi = lo + side
        pb = max(0, -lo)
        pa = max(0, hi - dim)
        start.append(max(0, lo))
        pad_before.append(pb)
        pad_after.append(pa)
    return RoiBox(
        organ_id=organ_id,
        start=tuple(start),
        size=(side, side, side),
        pad_before=tuple(pad_before),
        pad_after=tuple(pad_after),
    )


def roi_box(
    center,
    organ: OrganSpec,
    factor: float = DEFAULT_ROI_FACTOR,
    *,
    volume_shape,
) -> RoiBox:
    """The organ's fixed-size box (see ``roi_side``) centered at ``center``."""
    return cube_box(center, roi_side(organ, factor), volume_shape, organ.id)


def crop_with_padding(source, box: RoiBox):
    """Extract the box from a rank-3 or rank-4 (channels-first) grid with the
    out-of-volume region zero-filled.  numpy in, numpy out; torch in, torch
    out (gradients flow through the copied interior)."""
    spatial = source.shape[-3:]
    lead = source.shape[:-3]
    vs = box.volume_slices
    rs = box.roi_slices
    for sl, dim in zip(vs, spatial):
        if sl.stop > dim:
            raise ValueError(f"box {box} exceeds source spatial shape {spatial}")
    if isinstance(source, torch.Tensor):
        out = source.new_zeros(*lead, *box.size)
    else:
        out = np.zeros((*lead, *box.size), dtype=source.dtype)
    out[(..., *rs)] = source[(..., *vs)]
    return out


def assemble_roi_input(
    box: RoiBox,
    decoder_features: FeatureVolume,
    raw: Volume,
    encoder_hr_features: FeatureVolume,
    heatmap,
) -> torch.Tensor:
    """Concatenate decoder features, the raw image, encoder features and the
    organ's location heatmap, cropped to the box.

    Output channel count = decoder + 1 + encoder + 1.
    """
    if decoder_features.stride != 1 or encoder_hr_features.stride != 1:
        raise ValueError("ROI sources must be stride-1 feature volumes")
    if isinstance(heatmap, torch.Tensor):
        heat = heatmap.to(torch.float32)  # gradients flow when finetuning
    else:
        heat = torch.as_tensor(np.asarray(heatmap), dtype=torch.float32)
    raw_t = torch.from_numpy(np.ascontiguousarray(raw.data))
    geometry = raw_t.shape
    if (
        decoder_features.data.shape[1:] != geometry
        or encoder_hr_features.data.shape[1:] != geometry
        or heat.shape != geometry
    ):
        raise ValueError(
            "geometry mismatch among ROI sources: "
            f"dec {tuple(decoder_features.data.shape[1:])}, raw {tuple(geometry)}, "
            f"enc {tuple(encoder_hr_features.data.shape[1:])}, "
            f"heat {tuple(heat.shape)}"
        )
    stacked = torch.cat(
        [
            decoder_features.data,
            raw_t[None],
            encoder_hr_features.data,
            heat[None],
        ],
        dim=0,
    )
    return crop_with_padding(stacked, box)


class SOSHead(nn.Module):
    """Binary refinement head for one organ: 2 SE-residual blocks + sigmoid."""

    def __init__(
        self,
        organ_id: int,
        in_channels: int,
        width: int = 24,
        se_reduction: int = 4,
    ):
        super().__init__()
        self.organ_id = int(organ_id)
        self.in_channels = int(in_channels)
        self.block1 = SEResBlock(in_channels, width, se_reduction)
        self.block2 = SEResBlock(width, width, se_reduction)
        self.head = nn.Conv3d(width, 1, 1)

    def forward(self, roi):  # (N, C, s, s, s) -> (N, 1, s, s, s)
        if roi.shape[1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} input channels, got {roi.shape[1]}"
            )
        return torch.sigmoid(self.head(self.block2(self.block1(roi))))


def build_sosnet(
    organ,
    in_channels: int,
    width: int = 24,
    se_reduction: int = 4,
    seed: int = 0,
) -> SOSHead:
    """One head per organ; separate calls share no parameters."""
    organ_id = organ.id if isinstance(organ, OrganSpec) else int(organ)
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = SOSHead(organ_id, in_channels, width, se_reduction)
    finally:
        torch.random.set_rng_state(state)
    return model


def sos_forward(model: SOSHead, roi_input: torch.Tensor) -> torch.Tensor:
    """Inference on one assembled ROI block; returns (1, s, s, s) probabilities."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(roi_input[None])[0]
    finally:
        model.train(was_training)
    return out


def jitter_center(
    center,
    side: int,
    rng: np.random.Generator,
    fraction: float = 0.1,
    volume_shape=None,
):
    """Training-time ROI center: uniform offset up to +/- fraction x side per
    axis, clamped inside the volume when a shape is given."""
    offset = rng.uniform(-fraction * side, fraction * side, size=3)
    jittered = [float(c) + o for c, o in zip(center, offset)]
    if volume_shape is not None:
        jittered = [
            min(max(c, 0.0), dim - 1.0) for c, dim in zip(jittered, volume_shape)
        ]
    return tuple(jittered)


def fuse_predictions(
    snet_logits,
    small_results: Sequence[tuple[RoiBox, object]],
    threshold: float = 0.5,
    *,
    spacing=(1.0, 1.0, 1.0),
    small_organ_ids: Optional[Sequence[int]] = None,
) -> LabelMap:
    """Combine dense backbone logits with per-organ ROI probabilities.

    Start from the argmax labels.  Inside each organ's box, voxels whose ROI
    probability exceeds ``threshold`` take that organ's class; competing
    claims go to the higher probability (ties to the lower class id).
    Backbone voxels labeled as a small organ outside that organ's box are
    reset to background, so each small organ can only appear where its
    specialist looked.  ``small_organ_ids`` defaults to the ids present in
    ``small_results``; list absent organs explicitly to clear their labels.
    """
    logits = np.asarray(
        snet_logits.detach().cpu() if isinstance(snet_logits, torch.Tensor) else snet_logits
    )
    if logits.ndim != 4:
        raise ValueError(f"logits must be rank 4, got shape {logits.shape}")
    labels = logits.argmax(axis=0).astype(np.uint16)
    num_classes = logits.shape[0] - 1
    shape = labels.shape

    if small_organ_ids is None:
        small_organ_ids = sorted({box.organ_id for box, _ in small_results})
    boxes_by_id: dict[int, list] = {int(i): [] for i in small_organ_ids}
    for box, probs in small_results:
        boxes_by_id.setdefault(box.organ_id, []).append((box, probs))

    for organ_id, entries in boxes_by_id.items():
        inside = np.zeros(shape, dtype=bool)
        for box, _ in entries:
            inside[box.volume_slices] = True
        labels[(labels == organ_id) & ~inside] = 0

    best_p = np.zeros(shape, dtype=np.float64)
    best_id = np.zeros(shape, dtype=np.uint16)
    for organ_id in sorted(boxes_by_id):
        for box, probs in boxes_by_id[organ_id]:
            p = np.asarray(
                probs.detach().cpu() if isinstance(probs, torch.Tensor) else probs,
                dtype=np.float64,
            )
            if p.ndim == 4:
                if p.shape[0] != 1:
                    raise ValueError("per-organ probabilities must be single-channel")
                p = p[0]
            if p.shape != box.size:
                raise ValueError(
                    f"probability grid {p.shape} does not match box size {box.size}"
                )
            interior = p[box.roi_slices]
            view_p = best_p[box.volume_slices]
            view_id = best_id[box.volume_slices]
            take = (interior > threshold) & (interior > view_p)
            view_p[take] = interior[take]
            view_id[take] = organ_id

    claimed = best_id > 0
    labels[claimed] = best_id[claimed]
    return LabelMap(labels, num_classes=num_classes, spacing=spacing)
