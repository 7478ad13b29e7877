"""Core data model: intensity volumes, label maps, organ metadata, and raw file I/O.

Volumes and label maps are stored on disk as a two-file pair: a JSON header
(shape, spacing, dtype, class count, version) next to a little-endian raw
payload.  Intensities are 32-bit float, labels 16-bit unsigned.  The format is
deliberately dumb so round trips are bit-exact and readable from any language.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

FORMAT_VERSION = 1
VOLUME_DTYPE = "<f4"
LABEL_DTYPE = "<u2"

SMALL_ORGAN_THRESHOLD = 1000  # mean voxel count below which an organ counts as small

# per-voxel class probabilities must sum to 1 within this tolerance
SIMPLEX_TOLERANCE = 1e-5


class VolumeFormatError(ValueError):
    """Malformed header or payload that does not match its header."""


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be 3 positive values, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume:
    """A 3D scalar intensity grid with physical voxel spacing (mm, z/y/x order)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite intensities")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelMap:
    """A 3D integer grid of class ids in [0, num_classes]; 0 is background."""

    data: np.ndarray
    num_classes: int
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {data.shape}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if data.size and (data.min() < 0 or data.max() > self.num_classes):
            raise ValueError(
                f"labels must lie in [0, {self.num_classes}], "
                f"got range [{data.min()}, {data.max()}]"
            )
        object.__setattr__(self, "data", data.astype(np.uint16))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class OrganSpec:
    """Per-class metadata derived from a training set."""

    id: int
    name: str
    is_small: bool
    mean_voxel_count: float
    mean_diameter: float  # voxels, equivalent-sphere convention
    alpha: float  # class weight for the focal loss

    def __post_init__(self):
        if self.id < 1:
            raise ValueError("organ id must be >= 1 (0 is background)")
        if self.mean_voxel_count <= 0 or self.mean_diameter <= 0 or self.alpha <= 0:
            raise ValueError("mean_voxel_count, mean_diameter and alpha must be positive")


@dataclass(frozen=True)
class ProbabilityGrid:
    """Per-voxel class probabilities, channels first: (num_classes+1, D, H, W)."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4:
            raise ValueError(f"probability grid must be rank 4, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("probability grid contains non-finite values")
        if data.size and data.min() < -SIMPLEX_TOLERANCE:
            raise ValueError("probabilities must be non-negative")
        sums = data.sum(axis=0)
        if data.size and np.abs(sums - 1.0).max() > SIMPLEX_TOLERANCE:
            raise ValueError("per-voxel probabilities must sum to 1")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def num_classes(self) -> int:
        return self.data.shape[0] - 1


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _base_path(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p


def _header_payload(path):
    base = _base_path(path)
    return base.with_suffix(base.suffix + ".json"), base.with_suffix(base.suffix + ".raw")


def _write_pair(path, header: dict, payload: bytes) -> None:
    header_path, payload_path = _header_payload(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, sort_keys=True, indent=1) + "\n")
    payload_path.write_bytes(payload)


def _read_pair(path):
    header_path, payload_path = _header_payload(path)
    if not header_path.exists():
        raise FileNotFoundError(f"missing header {header_path}")
    if not payload_path.exists():
        raise FileNotFoundError(f"missing payload {payload_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"malformed header {header_path}: {exc}") from exc
    for key in ("version", "shape", "spacing_mm", "dtype"):
        if key not in header:
            raise VolumeFormatError(f"header {header_path} lacks key {key!r}")
    return header, payload_path.read_bytes()


def _decode_payload(header, payload, expected_dtype, header_path_hint=""):
    if header["dtype"] != expected_dtype:
        raise VolumeFormatError(
            f"expected dtype {expected_dtype!r}, header says {header['dtype']!r}"
        )
    shape = tuple(int(s) for s in header["shape"])
    dtype = np.dtype(expected_dtype)
    expected_bytes = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected_bytes:
        raise VolumeFormatError(
            f"payload has {len(payload)} bytes, header shape {shape} "
            f"requires {expected_bytes}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape)


def save_volume(volume: Volume, path) -> None:
    """Write a volume as its header/payload pair; bit-exact round trip."""
    header = {
        "version": FORMAT_VERSION,
        "shape": list(volume.shape),
        "spacing_mm": list(volume.spacing),
        "dtype": VOLUME_DTYPE,
    }
    _write_pair(path, header, volume.data.astype(VOLUME_DTYPE).tobytes())


def load_volume(path) -> Volume:
    header, payload = _read_pair(path)
    if "num_classes" in header:
        raise VolumeFormatError(f"{path} is a label map, not a volume")
    data = _decode_payload(header, payload, VOLUME_DTYPE)
    return Volume(data=data.astype(np.float32), spacing=tuple(header["spacing_mm"]))


def save_labels(labels: LabelMap, path) -> None:
    header = {
        "version": FORMAT_VERSION,
        "shape": list(labels.shape),
        "spacing_mm": list(labels.spacing),
        "dtype": LABEL_DTYPE,
        "num_classes": labels.num_classes,
    }
    _write_pair(path, header, labels.data.astype(LABEL_DTYPE).tobytes())


def load_labels(path) -> LabelMap:
    header, payload = _read_pair(path)
    if "num_classes" not in header:
        raise VolumeFormatError(f"{path} is a volume, not a label map")
    data = _decode_payload(header, payload, LABEL_DTYPE)
    return LabelMap(
        data=data.astype(np.uint16),
        num_classes=int(header["num_classes"]),
        spacing=tuple(header["spacing_mm"]),
    )


# ---------------------------------------------------------------------------
# Label operations
# ---------------------------------------------------------------------------

def one_hot(labels: LabelMap) -> ProbabilityGrid:
    """Exact 0/1 encoding with num_classes+1 channels, channel 0 = background."""
    classes = np.arange(labels.num_classes + 1, dtype=labels.data.dtype)
    data = (labels.data[None] == classes[:, None, None, None]).astype(np.float32)
    return ProbabilityGrid(data=data, spacing=labels.spacing)


def argmax_labels(probs: ProbabilityGrid) -> LabelMap:
    """Per-voxel argmax over channels; ties break toward the lower class id."""
    data = np.argmax(probs.data, axis=0).astype(np.uint16)
    return LabelMap(data=data, num_classes=probs.num_classes, spacing=probs.spacing)


def organ_voxel_counts(labels: LabelMap) -> dict[int, int]:
    """Voxel count per class id, 0..num_classes; absent classes report 0."""
    counts = np.bincount(labels.data.ravel(), minlength=labels.num_classes + 1)
    return {cls: int(counts[cls]) for cls in range(labels.num_classes + 1)}


def classify_small_organs(
    counts: Mapping[int, float], threshold: float = SMALL_ORGAN_THRESHOLD
) -> set[int]:
    """Class ids whose mean voxel count is strictly below the threshold.

    Background (key 0) is never classified.  An organ with mean count 0 is
    reported small with a warning since its statistics are meaningless.
    """
    small = set()
    for cls, count in counts.items():
        if cls == 0:
            continue
        if count < threshold:
            small.add(cls)
            if count == 0:
                warnings.warn(
                    f"organ {cls} has mean voxel count 0 (never present)",
                    stacklevel=2,
                )
    return small


def organ_centroid(labels: LabelMap, cls: int) -> Optional[np.ndarray]:
    """Mean voxel coordinate (z, y, x) of a class, or None if absent."""
    coords = np.argwhere(labels.data == cls)
    if coords.shape[0] == 0:
        return None
    return coords.mean(axis=0)


def equivalent_diameter(mean_voxel_count: float) -> float:
    """Diameter (voxels) of the sphere whose volume equals the voxel count."""
    if mean_voxel_count <= 0:
        raise ValueError("voxel count must be positive")
    return 2.0 * (3.0 * mean_voxel_count / (4.0 * math.pi)) ** (1.0 / 3.0)
