"""Synthetic 3D phantom generator.

Produces intensity volumes plus ground-truth label maps whose large/small
structure size ratios, contrast, and noise are controllable, so the whole
segmentation pipeline can be exercised and measured without clinical data.

Shape families: ellipsoids (generic blobs), tubes (cord-like cylinders), and
"lens-pair" ellipsoids placed mirror-symmetrically about the mid-sagittal
plane.  Consecutive lens-pair entries in the organ list form a left/right
pair: the first is placed in the left half, the second at the mirrored
position, which makes the two organs visually identical and forces the
localizer to resolve laterality.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .losses import compute_alphas
from .voldata import (
    LabelMap,
    OrganSpec,
    Volume,
    classify_small_organs,
    equivalent_diameter,
    organ_voxel_counts,
    save_labels,
    save_volume,
)

SHAPE_FAMILIES = ("ellipsoid", "tube", "lens-pair")

MANIFEST_VERSION = 1
MAX_PLACEMENT_ATTEMPTS = 1000

# calibration targets a tighter tolerance than the ±30% sample contract
_CALIBRATION_TOLERANCE = 0.15
_CALIBRATION_ITERS = 8


class PlacementError(RuntimeError):
    """Organ could not be placed without overlap within the retry budget."""


@dataclass(frozen=True)
class OrganDef:
    class_id: int
    target_fraction: float  # of total voxels, in (0, 1)
    shape_family: str
    intensity_mean: float
    intensity_contrast: float
    name: str = ""

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError("class_id must be >= 1")
        if not 0 < self.target_fraction < 1:
            raise ValueError("target_fraction must be in (0, 1)")
        if self.shape_family not in SHAPE_FAMILIES:
            raise ValueError(f"unknown shape_family {self.shape_family!r}")
        if not self.name:
            object.__setattr__(
                self, "name", f"{self.shape_family.replace('-', '_')}_{self.class_id}"
            )


@dataclass(frozen=True)
class PhantomSpec:
    volume_shape: tuple[int, int, int] = (96, 96, 96)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    organs: tuple[OrganDef, ...] = ()
    noise_sigma: float = 0.05
    background_mean: float = 0.0
    seed: int = 0

    def __post_init__(self):
        shape = tuple(int(s) for s in self.volume_shape)
        if len(shape) != 3 or any(s < 16 for s in shape):
            raise ValueError("volume_shape must be 3 integers, each >= 16")
        object.__setattr__(self, "volume_shape", shape)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "organs", tuple(self.organs))
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        ids = [o.class_id for o in self.organs]
        if len(set(ids)) != len(ids):
            raise ValueError("organ class ids must be unique")
        fractions = [o.target_fraction for o in self.organs]
        if fractions and sum(fractions) >= 1.0:
            raise ValueError("organ target fractions must sum to < 1")
        for organ in self.organs:
            if abs(organ.intensity_mean - self.background_mean) < organ.intensity_contrast:
                raise ValueError(
                    f"organ {organ.class_id}: |intensity_mean - background| must be "
                    f">= intensity_contrast"
                )

    @property
    def num_classes(self) -> int:
        return max((o.class_id for o in self.organs), default=0)


@dataclass(frozen=True)
class PhantomSample:
    volume: Volume
    labels: LabelMap
    organ_voxels: dict[int, int]
    organ_centers: dict[int, tuple[float, float, float]]


def default_phantom_spec(seed: int = 0) -> PhantomSpec:
    """Desk-scale default: 3 large + 4 small organs in a 96^3 volume.

    The two lens-pair organs share one intensity (0.45, close to the largest
    organ's 0.50) so they can only be told apart by position; the remaining
    small organs carry distinctive intensities.
    """
    organs = (
        OrganDef(1, 0.01, "ellipsoid", 0.50, 0.3),
        OrganDef(2, 0.005, "ellipsoid", 0.65, 0.3),
        OrganDef(3, 0.005, "tube", 0.35, 0.3),
        OrganDef(4, 0.0001, "lens-pair", 0.45, 0.3),
        OrganDef(5, 0.0001, "lens-pair", 0.45, 0.3),
        OrganDef(6, 0.00005, "ellipsoid", 0.80, 0.3),
        OrganDef(7, 0.00003, "ellipsoid", -0.35, 0.3),
    )
    return PhantomSpec(organs=organs, seed=seed)


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

def _local_box(center, extents, shape):
    """Integer slice box covering center +/- extents, or None if out of bounds."""
    lo = [math.floor(c - e) for c, e in zip(center, extents)]
    hi = [math.ceil(c + e) + 1 for c, e in zip(center, extents)]
    if any(l < 0 for l in lo) or any(h > s for h, s in zip(hi, shape)):
        return None
    return tuple(slice(l, h) for l, h in zip(lo, hi))


def _rasterize_ellipsoid(center, semi_axes, shape):
    box = _local_box(center, semi_axes, shape)
    if box is None:
        return None
    zz, yy, xx = np.ogrid[box[0], box[1], box[2]]
    dist = (
        ((zz - center[0]) / semi_axes[0]) ** 2
        + ((yy - center[1]) / semi_axes[1]) ** 2
        + ((xx - center[2]) / semi_axes[2]) ** 2
    )
    return box, dist <= 1.0


def _rasterize_tube(center, radius, half_length, axis, shape):
    extents = [radius] * 3
    extents[axis] = half_length
    box = _local_box(center, extents, shape)
    if box is None:
        return None
    grids = np.ogrid[box[0], box[1], box[2]]
    radial = sum(
        ((grids[a] - center[a]) / radius) ** 2 for a in range(3) if a != axis
    )
    axial = np.abs(grids[axis] - center[axis]) <= half_length
    return box, (radial <= 1.0) & axial


def _calibrated_mask(raster, scale0, target, shape):
    """Iteratively rescale a shape until its discrete voxel count is close to
    the target.  ``raster(scale)`` returns (box, local bool mask) or None."""
    scale = scale0
    best = None
    for _ in range(_CALIBRATION_ITERS):
        result = raster(scale)
        if result is None:
            return None  # grew out of bounds: treat as failed placement
        count = int(result[1].sum())
        if count == 0:
            scale *= 1.4
            continue
        if best is None or abs(count - target) < abs(best[2] - target):
            best = (*result, count)
        if abs(count - target) <= max(1.0, _CALIBRATION_TOLERANCE * target):
            break
        scale *= (target / count) ** (1.0 / 3.0)
    return best


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _placement_jobs(organs: Sequence[OrganDef]):
    """Group consecutive lens-pair entries into mirrored L/R pairs."""
    jobs = []
    pending_pair: Optional[OrganDef] = None
    for organ in organs:
        if organ.shape_family == "lens-pair":
            if pending_pair is None:
                pending_pair = organ
            else:
                jobs.append(("pair", pending_pair, organ))
                pending_pair = None
        else:
            jobs.append((organ.shape_family, organ))
    if pending_pair is not None:  # odd entry: single blob kept in the left half
        jobs.append(("half-ellipsoid", pending_pair))
    return jobs


def _draw_ellipsoid(rng, shape, target, x_range=None, center=None):
    """One placement attempt; returns (box, mask, count, center) or None."""
    r0 = (3.0 * target / (4.0 * math.pi)) ** (1.0 / 3.0)
    aniso = rng.uniform(0.75, 1.3, size=3)
    aniso /= aniso.prod() ** (1.0 / 3.0)
    if center is None:
        margin = r0 * 1.35 * aniso.max() + 2.0
        lo = [margin] * 3
        hi = [s - 1 - margin for s in shape]
        if x_range is not None:
            lo[2], hi[2] = max(lo[2], x_range[0]), min(hi[2], x_range[1])
        if any(l >= h for l, h in zip(lo, hi)):
            return None
        center = rng.uniform(lo, hi)
    result = _calibrated_mask(
        lambda s: _rasterize_ellipsoid(center, aniso * s, shape), r0, target, shape
    )
    if result is None:
        return None
    return (*result, tuple(float(c) for c in center))


def _draw_tube(rng, shape, target):
    axis = int(rng.integers(0, 3))
    aspect = rng.uniform(4.0, 8.0)
    r0 = (target / (2.0 * math.pi * aspect)) ** (1.0 / 3.0)
    margin_r = r0 * 1.35 + 2.0
    margin_l = aspect * r0 * 1.35 + 2.0
    lo = [margin_r] * 3
    hi = [s - 1 - margin_r for s in shape]
    lo[axis], hi[axis] = margin_l, shape[axis] - 1 - margin_l
    if any(l >= h for l, h in zip(lo, hi)):
        return None
    center = rng.uniform(lo, hi)
    result = _calibrated_mask(
        lambda s: _rasterize_tube(center, s, aspect * s, axis, shape),
        r0,
        target,
        shape,
    )
    return result


def _mirror_center(center, width):
    return (center[0], center[1], (width - 1) - center[2])


def generate_phantom(spec: PhantomSpec) -> PhantomSample:
    """Deterministically generate one sample from (spec, spec.seed)."""
    rng = np.random.default_rng(spec.seed)
    shape = spec.volume_shape
    total = int(np.prod(shape))
    labels = np.zeros(shape, dtype=np.uint16)
    blocked = np.zeros(shape, dtype=bool)  # dilated occupancy: keeps organs apart

    def commit(box, mask, organ):
        labels[box][mask] = organ.class_id
        region = np.zeros(shape, dtype=bool)
        region[box] = mask
        blocked[:] |= ndimage.binary_dilation(region)

    def try_place(result, organ):
        if result is None:
            return False
        box, mask = result[0], result[1]
        if blocked[box][mask].any():
            return False
        commit(box, mask, organ)
        return True

    for job in _placement_jobs(spec.organs):
        kind = job[0]
        organ = job[1]
        target = organ.target_fraction * total
        placed = False
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            if kind == "ellipsoid":
                placed = try_place(_draw_ellipsoid(rng, shape, target), organ)
            elif kind == "tube":
                placed = try_place(_draw_tube(rng, shape, target), organ)
            elif kind == "half-ellipsoid":
                half = (2.0, shape[2] / 2.0 - 2.0)
                placed = try_place(
                    _draw_ellipsoid(rng, shape, target, x_range=half), organ
                )
            elif kind == "pair":
                left, right = organ, job[2]
                half = (2.0, shape[2] / 2.0 - 2.0)
                res_l = _draw_ellipsoid(rng, shape, target, x_range=half)
                if res_l is None or blocked[res_l[0]][res_l[1]].any():
                    continue
                box_l, mask_l, _cl, center_l = res_l
                # mirrored partner: same z/y, x reflected about the mid plane
                center_r = _mirror_center(center_l, shape[2])
                res_r = _draw_ellipsoid(
                    rng, shape, right.target_fraction * total, center=center_r
                )
                if res_r is None or blocked[res_r[0]][res_r[1]].any():
                    continue
                box_r, mask_r = res_r[0], res_r[1]
                left_region = np.zeros(shape, dtype=bool)
                left_region[box_l] = mask_l
                if ndimage.binary_dilation(left_region)[box_r][mask_r].any():
                    continue
                commit(box_l, mask_l, left)
                commit(box_r, mask_r, right)
                placed = True
            if placed:
                break
        if not placed:
            raise PlacementError(
                f"could not place organ {organ.class_id} ({organ.name}) after "
                f"{MAX_PLACEMENT_ATTEMPTS} attempts; spec infeasible for shape {shape}"
            )

    intensities = np.full(shape, spec.background_mean, dtype=np.float64)
    for organ in spec.organs:
        intensities[labels == organ.class_id] = organ.intensity_mean
    intensities += rng.normal(0.0, spec.noise_sigma, size=shape)

    label_map = LabelMap(labels, num_classes=spec.num_classes, spacing=spec.spacing)
    volume = Volume(intensities.astype(np.float32), spacing=spec.spacing)

    counts = organ_voxel_counts(label_map)
    centers = {}
    for organ in spec.organs:
        coords = np.argwhere(labels == organ.class_id)
        centers[organ.class_id] = tuple(float(c) for c in coords.mean(axis=0))
        realized = counts[organ.class_id]
        target = organ.target_fraction * total
        if target >= 8 and abs(realized - target) > 0.3 * target:
            raise PlacementError(
                f"organ {organ.class_id} realized {realized} voxels, "
                f"target {target:.1f} (outside ±30%)"
            )
    organ_counts = {o.class_id: counts[o.class_id] for o in spec.organs}
    return PhantomSample(volume, label_map, organ_counts, centers)


# ---------------------------------------------------------------------------
# Dataset generation + manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestSample:
    sample_id: str
    seed: int
    volume: str  # path relative to the manifest directory
    labels: str
    organ_voxels: dict[int, int]


@dataclass(frozen=True)
class Manifest:
    root: Path
    volume_shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    num_classes: int
    samples: tuple[ManifestSample, ...]
    organs: tuple[OrganSpec, ...]
    background_alpha: float

    def alphas(self) -> np.ndarray:
        """Per-class focal weights indexed by class id, background first."""
        out = np.ones(self.num_classes + 1)
        out[0] = self.background_alpha
        for organ in self.organs:
            out[organ.id] = organ.alpha
        return out

    def small_organs(self) -> tuple[OrganSpec, ...]:
        return tuple(o for o in self.organs if o.is_small)


def generate_dataset(
    spec: PhantomSpec,
    n: int,
    out_dir,
    small_threshold: float = 1000.0,
) -> Manifest:
    """Generate n samples with seeds seed+0..seed+n-1 and write a manifest.

    Organ statistics (mean counts, equivalent diameters, small flags, focal
    alphas) are computed over the generated samples.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    total = int(np.prod(spec.volume_shape))
    entries = []
    count_rows = []
    for i in range(n):
        sample = generate_phantom(replace(spec, seed=spec.seed + i))
        sample_id = f"sample_{i:03d}"
        save_volume(sample.volume, out_dir / f"{sample_id}_img")
        save_labels(sample.labels, out_dir / f"{sample_id}_lab")
        entries.append(
            ManifestSample(
                sample_id=sample_id,
                seed=spec.seed + i,
                volume=f"{sample_id}_img",
                labels=f"{sample_id}_lab",
                organ_voxels=dict(sample.organ_voxels),
            )
        )
        count_rows.append(sample.organ_voxels)

    organ_ids = sorted({o.class_id for o in spec.organs})
    mean_counts = {
        cls: float(np.mean([row.get(cls, 0) for row in count_rows]))
        for cls in organ_ids
    }
    small = classify_small_organs(mean_counts, threshold=small_threshold)
    mean_bg = float(
        np.mean([total - sum(row.values()) for row in count_rows])
    )
    alphas = compute_alphas([mean_bg] + [mean_counts[c] for c in organ_ids])
    by_id = {o.class_id: o for o in spec.organs}
    organs = tuple(
        OrganSpec(
            id=cls,
            name=by_id[cls].name,
            is_small=cls in small,
            mean_voxel_count=mean_counts[cls],
            mean_diameter=equivalent_diameter(mean_counts[cls]),
            alpha=float(alphas[1 + organ_ids.index(cls)]),
        )
        for cls in organ_ids
    )
    manifest = Manifest(
        root=out_dir,
        volume_shape=spec.volume_shape,
        spacing=spec.spacing,
        num_classes=spec.num_classes,
        samples=tuple(entries),
        organs=organs,
        background_alpha=float(alphas[0]),
    )
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest


def write_manifest(manifest: Manifest, path) -> None:
    doc = {
        "version": MANIFEST_VERSION,
        "volume_shape": list(manifest.volume_shape),
        "spacing_mm": list(manifest.spacing),
        "num_classes": manifest.num_classes,
        "samples": [
            {
                "id": s.sample_id,
                "seed": s.seed,
                "volume": s.volume,
                "labels": s.labels,
                "organ_voxels": {str(k): v for k, v in s.organ_voxels.items()},
            }
            for s in manifest.samples
        ],
        "organs": [
            {
                "id": o.id,
                "name": o.name,
                "is_small": o.is_small,
                "mean_voxel_count": o.mean_voxel_count,
                "mean_diameter": o.mean_diameter,
                "alpha": o.alpha,
            }
            for o in manifest.organs
        ],
        "background_alpha": manifest.background_alpha,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {doc.get('version')!r}")
    samples = tuple(
        ManifestSample(
            sample_id=s["id"],
            seed=int(s["seed"]),
            volume=s["volume"],
            labels=s["labels"],
            organ_voxels={int(k): int(v) for k, v in s["organ_voxels"].items()},
        )
        for s in doc["samples"]
    )
    organs = tuple(
        OrganSpec(
            id=int(o["id"]),
            name=o["name"],
            is_small=bool(o["is_small"]),
            mean_voxel_count=float(o["mean_voxel_count"]),
            mean_diameter=float(o["mean_diameter"]),
            alpha=float(o["alpha"]),
        )
        for o in doc["organs"]
    )
    return Manifest(
        root=path.parent,
        volume_shape=tuple(doc["volume_shape"]),
        spacing=tuple(doc["spacing_mm"]),
        num_classes=int(doc["num_classes"]),
        samples=samples,
        organs=organs,
        background_alpha=float(doc["background_alpha"]),
    )
