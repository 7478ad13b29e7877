"""Staged optimization and inference.

The pipeline trains in four stages: the backbone alone, the localizer with a
frozen backbone, the per-organ refinement heads with everything else frozen,
and finally a joint finetune of all parameters at a reduced learning rate.
Stage ordering is enforced through checkpoint tags, and freeze contracts are
checkable by hashing parameter state.

The backbone is frozen during stages 2 and 3, so per-sample feature volumes
are computed once and cached; stage 3 additionally caches an enlarged
"super ROI" block per organ from which jittered training crops are sliced
without touching the full volume again.

Determinism: all shuffling and jitter derive from per-(seed, stage, epoch)
generators, so a resumed run consumes exactly the same random stream as an
uninterrupted one.  With single-threaded numerics, repeated runs are
bit-identical.
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .losses import (
    LossConfig,
    binary_focal_dice_loss,
    heatmap_mse,
    total_loss_from_logits,
)
from .metrics import OrganAggregate, OrganReport, aggregate, evaluate_case
from .phantom import Manifest, load_manifest
from .snet import FeatureVolume, SNet, SNetConfig, build_snet, snet_forward
from .sol import (
    DEFAULT_PRESENCE_THRESHOLD,
    HeatmapSet,
    SOLNet,
    build_solnet,
    locate_peak,
    make_target_heatmaps,
    sol_forward,
)
from .sos import (
    DEFAULT_ROI_FACTOR,
    SOSHead,
    assemble_roi_input,
    build_sosnet,
    crop_with_padding,
    cube_box,
    fuse_predictions,
    jitter_center,
    roi_box,
    roi_side,
    sos_forward,
)
from .voldata import LabelMap, OrganSpec, Volume, load_labels, load_volume

CHECKPOINT_VERSION = 1


class StagingError(ValueError):
    """A stage was invoked without the checkpoint of its prerequisite stage."""


@dataclass(frozen=True)
class StageSchedule:
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    snet: SNetConfig
    stage1: StageSchedule = StageSchedule(60, 1e-3)
    stage2: StageSchedule = StageSchedule(40, 1e-3)
    stage3: StageSchedule = StageSchedule(40, 1e-3)
    stage4: StageSchedule = StageSchedule(40, 1e-4)
    loss: LossConfig = field(default_factory=LossConfig)
    roi_factor: float = DEFAULT_ROI_FACTOR
    sol_sigma: Optional[float] = None  # None: per-organ diameter policy
    sol_width: Optional[int] = None
    sos_width: int = 24
    presence_threshold: float = DEFAULT_PRESENCE_THRESHOLD
    fusion_threshold: float = 0.5
    jitter_fraction: float = 0.1
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.roi_factor <= 0:
            raise ValueError("roi_factor must be positive")

    def schedule(self, stage: int) -> StageSchedule:
        return getattr(self, f"stage{stage}")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    stage: int
    snet_state: dict
    config: dict  # SNetConfig echo + branch topology knobs
    sol_state: Optional[dict] = None
    sos_states: dict = field(default_factory=dict)  # organ id -> state dict
    optimizer_state: Optional[dict] = None
    epoch: int = 0  # epochs completed within `stage`
    finished: bool = False
    torch_rng: Optional[torch.Tensor] = None
    version: int = CHECKPOINT_VERSION


def _topology_echo(cfg: TrainConfig, stage: int) -> dict:
    """Branch topology a checkpoint of ``stage`` is committed to.

    Only knobs the checkpoint's parameters actually depend on are recorded,
    so e.g. a stage-2 checkpoint stays reusable across ROI factors.
    """
    echo = {"snet": asdict(cfg.snet)}
    if stage >= 2:
        echo["sol_width"] = cfg.sol_width
    if stage >= 3:
        echo["sos_width"] = cfg.sos_width
        echo["roi_factor"] = cfg.roi_factor
    return echo


def _canonical(obj):
    """Rebuild a payload graph so object sharing depends only on values.

    Pickle emits memo references for repeated object identities, and identity
    patterns differ between freshly built and reloaded payloads (string
    interning, tensors from storage views).  Interning every string and
    cloning every tensor makes the serialized bytes a pure function of
    content, which the byte-identical checkpoint round trip relies on.
    """
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, torch.Tensor):
        return obj.detach().clone().contiguous()
    if isinstance(obj, OrderedDict):
        new = OrderedDict((_canonical(k), _canonical(v)) for k, v in obj.items())
        for name, value in vars(obj).items():  # state_dict carries _metadata
            new.__dict__[sys.intern(name)] = _canonical(value)
        return new
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, tuple):
        return tuple(_canonical(v) for v in obj)
    if isinstance(obj, list):
        return [_canonical(v) for v in obj]
    return obj


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    payload = {
        "version": ckpt.version,
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "finished": ckpt.finished,
        "config": ckpt.config,
        "snet_state": ckpt.snet_state,
        "sol_state": ckpt.sol_state,
        "sos_states": ckpt.sos_states,
        "optimizer_state": ckpt.optimizer_state,
        "torch_rng": ckpt.torch_rng,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # a file object keeps the embedded archive name constant, so identical
    # checkpoints serialize to identical bytes regardless of the file name
    with open(path, "wb") as fh:
        torch.save(_canonical(payload), fh)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {payload.get('version')!r}"
        )
    return Checkpoint(
        stage=payload["stage"],
        snet_state=payload["snet_state"],
        config=payload["config"],
        sol_state=payload["sol_state"],
        sos_states=payload["sos_states"],
        optimizer_state=payload["optimizer_state"],
        epoch=payload["epoch"],
        finished=payload["finished"],
        torch_rng=payload["torch_rng"],
    )


def state_hash(state_dict: dict) -> str:
    """Stable digest of a parameter state dict (order-insensitive)."""
    h = hashlib.sha256()
    for key in sorted(state_dict):
        tensor = state_dict[key]
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy())
        h.update(key.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def _require_stage(ckpt: Checkpoint, expected: int, invoking: str) -> None:
    if ckpt.stage != expected or not ckpt.finished:
        state = f"stage-{ckpt.stage}" + ("" if ckpt.finished else " (unfinished)")
        raise StagingError(
            f"{invoking} requires a finished stage-{expected} checkpoint, "
            f"got {state}"
        )


def _check_topology(ckpt: Checkpoint, cfg: TrainConfig) -> None:
    echo = _topology_echo(cfg, ckpt.stage)
    if ckpt.config != echo:
        raise ValueError(
            "checkpoint topology does not match the active config; "
            f"checkpoint {ckpt.config!r} vs config {echo!r}"
        )


# ---------------------------------------------------------------------------
# Data access
# ---------------------------------------------------------------------------

class SampleBank:
    """Manifest samples held in memory, with the fixed train/val split
    (validation = last ``val_fraction`` of the manifest order)."""

    def __init__(self, manifest: Manifest, val_fraction: float = 0.2):
        self.manifest = manifest
        self.volumes: list[Volume] = []
        self.labels: list[LabelMap] = []
        self.ids: list[str] = []
        for entry in manifest.samples:
            self.volumes.append(load_volume(manifest.root / entry.volume))
            self.labels.append(load_labels(manifest.root / entry.labels))
            self.ids.append(entry.sample_id)
        n = len(self.ids)
        n_val = int(round(n * val_fraction))
        if n_val >= n:
            n_val = n - 1
        self.train_indices = list(range(n - n_val))
        self.val_indices = list(range(n - n_val, n))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def small_organs(self) -> tuple[OrganSpec, ...]:
        return self.manifest.small_organs()

    def centroid(self, index: int, organ_id: int) -> Optional[tuple[float, ...]]:
        coords = np.argwhere(self.labels[index].data == organ_id)
        if coords.size == 0:
            return None
        return tuple(float(c) for c in coords.mean(axis=0))


def _epoch_rng(seed: int, stage: int, epoch: int, lane: int = 0):
    return np.random.default_rng((seed, stage, epoch, lane))


def _batches(indices: Sequence[int], batch_size: int):
    for i in range(0, len(indices), batch_size):
        yield list(indices[i : i + batch_size])


class TrainLogger:
    """Append-only JSONL: one record per epoch with loss components."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []

    def log(self, **record):
        self.records.append(record)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_train_log(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


# ---------------------------------------------------------------------------
# Stage 1: backbone
# ---------------------------------------------------------------------------

def _loss_alphas(cfg: TrainConfig, manifest: Manifest):
    if cfg.loss.alpha_mode == "inverse-size":
        return manifest.alphas()
    return None


def _check_data(cfg: TrainConfig, manifest: Manifest) -> None:
    expected = manifest.num_classes + 1
    if cfg.snet.num_classes != expected:
        raise ValueError(
            f"config num_classes {cfg.snet.num_classes} does not match "
            f"manifest classes + background = {expected}"
        )


def _volume_batch(bank: SampleBank, idx: list[int]) -> torch.Tensor:
    arrs = [bank.volumes[i].data for i in idx]
    return torch.from_numpy(np.stack(arrs)[:, None])


def train_stage1_snet(
    cfg: TrainConfig,
    data: Manifest,
    resume: Optional[Checkpoint] = None,
    logger: Optional[TrainLogger] = None,
    bank: Optional[SampleBank] = None,
) -> Checkpoint:
    """Train the backbone on all classes with the focal+dice objective."""
    _check_data(cfg, data)
    logger = logger or TrainLogger()
    bank = bank or SampleBank(data, cfg.val_fraction)
    alphas = _loss_alphas(cfg, data)

    model = build_snet(cfg.snet, seed=cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.stage1.lr)
    start_epoch = 0
    if resume is not None:
        if resume.stage != 1:
            raise StagingError(
                f"stage 1 can only resume a stage-1 checkpoint, got stage-{resume.stage}"
            )
        _check_topology(resume, cfg)
        model.load_state_dict(resume.snet_state)
        if resume.optimizer_state is not None:
            opt.load_state_dict(resume.optimizer_state)
        start_epoch = resume.epoch

    labels_t = [torch.from_numpy(lm.data.astype(np.int64)) for lm in bank.labels]

    def _loss_of(idx_list, train: bool):
        total, count = 0.0, 0
        for idx in _batches(idx_list, cfg.stage1.batch_size if train else 1):
            x = _volume_batch(bank, idx)
            if train:
                logits = model(x)[0]
            else:
                with torch.no_grad():
                    logits = model(x)[0]
            loss = sum(
                total_loss_from_logits(logits[j], labels_t[i], cfg.loss, alphas)
                for j, i in enumerate(idx)
            ) / len(idx)
            if train:
                opt.zero_grad()
                loss.backward()
                opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        return total / max(count, 1)

    for epoch in range(start_epoch, cfg.stage1.epochs):
        t0 = time.monotonic()
        order = list(bank.train_indices)
        _epoch_rng(cfg.seed, 1, epoch).shuffle(order)
        model.train()
        train_loss = _loss_of(order, train=True)
        model.eval()
        val_loss = _loss_of(bank.val_indices, train=False) if bank.val_indices else None
        logger.log(
            stage=1,
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            seconds=round(time.monotonic() - t0, 3),
        )

    return Checkpoint(
        stage=1,
        snet_state=model.state_dict(),
        config=_topology_echo(cfg, 1),
        optimizer_state=opt.state_dict(),
        epoch=cfg.stage1.epochs,
        finished=True,
    )


# ---------------------------------------------------------------------------
# Stage 2: localizer (backbone frozen)
# ---------------------------------------------------------------------------

def _frozen_snet(cfg: TrainConfig, ckpt: Checkpoint) -> SNet:
    model = build_snet(cfg.snet, seed=cfg.seed)
    model.load_state_dict(ckpt.snet_state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


class FeatureCache:
    """Per-sample stride-1 decoder features from a frozen backbone.

    Only the decoder grids are kept; at full scale they already occupy
    gigabytes, and the localizer consumes nothing else.
    """

    def __init__(self, snet: SNet, bank: SampleBank):
        self.decoder: list[torch.Tensor] = []
        for vol in bank.volumes:
            out = snet_forward(snet, vol)
            self.decoder.append(out.decoder_features.data)


def _target_heatmaps(cfg: TrainConfig, bank: SampleBank) -> list[np.ndarray]:
    return [
        make_target_heatmaps(lm, bank.small_organs, cfg.sol_sigma).data
        for lm in bank.labels
    ]


def train_stage2_sol(
    cfg: TrainConfig,
    ckpt1: Checkpoint,
    data: Manifest,
    resume: Optional[Checkpoint] = None,
    logger: Optional[TrainLogger] = None,
    bank: Optional[SampleBank] = None,
    features: Optional[FeatureCache] = None,
) -> Checkpoint:
    """Train the localizer on cached decoder features; backbone untouched."""
    _require_stage(ckpt1, 1, "stage 2")
    _check_topology(ckpt1, cfg)
    _check_data(cfg, data)
    logger = logger or TrainLogger()
    bank = bank or SampleBank(data, cfg.val_fraction)
    small = bank.small_organs
    if not small:
        raise ValueError("manifest declares no small organs; nothing to localize")

    snet = _frozen_snet(cfg, ckpt1)
    snet_hash_before = state_hash(snet.state_dict())
    features = features or FeatureCache(snet, bank)
    targets = [torch.from_numpy(t) for t in _target_heatmaps(cfg, bank)]

    sol = build_solnet(
        num_small=len(small),
        in_channels=snet.decoder_channels,
        seed=cfg.seed + 2,
        organ_ids=[o.id for o in small],
        width=cfg.sol_width,
    )
    opt = torch.optim.Adam(sol.parameters(), lr=cfg.stage2.lr)
    start_epoch = 0
    if resume is not None:
        if resume.stage != 2:
            raise StagingError(
                f"stage 2 can only resume a stage-2 checkpoint, got stage-{resume.stage}"
            )
        _check_topology(resume, cfg)
        sol.load_state_dict(resume.sol_state)
        if resume.optimizer_state is not None:
            opt.load_state_dict(resume.optimizer_state)
        start_epoch = resume.epoch

    def _loss_of(idx_list, train: bool):
        total, count = 0.0, 0
        for idx in _batches(idx_list, cfg.stage2.batch_size if train else 1):
            x = torch.stack([features.decoder[i] for i in idx])
            t = torch.stack([targets[i] for i in idx])
            if train:
                loss = heatmap_mse(sol(x), t)
                opt.zero_grad()
                loss.backward()
                opt.step()
            else:
                with torch.no_grad():
                    loss = heatmap_mse(sol(x), t)
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        return total / max(count, 1)

    for epoch in range(start_epoch, cfg.stage2.epochs):
        t0 = time.monotonic()
        order = list(bank.train_indices)
        _epoch_rng(cfg.seed, 2, epoch).shuffle(order)
        sol.train()
        train_loss = _loss_of(order, train=True)
        sol.eval()
        val_loss = _loss_of(bank.val_indices, train=False) if bank.val_indices else None
        logger.log(
            stage=2,
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            seconds=round(time.monotonic() - t0, 3),
        )

    assert state_hash(snet.state_dict()) == snet_hash_before
    return Checkpoint(
        stage=2,
        snet_state=ckpt1.snet_state,
        config=_topology_echo(cfg, 2),
        sol_state=sol.state_dict(),
        optimizer_state=opt.state_dict(),
        epoch=cfg.stage2.epochs,
        finished=True,
    )


# ---------------------------------------------------------------------------
# Stage 3: refinement heads (backbone and localizer frozen)
# ---------------------------------------------------------------------------

def sos_in_channels(snet: SNet) -> int:
    return snet.decoder_channels + 1 + snet.encoder_hr_channels + 1


class RoiCache:
    """Per-(sample, organ) enlarged input blocks for jittered ROI training.

    Each block is the assembled input stack cropped to the organ's ROI side
    plus a margin wide enough to cover any jittered center, so a training
    crop is a plain slice of the cached block.
    """

    def __init__(
        self,
        cfg: TrainConfig,
        bank: SampleBank,
        snet: SNet,
        sol: SOLNet,
        indices: Sequence[int],
    ):
        self.blocks: dict[tuple[int, int], torch.Tensor] = {}
        self.target_blocks: dict[tuple[int, int], torch.Tensor] = {}
        self.super_boxes: dict[tuple[int, int], object] = {}
        self.margins: dict[int, int] = {}
        small = bank.small_organs
        sol.eval()
        for i in indices:
            vol = bank.volumes[i]
            shape = vol.data.shape
            # recompute per sample so only the small blocks stay resident;
            # full-resolution grids for a whole cohort would not fit in RAM
            out = snet_forward(snet, vol)
            dec = out.decoder_features
            enc = out.encoder_hr_features
            with torch.no_grad():
                heat = sol(dec.data[None])[0].numpy()
            for ch, organ in enumerate(small):
                center = bank.centroid(i, organ.id)
                if center is None:
                    continue
                side = roi_side(organ, cfg.roi_factor)
                margin = int(np.ceil(cfg.jitter_fraction * side)) + 1
                self.margins[organ.id] = margin
                box = cube_box(center, side + 2 * margin, shape, organ.id)
                block = assemble_roi_input(box, dec, vol, enc, heat[ch])
                target = crop_with_padding(
                    (bank.labels[i].data == organ.id).astype(np.float32), box
                )
                key = (i, organ.id)
                self.blocks[key] = block
                self.target_blocks[key] = torch.from_numpy(target)
                self.super_boxes[key] = box

    def crop(self, key, center, side: int):
        """Slice the fixed-size training ROI centered near ``center`` out of
        the cached block; `center` is in volume coordinates."""
        box = self.super_boxes[key]
        block = self.blocks[key]
        target = self.target_blocks[key]
        origin = [s - pb for s, pb in zip(box.start, box.pad_before)]
        snapped = [int(np.floor(c + 0.5)) for c in center]
        rel = [c - side // 2 - o for c, o in zip(snapped, origin)]
        if any(r < 0 or r + side > box.size[k] for k, r in enumerate(rel)):
            raise ValueError("jittered box escapes the cached block")
        sl = tuple(slice(r, r + side) for r in rel)
        return block[(slice(None), *sl)], target[sl]


def train_stage3_sos(
    cfg: TrainConfig,
    ckpt2: Checkpoint,
    data: Manifest,
    resume: Optional[Checkpoint] = None,
    logger: Optional[TrainLogger] = None,
    bank: Optional[SampleBank] = None,
) -> Checkpoint:
    """Train one binary head per small organ on ground-truth-centered,
    jittered ROIs; backbone and localizer stay frozen."""
    _require_stage(ckpt2, 2, "stage 3")
    _check_topology(ckpt2, cfg)
    _check_data(cfg, data)
    logger = logger or TrainLogger()
    bank = bank or SampleBank(data, cfg.val_fraction)
    small = bank.small_organs

    snet = _frozen_snet(cfg, ckpt2)
    sol = build_solnet(
        num_small=len(small),
        in_channels=snet.decoder_channels,
        seed=cfg.seed + 2,
        organ_ids=[o.id for o in small],
        width=cfg.sol_width,
    )
    sol.load_state_dict(ckpt2.sol_state)
    sol.eval()
    for p in sol.parameters():
        p.requires_grad_(False)
    frozen_hashes = (state_hash(snet.state_dict()), state_hash(sol.state_dict()))

    in_ch = sos_in_channels(snet)
    heads = {
        organ.id: build_sosnet(
            organ, in_ch, width=cfg.sos_width, seed=cfg.seed + 30 + organ.id
        )
        for organ in small
    }
    params = [p for head in heads.values() for p in head.parameters()]
    opt = torch.optim.Adam(params, lr=cfg.stage3.lr)
    start_epoch = 0
    if resume is not None:
        if resume.stage != 3:
            raise StagingError(
                f"stage 3 can only resume a stage-3 checkpoint, got stage-{resume.stage}"
            )
        _check_topology(resume, cfg)
        for organ_id, state in resume.sos_states.items():
            heads[int(organ_id)].load_state_dict(state)
        if resume.optimizer_state is not None:
            opt.load_state_dict(resume.optimizer_state)
        start_epoch = resume.epoch

    cache = RoiCache(
        cfg, bank, snet, sol, list(bank.train_indices) + list(bank.val_indices)
    )

    def _roi_loss(i, organ, rng):
        key = (i, organ.id)
        if key not in cache.blocks:
            return None
        center = bank.centroid(i, organ.id)
        side = roi_side(organ, cfg.roi_factor)
        if rng is not None:
            center = jitter_center(
                center, side, rng, cfg.jitter_fraction, bank.volumes[i].data.shape
            )
        try:
            roi, target = cache.crop(key, center, side)
        except ValueError:
            # clamping near a border pushed the box outside the cached
            # block; fall back to the unjittered center
            roi, target = cache.crop(key, bank.centroid(i, organ.id), side)
        probs = heads[organ.id](roi[None])[0, 0]
        return binary_focal_dice_loss(probs, target, gamma=cfg.loss.gamma,
                                      epsilon=cfg.loss.dice_epsilon)

    for epoch in range(start_epoch, cfg.stage3.epochs):
        t0 = time.monotonic()
        order = list(bank.train_indices)
        rng = _epoch_rng(cfg.seed, 3, epoch)
        rng.shuffle(order)
        for head in heads.values():
            head.train()
        total, count = 0.0, 0
        for i in order:
            losses = [
                loss
                for organ in small
                if (loss := _roi_loss(i, organ, rng)) is not None
            ]
            if not losses:
                continue
            loss = sum(losses) / len(losses)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            count += 1
        train_loss = total / max(count, 1)
        for head in heads.values():
            head.eval()
        vtotal, vcount = 0.0, 0
        with torch.no_grad():
            for i in bank.val_indices:
                losses = [
                    loss
                    for organ in small
                    if (loss := _roi_loss(i, organ, None)) is not None
                ]
                if losses:
                    vtotal += float(sum(losses) / len(losses))
                    vcount += 1
        val_loss = vtotal / vcount if vcount else None
        logger.log(
            stage=3,
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            seconds=round(time.monotonic() - t0, 3),
        )

    assert (state_hash(snet.state_dict()), state_hash(sol.state_dict())) == frozen_hashes
    return Checkpoint(
        stage=3,
        snet_state=ckpt2.snet_state,
        config=_topology_echo(cfg, 3),
        sol_state=ckpt2.sol_state,
        sos_states={organ.id: heads[organ.id].state_dict() for organ in small},
        optimizer_state=opt.state_dict(),
        epoch=cfg.stage3.epochs,
        finished=True,
    )


# ---------------------------------------------------------------------------
# Stage 4: joint finetune
# ---------------------------------------------------------------------------

def train_stage4_finetune(
    cfg: TrainConfig,
    ckpt3: Checkpoint,
    data: Manifest,
    resume: Optional[Checkpoint] = None,
    logger: Optional[TrainLogger] = None,
    bank: Optional[SampleBank] = None,
) -> Checkpoint:
    """Unfreeze everything and optimize the sum of the three stage losses,
    with ROIs taken from predicted heatmap peaks (the inference path)."""
    _require_stage(ckpt3, 3, "stage 4")
    _check_topology(ckpt3, cfg)
    _check_data(cfg, data)
    logger = logger or TrainLogger()
    bank = bank or SampleBank(data, cfg.val_fraction)
    small = bank.small_organs
    alphas = _loss_alphas(cfg, data)

    snet = build_snet(cfg.snet, seed=cfg.seed)
    snet.load_state_dict(ckpt3.snet_state)
    sol = build_solnet(
        num_small=len(small),
        in_channels=snet.decoder_channels,
        seed=cfg.seed + 2,
        organ_ids=[o.id for o in small],
        width=cfg.sol_width,
    )
    sol.load_state_dict(ckpt3.sol_state)
    in_ch = sos_in_channels(snet)
    heads = {
        organ.id: build_sosnet(
            organ, in_ch, width=cfg.sos_width, seed=cfg.seed + 30 + organ.id
        )
        for organ in small
    }
    for organ_id, state in ckpt3.sos_states.items():
        heads[int(organ_id)].load_state_dict(state)

    params = (
        list(snet.parameters())
        + list(sol.parameters())
        + [p for head in heads.values() for p in head.parameters()]
    )
    opt = torch.optim.Adam(params, lr=cfg.stage4.lr)
    start_epoch = 0
    if resume is not None:
        if resume.stage != 4:
            raise StagingError(
                f"stage 4 can only resume a stage-4 checkpoint, got stage-{resume.stage}"
            )
        _check_topology(resume, cfg)
        snet.load_state_dict(resume.snet_state)
        sol.load_state_dict(resume.sol_state)
        for organ_id, state in resume.sos_states.items():
            heads[int(organ_id)].load_state_dict(state)
        if resume.optimizer_state is not None:
            opt.load_state_dict(resume.optimizer_state)
        start_epoch = resume.epoch

    labels_t = [torch.from_numpy(lm.data.astype(np.int64)) for lm in bank.labels]
    heat_targets = [torch.from_numpy(t) for t in _target_heatmaps(cfg, bank)]

    def _joint_loss(i):
        vol = bank.volumes[i]
        x = torch.from_numpy(vol.data)[None, None]
        logits_b, dec_b, hr_b = snet(x)
        loss_seg = total_loss_from_logits(logits_b[0], labels_t[i], cfg.loss, alphas)
        heat_pred = sol(dec_b)[0]
        loss_heat = heatmap_mse(heat_pred, heat_targets[i])
        parts = {"seg": float(loss_seg.detach()), "heat": float(loss_heat.detach())}
        loss = loss_seg + loss_heat
        sos_total = 0.0
        shape = vol.data.shape
        for ch, organ in enumerate(small):
            peak = locate_peak(heat_pred[ch].detach(), cfg.presence_threshold)
            if peak is None:
                continue
            if not np.any(bank.labels[i].data == organ.id):
                continue  # absent organ contributes no refinement loss
            box = roi_box(peak, organ, cfg.roi_factor, volume_shape=shape)
            # The heat input enters as a constant, matching how the heads
            # were trained against a frozen localizer. Refinement gradients
            # through this channel dwarf the heatmap regression term and
            # flatten the peaks within an epoch if left attached.
            roi = assemble_roi_input(
                box,
                FeatureVolume(dec_b[0], stride=1),
                vol,
                FeatureVolume(hr_b[0], stride=1),
                heat_pred[ch].detach(),
            )
            target = crop_with_padding(
                (bank.labels[i].data == organ.id).astype(np.float32), box
            )
            probs = heads[organ.id](roi[None])[0, 0]
            part = binary_focal_dice_loss(
                probs, torch.from_numpy(target),
                gamma=cfg.loss.gamma, epsilon=cfg.loss.dice_epsilon,
            )
            loss = loss + part
            sos_total += float(part.detach())
        parts["sos"] = sos_total
        return loss, parts

    def _set_mode(train: bool):
        for m in [snet, sol, *heads.values()]:
            m.train(train)

    for epoch in range(start_epoch, cfg.stage4.epochs):
        t0 = time.monotonic()
        order = list(bank.train_indices)
        _epoch_rng(cfg.seed, 4, epoch).shuffle(order)
        _set_mode(True)
        total, comp = 0.0, {"seg": 0.0, "heat": 0.0, "sos": 0.0}
        for i in order:
            loss, parts = _joint_loss(i)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            for k in comp:
                comp[k] += parts[k]
        n = max(len(order), 1)
        _set_mode(False)
        vtotal = 0.0
        with torch.no_grad():
            for i in bank.val_indices:
                vtotal += float(_joint_loss(i)[0])
        val_loss = vtotal / len(bank.val_indices) if bank.val_indices else None
        logger.log(
            stage=4,
            epoch=epoch,
            train_loss=total / n,
            val_loss=val_loss,
            seg_loss=comp["seg"] / n,
            heat_loss=comp["heat"] / n,
            sos_loss=comp["sos"] / n,
            seconds=round(time.monotonic() - t0, 3),
        )

    return Checkpoint(
        stage=4,
        snet_state=snet.state_dict(),
        config=_topology_echo(cfg, 4),
        sol_state=sol.state_dict(),
        sos_states={organ.id: heads[organ.id].state_dict() for organ in small},
        optimizer_state=opt.state_dict(),
        epoch=cfg.stage4.epochs,
        finished=True,
    )


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

STAGE_FUNCTIONS = {
    1: train_stage1_snet,
    2: train_stage2_sol,
    3: train_stage3_sos,
    4: train_stage4_finetune,
}


def checkpoint_path(ckpt_dir, stage: int) -> Path:
    return Path(ckpt_dir) / f"stage{stage}.pt"


def run_stages(
    cfg: TrainConfig,
    data: Manifest,
    ckpt_dir,
    stages: Sequence[int] = (1, 2, 3, 4),
    logger: Optional[TrainLogger] = None,
    resume: Optional[Checkpoint] = None,
) -> dict[int, Checkpoint]:
    """Run the requested stages in order, loading prerequisites from
    ``ckpt_dir`` when a run starts past stage 1.  Returns the new
    checkpoints, which are also written to ``ckpt_dir``."""
    stages = sorted(set(stages))
    if any(s not in STAGE_FUNCTIONS for s in stages):
        raise ValueError(f"stages must be drawn from 1..4, got {stages}")
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    logger = logger or TrainLogger(ckpt_dir / "train_log.jsonl")
    bank = SampleBank(data, cfg.val_fraction)
    produced: dict[int, Checkpoint] = {}

    def _prev(stage: int) -> Checkpoint:
        if stage - 1 in produced:
            return produced[stage - 1]
        path = checkpoint_path(ckpt_dir, stage - 1)
        if not path.exists():
            raise StagingError(
                f"stage {stage} requires the stage-{stage - 1} checkpoint "
                f"({path}); run stage {stage - 1} first"
            )
        return load_checkpoint(path)

    for stage in stages:
        stage_resume = resume if resume is not None and resume.stage == stage else None
        if stage == 1:
            ckpt = train_stage1_snet(cfg, data, stage_resume, logger, bank)
        elif stage == 2:
            prev = _prev(2)
            features = FeatureCache(_frozen_snet(cfg, prev), bank)
            ckpt = train_stage2_sol(
                cfg, prev, data, stage_resume, logger, bank, features
            )
            del features
        elif stage == 3:
            ckpt = train_stage3_sos(cfg, _prev(3), data, stage_resume, logger, bank)
        else:
            ckpt = train_stage4_finetune(cfg, _prev(4), data, stage_resume, logger, bank)
        save_checkpoint(ckpt, checkpoint_path(ckpt_dir, stage))
        produced[stage] = ckpt
    return produced


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    """Everything needed to turn a raw volume into a fused label map."""

    snet: SNet
    sol: Optional[SOLNet]
    sos: dict[int, SOSHead]
    small_organs: tuple[OrganSpec, ...]
    roi_factor: float = DEFAULT_ROI_FACTOR
    presence_threshold: float = DEFAULT_PRESENCE_THRESHOLD
    fusion_threshold: float = 0.5

    @property
    def full_pipeline(self) -> bool:
        return self.sol is not None and bool(self.sos)


def bundle_from_checkpoint(
    ckpt: Checkpoint, cfg: TrainConfig, manifest: Manifest
) -> ModelBundle:
    """Rebuild eval-mode models from a checkpoint of any stage.

    Stage-1 checkpoints yield a backbone-only bundle (plain argmax
    predictions); stage-3 and later yield the full pipeline.
    """
    _check_topology(ckpt, cfg)
    small = manifest.small_organs()
    snet = build_snet(cfg.snet, seed=0)
    snet.load_state_dict(ckpt.snet_state)
    snet.eval()
    sol = None
    if ckpt.sol_state is not None:
        sol = build_solnet(
            num_small=len(small),
            in_channels=snet.decoder_channels,
            organ_ids=[o.id for o in small],
            width=cfg.sol_width,
        )
        sol.load_state_dict(ckpt.sol_state)
        sol.eval()
    heads: dict[int, SOSHead] = {}
    in_ch = sos_in_channels(snet)
    for organ_id, state in ckpt.sos_states.items():
        head = build_sosnet(int(organ_id), in_ch, width=cfg.sos_width)
        head.load_state_dict(state)
        head.eval()
        heads[int(organ_id)] = head
    return ModelBundle(
        snet=snet,
        sol=sol,
        sos=heads,
        small_organs=small,
        roi_factor=cfg.roi_factor,
        presence_threshold=cfg.presence_threshold,
        fusion_threshold=cfg.fusion_threshold,
    )


def predict_labelmap(bundle: ModelBundle, volume: Volume) -> LabelMap:
    """Backbone argmax, refined by the localize-then-segment path when the
    bundle carries the branch models."""
    out = snet_forward(bundle.snet, volume)
    num_classes = out.logits.shape[0] - 1
    if not bundle.full_pipeline:
        labels = out.logits.numpy().argmax(axis=0).astype(np.uint16)
        return LabelMap(labels, num_classes=num_classes, spacing=volume.spacing)
    heat = sol_forward(bundle.sol, out.decoder_features)
    results = []
    for organ in bundle.small_organs:
        if organ.id not in bundle.sos:
            continue
        peak = locate_peak(heat.channel(organ.id), bundle.presence_threshold)
        if peak is None:
            continue
        box = roi_box(
            peak, organ, bundle.roi_factor, volume_shape=volume.data.shape
        )
        roi = assemble_roi_input(
            box,
            out.decoder_features,
            volume,
            out.encoder_hr_features,
            heat.channel(organ.id),
        )
        probs = sos_forward(bundle.sos[organ.id], roi)
        results.append((box, probs))
    return fuse_predictions(
        out.logits,
        results,
        bundle.fusion_threshold,
        spacing=volume.spacing,
        small_organ_ids=[o.id for o in bundle.small_organs],
    )


def evaluate_manifest(
    bundle: ModelBundle,
    manifest: Manifest,
    sample_ids: Optional[Sequence[str]] = None,
) -> tuple[list[str], list[list[OrganReport]], list[OrganAggregate]]:
    """Predict every requested sample and score it against ground truth."""
    wanted = set(sample_ids) if sample_ids is not None else None
    case_ids: list[str] = []
    case_reports: list[list[OrganReport]] = []
    for entry in manifest.samples:
        if wanted is not None and entry.sample_id not in wanted:
            continue
        vol = load_volume(manifest.root / entry.volume)
        gt = load_labels(manifest.root / entry.labels)
        pred = predict_labelmap(bundle, vol)
        case_ids.append(entry.sample_id)
        case_reports.append(evaluate_case(pred, gt, manifest.organs))
    return case_ids, case_reports, aggregate(case_reports)
