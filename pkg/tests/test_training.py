"""Staged training: checkpoints, freeze contracts, resume, inference."""

import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from focusnet.phantom import OrganDef, PhantomSpec, generate_dataset
from focusnet.snet import FeatureVolume, SNetConfig, build_snet, snet_forward
from focusnet.sol import build_solnet
from focusnet.sos import (
    assemble_roi_input,
    crop_with_padding,
    cube_box,
    jitter_center,
    roi_side,
)
from focusnet.training import (
    Checkpoint,
    FeatureCache,
    RoiCache,
    SampleBank,
    StageSchedule,
    StagingError,
    TrainConfig,
    TrainLogger,
    bundle_from_checkpoint,
    evaluate_manifest,
    load_checkpoint,
    predict_labelmap,
    read_train_log,
    run_stages,
    save_checkpoint,
    state_hash,
    train_stage1_snet,
    train_stage2_sol,
    train_stage3_sos,
    train_stage4_finetune,
)

SHAPE = (32, 32, 32)


def tiny_spec():
    return PhantomSpec(
        volume_shape=SHAPE,
        organs=(
            OrganDef(1, 0.02, "ellipsoid", 0.6, 0.3),
            OrganDef(2, 0.002, "ellipsoid", 0.35, 0.3),
            OrganDef(3, 0.0012, "ellipsoid", 0.8, 0.3),
        ),
        seed=11,
    )


def tiny_cfg():
    return TrainConfig(
        snet=SNetConfig(
            num_classes=4,
            base_width=4,
            num_downsamples=1,
            blocks_per_stage=1,
            aspp_rates=(2,),
            se_reduction=2,
        ),
        stage1=StageSchedule(2, 1e-3),
        stage2=StageSchedule(2, 1e-3),
        stage3=StageSchedule(2, 1e-3),
        stage4=StageSchedule(2, 1e-4),
        sos_width=8,
        presence_threshold=0.0,  # every organ gets a peak even when untrained
        seed=7,
    )


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    return tmp_path_factory.mktemp("train")


@pytest.fixture(scope="module")
def manifest(workspace):
    # threshold 300 makes organ 1 (~650 voxels) large, organs 2 and 3 small
    return generate_dataset(tiny_spec(), 5, workspace / "data", small_threshold=300.0)


@pytest.fixture(scope="module")
def cfg():
    return tiny_cfg()


@pytest.fixture(scope="module")
def pipeline(cfg, manifest, workspace):
    return run_stages(cfg, manifest, workspace / "ckpts")


def test_manifest_small_census(manifest):
    assert [o.id for o in manifest.small_organs()] == [2, 3]


def test_schedule_validation():
    with pytest.raises(ValueError):
        StageSchedule(epochs=0)
    with pytest.raises(ValueError):
        StageSchedule(epochs=1, lr=-1.0)
    with pytest.raises(ValueError):
        StageSchedule(epochs=1, batch_size=0)


def test_config_validation():
    snet = SNetConfig(num_classes=4)
    with pytest.raises(ValueError):
        TrainConfig(snet=snet, val_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(snet=snet, roi_factor=0.0)


def test_class_count_mismatch_rejected(cfg, manifest):
    bad = replace(cfg, snet=replace(cfg.snet, num_classes=3))
    with pytest.raises(ValueError, match="does not match"):
        train_stage1_snet(bad, manifest)


def test_sample_bank_split(manifest):
    bank = SampleBank(manifest, val_fraction=0.2)
    assert bank.train_indices == [0, 1, 2, 3]
    assert bank.val_indices == [4]
    assert len(bank) == 5


def test_pipeline_produces_all_stages(pipeline):
    assert sorted(pipeline) == [1, 2, 3, 4]
    for stage, ckpt in pipeline.items():
        assert ckpt.stage == stage
        assert ckpt.finished
        assert ckpt.epoch == 2


def test_stage_files_written(workspace):
    for stage in (1, 2, 3, 4):
        assert (workspace / "ckpts" / f"stage{stage}.pt").exists()


def test_log_rows_cover_all_stages(pipeline, workspace):
    rows = read_train_log(workspace / "ckpts" / "train_log.jsonl")
    by_stage = {}
    for row in rows:
        by_stage.setdefault(row["stage"], []).append(row)
        assert {"stage", "epoch", "train_loss", "val_loss", "seconds"} <= set(row)
        assert np.isfinite(row["train_loss"])
    assert sorted(by_stage) == [1, 2, 3, 4]
    assert all(len(v) == 2 for v in by_stage.values())
    for row in by_stage[4]:
        assert {"seg_loss", "heat_loss", "sos_loss"} <= set(row)
        assert row["sos_loss"] > 0  # refinement path actually ran


def test_stage2_keeps_backbone_identical(pipeline):
    assert state_hash(pipeline[2].snet_state) == state_hash(pipeline[1].snet_state)
    assert pipeline[2].sol_state is not None


def test_stage3_keeps_backbone_and_localizer(pipeline, manifest):
    assert state_hash(pipeline[3].snet_state) == state_hash(pipeline[2].snet_state)
    assert state_hash(pipeline[3].sol_state) == state_hash(pipeline[2].sol_state)
    assert sorted(pipeline[3].sos_states) == [o.id for o in manifest.small_organs()]


def test_stage4_updates_every_group(pipeline):
    assert state_hash(pipeline[4].snet_state) != state_hash(pipeline[3].snet_state)
    assert state_hash(pipeline[4].sol_state) != state_hash(pipeline[3].sol_state)
    for organ_id, state in pipeline[4].sos_states.items():
        assert state_hash(state) != state_hash(pipeline[3].sos_states[organ_id])


def test_staging_rejects_wrong_stage(cfg, manifest, pipeline):
    with pytest.raises(StagingError, match="stage-2"):
        train_stage3_sos(cfg, pipeline[1], manifest)
    with pytest.raises(StagingError, match="stage-1"):
        train_stage2_sol(cfg, pipeline[3], manifest)
    with pytest.raises(StagingError, match="stage-3"):
        train_stage4_finetune(cfg, pipeline[2], manifest)


def test_staging_rejects_unfinished(cfg, manifest, pipeline):
    partial = Checkpoint(
        stage=1,
        snet_state=pipeline[1].snet_state,
        config=pipeline[1].config,
        epoch=1,
        finished=False,
    )
    with pytest.raises(StagingError, match="unfinished"):
        train_stage2_sol(cfg, partial, manifest)


def test_topology_mismatch_rejected(cfg, manifest, pipeline):
    wider = replace(cfg, snet=replace(cfg.snet, base_width=8))
    with pytest.raises(ValueError, match="topology"):
        train_stage2_sol(wider, pipeline[1], manifest)
    other_heads = replace(cfg, sos_width=cfg.sos_width + 4)
    with pytest.raises(ValueError, match="topology"):
        train_stage4_finetune(other_heads, pipeline[3], manifest)


def test_stage2_checkpoint_reusable_across_roi_factors(cfg, manifest, pipeline):
    # the localizer does not depend on the ROI scale, so an ablation can
    # branch stage 3 off one stage-2 checkpoint at several factors
    narrow = replace(cfg, roi_factor=2.0, stage3=StageSchedule(1, 1e-3))
    ckpt = train_stage3_sos(narrow, pipeline[2], manifest)
    assert ckpt.stage == 3
    assert ckpt.config["roi_factor"] == 2.0


def test_run_stages_requires_prerequisite(cfg, manifest, tmp_path):
    with pytest.raises(StagingError, match="stage 2 first"):
        run_stages(cfg, manifest, tmp_path / "empty", stages=(3,))


def test_run_stages_rejects_unknown_stage(cfg, manifest, tmp_path):
    with pytest.raises(ValueError, match="1..4"):
        run_stages(cfg, manifest, tmp_path, stages=(5,))


def test_checkpoint_roundtrip_bytes(pipeline, tmp_path):
    p1, p2 = tmp_path / "a.pt", tmp_path / "b.pt"
    save_checkpoint(pipeline[3], p1)
    reloaded = load_checkpoint(p1)
    save_checkpoint(reloaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_roundtrip_fields(pipeline, tmp_path):
    path = tmp_path / "c.pt"
    save_checkpoint(pipeline[4], path)
    back = load_checkpoint(path)
    assert back.stage == 4
    assert back.finished
    assert sorted(back.sos_states) == sorted(pipeline[4].sos_states)
    assert state_hash(back.snet_state) == state_hash(pipeline[4].snet_state)


def test_load_checkpoint_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.pt")


def test_state_hash_order_insensitive(pipeline):
    state = pipeline[1].snet_state
    shuffled = dict(reversed(list(state.items())))
    assert state_hash(state) == state_hash(shuffled)


def test_state_hash_detects_change(pipeline):
    state = {k: v.clone() for k, v in pipeline[1].snet_state.items()}
    key = next(iter(state))
    state[key] = state[key] + 1e-3
    assert state_hash(state) != state_hash(pipeline[1].snet_state)


def test_stage1_same_seed_bitwise(cfg, manifest):
    quick = replace(cfg, stage1=StageSchedule(1, 1e-3))
    a = train_stage1_snet(quick, manifest)
    b = train_stage1_snet(quick, manifest)
    assert state_hash(a.snet_state) == state_hash(b.snet_state)


def test_stage1_resume_matches_straight_run(cfg, manifest):
    two = replace(cfg, stage1=StageSchedule(2, 1e-3))
    one = replace(cfg, stage1=StageSchedule(1, 1e-3))
    straight = train_stage1_snet(two, manifest)
    first = train_stage1_snet(one, manifest)
    resumed = train_stage1_snet(two, manifest, resume=first)
    assert state_hash(resumed.snet_state) == state_hash(straight.snet_state)


def test_roi_cache_crop_matches_direct_assembly(cfg, manifest, pipeline):
    bank = SampleBank(manifest, cfg.val_fraction)
    snet = build_snet(cfg.snet, seed=cfg.seed)
    snet.load_state_dict(pipeline[2].snet_state)
    snet.eval()
    features = FeatureCache(snet, bank)
    small = bank.small_organs
    sol = build_solnet(
        num_small=len(small),
        in_channels=snet.decoder_channels,
        seed=cfg.seed + 2,
        organ_ids=[o.id for o in small],
        width=cfg.sol_width,
    )
    sol.load_state_dict(pipeline[2].sol_state)
    cache = RoiCache(cfg, bank, snet, sol, [0])

    feats = snet_forward(snet, bank.volumes[0])
    with torch.no_grad():
        heat = sol(features.decoder[0][None])[0].numpy()
    rng = np.random.default_rng(99)
    for ch, organ in enumerate(small):
        side = roi_side(organ, cfg.roi_factor)
        center = jitter_center(
            bank.centroid(0, organ.id), side, rng, cfg.jitter_fraction, SHAPE
        )
        roi, target = cache.crop((0, organ.id), center, side)
        box = cube_box(center, side, SHAPE, organ.id)
        direct = assemble_roi_input(
            box,
            feats.decoder_features,
            bank.volumes[0],
            feats.encoder_hr_features,
            heat[ch],
        )
        assert torch.equal(roi, direct)
        direct_target = crop_with_padding(
            (bank.labels[0].data == organ.id).astype(np.float32), box
        )
        assert np.array_equal(target.numpy(), direct_target)


def test_backbone_bundle_is_plain_argmax(cfg, manifest, pipeline):
    bundle = bundle_from_checkpoint(pipeline[1], cfg, manifest)
    assert not bundle.full_pipeline
    bank = SampleBank(manifest, cfg.val_fraction)
    pred = predict_labelmap(bundle, bank.volumes[0])
    out = snet_forward(bundle.snet, bank.volumes[0])
    assert np.array_equal(pred.data, out.logits.numpy().argmax(axis=0))
    assert pred.num_classes == manifest.num_classes


def test_full_bundle_prediction(cfg, manifest, pipeline):
    bundle = bundle_from_checkpoint(pipeline[4], cfg, manifest)
    assert bundle.full_pipeline
    bank = SampleBank(manifest, cfg.val_fraction)
    pred1 = predict_labelmap(bundle, bank.volumes[0])
    pred2 = predict_labelmap(bundle, bank.volumes[0])
    assert pred1.data.shape == SHAPE
    assert pred1.num_classes == manifest.num_classes
    assert np.array_equal(pred1.data, pred2.data)


def test_evaluate_manifest_filters_samples(cfg, manifest, pipeline):
    bundle = bundle_from_checkpoint(pipeline[1], cfg, manifest)
    wanted = [s.sample_id for s in manifest.samples[:2]]
    ids, reports, aggs = evaluate_manifest(bundle, manifest, wanted)
    assert ids == wanted
    assert all(len(case) == len(manifest.organs) for case in reports)
    assert [a.organ_id for a in aggs] == [1, 2, 3]
    assert all(a.n_cases == 2 for a in aggs)


def test_logger_writes_parseable_jsonl(tmp_path):
    path = tmp_path / "log.jsonl"
    logger = TrainLogger(path)
    logger.log(stage=1, epoch=0, train_loss=0.5, val_loss=None, seconds=1.0)
    logger.log(stage=1, epoch=1, train_loss=0.4, val_loss=0.6, seconds=1.1)
    rows = read_train_log(path)
    assert rows == logger.records
    with open(path) as fh:
        first = json.loads(fh.readline())
    assert first["val_loss"] is None
