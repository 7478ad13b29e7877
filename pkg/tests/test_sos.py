import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from focusnet.snet import FeatureVolume
from focusnet.sos import (
    RoiBox,
    SOSHead,
    assemble_roi_input,
    build_sosnet,
    crop_with_padding,
    fuse_predictions,
    jitter_center,
    roi_box,
    roi_side,
    sos_forward,
)
from focusnet.voldata import LabelMap, OrganSpec, Volume, one_hot


def organ(cls=4, diameter=10.0):
    return OrganSpec(
        id=cls,
        name=f"o{cls}",
        is_small=True,
        mean_voxel_count=4.0 / 3.0 * math.pi * (diameter / 2) ** 3,
        mean_diameter=diameter,
        alpha=1.0,
    )


class TestRoiGeometry:
    def test_side_is_three_diameters_by_default(self):
        assert roi_side(organ(diameter=10.0)) == 30

    @pytest.mark.parametrize("factor,side", [(2.0, 20), (3.0, 30), (5.0, 50)])
    def test_ablation_factors(self, factor, side):
        assert roi_side(organ(diameter=10.0), factor) == side

    def test_minimum_side(self):
        assert roi_side(organ(diameter=1.0)) == 8

    def test_odd_sides_round_up_to_even(self):
        assert roi_side(organ(diameter=3.1), factor=3.0) == 10
        assert roi_side(organ(diameter=4.4), factor=3.0) == 14

    def test_clamped_corner_box(self):
        box = roi_box((2, 2, 2), organ(diameter=2.5), volume_shape=(64, 64, 64))
        assert box.size == (8, 8, 8)
        assert box.start == (0, 0, 0)
        assert box.pad_before == (2, 2, 2)
        assert box.pad_after == (0, 0, 0)

    def test_interior_box_has_no_padding(self):
        box = roi_box((32, 32, 32), organ(diameter=10.0), volume_shape=(64, 64, 64))
        assert box.start == (17, 17, 17)
        assert box.pad_before == (0, 0, 0)
        assert box.pad_after == (0, 0, 0)

    def test_far_corner_pads_after(self):
        box = roi_box((63, 63, 63), organ(diameter=2.0), volume_shape=(64, 64, 64))
        assert box.pad_after == (3, 3, 3)
        assert box.start == (59, 59, 59)

    def test_center_outside_volume_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            roi_box((70, 2, 2), organ(), volume_shape=(64, 64, 64))

    def test_fractional_center_snaps(self):
        a = roi_box((10.6, 10.4, 10.5), organ(diameter=2.0), volume_shape=(64,) * 3)
        b = roi_box((11, 10, 11), organ(diameter=2.0), volume_shape=(64,) * 3)
        assert a == b

    @settings(max_examples=40, deadline=None)
    @given(
        cz=st.integers(0, 47),
        cy=st.integers(0, 47),
        cx=st.integers(0, 47),
    )
    def test_size_never_depends_on_center(self, cz, cy, cx):
        box = roi_box((cz, cy, cx), organ(diameter=7.3), volume_shape=(48, 48, 48))
        assert box.size == (22, 22, 22)
        lo = [s - pb for s, pb in zip(box.start, box.pad_before)]
        assert all(l + n - pa <= 48 + pa for l, n, pa in zip(lo, box.size, box.pad_after))
        vs = box.volume_slices
        rs = box.roi_slices
        for a, b in zip(vs, rs):
            assert a.stop - a.start == b.stop - b.start


class TestCropWithPadding:
    def test_interior_crop_equals_direct_slice(self, rng):
        src = rng.normal(size=(20, 20, 20))
        box = roi_box((10, 10, 10), organ(diameter=2.0), volume_shape=(20, 20, 20))
        out = crop_with_padding(src, box)
        assert np.array_equal(out, src[6:14, 6:14, 6:14])

    def test_boundary_crop_zero_pads(self, rng):
        src = rng.normal(size=(20, 20, 20))
        box = roi_box((0, 10, 19), organ(diameter=2.0), volume_shape=(20, 20, 20))
        out = crop_with_padding(src, box)
        assert out.shape == (8, 8, 8)
        assert np.all(out[:4] == 0)  # pad_before z = 4
        assert np.all(out[:, :, 5:] == 0)  # pad_after x = 3
        assert np.array_equal(out[4:, :, :5], src[0:4, 6:14, 15:20])

    def test_channel_axis_is_preserved(self, rng):
        src = rng.normal(size=(3, 16, 16, 16))
        box = roi_box((8, 8, 8), organ(diameter=2.0), volume_shape=(16, 16, 16))
        out = crop_with_padding(src, box)
        assert out.shape == (3, 8, 8, 8)
        for c in range(3):
            assert np.array_equal(out[c], crop_with_padding(src[c], box))

    def test_torch_and_numpy_backends_agree(self, rng):
        src = rng.normal(size=(2, 12, 12, 12)).astype(np.float32)
        box = roi_box((1, 6, 11), organ(diameter=2.0), volume_shape=(12, 12, 12))
        out_np = crop_with_padding(src, box)
        out_t = crop_with_padding(torch.from_numpy(src), box)
        assert np.array_equal(out_np, out_t.numpy())

    def test_gradients_flow_through_interior(self):
        src = torch.randn(10, 10, 10, requires_grad=True)
        box = roi_box((0, 5, 5), organ(diameter=2.0), volume_shape=(10, 10, 10))
        crop_with_padding(src, box).sum().backward()
        vs = box.volume_slices
        expected = torch.zeros(10, 10, 10)
        expected[vs] = 1.0
        assert torch.equal(src.grad, expected)

    def test_box_larger_than_source_rejected(self):
        box = RoiBox(1, start=(0, 0, 0), size=(8, 8, 8),
                     pad_before=(0, 0, 0), pad_after=(0, 0, 0))
        with pytest.raises(ValueError, match="exceeds"):
            crop_with_padding(np.zeros((4, 4, 4)), box)


class TestAssembleRoiInput:
    def setup_method(self):
        g = np.random.default_rng(5)
        self.dec = FeatureVolume(torch.from_numpy(
            g.normal(size=(5, 16, 16, 16)).astype(np.float32)), stride=1)
        self.enc = FeatureVolume(torch.from_numpy(
            g.normal(size=(3, 16, 16, 16)).astype(np.float32)), stride=1)
        self.raw = Volume(g.normal(size=(16, 16, 16)).astype(np.float32))
        self.heat = g.random((16, 16, 16)).astype(np.float32)

    def test_channel_count_and_order(self):
        box = roi_box((8, 8, 8), organ(diameter=2.0), volume_shape=(16, 16, 16))
        out = assemble_roi_input(box, self.dec, self.raw, self.enc, self.heat)
        assert out.shape == (5 + 1 + 3 + 1, 8, 8, 8)
        vs = box.volume_slices
        assert torch.allclose(out[:5], self.dec.data[(slice(None), *vs)])
        assert torch.allclose(out[5], torch.from_numpy(self.raw.data[vs]))
        assert torch.allclose(out[6:9], self.enc.data[(slice(None), *vs)])
        assert torch.allclose(out[9], torch.from_numpy(self.heat[vs]))

    def test_boundary_assembly_pads_with_zeros(self):
        box = roi_box((0, 0, 0), organ(diameter=2.0), volume_shape=(16, 16, 16))
        out = assemble_roi_input(box, self.dec, self.raw, self.enc, self.heat)
        assert torch.all(out[:, :4] == 0)

    def test_geometry_mismatch_rejected(self):
        box = roi_box((8, 8, 8), organ(diameter=2.0), volume_shape=(16, 16, 16))
        small_raw = Volume(np.zeros((8, 8, 8), dtype=np.float32))
        with pytest.raises(ValueError, match="geometry"):
            assemble_roi_input(box, self.dec, small_raw, self.enc, self.heat)

    def test_strided_features_rejected(self):
        box = roi_box((8, 8, 8), organ(diameter=2.0), volume_shape=(16, 16, 16))
        strided = FeatureVolume(self.dec.data[:, ::2, ::2, ::2], stride=2)
        with pytest.raises(ValueError, match="stride"):
            assemble_roi_input(box, strided, self.raw, self.enc, self.heat)


class TestSOSHead:
    def test_shape_and_range(self):
        head = build_sosnet(organ(), in_channels=10, width=6, seed=0)
        out = head(torch.randn(2, 10, 8, 8, 8))
        assert out.shape == (2, 1, 8, 8, 8)
        assert torch.all(out > 0) and torch.all(out < 1)

    def test_distinct_organs_distinct_parameters(self):
        a = build_sosnet(4, in_channels=6, width=4, seed=0)
        b = build_sosnet(5, in_channels=6, width=4, seed=1)
        assert a.organ_id == 4 and b.organ_id == 5
        assert any(
            not torch.equal(pa, pb)
            for pa, pb in zip(a.parameters(), b.parameters())
        )

    def test_channel_mismatch_rejected(self):
        head = build_sosnet(4, in_channels=10, width=4, seed=0)
        with pytest.raises(ValueError, match="channels"):
            head(torch.randn(1, 7, 8, 8, 8))

    def test_sos_forward_deterministic(self):
        head = build_sosnet(4, in_channels=3, width=4, seed=2)
        roi = torch.randn(3, 8, 8, 8)
        assert torch.equal(sos_forward(head, roi), sos_forward(head, roi))


def logits_from_labels(arr, num_classes):
    lm = LabelMap(arr, num_classes=num_classes)
    return np.where(one_hot(lm).data > 0.5, 10.0, -10.0)


class TestFusion:
    def test_high_probability_overwrites_background(self):
        logits = logits_from_labels(np.zeros((12, 12, 12), dtype=np.uint16), 4)
        box = roi_box((6, 6, 6), organ(cls=3, diameter=2.0), volume_shape=(12,) * 3)
        probs = np.zeros((8, 8, 8))
        probs[4, 4, 4] = 0.9  # volume voxel (6, 6, 6)
        fused = fuse_predictions(logits, [(box, probs)])
        assert fused.data[6, 6, 6] == 3
        assert (fused.data != 0).sum() == 1

    def test_no_claims_keeps_argmax_inside_roi(self):
        arr = np.zeros((12, 12, 12), dtype=np.uint16)
        arr[5, 5, 5] = 2  # large organ inside the box keeps its label
        logits = logits_from_labels(arr, 4)
        box = roi_box((6, 6, 6), organ(cls=3, diameter=2.0), volume_shape=(12,) * 3)
        fused = fuse_predictions(logits, [(box, np.zeros((8, 8, 8)))])
        assert fused.data[5, 5, 5] == 2

    def test_small_labels_outside_roi_are_cleared(self):
        arr = np.zeros((12, 12, 12), dtype=np.uint16)
        arr[0, 0, 0] = 3  # far from the ROI at (6,6,6)
        arr[6, 6, 7] = 3  # inside the ROI: survives without a claim
        logits = logits_from_labels(arr, 4)
        box = roi_box((6, 6, 6), organ(cls=3, diameter=2.0), volume_shape=(12,) * 3)
        fused = fuse_predictions(logits, [(box, np.zeros((8, 8, 8)))])
        assert fused.data[0, 0, 0] == 0
        assert fused.data[6, 6, 7] == 3

    def test_organ_without_box_is_cleared_everywhere(self):
        arr = np.zeros((12, 12, 12), dtype=np.uint16)
        arr[3, 3, 3] = 4
        logits = logits_from_labels(arr, 4)
        fused = fuse_predictions(logits, [], small_organ_ids=[4])
        assert (fused.data == 4).sum() == 0

    def test_higher_probability_wins_overlap(self):
        logits = logits_from_labels(np.zeros((12, 12, 12), dtype=np.uint16), 6)
        box1 = roi_box((6, 6, 5), organ(cls=4, diameter=2.0), volume_shape=(12,) * 3)
        box2 = roi_box((6, 6, 7), organ(cls=5, diameter=2.0), volume_shape=(12,) * 3)
        p1 = np.zeros((8, 8, 8))
        p2 = np.zeros((8, 8, 8))
        p1[4, 4, 5] = 0.7  # volume voxel (6, 6, 6)
        p2[4, 4, 3] = 0.8  # same voxel
        fused = fuse_predictions(logits, [(box1, p1), (box2, p2)])
        assert fused.data[6, 6, 6] == 5

    def test_equal_probability_tie_goes_to_lower_id(self):
        logits = logits_from_labels(np.zeros((12, 12, 12), dtype=np.uint16), 6)
        box1 = roi_box((6, 6, 5), organ(cls=4, diameter=2.0), volume_shape=(12,) * 3)
        box2 = roi_box((6, 6, 7), organ(cls=5, diameter=2.0), volume_shape=(12,) * 3)
        p1 = np.zeros((8, 8, 8))
        p2 = np.zeros((8, 8, 8))
        p1[4, 4, 5] = 0.8
        p2[4, 4, 3] = 0.8
        fused = fuse_predictions(logits, [(box2, p2), (box1, p1)])
        assert fused.data[6, 6, 6] == 4

    def test_threshold_is_strict(self):
        logits = logits_from_labels(np.zeros((12, 12, 12), dtype=np.uint16), 4)
        box = roi_box((6, 6, 6), organ(cls=3, diameter=2.0), volume_shape=(12,) * 3)
        probs = np.full((8, 8, 8), 0.5)
        fused = fuse_predictions(logits, [(box, probs)], threshold=0.5)
        assert (fused.data == 3).sum() == 0

    def test_ground_truth_round_trip_inside_roi(self, rng):
        arr = np.zeros((16, 16, 16), dtype=np.uint16)
        arr[7:10, 7:9, 6:9] = 4
        arr[2:5, 2:5, 2:5] = 1
        gt = LabelMap(arr, num_classes=4)
        logits = logits_from_labels(arr, 4)
        o = organ(cls=4, diameter=3.0)
        center = np.argwhere(arr == 4).mean(axis=0)
        box = roi_box(center, o, volume_shape=(16, 16, 16))
        probs = crop_with_padding((arr == 4).astype(np.float64), box)
        fused = fuse_predictions(logits, [(box, probs)])
        assert np.array_equal(fused.data, gt.data)

    def test_fusion_is_idempotent(self, rng):
        logits = rng.normal(size=(5, 12, 12, 12))
        box = roi_box((6, 6, 6), organ(cls=4, diameter=3.0), volume_shape=(12,) * 3)
        probs = rng.random((10, 10, 10))
        a = fuse_predictions(logits, [(box, probs)])
        b = fuse_predictions(logits, [(box, probs)])
        assert np.array_equal(a.data, b.data)

    def test_accepts_torch_inputs_and_channel_dim(self):
        logits = torch.from_numpy(
            logits_from_labels(np.zeros((12, 12, 12), dtype=np.uint16), 4)
        )
        box = roi_box((6, 6, 6), organ(cls=3, diameter=2.0), volume_shape=(12,) * 3)
        probs = torch.zeros(1, 8, 8, 8)
        probs[0, 4, 4, 4] = 0.9
        fused = fuse_predictions(logits, [(box, probs)])
        assert fused.data[6, 6, 6] == 3

    def test_spacing_carried_through(self):
        logits = logits_from_labels(np.zeros((12, 12, 12), dtype=np.uint16), 4)
        fused = fuse_predictions(logits, [], spacing=(1.0, 0.5, 0.5))
        assert fused.spacing == (1.0, 0.5, 0.5)


class TestJitter:
    def test_offsets_bounded_by_fraction_of_side(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            jittered = jitter_center((20, 20, 20), side=30, rng=rng)
            for c in jittered:
                assert abs(c - 20) <= 3.0

    def test_clamped_to_volume(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            jittered = jitter_center(
                (0, 0, 0), side=20, rng=rng, volume_shape=(32, 32, 32)
            )
            assert all(c >= 0 for c in jittered)

    def test_deterministic_given_rng(self):
        a = jitter_center((5, 5, 5), 10, np.random.default_rng(7))
        b = jitter_center((5, 5, 5), 10, np.random.default_rng(7))
        assert a == b
