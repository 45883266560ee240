"""Tests for the synthetic sequence generator, cropping, clip sampling and the disk format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokentrack.boxes import BBox
from tokentrack.world import (CropTransform, SamplingError, WorldSpec, crop_region, crop_transform, export_sequence,
                              gen_sequence, load_dataset, load_sequence, read_ppm, sample_clips,
                              write_ppm)

STATIC = WorldSpec(num_frames=20, speed=(0.0, 0.0), accel_sd=0.0, burst_prob=0.0, scale_drift=0.0,
                   num_occlusions=(0, 0))


class TestGenerator:
    def test_same_seed_same_frames(self):
        a, b = gen_sequence(WorldSpec(num_frames=30), 7), gen_sequence(WorldSpec(num_frames=30), 7)
        for t in range(30):
            np.testing.assert_array_equal(a.frames[t], b.frames[t])
        np.testing.assert_array_equal(a.gt, b.gt)
        np.testing.assert_array_equal(a.visible, b.visible)

    def test_different_seeds_differ(self):
        assert not np.array_equal(gen_sequence(WorldSpec(), 1).gt, gen_sequence(WorldSpec(), 2).gt)

    def test_zero_velocity_gives_constant_box(self):
        seq = gen_sequence(STATIC, 3)
        np.testing.assert_array_equal(seq.gt, np.broadcast_to(seq.gt[0], seq.gt.shape))

    def test_frame_format(self):
        seq = gen_sequence(WorldSpec(num_frames=5, num_occlusions=(0, 0)), 0)
        f = seq.frames[2]
        assert f.shape == (160, 160, 3) and f.dtype == np.uint8
        assert len(seq) == 5 and len(seq.frames) == 5
        with pytest.raises(IndexError):
            seq.frames[5]

    @pytest.mark.parametrize("seed", range(10))
    def test_boxes_inside_frame(self, seed):
        seq = gen_sequence(WorldSpec(), seed)
        x, y, w, h = seq.gt.T
        assert np.all(x >= -1e-9) and np.all(y >= -1e-9)
        assert np.all(x + w <= 160 + 1e-9) and np.all(y + h <= 160 + 1e-9)

    def test_occlusions_hide_the_target(self):
        checked = 0
        for seed in range(8):
            seq = gen_sequence(WorldSpec(), seed)
            world = seq.frames._world
            for t in np.flatnonzero(~seq.visible)[::3]:
                box = seq.gt_box(int(t))
                x0, y0, x1, y1 = (int(round(v)) for v in box.xyxy())
                patch = seq.frames[int(t)][y0 + 2:y1 - 2, x0 + 2:x1 - 2].reshape(-1, 3) / 255.0
                mean = patch.mean(axis=0)
                target = world.target.colors[t]
                gray = np.full(3, mean.mean())
                # occluder texture is gray: the patch sits near the gray axis, not at the target color
                assert np.linalg.norm(mean - gray) < 0.05
                assert np.linalg.norm(mean - target) > np.linalg.norm(mean - gray)
                checked += 1
        assert checked > 10

    def test_occlusion_lengths(self):
        for seed in range(10):
            vis = gen_sequence(WorldSpec(), seed).visible
            runs, t = [], 0
            while t < len(vis):
                if not vis[t]:
                    s = t
                    while t < len(vis) and not vis[t]:
                        t += 1
                    runs.append(t - s)
                t += 1
            assert 1 <= len(runs) <= 2 and all(10 <= r <= 20 for r in runs)

    def test_event_flags(self):
        seq = gen_sequence(WorldSpec(), 4)
        assert seq.events["fast_motion"].shape == (120,) and seq.events["distractor_near"].dtype == bool


class TestCrop:
    def test_full_frame_crop_is_the_frame(self):
        frame = gen_sequence(WorldSpec(num_frames=1, num_occlusions=(0, 0)), 5).frames[0]
        pix, tf = crop_region(frame, BBox(80.0, 80.0, 40.0, 40.0), 4.0, 160)
        assert (tf.x0, tf.y0, tf.side) == (0.0, 0.0, 160.0)
        np.testing.assert_allclose(pix, frame / 255.0, atol=1e-12)

    def test_half_size_crop_averages_pixel_blocks(self):
        frame = gen_sequence(WorldSpec(num_frames=1, num_occlusions=(0, 0)), 5).frames[0] / 255.0
        pix, _ = crop_region(frame, BBox(80.0, 80.0, 40.0, 40.0), 4.0, 80)
        blocks = frame.reshape(80, 2, 80, 2, 3).mean(axis=(1, 3))
        np.testing.assert_allclose(pix, blocks, atol=1e-12)

    @settings(max_examples=100)
    @given(st.floats(-50, 200), st.floats(-50, 200), st.floats(2, 60), st.floats(2, 60), st.floats(1.0, 5.0))
    def test_round_trip(self, cx, cy, w, h, factor):
        box = BBox(cx, cy, w, h)
        tf = crop_transform(box, factor, 128)
        back = tf.to_frame(tf.to_crop(box))
        np.testing.assert_allclose(back.as_array(), box.as_array(), atol=1e-9)

    def test_outside_pixels_take_channel_mean(self):
        frame = gen_sequence(WorldSpec(num_frames=1, num_occlusions=(0, 0)), 2).frames[0]
        pix, _ = crop_region(frame, BBox(0.0, 0.0, 20.0, 20.0), 4.0, 32)
        fill = (frame / 255.0).reshape(-1, 3).mean(axis=0)
        np.testing.assert_allclose(pix[:8, :8], np.broadcast_to(fill, (8, 8, 3)), atol=1e-12)

    def test_nonpositive_factor(self):
        with pytest.raises(ValueError):
            crop_transform(BBox(1, 1, 1, 1), 0.0, 8)

    def test_crop_center_maps_to_half(self):
        tf = CropTransform(10.0, 20.0, 40.0, 64)
        c = tf.to_crop(BBox(30.0, 40.0, 8.0, 4.0))
        assert (c.cx, c.cy, c.w, c.h) == (0.5, 0.5, 0.2, 0.1)


class TestSampleClips:
    @pytest.mark.parametrize("n,m", [(4, 8), (16, 2), (8, 4)])
    def test_batch_unit_holds_32_pairs(self, small_world, n, m):
        clip = sample_clips(small_world, n, m, seed=0)
        assert clip.num_pairs == 32 and (clip.n, clip.m) == (n, m)
        assert clip.search.shape == (n, m, 128, 128, 3) and clip.template.shape == (n, 64, 64, 3)
        assert clip.boxes.shape == (n, m, 4)

    def test_deterministic(self, small_world):
        a, b = sample_clips(small_world, 4, 8, seed=11), sample_clips(small_world, 4, 8, seed=11)
        for f in ("template", "search", "boxes", "frame_index", "sequence_index"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_consecutive_frames_after_template(self, small_world):
        clip = sample_clips(small_world, 6, 8, seed=3)
        assert np.all(np.diff(clip.frame_index, axis=1) == 1)
        assert np.all(clip.frame_index[:, 0] >= 1)

    def test_boxes_follow_ground_truth_without_augmentation(self, small_world):
        clip = sample_clips(small_world, 2, 4, seed=5, augment=False)
        for c in range(2):
            np.testing.assert_allclose(clip.boxes[c, :, :2], 0.5, atol=1e-12)
            seq = small_world[clip.sequence_index[c]]
            for k, f in enumerate(clip.frame_index[c]):
                gt = seq.gt_box(int(f))
                np.testing.assert_allclose(clip.boxes[c, k, 2:], np.array([gt.w, gt.h]) / (4 * np.sqrt(gt.w * gt.h)))

    def test_too_short_sequences(self, small_world):
        with pytest.raises(SamplingError):
            sample_clips(small_world, 1, 40, seed=0)


class TestDiskFormat:
    def test_ppm_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, (7, 5, 3), dtype=np.uint8)
        write_ppm(tmp_path / "a.ppm", img)
        np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)
        gray = rng.integers(0, 256, (4, 6), dtype=np.uint8)
        write_ppm(tmp_path / "b.pgm", gray)
        np.testing.assert_array_equal(read_ppm(tmp_path / "b.pgm"), gray)

    def test_export_and_load(self, tmp_path):
        seq = gen_sequence(WorldSpec(num_frames=6, num_occlusions=(0, 0)), 9, "alpha")
        export_sequence(seq, tmp_path)
        lines = (tmp_path / "alpha" / "annotations.txt").read_text().splitlines()
        assert len(lines) == 6
        back = load_sequence(tmp_path / "alpha")
        np.testing.assert_array_equal(back.gt, seq.gt)
        np.testing.assert_array_equal(back.visible, seq.visible)
        for t in range(6):
            np.testing.assert_array_equal(back.frames[t], seq.frames[t])
        assert [s.name for s in load_dataset(tmp_path)] == ["alpha"]
