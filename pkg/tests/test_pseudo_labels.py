"""Unit tests for the frame-0 pseudo-box providers."""

import numpy as np
import pytest

from langtrack import synth
from langtrack.errors import DataError
from langtrack.evaluate import iou
from langtrack.heads_losses import Box
from langtrack.pseudo_labels import (
    FilePseudoLabelProvider,
    NoiseSpec,
    NoisyOracleProvider,
)


def clip_with_box(box, clip_id="clip_x"):
    frames = np.zeros((1, 64, 64, 3), np.uint8)
    return synth.VideoClip(frames, [box], "the red square staying still", clip_id=clip_id)


class TestNoisyOracle:
    def test_zero_noise_returns_exact_ground_truth(self):
        gt = Box(0.4, 0.6, 0.25, 0.2)
        provider = NoisyOracleProvider(NoiseSpec(0.0, 0.0, 0.0), seed=3)
        out = provider.provide(clip_with_box(gt), None)
        assert out == gt

    def test_deterministic_per_clip_and_seed(self):
        gt = Box(0.5, 0.5, 0.2, 0.2)
        a = NoisyOracleProvider(NoiseSpec(), seed=9).provide(clip_with_box(gt), None)
        b = NoisyOracleProvider(NoiseSpec(), seed=9).provide(clip_with_box(gt), None)
        assert a == b
        c = NoisyOracleProvider(NoiseSpec(), seed=10).provide(clip_with_box(gt), None)
        assert a != c

    def test_distinct_clips_get_distinct_noise(self):
        gt = Box(0.5, 0.5, 0.2, 0.2)
        provider = NoisyOracleProvider(NoiseSpec(), seed=4)
        a = provider.provide(clip_with_box(gt, "clip_a"), None)
        b = provider.provide(clip_with_box(gt, "clip_b"), None)
        assert a != b

    def test_center_noise_monte_carlo_magnitude(self):
        # |N(0, s)| has mean s * sqrt(2/pi); averaged over 1000 seeded draws
        gt = Box(0.5, 0.5, 0.3, 0.3)
        clip = clip_with_box(gt)
        errs = []
        for seed in range(1000):
            provider = NoisyOracleProvider(NoiseSpec(0.1, 0.0, 0.0), seed=seed)
            out = provider.provide(clip, None)
            errs.append(abs(out.cx - gt.cx))
        expect = 0.1 * gt.w * np.sqrt(2.0 / np.pi)
        assert np.mean(errs) == pytest.approx(expect, rel=0.10)

    def test_all_gross_draws_land_far_from_truth(self):
        gt = Box(0.5, 0.5, 0.2, 0.2)
        for seed in range(200):
            provider = NoisyOracleProvider(NoiseSpec(0.05, 0.1, 1.0), seed=seed)
            out = provider.provide(clip_with_box(gt, f"c{seed}"), None)
            assert iou(out, gt) < 0.1

    def test_boxes_stay_valid_under_heavy_noise(self):
        gt = Box(0.93, 0.07, 0.12, 0.12)
        for seed in range(100):
            provider = NoisyOracleProvider(NoiseSpec(0.5, 0.8, 0.0), seed=seed)
            out = provider.provide(clip_with_box(gt, f"c{seed}"), None)
            x1, y1, x2, y2 = out.corners()
            assert 0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0

    def test_invocation_counter(self):
        provider = NoisyOracleProvider(NoiseSpec(), seed=0)
        clip = clip_with_box(Box(0.5, 0.5, 0.2, 0.2))
        provider.provide(clip, None)
        provider.provide(clip, None)
        assert provider.calls == 2


class TestFileProvider:
    def test_record_echo(self, tmp_path):
        path = tmp_path / "labels.txt"
        path.write_text("clip_0007 0.50 0.50 0.20 0.30\n")
        provider = FilePseudoLabelProvider(str(path))
        out = provider.provide(clip_with_box(Box(0.1, 0.1, 0.1, 0.1), "clip_0007"), None)
        assert out == Box(0.5, 0.5, 0.2, 0.3)

    def test_missing_record_names_the_clip(self, tmp_path):
        path = tmp_path / "labels.txt"
        path.write_text("clip_0007 0.50 0.50 0.20 0.30\n")
        provider = FilePseudoLabelProvider(str(path))
        with pytest.raises(DataError, match="clip_miss"):
            provider.provide(clip_with_box(Box(0.5, 0.5, 0.2, 0.2), "clip_miss"), None)

    def test_determinism(self, tmp_path):
        path = tmp_path / "labels.txt"
        path.write_text("c 0.5 0.5 0.2 0.3\n")
        provider = FilePseudoLabelProvider(str(path))
        clip = clip_with_box(Box(0.1, 0.1, 0.1, 0.1), "c")
        assert provider.provide(clip, None) == provider.provide(clip, None)
        assert provider.calls == 2
