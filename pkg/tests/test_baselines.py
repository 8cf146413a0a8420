"""Tests for baselines module."""

import logging

import numpy as np
import pytest

from insegan.baselines import kmeans_segment, lift_foreground, spectral_segment
from insegan.config import DatasetConfig
from insegan.metrics import masks_from_labels, miou
from insegan.scenegen import render_scene, resize_depth, resize_labels
from insegan.shapes import ShapeSpec


def _two_squares() -> tuple:
    image = np.zeros((64, 64), dtype=np.float32)
    labels = np.zeros((64, 64), dtype=np.uint8)
    image[5:15, 5:15] = 1.0
    labels[5:15, 5:15] = 1
    image[45:55, 45:55] = 1.0
    labels[45:55, 45:55] = 2
    return image, labels


class TestLiftForeground:
    """Tests for lift_foreground."""

    def test_height_span_maps_to_image_width(self) -> None:
        image = np.zeros((8, 8))
        image[2, 3] = 0.5
        image[6, 1] = 2.0
        rows_cols, points = lift_foreground(image, floor=0.0)
        assert rows_cols.tolist() == [[2, 3], [6, 1]]
        assert points[:, 2].tolist() == [2.0, 8.0]
        assert points[:, :2].tolist() == [[3, 2], [1, 6]]


class TestKmeansSegment:
    """Tests for kmeans_segment."""

    def test_separates_two_squares(self) -> None:
        image, labels = _two_squares()
        pred = kmeans_segment(image, 2, floor=0.0, rng=0)
        assert miou(pred, masks_from_labels(labels, 2)) == 1.0

    def test_empty_foreground_is_background(self) -> None:
        pred = kmeans_segment(np.zeros((64, 64)), 3, floor=0.0)
        assert not pred.any()

    def test_deterministic(self) -> None:
        image = np.random.default_rng(0).uniform(0, 1, size=(32, 32))
        assert np.array_equal(kmeans_segment(image, 4, 0.0, rng=5), kmeans_segment(image, 4, 0.0, rng=5))

    def test_too_few_pixels_falls_back(self, caplog) -> None:
        image = np.zeros((8, 8))
        image[0, 0] = 1.0
        with caplog.at_level(logging.WARNING):
            pred = kmeans_segment(image, 3, floor=0.0)
        assert pred[0, 0] == 1 and pred.sum() == 1
        assert "foreground pixels" in caplog.text

    def test_invalid_n_raises(self) -> None:
        with pytest.raises(ValueError):
            kmeans_segment(np.zeros((4, 4)), 0, 0.0)

    @pytest.mark.slow
    def test_non_overlapping_scenes(self) -> None:
        """K-Means reaches mIoU >= 0.8 on 50 bins with disjoint footprints."""
        config = DatasetConfig(overlap=False, base_seed=100)
        shape = ShapeSpec(config.shape, config.dims)
        scores = []
        for index in range(50):
            scene = render_scene(shape, config, index)
            image = resize_depth(scene.depth)[0].numpy()
            masks = masks_from_labels(resize_labels(scene.labels), config.n_instances)
            scores.append(miou(kmeans_segment(image, config.n_instances, 0.0, rng=index), masks))
        assert np.mean(scores) >= 0.8


class TestSpectralSegment:
    """Tests for spectral_segment."""

    def test_separates_two_blobs(self) -> None:
        image, labels = _two_squares()
        pred = spectral_segment(image, 2, floor=0.0, seed=0)
        assert miou(pred, masks_from_labels(labels, 2)) == 1.0

    def test_single_segment(self) -> None:
        image, labels = _two_squares()
        pred = spectral_segment(image, 1, floor=0.0)
        assert set(np.unique(pred).tolist()) == {0, 1}
        assert np.array_equal(pred > 0, labels > 0)

    def test_label_permutation_does_not_change_score(self) -> None:
        image, labels = _two_squares()
        pred = spectral_segment(image, 2, floor=0.0, seed=0)
        swapped = np.where(pred == 1, 2, np.where(pred == 2, 1, 0))
        masks = masks_from_labels(labels, 2)
        assert miou(pred, masks) == miou(swapped, masks)

    def test_deterministic(self) -> None:
        image, _ = _two_squares()
        assert np.array_equal(spectral_segment(image, 2, 0.0, seed=3),
                              spectral_segment(image, 2, 0.0, seed=3))
