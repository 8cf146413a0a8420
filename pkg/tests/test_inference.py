"""Tests for inference module."""

from collections import deque

import numpy as np
import pytest
import torch

from insegan import inference
from insegan.checkpoint import save_checkpoint
from insegan.inference import (
    InSeGANModel,
    ModelCompatibilityError,
    clean_mask,
    default_tau,
    evaluate_dataset,
    load_model,
    mask_name,
    read_mask,
    segment,
    segment_dataset,
    threshold_labels,
    write_mask,
)
from insegan.dataset import read_manifest


def _stack() -> torch.Tensor:
    stack = torch.full((2, 8, 8), -1.0)
    stack[0, 1:5, 1:5] = 1.0
    stack[1, 3:7, 3:7] = 2.0
    return stack


def _flood_fill_clean(mask: np.ndarray, min_area: int) -> np.ndarray:
    out = mask.copy()
    seen = np.zeros(mask.shape, dtype=bool)
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            if seen[r, c] or mask[r, c] == 0:
                continue
            label = mask[r, c]
            component, queue = [], deque([(r, c)])
            seen[r, c] = True
            while queue:
                y, x = queue.popleft()
                component.append((y, x))
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and not seen[ny, nx] and mask[ny, nx] == label:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            if len(component) < min_area:
                for y, x in component:
                    out[y, x] = 0
    return out


@pytest.fixture
def model(tiny_networks, tiny_config) -> InSeGANModel:
    return InSeGANModel.from_networks(tiny_networks, tiny_config, checkpoint_id="feedbeef0000")


class TestThresholdLabels:
    """Tests for threshold_labels."""

    def test_two_squares(self) -> None:
        mask, composite = threshold_labels(_stack(), tau=0.0)
        expected = np.zeros((8, 8), dtype=np.uint8)
        expected[1:5, 1:5] = 1
        expected[3:7, 3:7] = 2
        assert np.array_equal(mask, expected)
        assert composite[4, 4].item() == 2.0

    def test_raising_tau_never_adds_foreground(self) -> None:
        stack = torch.randn(3, 16, 16, generator=torch.Generator().manual_seed(0))
        previous = None
        for tau in np.linspace(-3, 3, 13):
            foreground = threshold_labels(stack, float(tau))[0] > 0
            if previous is not None:
                assert not (foreground & ~previous).any()
            previous = foreground

    def test_default_tau(self, tiny_dataset) -> None:
        manifest = read_manifest(tiny_dataset)
        assert default_tau(manifest) == pytest.approx(manifest.background_level + 0.05)


class TestSegment:
    """Tests for segment."""

    def test_mask_follows_per_instance_argmax(self, model) -> None:
        x = torch.randn(1, 64, 64, generator=torch.Generator().manual_seed(0))
        result = segment(x, model, tau=-1e9)
        assert result.mask.shape == (64, 64) and result.mask.dtype == np.uint8
        assert result.n_instances == 2
        argmax = result.instance_depths.argmax(dim=0).numpy() + 1
        assert np.array_equal(result.mask, argmax)
        assert result.latents.shape == (2, 128)

    def test_high_tau_is_all_background(self, model) -> None:
        result = segment(torch.zeros(64, 64), model, tau=1e9)
        assert not result.mask.any()

    def test_untrained_model_raises(self, tiny_networks, tiny_config) -> None:
        untrained = InSeGANModel.from_networks(tiny_networks, tiny_config, trained=False)
        with pytest.raises(ModelCompatibilityError, match="untrained"):
            segment(torch.zeros(64, 64), untrained, tau=0.0)

    def test_wrong_size_raises(self, model) -> None:
        with pytest.raises(ModelCompatibilityError):
            segment(torch.zeros(1, 32, 32), model, tau=0.0)

    def test_step_zero_checkpoint_loads_untrained(self, tiny_networks, tiny_config, tmp_path) -> None:
        path = tmp_path / "fresh.ckpt"
        save_checkpoint(path, tiny_networks, tiny_config, epoch=0, step=0)
        assert not load_model(path).trained
        save_checkpoint(path, tiny_networks, tiny_config, epoch=1, step=4)
        assert load_model(path).trained


class TestCleanMask:
    """Tests for clean_mask."""

    def test_large_components_untouched(self) -> None:
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[2:6, 2:6] = 1
        mask[8:14, 8:14] = 2
        assert np.array_equal(clean_mask(mask), mask)

    def test_small_blob_erased(self) -> None:
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[2:6, 2:6] = 1
        mask[10, 10:13] = 1
        cleaned = clean_mask(mask, min_area=8)
        assert not cleaned[10].any()
        assert (cleaned[2:6, 2:6] == 1).all()

    def test_diagonal_pixels_are_separate(self) -> None:
        mask = np.zeros((6, 6), dtype=np.uint8)
        np.fill_diagonal(mask, 1)
        assert not clean_mask(mask, min_area=2).any()

    def test_matches_flood_fill(self) -> None:
        rng = np.random.default_rng(0)
        for _ in range(20):
            mask = rng.integers(0, 4, size=(24, 24)).astype(np.uint8)
            assert np.array_equal(clean_mask(mask, min_area=4), _flood_fill_clean(mask, 4))

    def test_idempotent(self) -> None:
        mask = np.random.default_rng(1).integers(0, 3, size=(24, 24)).astype(np.uint8)
        once = clean_mask(mask, min_area=3)
        assert np.array_equal(clean_mask(once, min_area=3), once)

    def test_median_removes_speckle(self) -> None:
        mask = np.zeros((9, 9), dtype=np.uint8)
        mask[4, 4] = 2
        assert not clean_mask(mask, min_area=0, filter="median").any()
        assert clean_mask(mask, min_area=0)[4, 4] == 2

    def test_median_erodes_bar_ends_on_every_pass(self) -> None:
        mask = np.zeros((10, 12), dtype=np.uint8)
        mask[3:5, 2:10] = 1
        once = clean_mask(mask, min_area=0, filter="median")
        twice = clean_mask(once, min_area=0, filter="median")
        assert np.flatnonzero(once[3]).tolist() == list(range(3, 9))
        assert np.flatnonzero(twice[3]).tolist() == list(range(4, 8))
        assert np.array_equal(once[3], once[4]) and np.array_equal(twice[3], twice[4])

    def test_unknown_filter_raises(self) -> None:
        with pytest.raises(ValueError):
            clean_mask(np.zeros((4, 4), dtype=np.uint8), filter="gaussian")


class TestMaskFiles:
    """Tests for write_mask and read_mask."""

    def test_round_trip_with_sidecar(self, tmp_path) -> None:
        mask = np.zeros((64, 64), dtype=np.uint8)
        mask[10:20, 30:40] = 3
        path = tmp_path / "masks" / mask_name(7)
        write_mask(path, mask, tau=-0.25, n_instances=5, checkpoint_id="abc")
        loaded, meta = read_mask(path)
        assert path.name == "scene_000007.png"
        assert np.array_equal(loaded, mask)
        assert meta == {"tau": -0.25, "n_instances": 5, "checkpoint_id": "abc"}

    def test_missing_sidecar(self, tmp_path) -> None:
        path = tmp_path / "m.png"
        write_mask(path, np.ones((4, 4), dtype=np.uint8), 0.0, 1, None)
        path.with_suffix(".json").unlink()
        assert read_mask(path)[1] == {}


class TestEvaluateDataset:
    """Tests for evaluate_dataset."""

    def test_report_over_split(self, tiny_dataset, model) -> None:
        report = evaluate_dataset(tiny_dataset, "test", model, progress=False)
        manifest = read_manifest(tiny_dataset)
        assert report.method == "insegan"
        assert report.checkpoint_id == "feedbeef0000"
        assert report.scene_ids == manifest.splits["test"]
        assert all(0.0 <= s <= 1.0 for s in report.per_scene)
        assert report.config["tau"] == pytest.approx(default_tau(manifest))

    def test_noise_reaches_segmented_inputs(self, tiny_dataset, model, monkeypatch) -> None:
        seen = []
        original = inference.segment

        def recording(x, m, tau):
            seen.append(x.clone())
            return original(x, m, tau)

        monkeypatch.setattr(inference, "segment", recording)
        list(segment_dataset(tiny_dataset, "test", model, progress=False))
        clean, seen[:] = list(seen), []
        report = evaluate_dataset(tiny_dataset, "test", model, progress=False, noise_sigma=0.5)
        assert report.config["noise_sigma"] == 0.5
        assert len(seen) == len(clean) > 0
        for plain, noisy in zip(clean, seen):
            assert not torch.equal(plain, noisy)
            assert (noisy - plain).std().item() == pytest.approx(0.5, abs=0.05)
