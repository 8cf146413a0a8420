"""Test-time instance segmentation.

The encoder maps a depth image to n latent vectors; each is rendered on
its own, the renders are Z-buffered, and pixels whose composite depth is
not above ``tau`` become background.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Tuple

import numpy as np
import torch
from PIL import Image
from scipy import ndimage
from tqdm import tqdm

from .checkpoint import load_checkpoint
from .config import IMAGE_SIZE, MIN_AREA, THRESHOLD_OFFSET, TrainConfig
from .dataset import DatasetManifest, read_manifest
from .geometry import zbuffer_composite
from .metrics import EvalReport, masks_from_labels, miou
from .nets import Encoder, InstanceGenerator, Networks
from .scenegen import DepthSceneDataset

logger = logging.getLogger(__name__)

MASK_FILTERS = ("components", "median")
MEDIAN_SIZE: int = 3
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class ModelCompatibilityError(ValueError):
    """Model untrained or unable to process the given input."""


@dataclass
class InSeGANModel:
    """The two networks used at test time."""

    generator: InstanceGenerator
    encoder: Encoder
    n_instances: int
    checkpoint_id: Optional[str] = None
    trained: bool = True

    @classmethod
    def from_networks(
        cls, networks: Networks, config: TrainConfig, checkpoint_id: Optional[str] = None,
        trained: bool = True,
    ) -> "InSeGANModel":
        return cls(networks.generator, networks.encoder, config.n_instances, checkpoint_id, trained)

    @property
    def device(self) -> torch.device:
        return next(self.encoder.parameters()).device


def load_model(path: Path, device: str = "cpu") -> InSeGANModel:
    """Model from a checkpoint; a step-0 checkpoint is flagged untrained."""
    loaded = load_checkpoint(path, device)
    logger.info("Loaded model %s (epoch %d, id %s)", path, loaded.epoch, loaded.checkpoint_id)
    return InSeGANModel.from_networks(
        loaded.networks, loaded.config, loaded.checkpoint_id, trained=loaded.step > 0
    )


@dataclass
class SegmentationResult:
    mask: np.ndarray
    instance_depths: torch.Tensor
    composite: torch.Tensor
    latents: torch.Tensor

    @property
    def n_instances(self) -> int:
        return int(self.instance_depths.shape[0])


def default_tau(manifest: DatasetManifest) -> float:
    """Empty-bin level of the normalized inputs plus a small offset."""
    if manifest.background_level is None:
        raise ValueError("dataset manifest has no background level")
    return float(manifest.background_level) + THRESHOLD_OFFSET


def threshold_labels(stack: torch.Tensor, tau: float) -> Tuple[np.ndarray, torch.Tensor]:
    """Z-buffer a (n, H, W) stack and cut the composite at ``tau``.

    Returns:
        ``(mask, composite)``: uint8 labels in 0..n and the composite depth.
    """
    composite, labels = zbuffer_composite(stack)
    labels = torch.where(composite > tau, labels, torch.zeros_like(labels))
    return labels.cpu().numpy().astype(np.uint8), composite


def segment(x: torch.Tensor, model: InSeGANModel, tau: float) -> SegmentationResult:
    """Segment one normalized depth image (1, 64, 64) or (64, 64).

    Labels are not compacted: label k is the render of latent row k - 1,
    even when it ends up with no pixels.

    Raises:
        ModelCompatibilityError: For an untrained model or a wrongly sized input.
    """
    if not model.trained:
        raise ModelCompatibilityError("model is untrained (checkpoint at step 0)")
    x = torch.as_tensor(x, dtype=torch.float32)
    if x.dim() == 2:
        x = x.unsqueeze(0)
    if tuple(x.shape) != (1, IMAGE_SIZE, IMAGE_SIZE):
        raise ModelCompatibilityError(
            f"model expects a 1x{IMAGE_SIZE}x{IMAGE_SIZE} depth image, got {tuple(x.shape)}"
        )
    if model.encoder.n_instances != model.n_instances:
        raise ModelCompatibilityError(
            f"encoder emits {model.encoder.n_instances} instances, model declares {model.n_instances}"
        )
    with torch.no_grad():
        Zhat, _ = model.encoder(x.unsqueeze(0).to(model.device))
        stack = model.generator.generate_single(Zhat[0])[:, 0]
    mask, composite = threshold_labels(stack, tau)
    return SegmentationResult(mask=mask, instance_depths=stack, composite=composite, latents=Zhat[0])


def clean_mask(mask: np.ndarray, min_area: int = MIN_AREA, filter: str = "components") -> np.ndarray:
    """Erase 4-connected components smaller than ``min_area`` pixels.

    ``filter="median"`` runs a 3x3 median filter over the labels first. That
    filter is not idempotent: a second pass can still move label boundaries.
    """
    if filter not in MASK_FILTERS:
        raise ValueError(f"Unknown mask filter: {filter!r} (choose from {MASK_FILTERS})")
    out = np.asarray(mask).astype(np.uint8).copy()
    if filter == "median":
        out = ndimage.median_filter(out, size=MEDIAN_SIZE, mode="nearest")
    if min_area <= 0:
        return out
    for label in np.unique(out):
        if label == 0:
            continue
        components, count = ndimage.label(out == label, structure=_FOUR_CONNECTED)
        areas = np.bincount(components.ravel(), minlength=count + 1)
        small = np.nonzero(areas < min_area)[0]
        small = small[small > 0]
        out[np.isin(components, small)] = 0
    return out


def write_mask(
    path: Path, mask: np.ndarray, tau: float, n_instances: int, checkpoint_id: Optional[str]
) -> None:
    """8-bit PNG plus a ``.json`` sidecar with tau, n and the checkpoint id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=np.uint8)).save(path)
    sidecar = {"tau": float(tau), "n_instances": int(n_instances), "checkpoint_id": checkpoint_id}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def read_mask(path: Path) -> Tuple[np.ndarray, Dict[str, Any]]:
    """A mask PNG and its sidecar (empty dict when there is none)."""
    path = Path(path)
    with Image.open(path) as image:
        mask = np.array(image, dtype=np.uint8)
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return mask, meta


def mask_name(index: int) -> str:
    return f"scene_{index:06d}.png"


def segment_dataset(
    directory: Path,
    split: str,
    model: InSeGANModel,
    tau: Optional[float] = None,
    min_area: int = MIN_AREA,
    filter: str = "components",
    progress: bool = True,
    noise_sigma: Optional[float] = None,
) -> Iterator[Tuple[int, SegmentationResult, np.ndarray, np.ndarray]]:
    """Segment every scene of a split.

    ``noise_sigma`` overrides the dataset's depth noise; ``None`` keeps the
    manifest value.

    Yields:
        ``(scene index, raw result, cleaned mask, GT labels)``.
    """
    dataset = DepthSceneDataset(directory, split, noise_sigma=noise_sigma)
    if tau is None:
        tau = default_tau(dataset.manifest)
    for item in tqdm(range(len(dataset)), disable=not progress, desc=f"segment {split}"):
        image, labels, index = dataset[item]
        result = segment(image, model, tau)
        yield index, result, clean_mask(result.mask, min_area, filter), labels.numpy()


def evaluate_dataset(
    directory: Path,
    split: str,
    model: InSeGANModel,
    tau: Optional[float] = None,
    min_area: int = MIN_AREA,
    filter: str = "components",
    bijective: bool = False,
    progress: bool = True,
    noise_sigma: Optional[float] = None,
) -> EvalReport:
    """mIoU of the model's cleaned masks over a split.

    Raises:
        ValueError: If the split is empty.
    """
    manifest = read_manifest(directory)
    if tau is None:
        tau = default_tau(manifest)
    ids, scores = [], []
    n_gt = manifest.n_instances
    for index, _, mask, labels in segment_dataset(directory, split, model, tau, min_area, filter,
                                                  progress, noise_sigma):
        gt = masks_from_labels(labels, n_gt)
        if not any(m.any() for m in gt):
            continue
        ids.append(index)
        scores.append(miou(mask, gt, bijective=bijective))
    if not ids:
        raise ValueError(f"split {split!r} has no scenes to evaluate")
    return EvalReport(
        scene_ids=ids,
        per_scene=scores,
        class_name=manifest.class_name,
        method="insegan",
        config={"split": split, "tau": tau, "min_area": min_area, "filter": filter,
                "bijective": bijective, "noise_sigma": noise_sigma},
        checkpoint_id=model.checkpoint_id,
    )
