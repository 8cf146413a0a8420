"""On-disk dataset container.

One directory per dataset:

    manifest.json          sorted JSON, see ``DatasetManifest``
    scene_%06d.depth       S*S little-endian float32, row-major height field
    scene_%06d.mask        S*S uint8 instance labels, 0 = background
    scene_%06d.pose        n*6 little-endian float32 (omega, tau) per instance
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .config import DATASET_FORMAT

logger = logging.getLogger(__name__)

MANIFEST_NAME: str = "manifest.json"
DEPTH_DTYPE = np.dtype("<f4")
POSE_DTYPE = np.dtype("<f4")
MASK_DTYPE = np.dtype("u1")


class DatasetError(RuntimeError):
    """Dataset missing, unreadable or inconsistent with its manifest."""


@dataclass
class Scene:
    """One rendered bin.

    ``labels`` holds the visible instance per pixel (0 = floor); ``poses``
    one (omega, tau) row per instance; ``occluded`` flags instances with no
    visible pixel.
    """

    depth: np.ndarray
    labels: np.ndarray
    poses: np.ndarray
    occluded: np.ndarray
    floor: float = 0.0
    seed: int = -1

    @property
    def n_instances(self) -> int:
        return int(self.poses.shape[0])

    @property
    def gt_masks(self) -> List[np.ndarray]:
        return [self.labels == k for k in range(1, self.n_instances + 1)]


@dataclass
class DatasetManifest:
    """Everything needed to read and normalize a dataset."""

    class_name: str
    shape: Dict[str, Any]
    n_instances: int
    image_size: int
    input_size: int
    count: int
    floor: float
    bin_extent: float
    base_seed: int
    mean: Optional[float] = None
    std: Optional[float] = None
    variance: Optional[float] = None
    background_level: Optional[float] = None
    noise_sigma: float = 0.0
    splits: Dict[str, List[int]] = field(default_factory=dict)
    scenes: List[Dict[str, Any]] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)
    format: str = DATASET_FORMAT

    def split(self, name: str) -> List[int]:
        """Scene indices of a split; ``all`` lists every scene."""
        if name == "all":
            return list(range(self.count))
        if name not in self.splits:
            raise DatasetError(f"Unknown split {name!r}; have {sorted(self.splits)}")
        return list(self.splits[name])

    def scene_seed(self, index: int) -> int:
        return int(self.scenes[index]["seed"])


def scene_path(directory: Path, index: int, suffix: str) -> Path:
    return Path(directory) / f"scene_{index:06d}.{suffix}"


def write_scene(directory: Path, index: int, scene: Scene) -> None:
    """Write one scene's three fixed-width records."""
    scene_path(directory, index, "depth").write_bytes(
        np.ascontiguousarray(scene.depth, dtype=DEPTH_DTYPE).tobytes()
    )
    scene_path(directory, index, "mask").write_bytes(
        np.ascontiguousarray(scene.labels, dtype=MASK_DTYPE).tobytes()
    )
    scene_path(directory, index, "pose").write_bytes(
        np.ascontiguousarray(scene.poses, dtype=POSE_DTYPE).tobytes()
    )


def _read_array(path: Path, dtype: np.dtype, shape: tuple) -> np.ndarray:
    try:
        data = np.frombuffer(path.read_bytes(), dtype=dtype)
    except OSError as exc:
        raise DatasetError(f"Cannot read {path}: {exc}") from exc
    expected = int(np.prod(shape))
    if data.size != expected:
        raise DatasetError(f"{path}: expected {expected} values, found {data.size}")
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def read_scene(directory: Path, index: int, manifest: DatasetManifest) -> Scene:
    """Load one scene at native resolution."""
    size = manifest.image_size
    record = manifest.scenes[index]
    return Scene(
        depth=_read_array(scene_path(directory, index, "depth"), DEPTH_DTYPE, (size, size)),
        labels=_read_array(scene_path(directory, index, "mask"), MASK_DTYPE, (size, size)),
        poses=_read_array(
            scene_path(directory, index, "pose"), POSE_DTYPE, (manifest.n_instances, 6)
        ),
        occluded=np.asarray(record.get("occluded", [False] * manifest.n_instances), dtype=bool),
        floor=manifest.floor,
        seed=int(record["seed"]),
    )


def write_manifest(directory: Path, manifest: DatasetManifest) -> None:
    path = Path(directory) / MANIFEST_NAME
    path.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")


def read_manifest(directory: Path) -> DatasetManifest:
    """Load and check a dataset manifest.

    Raises:
        DatasetError: If the manifest is missing, malformed or of another format.
    """
    path = Path(directory) / MANIFEST_NAME
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise DatasetError(f"Cannot read dataset manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"Malformed dataset manifest {path}: {exc}") from exc
    if data.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{path}: unsupported format {data.get('format')!r}")
    try:
        return DatasetManifest(**data)
    except TypeError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
