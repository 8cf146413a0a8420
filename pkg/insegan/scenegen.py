"""Synthetic multi-instance bins: drop-and-settle rendering, normalization,
dataset building and a torch ``Dataset`` over the container.

Objects are dropped one at a time; each rests on the highest point of the
height field beneath its footprint (heightmap stacking, no dynamics). The
camera looks straight down, so depth is height above the floor and larger
values are nearer.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.transform import Rotation
from shapely.geometry import Polygon
from shapely.affinity import translate
from torch.utils.data import Dataset
from tqdm import tqdm

from .baselines import kmeans_segment
from .config import IMAGE_SIZE, DatasetConfig
from .dataset import DatasetManifest, Scene, read_manifest, read_scene, write_manifest, write_scene
from .metrics import masks_from_labels, miou
from .shapes import ShapeSpec, vertical_extent

logger = logging.getLogger(__name__)

FLOOR: float = 0.0
PLACEMENT_ATTEMPTS: int = 200


def sample_orientation(rng: np.random.Generator) -> np.ndarray:
    """Axis uniform on the sphere, angle uniform in [0, pi]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, np.pi)


def _fit_into_bin(footprint: Polygon, bin_extent: float) -> Tuple[float, float]:
    """Shift that moves the footprint's bounds inside the bin."""
    minx, miny, maxx, maxy = footprint.bounds
    dx = max(0.0, -minx) - max(0.0, maxx - bin_extent)
    dy = max(0.0, -miny) - max(0.0, maxy - bin_extent)
    return dx, dy


def settle(
    shape: ShapeSpec,
    placements: Sequence[Tuple[np.ndarray, Tuple[float, float]]],
    bin_extent: float,
    size: int,
    floor: float = FLOOR,
) -> Scene:
    """Drop instances in order at the given (omega, (x, y)) placements.

    Returns:
        Scene whose ``poses`` rows are (omega, 2x/B - 1, 2y/B - 1, 2e/B), with e
        the resting elevation of the instance centre.
    """
    pixel = bin_extent / size
    centers = (np.arange(size) + 0.5) * pixel
    height = np.full((size, size), floor, dtype=np.float64)
    labels = np.zeros((size, size), dtype=np.uint8)
    poses = np.zeros((len(placements), 6), dtype=np.float64)
    radius = shape.diameter / 2.0
    solids = shape.solids()

    for k, (omega, (cx, cy)) in enumerate(placements):
        rotation = Rotation.from_rotvec(np.asarray(omega, dtype=np.float64)).as_matrix()
        c0, c1 = np.searchsorted(centers, [cx - radius, cx + radius])
        r0, r1 = np.searchsorted(centers, [cy - radius, cy + radius])
        rows, cols = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
        rows, cols = rows.ravel(), cols.ravel()
        offsets = np.stack([centers[cols] - cx, centers[rows] - cy], axis=1)

        hit = np.zeros(len(offsets), dtype=bool)
        bottom = np.full(len(offsets), np.inf)
        top = np.full(len(offsets), -np.inf)
        for solid in solids:
            part_hit, part_bottom, part_top = vertical_extent(solid, rotation, offsets)
            bottom = np.where(part_hit, np.minimum(bottom, part_bottom), bottom)
            top = np.where(part_hit, np.maximum(top, part_top), top)
            hit |= part_hit

        elevation = floor
        if hit.any():
            under = height[rows[hit], cols[hit]]
            elevation = max(
                float((under - bottom[hit]).max()), floor - float(bottom[hit].min())
            )
            surface = elevation + top[hit]
            r_hit, c_hit = rows[hit], cols[hit]
            visible = surface > under
            height[r_hit[visible], c_hit[visible]] = surface[visible]
            labels[r_hit[visible], c_hit[visible]] = k + 1
        poses[k, :3] = omega
        poses[k, 3:] = (2 * cx / bin_extent - 1, 2 * cy / bin_extent - 1, 2 * elevation / bin_extent)

    occluded = np.array([not (labels == k + 1).any() for k in range(len(placements))])
    return Scene(
        depth=height.astype(np.float32),
        labels=labels,
        poses=poses.astype(np.float32),
        occluded=occluded,
        floor=floor,
    )


def drop_and_settle(
    shape: ShapeSpec,
    n: int,
    bin_extent: float,
    rng: np.random.Generator,
    size: int = 224,
    overlap: bool = True,
    gap: float = 0.0,
) -> Scene:
    """Drop ``n`` instances at random positions and orientations.

    With ``overlap=False`` footprints are kept ``gap`` apart (rejection
    sampling).

    Raises:
        ValueError: If n < 1, the shape cannot fit the bin, or disjoint
            placements cannot be found.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if shape.diameter > bin_extent:
        raise ValueError(
            f"{shape.kind} with diameter {shape.diameter:.3f} does not fit a bin of {bin_extent:.3f}"
        )
    placed: List[Polygon] = []
    placements = []
    for _ in range(n):
        for _attempt in range(PLACEMENT_ATTEMPTS):
            omega = sample_orientation(rng)
            center = rng.uniform(0.0, bin_extent, size=2)
            rotation = Rotation.from_rotvec(omega).as_matrix()
            footprint = shape.footprint(rotation, tuple(center))
            dx, dy = _fit_into_bin(footprint, bin_extent)
            footprint = translate(footprint, dx, dy)
            center = center + (dx, dy)
            if overlap or not any(footprint.buffer(gap).intersects(p) for p in placed):
                break
        else:
            raise ValueError(f"could not place {n} disjoint instances in the bin")
        placed.append(footprint)
        placements.append((omega, (float(center[0]), float(center[1]))))
    return settle(shape, placements, bin_extent, size)


def render_scene(
    shape: ShapeSpec, config: DatasetConfig, index: int
) -> Scene:
    """Scene ``index`` of a dataset; a pure function of base_seed + index."""
    seed = config.base_seed + index
    rng = np.random.default_rng(seed)
    scene = drop_and_settle(
        shape,
        config.n_instances,
        config.bin_scale * shape.diameter,
        rng,
        size=config.native_size,
        overlap=config.overlap,
        gap=0.05 * shape.diameter,
    )
    scene.seed = seed
    return scene


def resize_depth(depth: np.ndarray, size: int = IMAGE_SIZE) -> torch.Tensor:
    """Bilinear resize (half-pixel centres, no antialiasing) to (1, size, size)."""
    raster = torch.as_tensor(np.asarray(depth, dtype=np.float32))[None, None]
    out = F.interpolate(raster, size=(size, size), mode="bilinear", align_corners=False)
    return out[0]


def resize_labels(labels: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Nearest (pixel-centre) resize of a label raster."""
    raster = torch.as_tensor(np.asarray(labels, dtype=np.float32))[None, None]
    out = F.interpolate(raster, size=(size, size), mode="nearest-exact")
    return out[0, 0].numpy().astype(np.uint8)


def normalize_and_resize(depth: np.ndarray, manifest: DatasetManifest) -> torch.Tensor:
    """Raw height field to a normalized (1, 64, 64) network input.

    Raises:
        ValueError: If the manifest lacks normalization constants.
    """
    if manifest.mean is None or not manifest.std:
        raise ValueError("dataset manifest has no normalization constants")
    resized = resize_depth(depth, manifest.input_size)
    return (resized - manifest.mean) / manifest.std


def _render_all(shape: ShapeSpec, config: DatasetConfig, progress: bool) -> Iterable[Scene]:
    indices = range(config.count)
    if config.workers > 0:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            scenes = pool.map(render_scene, [shape] * config.count, [config] * config.count, indices)
            yield from tqdm(scenes, total=config.count, disable=not progress, desc="scenes")
    else:
        for index in tqdm(indices, disable=not progress, desc="scenes"):
            yield render_scene(shape, config, index)


def select_hard(
    images: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    candidates: Sequence[int],
    n_instances: int,
    count: int,
    floor: float = FLOOR,
) -> List[int]:
    """The ``count`` candidates on which K-Means scores the lowest mIoU."""
    scored = []
    for index in candidates:
        pred = kmeans_segment(images[index], n_instances, floor, rng=index)
        score = miou(pred, masks_from_labels(labels[index], n_instances))
        scored.append((score, index))
    scored.sort()
    return sorted(index for _, index in scored[:count])


def build_dataset(config: DatasetConfig, out_dir: Path, progress: bool = True) -> DatasetManifest:
    """Render, split, normalize and write a dataset.

    Scene ``i`` uses seed ``base_seed + i``, so the same config always
    yields the same bytes. Normalization constants come from the train
    split only.
    """
    shape = ShapeSpec(config.shape, tuple(config.dims))
    val_count, test_count = config.split_sizes()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logger.info("Building %d %s scenes (n=%d) in %s", config.count, shape.kind,
                config.n_instances, out_dir)

    small_depth: List[np.ndarray] = []
    small_labels: List[np.ndarray] = []
    records = []
    for index, scene in enumerate(_render_all(shape, config, progress)):
        write_scene(out_dir, index, scene)
        small_depth.append(resize_depth(scene.depth)[0].numpy())
        small_labels.append(resize_labels(scene.labels))
        records.append({"index": index, "seed": scene.seed,
                        "occluded": [bool(v) for v in scene.occluded]})
    occluded = sum(any(r["occluded"]) for r in records)
    if occluded:
        logger.info("%d scenes contain a fully occluded instance", occluded)

    order = np.random.default_rng(config.base_seed).permutation(config.count)
    val = sorted(int(i) for i in order[:val_count])
    rest = [int(i) for i in order[val_count:]]
    if config.hard_test:
        test = select_hard(small_depth, small_labels, sorted(rest), config.n_instances, test_count)
    else:
        test = sorted(rest[:test_count])
    held_out = set(val) | set(test)
    train = [i for i in range(config.count) if i not in held_out]

    pixels = np.stack([small_depth[i] for i in train]).astype(np.float64) if train else None
    mean = float(pixels.mean()) if pixels is not None else 0.0
    variance = float(pixels.var()) if pixels is not None else 1.0
    std = float(np.sqrt(variance)) or 1.0

    manifest = DatasetManifest(
        class_name=shape.kind,
        shape={"kind": shape.kind, "dims": list(shape.dims)},
        n_instances=config.n_instances,
        image_size=config.native_size,
        input_size=IMAGE_SIZE,
        count=config.count,
        floor=FLOOR,
        bin_extent=config.bin_scale * shape.diameter,
        base_seed=config.base_seed,
        mean=mean,
        std=std,
        variance=variance,
        background_level=(FLOOR - mean) / std,
        noise_sigma=config.noise_sigma,
        splits={"train": train, "val": val, "test": test},
        scenes=records,
        config=config.to_dict(),
    )
    write_manifest(out_dir, manifest)
    logger.info("Wrote dataset: train=%d val=%d test=%d mean=%.4f std=%.4f",
                len(train), len(val), len(test), mean, std)
    return manifest


class DepthSceneDataset(Dataset):
    """Normalized 64x64 inputs and resized GT labels of one split.

    Items are ``(image (1, 64, 64), labels (64, 64), scene index)``. Optional
    Gaussian noise N(0, sigma) is added after normalization, seeded by scene
    and ``epoch``. Training bumps ``epoch`` so the noise is redrawn every pass;
    evaluation keeps epoch 0 and sees one fixed draw per scene.
    """

    def __init__(
        self,
        directory: Path,
        split: str = "train",
        subset: Optional[int] = None,
        noise_sigma: Optional[float] = None,
    ) -> None:
        self.directory = Path(directory)
        self.manifest = read_manifest(self.directory)
        self.indices = self.manifest.split(split)
        if subset is not None:
            self.indices = self.indices[:subset]
        self.noise_sigma = self.manifest.noise_sigma if noise_sigma is None else noise_sigma
        self.epoch = 0

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, item: int) -> Tuple[torch.Tensor, torch.Tensor, int]:
        index = self.indices[item]
        scene = read_scene(self.directory, index, self.manifest)
        image = normalize_and_resize(scene.depth, self.manifest)
        if self.noise_sigma > 0:
            rng = np.random.default_rng([scene.seed, 1, self.epoch])
            noise = rng.normal(0.0, self.noise_sigma, size=image.shape).astype(np.float32)
            image = image + torch.from_numpy(noise)
        labels = torch.from_numpy(resize_labels(scene.labels, self.manifest.input_size).astype(np.int64))
        return image.float(), labels, index
