"""Constants and configuration dataclasses for InSeGAN."""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar

# Shape contract
LATENT_DIM: int = 128
IMAGE_SIZE: int = 64
NATIVE_SIZE: int = 224
FEATURE_SIZE: int = 16
TEMPLATE_SIZE: int = 4
TEMPLATE_CHANNELS: int = 64
VOLUME_CHANNELS: int = 16
DEFAULT_INSTANCES: int = 5

# Alignment
IPOT_BETA: float = 1.0
IPOT_ITERS: int = 50
IPOT_INNER: int = 1
SCORE_EPS: float = 1e-7

# Inference
THRESHOLD_OFFSET: float = 0.05
MIN_AREA: int = 8

# On-disk formats
CHECKPOINT_FORMAT: str = "insegan-ckpt/1"
DATASET_FORMAT: str = "insegan-dataset/1"

ALIGNERS: Tuple[str, ...] = ("ot", "hungarian", "greedy")
VARIANTS: Tuple[str, ...] = ("3d", "2d")
POSE_NORMS: Tuple[str, ...] = ("l1", "l2")
SHAPE_KINDS: Tuple[str, ...] = ("box", "cylinder", "cone", "l-block", "t-block")

# Loss ablations: code -> (use_inter, use_pose)
LOSS_ABLATIONS: Dict[str, Tuple[bool, bool]] = {
    "a": (False, False),
    "ai": (True, False),
    "ap": (False, True),
    "aip": (True, True),
}

C = TypeVar("C")


@dataclass
class NetConfig:
    """Channel widths of the three networks."""

    feature_channels: int = 128
    base_channels: int = 64
    template_channels: int = TEMPLATE_CHANNELS
    volume_channels: int = VOLUME_CHANNELS
    renderer_channels: int = 64

    @classmethod
    def reduced(cls) -> "NetConfig":
        """Width-reduced preset used for desk-scale runs and tests."""
        return cls(
            feature_channels=32,
            base_channels=16,
            template_channels=16,
            volume_channels=8,
            renderer_channels=16,
        )


@dataclass
class TrainConfig:
    """Everything that defines a training run."""

    n_instances: int = DEFAULT_INSTANCES
    latent_dim: int = LATENT_DIM
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.99
    batch_size: int = 128
    epochs: int = 1000
    aligner: str = "ot"
    use_inter: bool = True
    use_pose: bool = True
    lambda_inter: float = 1.0
    lambda_pose: float = 1.0
    pose_norm: str = "l1"
    variant: str = "3d"
    seed: int = 0
    device: str = "cpu"
    deterministic: bool = True
    checkpoint_every: int = 10
    validate_every: int = 10
    auto_reset: bool = False
    train_subset: Optional[int] = None
    noise_sigma: Optional[float] = None
    num_workers: int = 0
    nets: NetConfig = field(default_factory=NetConfig)

    def validate(self) -> "TrainConfig":
        """Reject nonsensical values.

        Raises:
            ValueError: On the first invalid field.
        """
        for name in ("n_instances", "latent_dim", "batch_size", "epochs",
                     "checkpoint_every", "validate_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"Adam betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.lambda_inter < 0 or self.lambda_pose < 0:
            raise ValueError("loss weights must be non-negative")
        if self.aligner not in ALIGNERS:
            raise ValueError(f"Unknown aligner: {self.aligner!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"Unknown generator variant: {self.variant!r}")
        if self.pose_norm not in POSE_NORMS:
            raise ValueError(f"Unknown pose norm: {self.pose_norm!r}")
        if self.train_subset is not None and self.train_subset < 1:
            raise ValueError(f"train_subset must be >= 1, got {self.train_subset}")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.num_workers < 0:
            raise ValueError("num_workers must be >= 0")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        data = dict(data)
        nets = data.pop("nets", None)
        config = _from_dict(cls, data)
        if nets is not None:
            config.nets = _from_dict(NetConfig, nets)
        return config


@dataclass
class DatasetConfig:
    """Parameters of a synthetic bin dataset."""

    shape: str = "box"
    dims: Tuple[float, float, float] = (1.0, 0.6, 0.4)
    n_instances: int = DEFAULT_INSTANCES
    count: int = 1000
    bin_scale: float = 4.0
    native_size: int = NATIVE_SIZE
    base_seed: int = 0
    val_count: Optional[int] = None
    test_count: Optional[int] = None
    hard_test: bool = False
    noise_sigma: float = 0.0
    overlap: bool = True
    workers: int = 0

    def split_sizes(self) -> Tuple[int, int]:
        """Validation and test counts, defaulting to min(100, count // 10)."""
        default = min(100, self.count // 10)
        val = default if self.val_count is None else self.val_count
        test = default if self.test_count is None else self.test_count
        if val < 0 or test < 0 or val + test > self.count:
            raise ValueError(
                f"split sizes val={val} test={test} do not fit count={self.count}"
            )
        return val, test

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetConfig":
        config = _from_dict(cls, data)
        config.dims = tuple(float(v) for v in config.dims)
        return config


def _from_dict(cls: Type[C], data: Dict[str, Any]) -> C:
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"Unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**data)


def save_config(config: Any, path: Path) -> None:
    """Write a config dataclass as sorted JSON."""
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_train_config(path: Path) -> TrainConfig:
    """Read a TrainConfig JSON file."""
    data = json.loads(Path(path).read_text())
    return TrainConfig.from_dict(data).validate()
