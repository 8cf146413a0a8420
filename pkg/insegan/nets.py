"""Generator, discriminator and instance pose encoder.

Shape chain of the 3D generator for one latent vector z (d = 128):

    z -> pose (6) -> SE(3) -> warped template (C, 16, 16, 16)
      -> folded (C*16, 16, 16) -> instance features (F, 16, 16)

Instance features of a latent set are mean pooled and rendered to a
(1, 64, 64) depth image. Nothing in the generator is stochastic.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from torch import nn

from .config import (
    FEATURE_SIZE,
    IMAGE_SIZE,
    LATENT_DIM,
    TEMPLATE_SIZE,
    VARIANTS,
    NetConfig,
)
from .geometry import affine_grid, pose_to_transform, trilinear_sample

logger = logging.getLogger(__name__)

LEAK: float = 0.2


def init_weights(module: nn.Module) -> None:
    """N(0, 0.02) for conv/linear weights, zero biases."""
    if isinstance(module, (nn.Conv2d, nn.Conv3d, nn.Linear)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def _conv_block(in_ch: int, out_ch: int, norm: bool = True) -> nn.Sequential:
    """Stride-2 4x4 convolution halving the resolution."""
    layers = [nn.Conv2d(in_ch, out_ch, 4, stride=2, padding=1, bias=not norm)]
    if norm:
        layers.append(nn.InstanceNorm2d(out_ch, affine=True))
    layers.append(nn.LeakyReLU(LEAK))
    return nn.Sequential(*layers)


def _up_block(in_ch: int, out_ch: int) -> nn.Sequential:
    """Nearest x2 upsampling followed by a 3x3 convolution."""
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
        nn.InstanceNorm2d(out_ch, affine=True),
        nn.LeakyReLU(LEAK),
    )


def _check_latent(z: torch.Tensor, latent_dim: int) -> None:
    if z.shape[-1] != latent_dim:
        raise ValueError(f"latent vectors must have width {latent_dim}, got {tuple(z.shape)}")


class PoseDecoder(nn.Module):
    """G_p: latent vector to (omega, tau); tau squashed into (-1, 1)."""

    def __init__(self, latent_dim: int = LATENT_DIM) -> None:
        super().__init__()
        self.latent_dim = latent_dim
        self.mlp = nn.Sequential(
            nn.Linear(latent_dim, 128),
            nn.LeakyReLU(LEAK),
            nn.Linear(128, 64),
            nn.LeakyReLU(LEAK),
            nn.Linear(64, 6),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        _check_latent(z, self.latent_dim)
        out = self.mlp(z)
        return torch.cat([out[..., :3], torch.tanh(out[..., 3:])], dim=-1)


class ResBlock3d(nn.Module):
    """Upsampling 3D residual block with instance normalization."""

    def __init__(self, in_ch: int, out_ch: int) -> None:
        super().__init__()
        self.main = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv3d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.InstanceNorm3d(out_ch, affine=True),
            nn.LeakyReLU(LEAK),
            nn.Conv3d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.InstanceNorm3d(out_ch, affine=True),
        )
        self.skip = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv3d(in_ch, out_ch, 1),
        )
        self.act = nn.LeakyReLU(LEAK)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.main(x) + self.skip(x))


class TemplateDecoder(nn.Module):
    """Upsamples the 4³ implicit template to a 16³ feature volume."""

    def __init__(self, template_channels: int, volume_channels: int) -> None:
        super().__init__()
        mid = max(volume_channels, template_channels // 2)
        self.blocks = nn.Sequential(
            ResBlock3d(template_channels, mid),
            ResBlock3d(mid, volume_channels),
        )

    def forward(self, template: torch.Tensor) -> torch.Tensor:
        return self.blocks(template)


class Projector(nn.Module):
    """G_s: folded (C*D, H, W) volume to a 2D instance feature map."""

    def __init__(self, in_ch: int, feature_channels: int) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, feature_channels, 3, padding=1, bias=False),
            nn.InstanceNorm2d(feature_channels, affine=True),
            nn.LeakyReLU(LEAK),
            nn.Conv2d(feature_channels, feature_channels, 3, padding=1, bias=False),
            nn.InstanceNorm2d(feature_channels, affine=True),
            nn.LeakyReLU(LEAK),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class Renderer(nn.Module):
    """G_r: (F, 16, 16) feature map to a (1, 64, 64) depth image."""

    def __init__(self, feature_channels: int, renderer_channels: int) -> None:
        super().__init__()
        half = max(1, renderer_channels // 2)
        self.net = nn.Sequential(
            _up_block(feature_channels, renderer_channels),
            _up_block(renderer_channels, half),
            nn.Conv2d(half, 1, 3, padding=1),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features)


def pool_instances(features: torch.Tensor) -> torch.Tensor:
    """Mean over the instance axis (dim 1) of (B, n, C, H, W).

    Values are sorted along the instance axis before summing, which makes
    the result bitwise independent of instance order.
    """
    if features.shape[1] < 1:
        raise ValueError("cannot pool an empty latent set")
    return torch.sort(features, dim=1).values.sum(dim=1) / features.shape[1]


class InstanceGenerator(nn.Module):
    """Shared pooling and rendering of the generator variants.

    Subclasses implement ``instance_features`` mapping latent vectors
    (..., d) to feature maps (..., F, 16, 16).
    """

    variant: str = ""

    def __init__(self, nets: NetConfig, latent_dim: int = LATENT_DIM) -> None:
        super().__init__()
        self.latent_dim = latent_dim
        self.feature_channels = nets.feature_channels
        self.renderer = Renderer(nets.feature_channels, nets.renderer_channels)

    def instance_features(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def render(self, features: torch.Tensor) -> torch.Tensor:
        lead = features.shape[:-3]
        out = self.renderer(features.reshape(-1, *features.shape[-3:]))
        return out.reshape(*lead, 1, IMAGE_SIZE, IMAGE_SIZE)

    def forward(self, Z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Generate depth images from latent sets.

        Args:
            Z: (n, d) or (B, n, d).

        Returns:
            ``(x, fbar)``: images (B, 1, 64, 64) and pooled features
            (B, F, 16, 16); the batch axis is dropped for unbatched input.
        """
        single = Z.dim() == 2
        if single:
            Z = Z.unsqueeze(0)
        if Z.dim() != 3 or Z.shape[1] < 1:
            raise ValueError(f"Z must be (B, n, d) with n >= 1, got {tuple(Z.shape)}")
        features = self.instance_features(Z)
        fbar = pool_instances(features)
        x = self.render(fbar)
        if single:
            return x[0], fbar[0]
        return x, fbar

    def generate_single(self, z: torch.Tensor) -> torch.Tensor:
        """Render each latent vector (..., d) alone, without pooling."""
        return self.render(self.instance_features(z))


class Generator3D(InstanceGenerator):
    """Pose decoder, learned implicit template, STN warp, projection, render."""

    variant = "3d"

    def __init__(self, nets: NetConfig, latent_dim: int = LATENT_DIM) -> None:
        super().__init__(nets, latent_dim)
        self.volume_channels = nets.volume_channels
        self.pose_decoder = PoseDecoder(latent_dim)
        self.template = nn.Parameter(
            torch.empty(1, nets.template_channels, TEMPLATE_SIZE, TEMPLATE_SIZE, TEMPLATE_SIZE)
        )
        self.template_decoder = TemplateDecoder(nets.template_channels, nets.volume_channels)
        self.projector = Projector(nets.volume_channels * FEATURE_SIZE, nets.feature_channels)
        self.apply(init_weights)
        nn.init.normal_(self.template, 0.0, 1.0)

    def decode_template(self) -> torch.Tensor:
        """Decoded template volume (C, 16, 16, 16)."""
        return self.template_decoder(self.template)[0]

    def warp(self, volume: torch.Tensor, poses: torch.Tensor) -> torch.Tensor:
        """Move the decoded template into each pose; poses (N, 6)."""
        transforms = pose_to_transform(poses)
        grid = affine_grid(transforms, volume.shape[-3:])
        expanded = volume.unsqueeze(0).expand(poses.shape[0], *volume.shape)
        return trilinear_sample(expanded, grid)

    def fold(self, warped: torch.Tensor) -> torch.Tensor:
        """(N, C, D, H, W) -> (N, C*D, H, W)."""
        n, c, d, h, w = warped.shape
        return warped.reshape(n, c * d, h, w)

    def instance_features(self, z: torch.Tensor) -> torch.Tensor:
        _check_latent(z, self.latent_dim)
        lead = z.shape[:-1]
        poses = self.pose_decoder(z.reshape(-1, self.latent_dim))
        warped = self.warp(self.decode_template(), poses)
        features = self.projector(self.fold(warped))
        return features.reshape(*lead, self.feature_channels, FEATURE_SIZE, FEATURE_SIZE)


class Generator2D(InstanceGenerator):
    """Ablation generator: z decoded to a feature map by 2D convolutions only."""

    variant = "2d"

    def __init__(self, nets: NetConfig, latent_dim: int = LATENT_DIM) -> None:
        super().__init__(nets, latent_dim)
        self.seed_channels = nets.feature_channels * 2
        self.mlp = nn.Sequential(
            nn.Linear(latent_dim, self.seed_channels * 4 * 4),
            nn.LeakyReLU(LEAK),
        )
        self.decoder = nn.Sequential(
            _up_block(self.seed_channels, nets.feature_channels),
            _up_block(nets.feature_channels, nets.feature_channels),
        )
        self.apply(init_weights)

    def instance_features(self, z: torch.Tensor) -> torch.Tensor:
        _check_latent(z, self.latent_dim)
        lead = z.shape[:-1]
        seed = self.mlp(z.reshape(-1, self.latent_dim)).view(-1, self.seed_channels, 4, 4)
        features = self.decoder(seed)
        return features.reshape(*lead, self.feature_channels, FEATURE_SIZE, FEATURE_SIZE)


class Discriminator(nn.Module):
    """Depth image to a realness score in [0, 1]."""

    def __init__(self, nets: NetConfig) -> None:
        super().__init__()
        b = nets.base_channels
        self.trunk = nn.Sequential(
            _conv_block(1, b, norm=False),
            _conv_block(b, 2 * b),
            _conv_block(2 * b, 4 * b),
            _conv_block(4 * b, 8 * b),
        )
        self.head = nn.Conv2d(8 * b, 1, 4)
        self.apply(init_weights)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1:] != (1, IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"expected images (B, 1, 64, 64), got {tuple(x.shape)}")
        return torch.sigmoid(self.head(self.trunk(x))).view(-1)


class Encoder(nn.Module):
    """Derenderer plus pose head: depth image to n latent vectors.

    The derenderer inverts G_r down to a (F, 16, 16) map; the pose head
    inverts G_s from that map to the latent set.
    """

    def __init__(self, nets: NetConfig, n_instances: int, latent_dim: int = LATENT_DIM) -> None:
        super().__init__()
        b = nets.base_channels
        self.n_instances = n_instances
        self.latent_dim = latent_dim
        self.derenderer = nn.Sequential(
            _conv_block(1, b, norm=False),
            _conv_block(b, 2 * b),
            nn.Conv2d(2 * b, nets.feature_channels, 1),
        )
        self.pose_head = nn.Sequential(
            _conv_block(nets.feature_channels, 4 * b),
            _conv_block(4 * b, 8 * b),
            nn.Flatten(),
            nn.Linear(8 * b * 4 * 4, n_instances * latent_dim),
        )
        self.apply(init_weights)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if x.dim() != 4 or x.shape[1:] != (1, IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"expected images (B, 1, 64, 64), got {tuple(x.shape)}")
        derendered = self.derenderer(x)
        Zhat = self.pose_head(derendered).view(-1, self.n_instances, self.latent_dim)
        return Zhat, derendered


@dataclass
class Networks:
    """The three trained networks of one model."""

    generator: InstanceGenerator
    discriminator: Discriminator
    encoder: Encoder

    def to(self, device: str) -> "Networks":
        self.generator.to(device)
        self.discriminator.to(device)
        self.encoder.to(device)
        return self

    def named_modules(self) -> Tuple[Tuple[str, nn.Module], ...]:
        return (
            ("generator", self.generator),
            ("discriminator", self.discriminator),
            ("encoder", self.encoder),
        )


def build_generator(
    variant: str, nets: Optional[NetConfig] = None, latent_dim: int = LATENT_DIM
) -> InstanceGenerator:
    """Generator for ``variant``: ``3d`` (template + STN) or ``2d``.

    Raises:
        ValueError: On an unknown variant.
    """
    if nets is None:
        nets = NetConfig()
    if variant == "3d":
        return Generator3D(nets, latent_dim)
    if variant == "2d":
        return Generator2D(nets, latent_dim)
    raise ValueError(f"Unknown generator variant: {variant!r} (choose from {VARIANTS})")


def build_networks(
    variant: str, nets: NetConfig, n_instances: int, latent_dim: int = LATENT_DIM
) -> Networks:
    """Fresh generator, discriminator and encoder."""
    return Networks(
        generator=build_generator(variant, nets, latent_dim),
        discriminator=Discriminator(nets),
        encoder=Encoder(nets, n_instances, latent_dim),
    )
