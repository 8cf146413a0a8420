"""Adversarial training of generator, discriminator and encoder.

One step updates the three networks in the order D, G, E:

    D  on L_D with generated images detached
    G  on the non-saturating L_G, discriminator frozen
    E  on L_E = L_a + λ_i L_i + λ_p L_p, generator frozen

The generator's gradients are zeroed (not freed) after its own update, so
they read exactly zero once the encoder step is done.
"""

import contextlib
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader
from tqdm import tqdm

from .checkpoint import LoadedCheckpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig, save_config
from .dataset import DatasetError
from .inference import InSeGANModel, evaluate_dataset
from .losses import (
    EncoderLossWeights,
    adversarial_losses,
    alignment_loss,
    encoder_loss,
    intermediate_loss,
    pose_loss,
)
from .nets import Networks, build_generator, build_networks
from .scenegen import DepthSceneDataset

logger = logging.getLogger(__name__)

__all__ = [
    "METRIC_COLUMNS",
    "TrainState",
    "TrainingDivergedError",
    "augment",
    "build_generator",
    "discriminator_step",
    "encoder_step",
    "fit",
    "frozen",
    "generator_step",
    "init_state",
    "make_optimizers",
    "sample_latents",
    "save_state",
    "state_from_checkpoint",
    "train_step",
]

METRIC_COLUMNS = ("epoch", "loss_d", "loss_g", "loss_e_align", "loss_e_inter", "loss_e_pose",
                  "wall_time")
MAX_RESETS: int = 10


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite."""

    def __init__(self, substep: str, losses: Dict[str, float], grad_norms: Dict[str, float]) -> None:
        self.substep = substep
        self.losses = losses
        self.grad_norms = grad_norms
        loss_text = ", ".join(f"{k}={v:.4g}" for k, v in losses.items())
        norm_text = ", ".join(f"{k}={v:.4g}" for k, v in grad_norms.items())
        super().__init__(f"non-finite loss in {substep} step ({loss_text}; grad norms {norm_text})")


@dataclass
class TrainState:
    networks: Networks
    optimizers: Dict[str, torch.optim.Optimizer]
    config: TrainConfig
    latent_rng: torch.Generator
    np_rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    resets: int = 0
    history: list = field(default_factory=list)

    @property
    def device(self) -> torch.device:
        return next(self.networks.generator.parameters()).device


def make_optimizers(networks: Networks, config: TrainConfig) -> Dict[str, torch.optim.Optimizer]:
    """One Adam per network, sharing (lr, beta1, beta2)."""
    return {
        name: torch.optim.Adam(module.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
        for name, module in networks.named_modules()
    }


def init_state(config: TrainConfig, networks: Optional[Networks] = None) -> TrainState:
    """Seeded networks, optimizers and RNGs for a fresh run."""
    config.validate()
    torch.manual_seed(config.seed)
    if config.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    if networks is None:
        networks = build_networks(config.variant, config.nets, config.n_instances, config.latent_dim)
    networks.to(config.device)
    latent_rng = torch.Generator(device="cpu")
    latent_rng.manual_seed(config.seed)
    return TrainState(
        networks=networks,
        optimizers=make_optimizers(networks, config),
        config=config,
        latent_rng=latent_rng,
        np_rng=np.random.default_rng(config.seed),
    )


def state_from_checkpoint(loaded: LoadedCheckpoint) -> TrainState:
    """Resume: networks, optimizer moments, counters and RNG streams."""
    state = init_state(loaded.config, loaded.networks)
    for name, optimizer in state.optimizers.items():
        if name in loaded.optimizer_states:
            optimizer.load_state_dict(loaded.optimizer_states[name])
    if loaded.torch_rng_state is not None:
        state.latent_rng.set_state(loaded.torch_rng_state)
    if loaded.numpy_rng_state is not None:
        state.np_rng.bit_generator.state = loaded.numpy_rng_state
    state.epoch = loaded.epoch
    state.step = loaded.step
    return state


def save_state(path: Path, state: TrainState) -> str:
    return save_checkpoint(
        path,
        state.networks,
        state.config,
        state.epoch,
        state.step,
        optimizers=state.optimizers,
        torch_rng=state.latent_rng,
        numpy_rng=state.np_rng,
    )


@contextlib.contextmanager
def frozen(*modules: nn.Module) -> Iterator[None]:
    """Disable parameter gradients inside the block, restoring flags after."""
    saved = [(p, p.requires_grad) for m in modules for p in m.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def sample_latents(
    batch_size: int, n: int, latent_dim: int, rng: torch.Generator, device="cpu"
) -> torch.Tensor:
    """Latent sets (B, n, d) with i.i.d. N(0, 1) entries."""
    return torch.randn(batch_size, n, latent_dim, generator=rng).to(device)


def augment(x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Flip each image horizontally and vertically, each with probability 0.5.

    Accepts (..., H, W); the flips of every leading image are independent.
    """
    if x.dim() < 2:
        raise ValueError(f"expected an image, got shape {tuple(x.shape)}")
    if x.dim() <= 3:
        flips = rng.random(2) < 0.5
        if flips[0]:
            x = torch.flip(x, dims=(-1,))
        if flips[1]:
            x = torch.flip(x, dims=(-2,))
        return x
    out = x.clone()
    for i in range(x.shape[0]):
        out[i] = augment(x[i], rng)
    return out


def _grad_norms(networks: Networks) -> Dict[str, float]:
    norms = {}
    for name, module in networks.named_modules():
        grads = [p.grad.detach().flatten() for p in module.parameters() if p.grad is not None]
        norms[name] = float(torch.cat(grads).norm()) if grads else 0.0
    return norms


def _check_finite(substep: str, losses: Dict[str, torch.Tensor], state: TrainState) -> None:
    values = {k: float(v.detach()) for k, v in losses.items()}
    if all(np.isfinite(v) for v in values.values()):
        return
    error = TrainingDivergedError(substep, values, _grad_norms(state.networks))
    logger.error("Step %d: %s", state.step, error)
    raise error


def discriminator_step(
    real: torch.Tensor, Z: torch.Tensor, state: TrainState
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Update D on L_D; returns the loss and the (detached) real scores."""
    G, D = state.networks.generator, state.networks.discriminator
    optimizer = state.optimizers["discriminator"]
    with torch.no_grad():
        fake, _ = G(Z)
    optimizer.zero_grad(set_to_none=True)
    real_scores = D(real)
    loss_d, _ = adversarial_losses(real_scores, D(fake))
    _check_finite("discriminator", {"loss_d": loss_d}, state)
    loss_d.backward()
    optimizer.step()
    return loss_d.detach(), real_scores.detach()


def generator_step(real_scores: torch.Tensor, Z: torch.Tensor, state: TrainState) -> torch.Tensor:
    """Update G (template and pose decoder included) on L_G with D frozen."""
    G, D = state.networks.generator, state.networks.discriminator
    optimizer = state.optimizers["generator"]
    optimizer.zero_grad(set_to_none=True)
    with frozen(D):
        fake, _ = G(Z)
        _, loss_g = adversarial_losses(real_scores, D(fake))
    _check_finite("generator", {"loss_g": loss_g}, state)
    loss_g.backward()
    optimizer.step()
    optimizer.zero_grad(set_to_none=False)
    return loss_g.detach()


def encoder_step(Z: torch.Tensor, state: TrainState) -> Dict[str, torch.Tensor]:
    """Update E on L_E with G and D frozen; gradients reach E only."""
    config = state.config
    G, D, E = state.networks.generator, state.networks.discriminator, state.networks.encoder
    optimizer = state.optimizers["encoder"]
    weights = EncoderLossWeights(config.lambda_inter, config.lambda_pose,
                                 config.use_inter, config.use_pose)
    optimizer.zero_grad(set_to_none=True)
    with frozen(G, D):
        with torch.no_grad():
            x_gen, fbar = G(Z)
        Zhat, derendered = E(x_gen)
        loss_align = alignment_loss(Z, Zhat, config.aligner)
        loss_inter = intermediate_loss(fbar, derendered)
        x_regen, _ = G(Zhat)
        loss_pose = pose_loss(x_gen, x_regen, config.pose_norm)
        loss_e = encoder_loss(loss_align, loss_inter, loss_pose, weights)
    losses = {"loss_e_align": loss_align, "loss_e_inter": loss_inter, "loss_e_pose": loss_pose}
    _check_finite("encoder", losses, state)
    loss_e.backward()
    optimizer.step()
    losses["loss_e"] = loss_e
    return {key: value.detach() for key, value in losses.items()}


def train_step(batch: torch.Tensor, state: TrainState) -> Dict[str, float]:
    """One D/G/E update on a batch of real (B, 1, 64, 64) images.

    Raises:
        TrainingDivergedError: If any loss is non-finite; the failing
            sub-step's optimizer is not stepped.
    """
    config = state.config
    real = batch.to(state.device)
    Z = sample_latents(real.shape[0], config.n_instances, config.latent_dim,
                       state.latent_rng, state.device)
    loss_d, real_scores = discriminator_step(real, Z, state)
    loss_g = generator_step(real_scores, Z, state)
    encoder_losses = encoder_step(Z, state)
    state.step += 1
    losses = {"loss_d": float(loss_d), "loss_g": float(loss_g)}
    losses.update({key: float(value) for key, value in encoder_losses.items()})
    return losses


def _append_row(path: Path, columns, row: Dict[str, object]) -> None:
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(columns))
        if new:
            writer.writeheader()
        writer.writerow({k: row[k] for k in columns})


def _validate(state: TrainState, dataset_dir: Path, checkpoint_id: Optional[str]) -> Optional[float]:
    model = InSeGANModel.from_networks(state.networks, state.config, checkpoint_id=checkpoint_id)
    try:
        report = evaluate_dataset(dataset_dir, "val", model, progress=False,
                                  noise_sigma=state.config.noise_sigma)
    except ValueError as exc:
        logger.warning("Skipping validation at epoch %d: %s", state.epoch, exc)
        return None
    logger.info("Epoch %d validation mIoU %.4f over %d scenes", state.epoch, report.mean,
                len(report.per_scene))
    return report.mean


def fit(
    dataset_dir: Path,
    config: TrainConfig,
    out_dir: Path,
    resume: Optional[Path] = None,
    progress: bool = True,
) -> Iterator[Path]:
    """Train on the dataset's train split, yielding each checkpoint path.

    Writes ``config.json``, ``metrics.csv`` (one row per epoch) and
    ``validation.csv`` into ``out_dir``; checkpoints go to
    ``out_dir/checkpoints``. On divergence an ``emergency.ckpt`` is saved
    and the error re-raised, unless ``auto_reset`` is set, in which case
    the optimizers are rebuilt and training goes on.

    Raises:
        DatasetError: If the dataset cannot be read or its train split is empty.
        TrainingDivergedError: On a non-finite loss without auto-reset.
    """
    dataset_dir = Path(dataset_dir)
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        loaded = load_checkpoint(resume, config.device)
        state = state_from_checkpoint(loaded)
        state.config.epochs = config.epochs
        logger.info("Resumed from %s at epoch %d", resume, state.epoch)
    else:
        state = init_state(config)
    config = state.config
    save_config(config, out_dir / "config.json")

    dataset = DepthSceneDataset(dataset_dir, "train", subset=config.train_subset,
                                noise_sigma=config.noise_sigma)
    if len(dataset) == 0:
        raise DatasetError(f"{dataset_dir}: train split is empty")
    if dataset.manifest.n_instances != config.n_instances:
        logger.info("Training with n=%d on scenes of %d instances",
                    config.n_instances, dataset.manifest.n_instances)

    start = time.monotonic()
    checkpoint_id: Optional[str] = None
    while state.epoch < config.epochs:
        dataset.epoch = state.epoch
        order = torch.Generator()
        order.manual_seed(config.seed * 1_000_003 + state.epoch)
        loader = DataLoader(dataset, batch_size=min(config.batch_size, len(dataset)),
                            shuffle=True, generator=order, num_workers=config.num_workers)
        totals: Dict[str, float] = {}
        batches = 0
        for images, _, _ in tqdm(loader, disable=not progress, desc=f"epoch {state.epoch + 1}",
                                 leave=False):
            try:
                losses = train_step(augment(images, state.np_rng), state)
            except TrainingDivergedError:
                if config.auto_reset and state.resets < MAX_RESETS:
                    state.resets += 1
                    state.optimizers = make_optimizers(state.networks, config)
                    logger.warning("Optimizers reset after divergence (%d/%d)", state.resets,
                                   MAX_RESETS)
                    continue
                path = ckpt_dir / "emergency.ckpt"
                save_state(path, state)
                logger.error("Saved emergency checkpoint %s", path)
                raise
            for key, value in losses.items():
                totals[key] = totals.get(key, 0.0) + value
            batches += 1

        state.epoch += 1
        row = {key: totals.get(key, float("nan")) / max(batches, 1) for key in METRIC_COLUMNS[1:-1]}
        row.update(epoch=state.epoch, wall_time=round(time.monotonic() - start, 3))
        state.history.append(row)
        _append_row(out_dir / "metrics.csv", METRIC_COLUMNS, row)
        logger.info(
            "Epoch %d: L_D=%.4f L_G=%.4f L_a=%.4f L_i=%.4f L_p=%.4f (%.1fs)",
            state.epoch, row["loss_d"], row["loss_g"], row["loss_e_align"],
            row["loss_e_inter"], row["loss_e_pose"], row["wall_time"],
        )

        last = state.epoch == config.epochs
        if state.epoch % config.checkpoint_every == 0 or last:
            path = ckpt_dir / f"epoch_{state.epoch:04d}.ckpt"
            checkpoint_id = save_state(path, state)
            yield path
        if state.epoch % config.validate_every == 0 or last:
            score = _validate(state, dataset_dir, checkpoint_id)
            if score is not None:
                _append_row(out_dir / "validation.csv", ("epoch", "miou"),
                            {"epoch": state.epoch, "miou": score})
