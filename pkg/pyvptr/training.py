"""
The epoch loop shared by both training stages.

Batches come from a seeded `torch.Generator`, so a run is reproducible
from its seed (bit-exact with `torch.set_num_threads(1)`). A loss that is
not finite stops the run with `DivergenceError`.
"""

from dataclasses import dataclass

from loguru import logger
import torch

from pyvptr.core import ConfigError, DivergenceError
from pyvptr.evalsuite import augment_flips


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    lambda2: float = 0.1
    alpha: float = 1.0
    temperature: float = 1.0
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs and batch_size must be >= 1, got {self.epochs} and {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be > 0, got {self.clip_norm}")


def batches(clips, batch_size, generator, augment=False):
    """Shuffled mini-batches of `clips` `[M, T, C, H, W]`, optionally flipped per clip."""
    order = torch.randperm(clips.shape[0], generator=generator)
    for start in range(0, clips.shape[0], batch_size):
        batch = clips[order[start : start + batch_size]]
        if augment:
            batch = torch.stack([augment_flips(clip, generator) for clip in batch])
        yield batch


def fit(step, parameters, optimizer, clips, epochs, batch_size, seed=0, augment=False, clip_norm=None, stage="train"):
    """Run `epochs` passes of `step(batch) -> (objective, logged)` over `clips`.

    Returns the history as a list of per-epoch dicts with the mean
    objective, the mean element-normalised loss and the best of the
    latter so far.
    """
    parameters = [p for p in parameters if p.requires_grad]
    generator = torch.Generator().manual_seed(seed)
    history = []
    best = float("inf")
    for epoch in range(1, epochs + 1):
        totals, logged = [], []
        for index, batch in enumerate(batches(clips, batch_size, generator, augment)):
            objective, normalised = step(batch)
            if not torch.isfinite(objective):
                logger.error(f"{stage}: loss {objective.item()} at epoch {epoch}, batch {index}")
                raise DivergenceError(
                    f"{stage} diverged at epoch {epoch}, batch {index}: loss={objective.item()}"
                )
            optimizer.zero_grad()
            objective.backward()
            if clip_norm:
                torch.nn.utils.clip_grad_norm_(parameters, clip_norm)
            optimizer.step()
            totals.append(objective.item())
            logged.append(float(normalised.detach()) if torch.is_tensor(normalised) else float(normalised))
            logger.debug(f"{stage} epoch {epoch} batch {index}: {logged[-1]:.6f}")
        mean_loss = sum(logged) / len(logged)
        best = min(best, mean_loss)
        history.append(
            {"epoch": epoch, "loss": sum(totals) / len(totals), "loss_mean": mean_loss, "best": best}
        )
        logger.info(f"{stage} epoch {epoch}/{epochs}: loss {mean_loss:.6f} (best {best:.6f})")
    return history
