"""
Adversarial data augmentation: a one-step sign-gradient perturbation of a
seeded subset of the training images, recomputed every iteration.
"""

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from data_pipeline import NON_TARGET, TARGET
from errors import InvalidInputError, NumericError

logger = logging.getLogger(__name__)

AdaMode = Literal['none', 'non_target', 'target', 'both', 'target_as_non_target']


class AdaConfig(BaseModel):
    """Field aliases match the keys of the 'ada' config section."""
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    epsilon: float = Field(0.1, ge=0)
    mode: AdaMode = Field('non_target', alias='ada_mode')
    proportion: float = Field(0.5, ge=0, le=1, alias='ada_proportion')
    mask_seed: int = Field(0, alias='ada_seed')

    @property
    def active(self):
        return self.mode != 'none' and self.epsilon > 0


@dataclass(frozen=True)
class Perturbation:
    delta: torch.Tensor
    mask: torch.Tensor
    epsilon: float

    @property
    def max_norm(self):
        return self.delta.abs().max().item() if self.delta.numel() else 0.0


def _selected_classes(mode):
    return {
        'none': (),
        'non_target': (NON_TARGET,),
        'target': (TARGET,),
        'both': (NON_TARGET, TARGET),
        'target_as_non_target': (TARGET,),
    }[mode]


def select_mask(labels, cfg):
    """
    Boolean mask over the batch: floor(proportion * n_c) images of each selected
    class c, drawn with numpy's generator seeded by cfg.mask_seed.
    """
    labels_np = labels.detach().cpu().numpy() if isinstance(labels, torch.Tensor) else np.asarray(labels)
    if not np.isin(labels_np, (NON_TARGET, TARGET)).all():
        raise InvalidInputError("labels must be 0 (non-target) or 1 (target)")

    rng = np.random.default_rng(cfg.mask_seed)
    mask = np.zeros(labels_np.shape[0], dtype=bool)
    for cls in _selected_classes(cfg.mode):
        members = np.flatnonzero(labels_np == cls)
        n_selected = int(np.floor(cfg.proportion * members.size))
        if n_selected:
            mask[rng.choice(members, size=n_selected, replace=False)] = True
    return torch.from_numpy(mask)


def relabel(labels, mask, cfg):
    """
    For target_as_non_target, masked target images become non-target. Only
    perturbed images are relabeled, so an inactive config (epsilon 0) leaves
    the labels alone.
    """
    if cfg.mode != 'target_as_non_target' or not cfg.active:
        return labels
    labels = labels.clone()
    labels[mask & (labels == TARGET)] = NON_TARGET
    return labels


def gradient_sign_perturbation(grad, mask, epsilon):
    """delta = epsilon * sign(G) on masked images, zero elsewhere; sign(0) = 0."""
    if grad.shape[0] != mask.shape[0]:
        raise InvalidInputError(f"gradient batch {grad.shape[0]} and mask {mask.shape[0]} differ in size")
    if epsilon < 0:
        raise InvalidInputError(f"epsilon must be non-negative, got {epsilon}")
    finite = torch.isfinite(grad).flatten(1).all(dim=1)
    if not finite.all():
        index = int(torch.nonzero(~finite)[0])
        raise NumericError("non-finite image gradient", index=index)

    mask_view = mask.to(torch.bool).view(-1, *([1] * (grad.dim() - 1)))
    delta = torch.where(mask_view, epsilon * torch.sign(grad), torch.zeros_like(grad))
    return Perturbation(delta.detach(), mask.to(torch.bool), float(epsilon))


def apply(batch, pert):
    """Add the perturbation to the normalized pixels. No clamping."""
    if tuple(batch.pixels.shape) != tuple(pert.delta.shape):
        raise InvalidInputError(
            f"perturbation shape {tuple(pert.delta.shape)} does not match batch {tuple(batch.pixels.shape)}")
    return batch.with_pixels(batch.pixels + pert.delta)


def zero_perturbation(batch):
    return Perturbation(torch.zeros_like(batch.pixels), torch.zeros(len(batch), dtype=torch.bool), 0.0)
