"""
Prompt optimisation with adversarial data augmentation.

Every iteration runs two passes over the batch. The first pass measures the
loss gradient with respect to the images and turns it into a sign-gradient
perturbation of the masked images; the second pass re-encodes the perturbed
images and takes one SGD step on the context vectors. Without augmentation
the first pass is skipped and the step is plain prompt tuning.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Literal, Optional

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

import ada
from ada import AdaConfig
from classifier import OneClassClassifier
from data_pipeline import TARGET, ImageBatch, LabeledImageBatch
from encoders import SimilarityConfig, similarity_logits
from errors import InvalidInputError, NumericError, TrainingDivergedError
from prompt_learner import ClassPromptPair, PromptContext, init_context, trainable_parameters
from utils import ConfigManager, fingerprint, progress

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(200, gt=0)
    base_lr: float = Field(1e-4, gt=0)
    warm_lr: float = Field(1e-5, gt=0)
    warm_epochs: int = Field(1, ge=0)
    schedule: Literal['cosine'] = 'cosine'
    optimizer: Literal['sgd'] = 'sgd'
    batch_size: Optional[int] = Field(None, gt=0)
    shots: int = Field(50, gt=0)
    seed: int = 0
    n_ctx: int = Field(16, gt=0)
    init_std: float = Field(0.02, gt=0)
    ada: AdaConfig = AdaConfig()
    similarity: Optional[SimilarityConfig] = None

    @model_validator(mode='after')
    def _warm_up_fits(self):
        if self.warm_epochs >= self.epochs:
            raise ValueError(f'warm_epochs ({self.warm_epochs}) must be smaller than epochs ({self.epochs})')
        return self

    def fingerprint(self):
        return fingerprint(self.model_dump(mode='json'))


@dataclass
class TrainState:
    ctx: PromptContext
    epoch: int = 0
    lr: float = 0.0
    loss_history: list = field(default_factory=list)
    rng_state: Optional[torch.Tensor] = None
    mask: Optional[torch.Tensor] = None
    perturbation: Optional[ada.Perturbation] = None

    def snapshot(self):
        return replace(self, ctx=self.ctx.snapshot(), loss_history=list(self.loss_history))


def cross_entropy(probs, labels):
    """Mean of -log p[true class] with probabilities floored at 1e-12."""
    if probs.dim() != 2 or labels.dim() != 1 or probs.shape[0] != labels.shape[0]:
        raise InvalidInputError(f"probabilities {tuple(probs.shape)} and labels {tuple(labels.shape)} disagree")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise InvalidInputError("labels out of range of the probability columns")
    picked = probs.gather(1, labels.view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp_min(PROBABILITY_FLOOR)).mean()


def learning_rate_at(epoch, cfg):
    """Constant warm_lr during warm-up, then cosine annealing from base_lr."""
    if not 0 <= epoch < cfg.epochs:
        raise InvalidInputError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warm_epochs:
        return cfg.warm_lr
    progress_ratio = (epoch - cfg.warm_epochs) / (cfg.epochs - cfg.warm_epochs)
    return cfg.base_lr * 0.5 * (1 + math.cos(math.pi * progress_ratio))


def resolve_similarity(enc, cfg):
    return cfg.similarity if cfg.similarity is not None else enc.default_similarity()


def batch_loss(enc, context, pixels, labels, class_names, similarity):
    """Differentiable cross-entropy of the class-prompt classifier on one batch."""
    logits = similarity_logits(enc.image_features(pixels), enc.prompt_features(context, class_names), similarity)
    return cross_entropy(torch.softmax(logits, dim=-1), labels)


def context_gradient(ctx, batch, enc, class_names, similarity):
    """d(loss)/d(context) on a labeled batch, without updating anything."""
    context = ctx.context.detach().clone().requires_grad_(True)
    loss = batch_loss(enc, context, batch.batch.pixels, batch.labels, class_names, similarity)
    (grad,) = torch.autograd.grad(loss, context)
    return grad


def image_gradient(ctx, batch, enc, class_names, similarity):
    """d(loss)/d(pixels) on a labeled batch, the quantity whose sign drives the perturbation."""
    pixels = batch.batch.pixels.detach().clone().requires_grad_(True)
    loss = batch_loss(enc, ctx.context, pixels, batch.labels, class_names, similarity)
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss while measuring the image gradient")
    (grad,) = torch.autograd.grad(loss, pixels)
    return grad


def coop_step(state, batch, enc, cfg, class_names=('real', 'fake')):
    """One plain prompt-tuning step: SGD on the context only, no augmentation."""
    lr = learning_rate_at(state.epoch, cfg)
    optimizer = torch.optim.SGD(trainable_parameters(state.ctx), lr=lr, momentum=0, weight_decay=0)
    optimizer.zero_grad()
    loss = batch_loss(enc, state.ctx.context, batch.batch.pixels, batch.labels, class_names,
                      resolve_similarity(enc, cfg))
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss at epoch {state.epoch}", state=state.snapshot())
    loss.backward()
    optimizer.step()
    return replace(state, lr=lr, loss_history=state.loss_history + [loss.item()])


def train_step(state, batch, enc, cfg, class_names=('real', 'fake'), mask=None):
    """
    One min-max iteration. The perturbation is recomputed from the clean images
    every call; the mask (default state.mask) stays fixed for the run.

    With the augmentation inactive this is exactly coop_step.
    """
    ada_cfg = cfg.ada
    mask = state.mask if mask is None else mask
    if mask is None:
        mask = torch.zeros(len(batch), dtype=torch.bool)

    if ada_cfg.active and mask.any():
        try:
            grad = image_gradient(state.ctx, batch, enc, class_names, resolve_similarity(enc, cfg))
        except NumericError as e:
            raise TrainingDivergedError(f"{e} at epoch {state.epoch}", state=state.snapshot())
        perturbation = ada.gradient_sign_perturbation(grad, mask, ada_cfg.epsilon)
        batch = LabeledImageBatch(ada.apply(batch.batch, perturbation), ada.relabel(batch.labels, mask, ada_cfg))
    else:
        perturbation = ada.zero_perturbation(batch.batch)
    state = coop_step(state, batch, enc, cfg, class_names)
    return replace(state, perturbation=perturbation)


def _epoch_batches(n, cfg, generator):
    if cfg.batch_size is None or cfg.batch_size >= n:
        return [torch.arange(n)]
    order = torch.randperm(n, generator=generator)
    return [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


def _subset(batch, indices):
    images = batch.batch
    paths = tuple(images.paths[i] for i in indices.tolist()) if images.paths else ()
    return LabeledImageBatch(ImageBatch(images.pixels[indices], paths), batch.labels[indices])


def fit(batch, class_names, enc, cfg, on_step=None, augment=None, log_path=None):
    """
    Run the whole schedule on a labeled batch and return the final TrainState.

    :param on_step: called as on_step(state, perturbation) after every iteration
    :param augment: replaces the adversarial perturbation with
        augment(images, mask, epoch) -> images, applied to the same masked subset
    :param log_path: JSON-lines training log, one record per epoch
    """
    if len(batch) == 0:
        raise InvalidInputError("cannot train on an empty batch")
    if batch.labels.max() >= len(class_names):
        raise InvalidInputError("labels exceed the number of class prompts")

    ctx = init_context(cfg.n_ctx, enc.ctx_dim, cfg.init_std, cfg.seed)
    mask_cfg = cfg.ada
    if augment is not None and mask_cfg.mode == 'none':
        mask_cfg = mask_cfg.model_copy(update={'mode': 'non_target'})
    # Every source class counts as target when drawing the mask
    mask = ada.select_mask(batch.labels.clamp(max=TARGET), mask_cfg)
    generator = torch.Generator().manual_seed(cfg.seed)
    state = TrainState(ctx=ctx, mask=mask, rng_state=generator.get_state())

    logger.debug(f"Training {cfg.n_ctx} context vectors for {cfg.epochs} epochs, "
                 f"ada={cfg.ada.mode} eps={cfg.ada.epsilon}, {int(mask.sum())} images masked")
    log_file = None
    if log_path is not None:
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        log_file = open(log_path, 'w')
    try:
        for epoch in progress(range(cfg.epochs), desc='epochs'):
            state = replace(state, epoch=epoch)
            start = len(state.loss_history)
            for indices in _epoch_batches(len(batch), cfg, generator):
                sub_batch = batch if len(indices) == len(batch) else _subset(batch, indices)
                sub_mask = mask[indices]
                if augment is not None:
                    images = augment(sub_batch.batch, sub_mask, epoch)
                    state = coop_step(state, LabeledImageBatch(images, sub_batch.labels), enc, cfg, class_names)
                    state = replace(state, perturbation=None)
                else:
                    state = train_step(state, sub_batch, enc, cfg, class_names, mask=sub_mask)
                if on_step is not None:
                    on_step(state, state.perturbation)
            state = replace(state, rng_state=generator.get_state())
            epoch_loss = sum(state.loss_history[start:]) / (len(state.loss_history) - start)
            if log_file is not None:
                log_file.write(json.dumps({
                    'epoch': epoch,
                    'lr': state.lr,
                    'loss': epoch_loss,
                    'ada_mode': cfg.ada.mode,
                    'epsilon': cfg.ada.epsilon,
                }) + '\n')
    finally:
        if log_file is not None:
            log_file.close()

    state = replace(state, epoch=cfg.epochs)
    logger.debug(f"Final training loss {state.loss_history[-1]:.6f}")
    return state


def train(dataset, enc, cfg, pair=None, on_step=None, augment=None, log_path=None):
    """
    Train a one-class classifier on a few-shot split: non-target images are
    class 0, target images class 1.
    """
    if len(dataset.target) < cfg.shots or len(dataset.non_target) < cfg.shots:
        raise InvalidInputError(
            f"split holds {len(dataset.non_target)}/{len(dataset.target)} images, {cfg.shots} per class required")
    pair = pair or ClassPromptPair('real', 'fake')
    ConfigManager.console_print(
        f'Training {dataset.source_names[1]} vs {dataset.source_names[0]} '
        f'({cfg.shots} shots, seed {cfg.seed}, ada {cfg.ada.mode})')

    state = fit(dataset.labeled(), pair.names, enc, cfg, on_step=on_step, augment=augment, log_path=log_path)
    return OneClassClassifier(
        ctx=state.ctx,
        pair=pair,
        encoder_id=enc.identifier,
        similarity=resolve_similarity(enc, cfg),
        ada=cfg.ada,
        train_fingerprint=cfg.fingerprint(),
        loss_history=tuple(state.loss_history),
    )
