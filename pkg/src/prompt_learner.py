"""
Learnable prompt context: n_ctx continuous token vectors shared by every class
prompt, followed by one class-name token per class. The context matrix is the
only trainable tensor anywhere in the toolkit.
"""

import copy
import logging
import os
from dataclasses import dataclass

import torch

from errors import CheckpointError, InvalidInputError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'provenancer-prompt'
CHECKPOINT_VERSION = 1

# name -> (non-target token, target token)
PROMPT_PAIRS = {
    'real-fake': ('real', 'fake'),
    'fake-real': ('fake', 'real'),
    'negative-positive': ('negative', 'positive'),
    'positive-negative': ('positive', 'negative'),
    'other-this': ('other', 'this'),
    'this-other': ('this', 'other'),
}


@dataclass
class PromptContext:
    context: torch.Tensor
    init_std: float = 0.02

    def __post_init__(self):
        if self.context.dim() != 2 or min(self.context.shape) < 1:
            raise InvalidInputError(f"context must be [n_ctx >= 1, ctx_dim >= 1], got {tuple(self.context.shape)}")
        if not torch.isfinite(self.context).all():
            raise InvalidInputError("context contains non-finite entries")

    @property
    def n_ctx(self):
        return self.context.shape[0]

    @property
    def ctx_dim(self):
        return self.context.shape[1]

    def snapshot(self):
        """Detached copy. Not re-validated, so a diverged context can be kept."""
        snap = copy.copy(self)
        snap.context = self.context.detach().clone()
        return snap


@dataclass(frozen=True)
class ClassPromptPair:
    """Index 0 is the non-target class, index 1 the target class."""
    non_target_name: str
    target_name: str

    def __post_init__(self):
        for name in (self.non_target_name, self.target_name):
            if not isinstance(name, str) or not name.strip():
                raise InvalidInputError("class names must be non-empty strings")
        if self.non_target_name == self.target_name:
            raise InvalidInputError(f"class names must differ, got {self.non_target_name!r} twice")

    @classmethod
    def from_name(cls, name):
        """Resolve 'nontarget-target', e.g. 'real-fake'."""
        if name in PROMPT_PAIRS:
            return cls(*PROMPT_PAIRS[name])
        parts = name.split('-')
        if len(parts) != 2:
            raise InvalidInputError(f"prompt pair must look like 'nontarget-target', got {name!r}")
        return cls(*parts)

    @property
    def names(self):
        return (self.non_target_name, self.target_name)


@dataclass(frozen=True)
class AssembledPromptBatch:
    """One prompt per class: the shared context followed by the class token."""
    context: torch.Tensor
    class_names: tuple[str, ...]

    @property
    def rows(self):
        return [(self.context, name) for name in self.class_names]

    def __len__(self):
        return len(self.class_names)


def init_context(n_ctx, ctx_dim, std=0.02, seed=0):
    """Context vectors drawn i.i.d. from Normal(0, std^2) with a seeded generator."""
    if n_ctx <= 0 or ctx_dim <= 0:
        raise InvalidInputError(f"context dimensions must be positive, got {n_ctx} x {ctx_dim}")
    if std <= 0:
        raise InvalidInputError(f"init std must be positive, got {std}")
    generator = torch.Generator().manual_seed(seed)
    context = std * torch.randn(n_ctx, ctx_dim, generator=generator, dtype=torch.float64)
    return PromptContext(context.requires_grad_(True), init_std=std)


def assemble_class_prompts(ctx, class_names):
    class_names = tuple(class_names)
    if len(class_names) < 2:
        raise InvalidInputError("at least two classes are required")
    if any(not isinstance(n, str) or not n.strip() for n in class_names):
        raise InvalidInputError("class names must be non-empty strings")
    if len(set(class_names)) != len(class_names):
        raise InvalidInputError(f"class names must be distinct, got {class_names}")
    return AssembledPromptBatch(ctx.context, class_names)


def assemble_prompts(ctx, pair):
    return assemble_class_prompts(ctx, pair.names)


def trainable_parameters(ctx):
    return [ctx.context]


def save_checkpoint(path, kind, ctx, class_names, encoder_id, similarity, **metadata):
    """
    Write a prompt checkpoint with torch.save. The file is written to a
    temporary name and moved into place.

    :param kind: 'one_class' or 'multi_class'
    :param similarity: SimilarityConfig used for scoring
    :param metadata: extra plain values (ada config, fingerprints)
    """
    payload = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'kind': kind,
        'n_ctx': ctx.n_ctx,
        'ctx_dim': ctx.ctx_dim,
        'init_std': ctx.init_std,
        'context': ctx.context.detach().cpu().to(torch.float64).clone(),
        'class_names': list(class_names),
        'encoder_id': encoder_id,
        'similarity': similarity.model_dump(),
        **metadata,
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f'{path}.tmp'
    torch.save(payload, tmp_path)
    os.replace(tmp_path, path)
    logger.debug(f"Saved {kind} checkpoint to {path}")


def load_checkpoint(path, kind=None):
    """Read a checkpoint dict. The context comes back as a trainable PromptContext."""
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    if not isinstance(payload, dict) or payload.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a prompt checkpoint")
    if payload.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if kind is not None and payload.get('kind') != kind:
        raise CheckpointError(f"{path} holds a {payload.get('kind')} checkpoint, expected {kind}")

    context = payload['context']
    if tuple(context.shape) != (payload['n_ctx'], payload['ctx_dim']):
        raise CheckpointError(f"{path}: context shape does not match the recorded dimensions")
    payload['context'] = PromptContext(context.to(torch.float64).requires_grad_(True), payload.get('init_std', 0.02))
    return payload
