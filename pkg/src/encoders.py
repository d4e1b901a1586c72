"""
Frozen dual encoders: an image encoder and a text encoder mapping into one
embedding space, plus the similarity-softmax classification head.

Two implementations share the EncoderPair interface:
  ToyEncoderPair       'toy:<seed>', a seeded differentiable stand-in for desk-scale runs
  OpenClipEncoderPair  a pretrained CLIP backbone loaded through open_clip
"""

import hashlib
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from data_pipeline import PreprocessSpec
from errors import InvalidInputError
from utils import ConfigManager

logger = logging.getLogger(__name__)

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

# identifier -> (open_clip architecture, pretrained tag)
BACKBONES = {
    'vit-b-16': ('ViT-B-16', 'openai'),
    'vit-b-32': ('ViT-B-32', 'openai'),
    'vit-l-14': ('ViT-L-14', 'openai'),
}


class SimilarityConfig(BaseModel):
    """Logits are sim(text, image) / temperature."""
    model_config = ConfigDict(frozen=True)

    kind: Literal['dot', 'cosine'] = 'dot'
    temperature: float = Field(1.0, gt=0)


@dataclass(frozen=True)
class EmbeddingMatrix:
    data: torch.Tensor
    source: Literal['image', 'text']

    def __post_init__(self):
        if self.source not in ('image', 'text'):
            raise InvalidInputError(f"unknown embedding source {self.source!r}")
        if self.data.dim() != 2 or self.data.shape[0] < 1:
            raise InvalidInputError(f"embedding matrix must be [n >= 1, dim], got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise InvalidInputError("embedding matrix contains non-finite entries")

    @property
    def n_items(self):
        return self.data.shape[0]

    @property
    def embed_dim(self):
        return self.data.shape[1]


class EncoderPair(ABC):
    """
    A frozen image encoder and text encoder with a shared embedding width.
    Implementations never change their parameters after construction.
    """

    identifier: str
    embed_dim: int
    ctx_dim: int

    @classmethod
    def is_available(cls) -> bool:
        return True

    @abstractmethod
    def image_features(self, pixels: torch.Tensor) -> torch.Tensor:
        """Differentiable map [n, 3, H, W] -> [n, embed_dim]."""

    @abstractmethod
    def prompt_features(self, context: torch.Tensor, class_names) -> torch.Tensor:
        """Differentiable map of (context vectors, K class names) -> [K, embed_dim]."""

    @abstractmethod
    def text_features(self, texts) -> torch.Tensor:
        """Embed hand-written prompt strings -> [len(texts), embed_dim]."""

    @abstractmethod
    def parameters(self):
        """The frozen parameter tensors."""

    @abstractmethod
    def default_similarity(self) -> SimilarityConfig:
        pass

    @abstractmethod
    def default_preprocess(self) -> PreprocessSpec:
        pass

    @property
    def frozen_fingerprint(self):
        digest = hashlib.sha256()
        for tensor in self.parameters():
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


@lru_cache(maxsize=4096)
def _toy_token_embedding(seed, token, ctx_dim):
    digest = hashlib.sha256(f'{seed}:{token}'.encode('utf-8')).digest()
    generator = torch.Generator().manual_seed(int.from_bytes(digest[:8], 'little') & (2 ** 63 - 1))
    return torch.randn(ctx_dim, generator=generator, dtype=torch.float64)


class ToyEncoderPair(EncoderPair):
    """
    Image side: average-pool to pool x pool, then a fixed affine projection.
    Text side: mean-pool the context vectors with the class token embeddings,
    then a random-Fourier hidden layer and a fixed linear projection. Tokens
    come from whitespace splitting; each token's embedding is drawn from a
    generator seeded by (seed, token).
    """

    def __init__(self, seed=0, embed_dim=16, ctx_dim=32, pool=4, text_scale=8.0):
        if min(embed_dim, ctx_dim, pool) <= 0:
            raise InvalidInputError("toy encoder dimensions must be positive")
        self.seed = seed
        self.identifier = f'toy:{seed}'
        self.embed_dim = embed_dim
        self.ctx_dim = ctx_dim
        self.pool = pool

        generator = torch.Generator().manual_seed(seed)
        n_in = 3 * pool * pool
        self.image_weight = torch.randn(embed_dim, n_in, generator=generator, dtype=torch.float64) / math.sqrt(n_in)
        self.image_bias = 0.1 * torch.randn(embed_dim, generator=generator, dtype=torch.float64)
        self.text_hidden = text_scale * torch.randn(ctx_dim, ctx_dim, generator=generator,
                                                    dtype=torch.float64) / math.sqrt(ctx_dim)
        self.text_phase = 2 * math.pi * torch.rand(ctx_dim, generator=generator, dtype=torch.float64)
        self.text_out = torch.randn(embed_dim, ctx_dim, generator=generator, dtype=torch.float64) / math.sqrt(ctx_dim)

    def parameters(self):
        return [self.image_weight, self.image_bias, self.text_hidden, self.text_phase, self.text_out]

    def default_similarity(self):
        return SimilarityConfig(kind='dot', temperature=1.0)

    def default_preprocess(self):
        return PreprocessSpec(size=32, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))

    def token_embeddings(self, text):
        tokens = text.split()
        if not tokens:
            raise InvalidInputError("empty token sequence")
        return torch.stack([_toy_token_embedding(self.seed, token, self.ctx_dim) for token in tokens])

    def _encode_sequences(self, sequences):
        pooled = torch.stack([seq.mean(dim=0) for seq in sequences])
        hidden = torch.cos(pooled @ self.text_hidden.T + self.text_phase)
        return hidden @ self.text_out.T

    def image_features(self, pixels):
        if pixels.dim() != 4 or pixels.shape[1] != 3:
            raise InvalidInputError(f"expected [n, 3, H, W] images, got {tuple(pixels.shape)}")
        pooled = F.adaptive_avg_pool2d(pixels.to(torch.float64), self.pool).flatten(1)
        return pooled @ self.image_weight.T + self.image_bias

    def prompt_features(self, context, class_names):
        sequences = [torch.cat([context, self.token_embeddings(name)], dim=0) for name in class_names]
        return self._encode_sequences(sequences)

    def text_features(self, texts):
        return self._encode_sequences([self.token_embeddings(text) for text in texts])


class OpenClipEncoderPair(EncoderPair):
    """
    Pretrained CLIP backbone. Prompts are encoded CoOp-style: the tokenized
    'X X ... X <class>.' has its placeholder embeddings replaced by the
    context vectors before the text transformer runs.
    """

    def __init__(self, identifier, device='auto'):
        import open_clip

        if identifier not in BACKBONES:
            raise InvalidInputError(f"unknown backbone {identifier!r}, known: {sorted(BACKBONES)}")
        model_name, pretrained = BACKBONES[identifier]
        if device == 'auto':
            device = 'cuda' if torch.cuda.is_available() else 'cpu'

        ConfigManager.console_print(f'Loading {model_name} ({pretrained}) on {device}...')
        try:
            model, _, _ = open_clip.create_model_and_transforms(model_name, pretrained=pretrained, device=device)
        except Exception as e:
            ConfigManager.console_print(f'Error initializing {model_name} on {device}: {e}')
            ConfigManager.console_print('Falling back to CPU.')
            device = 'cpu'
            model, _, _ = open_clip.create_model_and_transforms(model_name, pretrained=pretrained, device=device)

        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self.model = model
        self.device = device
        self.tokenizer = open_clip.get_tokenizer(model_name)
        self.identifier = identifier
        self.embed_dim = model.text_projection.shape[1]
        self.ctx_dim = model.ln_final.weight.shape[0]
        self.dtype = next(model.parameters()).dtype

    @classmethod
    def is_available(cls):
        try:
            import open_clip  # noqa: F401
            return True
        except ImportError:
            return False

    def parameters(self):
        return list(self.model.state_dict().values())

    def default_similarity(self):
        return SimilarityConfig(kind='cosine', temperature=1.0 / self.model.logit_scale.exp().item())

    def default_preprocess(self):
        return PreprocessSpec(size=224, mean=CLIP_MEAN, std=CLIP_STD)

    def image_features(self, pixels):
        features = self.model.encode_image(pixels.to(self.device, self.dtype))
        return features.to(torch.float64)

    def prompt_features(self, context, class_names):
        n_ctx = context.shape[0]
        placeholder = ' '.join(['X'] * n_ctx)
        tokens = self.tokenizer([f'{placeholder} {name}.' for name in class_names]).to(self.device)
        with torch.no_grad():
            embedded = self.model.token_embedding(tokens).to(self.dtype)

        k = len(class_names)
        ctx = context.to(self.device, self.dtype).unsqueeze(0).expand(k, -1, -1)
        x = torch.cat([embedded[:, :1], ctx, embedded[:, 1 + n_ctx:]], dim=1)
        x = x + self.model.positional_embedding.to(self.dtype)

        batch_first = getattr(self.model.transformer, 'batch_first', False)
        if not batch_first:
            x = x.permute(1, 0, 2)
        x = self.model.transformer(x, attn_mask=self.model.attn_mask)
        if not batch_first:
            x = x.permute(1, 0, 2)
        x = self.model.ln_final(x)
        # Features at the end-of-text token, which has the largest id
        x = x[torch.arange(k), tokens.argmax(dim=-1)] @ self.model.text_projection
        return x.to(torch.float64)

    def text_features(self, texts):
        tokens = self.tokenizer(list(texts)).to(self.device)
        with torch.no_grad():
            return self.model.encode_text(tokens).to(torch.float64)


def create_encoder(identifier, device='auto', **toy_options):
    """
    Resolve an encoder identifier: 'toy:<seed>' or a pretrained backbone name.
    """
    if identifier.startswith('toy:'):
        try:
            seed = int(identifier.split(':', 1)[1])
        except ValueError:
            raise InvalidInputError(f"toy encoder identifier must be 'toy:<int>', got {identifier!r}")
        return ToyEncoderPair(seed, **toy_options)
    if not OpenClipEncoderPair.is_available():
        raise InvalidInputError(f"backbone {identifier!r} requires the open_clip package")
    return OpenClipEncoderPair(identifier, device=device)


def encode_images(enc, batch):
    """One embedding row per image of a preprocessed batch."""
    if len(batch) == 0:
        raise InvalidInputError("cannot encode an empty image batch")
    if not torch.isfinite(batch.pixels).all():
        raise InvalidInputError("image batch contains non-finite pixels")
    with torch.no_grad():
        return EmbeddingMatrix(enc.image_features(batch.pixels), 'image')


def encode_prompts(enc, prompts):
    """One embedding row per assembled class prompt."""
    if prompts.context.dim() != 2 or prompts.context.shape[1] != enc.ctx_dim:
        raise InvalidInputError(
            f"context width {tuple(prompts.context.shape)} does not match encoder ctx_dim {enc.ctx_dim}")
    with torch.no_grad():
        return EmbeddingMatrix(enc.prompt_features(prompts.context, prompts.class_names), 'text')


def similarity_logits(image_features, text_features, cfg):
    """[n, K] matrix of sim(text_k, image_n) / temperature."""
    if image_features.shape[-1] != text_features.shape[-1]:
        raise InvalidInputError(
            f"embedding widths differ: images {image_features.shape[-1]}, texts {text_features.shape[-1]}")
    if cfg.kind == 'cosine':
        image_features = F.normalize(image_features, dim=-1)
        text_features = F.normalize(text_features, dim=-1)
    return image_features @ text_features.T / cfg.temperature


def class_probabilities(img_emb, prompt_emb, cfg):
    """Softmax over classes of the image/prompt similarities, [n_images, K]."""
    if prompt_emb.n_items < 2:
        raise InvalidInputError("at least two class prompts are required")
    return torch.softmax(similarity_logits(img_emb.data, prompt_emb.data, cfg), dim=-1)
