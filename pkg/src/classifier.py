"""
Trained prompt classifiers: a frozen encoder identifier, the learned context
and the class tokens, scored with the similarity softmax.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from ada import AdaConfig
from data_pipeline import OTHERS
from encoders import EmbeddingMatrix, SimilarityConfig, class_probabilities, encode_images, encode_prompts
from errors import CheckpointError, InvalidInputError
from prompt_learner import (ClassPromptPair, PromptContext, assemble_class_prompts, load_checkpoint,
                            save_checkpoint)

logger = logging.getLogger(__name__)


class _PromptClassifier:
    ctx: PromptContext
    encoder_id: str
    similarity: SimilarityConfig

    @property
    def class_names(self):
        raise NotImplementedError

    def check_encoder(self, enc):
        if enc.identifier != self.encoder_id:
            raise InvalidInputError(f"classifier was trained with encoder {self.encoder_id!r}, got {enc.identifier!r}")

    def probabilities(self, enc, batch):
        """[n_images, K] class probabilities as a numpy array."""
        self.check_encoder(enc)
        img_emb = encode_images(enc, batch)
        prompt_emb = encode_prompts(enc, assemble_class_prompts(self.ctx, self.class_names))
        return class_probabilities(img_emb, prompt_emb, self.similarity).cpu().numpy()


@dataclass
class OneClassClassifier(_PromptClassifier):
    ctx: PromptContext
    pair: ClassPromptPair
    encoder_id: str
    similarity: SimilarityConfig
    ada: AdaConfig
    train_fingerprint: str
    loss_history: tuple = ()

    KIND = 'one_class'

    @property
    def class_names(self):
        return self.pair.names

    def score(self, enc, batch):
        """Target-class probability of every image."""
        return self.probabilities(enc, batch)[:, 1]

    def save(self, path):
        save_checkpoint(path, self.KIND, self.ctx, self.class_names, self.encoder_id, self.similarity,
                        ada=self.ada.model_dump(), train_fingerprint=self.train_fingerprint,
                        loss_history=list(self.loss_history))

    @classmethod
    def load(cls, path):
        payload = load_checkpoint(path, kind=cls.KIND)
        try:
            return cls(
                ctx=payload['context'],
                pair=ClassPromptPair(*payload['class_names']),
                encoder_id=payload['encoder_id'],
                similarity=SimilarityConfig(**payload['similarity']),
                ada=AdaConfig(**payload['ada']),
                train_fingerprint=payload['train_fingerprint'],
                loss_history=tuple(payload.get('loss_history', ())),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{path}: malformed checkpoint: {e}")


@dataclass
class MultiClassifier(_PromptClassifier):
    """
    One shared context with K + 1 class prompts. Index 0 is the non-target
    class; index j >= 1 is source j - 1.
    """
    ctx: PromptContext
    names: tuple
    encoder_id: str
    similarity: SimilarityConfig
    ada: AdaConfig
    train_fingerprint: str
    loss_history: tuple = ()

    KIND = 'multi_class'

    @property
    def class_names(self):
        return tuple(self.names)

    @property
    def source_names(self):
        return tuple(self.names[1:])

    def predict(self, enc, batch):
        """Source index per image, or OTHERS when the non-target prompt wins."""
        decisions = self.probabilities(enc, batch).argmax(axis=1) - 1
        return np.where(decisions < 0, OTHERS, decisions)

    def save(self, path):
        save_checkpoint(path, self.KIND, self.ctx, self.class_names, self.encoder_id, self.similarity,
                        ada=self.ada.model_dump(), train_fingerprint=self.train_fingerprint,
                        loss_history=list(self.loss_history))

    @classmethod
    def load(cls, path):
        payload = load_checkpoint(path, kind=cls.KIND)
        try:
            return cls(
                ctx=payload['context'],
                names=tuple(payload['class_names']),
                encoder_id=payload['encoder_id'],
                similarity=SimilarityConfig(**payload['similarity']),
                ada=AdaConfig(**payload['ada']),
                train_fingerprint=payload['train_fingerprint'],
                loss_history=tuple(payload.get('loss_history', ())),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{path}: malformed checkpoint: {e}")


@dataclass
class ZeroShotClassifier(_PromptClassifier):
    """Two hand-written prompts (non-target first) and no learned context."""
    prompts: tuple
    encoder_id: str
    similarity: SimilarityConfig

    @property
    def class_names(self):
        return tuple(self.prompts)

    def probabilities(self, enc, batch):
        self.check_encoder(enc)
        with torch.no_grad():
            text_emb = EmbeddingMatrix(enc.text_features(list(self.prompts)), 'text')
        return class_probabilities(encode_images(enc, batch), text_emb, self.similarity).cpu().numpy()

    def score(self, enc, batch):
        return self.probabilities(enc, batch)[:, 1]
