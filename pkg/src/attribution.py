"""
Multi-source attribution with K one-class classifiers (one per candidate
source model). An image goes to the classifier with the highest score if that
score exceeds the threshold, otherwise to OTHERS.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from classifier import MultiClassifier, OneClassClassifier
from data_pipeline import OTHERS, concat_labeled
from errors import CheckpointError, InvalidInputError
from trainer import fit, resolve_similarity
from utils import ConfigManager

logger = logging.getLogger(__name__)

MANIFEST_SOURCE_KEYS = ('target_dataset', 'non_target_dataset')


@dataclass
class Ensemble:
    """
    Classifiers only need .score(enc, batch), .encoder_id and .similarity.
    """
    classifiers: list
    threshold: float = 0.5
    class_names: list = field(default_factory=list)
    workers: int = 1
    # Training datasets of every classifier, as recorded in the manifest
    sources: list = field(default_factory=list)

    def __post_init__(self):
        if not self.classifiers:
            raise InvalidInputError("an ensemble needs at least one classifier")
        if not 0 < self.threshold < 1:
            raise InvalidInputError(f"threshold must lie in (0, 1), got {self.threshold}")
        encoder_ids = {clf.encoder_id for clf in self.classifiers}
        if len(encoder_ids) > 1:
            raise InvalidInputError(f"classifiers disagree on the encoder: {sorted(encoder_ids)}")
        similarities = {tuple(sorted(clf.similarity.model_dump().items())) for clf in self.classifiers}
        if len(similarities) > 1:
            raise InvalidInputError("classifiers disagree on the similarity configuration")
        if not self.class_names:
            self.class_names = [f'source_{i}' for i in range(len(self.classifiers))]
        if len(self.class_names) != len(self.classifiers):
            raise InvalidInputError("one class name per classifier is required")

    @property
    def encoder_id(self):
        return self.classifiers[0].encoder_id

    def scores(self, enc, batch):
        """[n_images, K] matrix of per-classifier target scores."""
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                columns = list(pool.map(lambda clf: np.asarray(clf.score(enc, batch)), self.classifiers))
        else:
            columns = [np.asarray(clf.score(enc, batch)) for clf in self.classifiers]
        return np.stack(columns, axis=1)


@dataclass(frozen=True)
class AttributionResult:
    decision: int
    scores: tuple
    max_score: float
    threshold: float
    path: str = ''

    def to_record(self, class_names=None):
        record = {
            'path': self.path,
            'scores': list(self.scores),
            'decision': self.decision,
            'threshold': self.threshold,
        }
        if class_names is not None:
            record['source'] = 'others' if self.decision == OTHERS else class_names[self.decision]
        return record


def decide(scores, threshold):
    """
    Return (decision, max_score) for one score vector: the lowest index among
    the maxima when the maximum strictly exceeds the threshold, else OTHERS.
    """
    scores = np.asarray(scores, dtype=np.float64)
    best = int(np.argmax(scores))
    max_score = float(scores[best])
    if np.count_nonzero(scores == max_score) > 1:
        tied = np.flatnonzero(scores == max_score).tolist()
        logger.debug(f"Tied maximum score {max_score} at {tied}, picking {best}")
    if max_score > threshold:
        return best, max_score
    return OTHERS, max_score


def attribute(ens, enc, image):
    """Attribute a single preprocessed image (an ImageBatch holding one image)."""
    if len(image) != 1:
        raise InvalidInputError(f"attribute takes one image, got {len(image)}; use attribute_batch")
    return attribute_batch(ens, enc, image)[0]


def attribute_batch(ens, enc, batch):
    score_matrix = ens.scores(enc, batch)
    paths = batch.paths or ('',) * len(batch)
    results = []
    for row, path in zip(score_matrix, paths):
        decision, max_score = decide(row, ens.threshold)
        results.append(AttributionResult(decision, tuple(float(s) for s in row), max_score, ens.threshold, path))
    return results


def ensemble_accuracy(ens, enc, test):
    """
    Fraction of images whose decision equals the label. Labels are classifier
    indices, or OTHERS for images from none of the sources.
    """
    if len(test) == 0:
        raise InvalidInputError("cannot measure accuracy on an empty test set")
    labels = test.labels.numpy()
    if ((labels < OTHERS) | (labels >= len(ens.classifiers))).any():
        raise InvalidInputError("labels must be classifier indices or OTHERS")
    decisions = np.array([r.decision for r in attribute_batch(ens, enc, test.batch)])
    return float((decisions == labels).mean())


def multiclass_accuracy(clf, enc, test):
    """Same label convention as ensemble_accuracy, for a direct multi-class classifier."""
    if len(test) == 0:
        raise InvalidInputError("cannot measure accuracy on an empty test set")
    return float((clf.predict(enc, test.batch) == test.labels.numpy()).mean())


def train_direct_multiclass(datasets, enc, cfg, non_target_name='real', source_names=None):
    """
    One shared context with K + 1 prompts: the non-target token, then one
    token per source. Non-target images come from the first split; source j
    contributes the target images of split j. The adversarial augmentation
    only ever perturbs non-target images.
    """
    if not datasets:
        raise InvalidInputError("at least one source split is required")
    for split in datasets:
        if len(split.target) < cfg.shots or len(split.non_target) < cfg.shots:
            raise InvalidInputError(f"split for {split.source_names[1]} holds fewer than {cfg.shots} images")
    source_names = tuple(source_names or (split.source_names[1] for split in datasets))
    class_names = (non_target_name,) + source_names

    batch = concat_labeled([datasets[0].non_target] + [split.target for split in datasets],
                           list(range(len(datasets) + 1)))
    if cfg.ada.mode != 'none':
        cfg = cfg.model_copy(update={'ada': cfg.ada.model_copy(update={'mode': 'non_target'})})
    ConfigManager.console_print(f'Training a {len(class_names)}-way classifier over {", ".join(class_names)}')
    state = fit(batch, class_names, enc, cfg)
    return MultiClassifier(
        ctx=state.ctx,
        names=class_names,
        encoder_id=enc.identifier,
        similarity=resolve_similarity(enc, cfg),
        ada=cfg.ada,
        train_fingerprint=cfg.fingerprint(),
        loss_history=tuple(state.loss_history),
    )


def one_vs_rest_test(batches, others=None):
    """
    Labeled attribution test set: batches[i] labeled i, then optional images
    from unseen sources labeled OTHERS.
    """
    parts = list(batches) + ([others] if others is not None else [])
    labels = list(range(len(batches))) + ([OTHERS] if others is not None else [])
    return concat_labeled(parts, labels)


def load_manifest(path):
    """
    Read an ensemble manifest:

        threshold: 0.5
        classifiers:
          - name: sd
            checkpoint: sd/rep_00.pt
            target_dataset: /data/sd
            non_target_dataset: /data/real

    Relative checkpoint paths are resolved against the manifest's directory.
    The dataset paths are optional.
    """
    if not os.path.isfile(path):
        raise CheckpointError(f"manifest not found: {path}")
    with open(path, 'r') as file:
        try:
            manifest = yaml.safe_load(file) or {}
        except yaml.YAMLError as e:
            raise InvalidInputError(f"cannot parse manifest {path}: {e}")
    entries = manifest.get('classifiers') or []
    if not entries:
        raise InvalidInputError(f"manifest {path} lists no classifiers")

    base_dir = os.path.dirname(os.path.abspath(path))
    classifiers, names, sources = [], [], []
    for entry in entries:
        checkpoint = entry['checkpoint']
        if not os.path.isabs(checkpoint):
            checkpoint = os.path.join(base_dir, checkpoint)
        classifiers.append(OneClassClassifier.load(checkpoint))
        names.append(entry.get('name') or os.path.splitext(os.path.basename(checkpoint))[0])
        sources.append({key: entry.get(key) for key in MANIFEST_SOURCE_KEYS})
    return Ensemble(classifiers, threshold=float(manifest.get('threshold', 0.5)), class_names=names,
                    sources=sources)


def update_manifest(path, name, checkpoint, threshold=0.5, **sources):
    """
    Add or replace the classifier entry called name, creating the manifest if
    needed. sources may give target_dataset and non_target_dataset.
    """
    manifest = {'threshold': threshold, 'classifiers': []}
    if os.path.isfile(path):
        with open(path, 'r') as file:
            manifest = yaml.safe_load(file) or manifest
    entries = [e for e in manifest.get('classifiers') or [] if e.get('name') != name]
    entries.append({'name': name, 'checkpoint': checkpoint,
                    **{key: sources[key] for key in MANIFEST_SOURCE_KEYS if sources.get(key)}})
    manifest['classifiers'] = entries
    with open(path, 'w') as file:
        yaml.safe_dump(manifest, file, default_flow_style=False, sort_keys=False)
