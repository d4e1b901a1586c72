"""
AUC evaluation of one-class classifiers and the repetition protocol: train
n_reps classifiers on disjoint few-shot draws, score one shared test pool,
report mean and population std of the AUCs.

Also hosts the baselines (zero-shot prompts, plain prompt tuning, standard
augmentations) and the ablation experiments built on the same bench.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator

from classifier import ZeroShotClassifier
from data_pipeline import (NON_TARGET, TARGET, ImageBatch, concat_labeled, draw_few_shot, ingest, load_pool,
                           reserve_test)
from errors import InvalidInputError
from prompt_learner import ClassPromptPair
from trainer import resolve_similarity, train
from transforms import TRANSFORM_KINDS, TransformSettings, masked_augmentation, transform_pixels
from utils import ConfigManager, fingerprint, progress

logger = logging.getLogger(__name__)

ZERO_SHOT_TEMPLATE = 'a photo of a {}'

# 'ada' is prompt tuning with the adversarial augmentation, 'coop' the same
# schedule without it, 'zero_shot' the hand-written prompts with no training
METHODS = ('ada', 'coop', 'zero_shot')

ADA_MODES = ('none', 'target', 'both', 'target_as_non_target', 'non_target')


@dataclass(frozen=True)
class ScoreSet:
    """Target-class scores of true-target images (positives) and of non-target images (negatives)."""
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'positives', np.asarray(self.positives, dtype=np.float64).ravel())
        object.__setattr__(self, 'negatives', np.asarray(self.negatives, dtype=np.float64).ravel())
        if not (np.isfinite(self.positives).all() and np.isfinite(self.negatives).all()):
            raise InvalidInputError("scores must be finite")


class EvalReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    task_name: str
    auc_mean: float
    auc_std: float
    n_repetitions: int
    per_run_auc: list[float]
    config_fingerprint: str
    transform: str = 'none'
    method: str = 'ada'
    n_positives: int = 0
    n_negatives: int = 0
    encoder_id: str = ''
    similarity: dict = Field(default_factory=dict)
    optimizer: dict = Field(default_factory=lambda: {'name': 'sgd', 'momentum': 0.0, 'weight_decay': 0.0})

    @classmethod
    def from_runs(cls, task_name, per_run_auc, config_fingerprint, **fields):
        if not per_run_auc:
            raise InvalidInputError("at least one repetition is required")
        values = np.asarray(per_run_auc, dtype=np.float64)
        return cls(
            task_name=task_name,
            auc_mean=float(values.mean()),
            auc_std=float(values.std()),
            n_repetitions=len(per_run_auc),
            per_run_auc=[float(v) for v in values],
            config_fingerprint=config_fingerprint,
            **fields,
        )


class EvalSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_reps: int = Field(10, gt=0)
    test_cap: int = Field(200, gt=0)
    transforms: tuple[str, ...] = ('none',)
    methods: tuple[str, ...] = ('ada',)
    blur_sigma: float = Field(1.0, gt=0)
    blur_kernel: int = Field(5, gt=0)
    noise_std: float = Field(0.05, ge=0)
    workers: int = Field(1, gt=0)

    @field_validator('transforms')
    @classmethod
    def _known_transforms(cls, value):
        unknown = [t for t in value if t not in TRANSFORM_KINDS]
        if unknown or not value:
            raise ValueError(f'unknown transforms {unknown}, expected a non-empty subset of {TRANSFORM_KINDS}')
        return value

    @field_validator('methods')
    @classmethod
    def _known_methods(cls, value):
        unknown = [m for m in value if m not in METHODS]
        if unknown or not value:
            raise ValueError(f'unknown methods {unknown}, expected a non-empty subset of {METHODS}')
        return tuple(dict.fromkeys(value))

    @property
    def transform_settings(self):
        return TransformSettings(blur_sigma=self.blur_sigma, blur_kernel=self.blur_kernel, noise_std=self.noise_std)


class EvalTask(BaseModel):
    """
    One attribution task: a target source, the non-target source used for
    training, and the non-target source used for testing (the training one
    when unset).
    """
    model_config = ConfigDict(frozen=True)

    name: str
    target: str
    non_target: str
    test_non_target: Optional[str] = None
    transform: str = 'none'
    pair: str = 'real-fake'

    @property
    def test_source(self):
        return self.test_non_target or self.non_target


@dataclass(frozen=True)
class SweepVariant:
    """One row of a sweep: the training config and prompt pair it trains with."""
    row: str
    cfg: object
    pair: ClassPromptPair
    augment_kind: Optional[str] = None
    prefix: str = ''


def auc(scores):
    """
    Probability that a random positive outranks a random negative, ties
    counting one half. Computed from average ranks (Mann-Whitney U).
    """
    n_pos, n_neg = scores.positives.size, scores.negatives.size
    if n_pos == 0 or n_neg == 0:
        raise InvalidInputError("AUC needs at least one positive and one negative score")
    values = np.concatenate([scores.positives, scores.negatives])
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    before = np.concatenate([[0], np.cumsum(counts)[:-1]])
    ranks = (2 * before + counts + 1) / 2.0
    rank_sum = ranks[inverse[:n_pos]].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def score_images(clf, enc, batch):
    """Per-image target-class probability."""
    return [float(s) for s in clf.score(enc, batch)]


def apply_verification_transform(batch, t, seed=0, settings=None):
    if t not in TRANSFORM_KINDS:
        raise InvalidInputError(f"unknown transform {t!r}, expected one of {TRANSFORM_KINDS}")
    return batch.with_pixels(transform_pixels(batch.pixels, t, seed, settings))


def score_set(clf, enc, positives, negatives, transform='none', seed=0, settings=None):
    batch = ImageBatch(torch.cat([positives.pixels, negatives.pixels]))
    scores = np.asarray(score_images(clf, enc, apply_verification_transform(batch, transform, seed, settings)))
    return ScoreSet(scores[:len(positives)], scores[len(positives):])


def evaluate_classifiers(classifiers, enc, positives, negatives, transform='none', seed=0, settings=None):
    """AUC of every classifier on one test pool."""
    return [auc(score_set(clf, enc, positives, negatives, transform, seed, settings)) for clf in classifiers]


def repetition_config(cfg, repetition):
    """Repetition r trains with seed + r and mask seed + r."""
    return cfg.model_copy(update={
        'seed': cfg.seed + repetition,
        'ada': cfg.ada.model_copy(update={'mask_seed': cfg.ada.mask_seed + repetition}),
    })


def plain_prompt_tuning(cfg):
    return cfg.model_copy(update={'ada': cfg.ada.model_copy(update={'mode': 'none'})})


def zero_shot_prompts(pair):
    return tuple(ZERO_SHOT_TEMPLATE.format(name) for name in pair.names)


def standard_augmentation_train(kind, dataset, enc, cfg, pair=None, settings=None):
    """
    Train with a standard augmentation in place of the adversarial one. The
    augmentation hits the same masked subset the adversarial mode would
    ('non_target' when the mode is 'none'); kind 'none' is plain prompt tuning.
    """
    if kind == 'none':
        return train(dataset, enc, plain_prompt_tuning(cfg), pair)
    return train(dataset, enc, cfg, pair, augment=masked_augmentation(kind, cfg.seed, settings))


def method_row(label, method):
    return label if method == 'ada' else f'{label} [{method}]'


def method_prefix(method):
    return '' if method == 'ada' else f'{method}:'


class ProtocolBench:
    """
    Training pools and test pools of one target, loaded once and shared by
    every repetition and every evaluation cell.
    """

    def __init__(self, target_path, non_target_path, enc, spec=None, settings=None):
        self.enc = enc
        self.spec = spec or enc.default_preprocess()
        self.settings = settings or EvalSettings()
        self.non_target_path = non_target_path

        cap = self.settings.test_cap
        self.target_test, self.target_train = reserve_test(ingest(target_path), cap)
        self.non_target_test, self.non_target_train = reserve_test(ingest(non_target_path), cap)
        self.target_name = self.target_test.name
        self.positives = load_pool(self.target_test, self.spec)
        self._negatives = {}

    def negatives(self, path):
        """Test pool of a non-target dataset (its first test_cap files) and its handle."""
        key = os.path.normpath(os.path.abspath(path))
        if key not in self._negatives:
            handle, _ = reserve_test(ingest(path), self.settings.test_cap)
            self._negatives[key] = (handle, load_pool(handle, self.spec))
        return self._negatives[key]

    def train_repetitions(self, cfg, pair, n_reps=None, augment_kind=None, log_dir=None):
        """
        Train n_reps classifiers, eval.workers at a time, and return
        [(classifier, split)] in repetition order. Draw r uses seed cfg.seed + r,
        so the draws are disjoint blocks of one permutation whenever the pools
        are large enough.
        """
        n_reps = n_reps or self.settings.n_reps

        def run(repetition):
            rep_cfg = repetition_config(cfg, repetition)
            split = draw_few_shot(self.target_train, self.non_target_train, cfg.shots, rep_cfg.seed, self.spec,
                                  base_seed=cfg.seed)
            if augment_kind is not None:
                clf = standard_augmentation_train(augment_kind, split, self.enc, rep_cfg, pair,
                                                  self.settings.transform_settings)
                return clf, split
            log_path = os.path.join(log_dir, f'rep_{repetition:02d}.jsonl') if log_dir else None
            return train(split, self.enc, rep_cfg, pair, log_path=log_path), split

        workers = min(self.settings.workers, n_reps)
        if workers > 1:
            logger.debug(f"Training {n_reps} repetitions on {workers} threads")
            with ThreadPoolExecutor(max_workers=workers) as pool:
                return list(pool.map(run, range(n_reps)))
        return [run(r) for r in progress(range(n_reps), desc='repetitions')]

    def classifiers(self, method, cfg, pair, n_reps=None, augment_kind=None):
        """The classifiers a method contributes: n_reps trained ones, or one zero-shot classifier."""
        if method not in METHODS:
            raise InvalidInputError(f"unknown method {method!r}, expected one of {METHODS}")
        if method == 'zero_shot':
            return [ZeroShotClassifier(zero_shot_prompts(pair), self.enc.identifier,
                                       resolve_similarity(self.enc, cfg))]
        if method == 'coop':
            cfg, augment_kind = plain_prompt_tuning(cfg), None
        return [clf for clf, _ in self.train_repetitions(cfg, pair, n_reps, augment_kind)]

    def evaluate(self, classifiers, test_paths, transforms, run_fingerprint, seed=0, row_prefix='', method='ada'):
        """{transform: {test dataset name: EvalReport}}"""
        grid = {}
        for transform in transforms:
            cells = {}
            for path in test_paths:
                handle, negatives = self.negatives(path)
                per_run = evaluate_classifiers(classifiers, self.enc, self.positives, negatives, transform, seed,
                                               self.settings.transform_settings)
                cells[handle.name] = EvalReport.from_runs(
                    f'{row_prefix}{self.target_name}/{handle.name}', per_run, run_fingerprint,
                    transform=transform,
                    method=method,
                    n_positives=len(self.positives),
                    n_negatives=len(negatives),
                    encoder_id=self.enc.identifier,
                    similarity=classifiers[0].similarity.model_dump(),
                )
            grid[transform] = cells
        return grid

    def sweep(self, variants, test_paths, run_fingerprint, methods=('ada',), n_reps=None, seed=0):
        """
        {row: {test dataset name: EvalReport}}, one row per (variant, method).
        Rows whose method ignores the swept setting reuse the classifiers of
        the first identical configuration.
        """
        grid, trained = {}, {}
        for variant in variants:
            for method in methods:
                cfg = plain_prompt_tuning(variant.cfg) if method == 'coop' else variant.cfg
                augment_kind = variant.augment_kind if method == 'ada' else None
                if method == 'zero_shot':
                    key = fingerprint(method, variant.pair.names, cfg.model_dump(mode='json')['similarity'])
                else:
                    key = fingerprint(method, cfg.model_dump(mode='json'), variant.pair.names, augment_kind,
                                      n_reps or self.settings.n_reps)
                if key not in trained:
                    ConfigManager.console_print(f'{method_row(variant.row, method)}: training')
                    trained[key] = self.classifiers(method, cfg, variant.pair, n_reps, augment_kind)
                cells = self.evaluate(trained[key], test_paths, ['none'], run_fingerprint, seed,
                                      row_prefix=f'{method_prefix(method)}{variant.prefix}', method=method)
                grid[method_row(variant.row, method)] = cells['none']
        return grid


def run_protocol(task, n_reps, enc, cfg, settings=None, spec=None, augment_kind=None, method='ada'):
    """
    Train n_reps classifiers for the task and report the AUC statistics on its
    shared test pool.
    """
    settings = settings or EvalSettings()
    bench = ProtocolBench(task.target, task.non_target, enc, spec, settings)
    pair = ClassPromptPair.from_name(task.pair)
    ConfigManager.console_print(f'{task.name}: {n_reps} repetitions of {method}')

    classifiers = bench.classifiers(method, cfg, pair, n_reps, augment_kind)
    run_fingerprint = fingerprint(task.model_dump(), cfg.model_dump(mode='json'), n_reps, enc.identifier,
                                  settings.model_dump(mode='json'), augment_kind, method)
    cells = bench.evaluate(classifiers, [task.test_source], [task.transform], run_fingerprint, cfg.seed,
                           method=method)
    report = next(iter(cells[task.transform].values())).model_copy(update={'task_name': task.name})
    ConfigManager.console_print(f'{task.name}: AUC {report.auc_mean:.4f} +- {report.auc_std:.4f}')
    return report


def zero_shot_baseline(pair_text, enc, test, similarity=None, task_name='zero-shot'):
    """
    Score with two hand-written prompts (non-target first), no training.

    :param pair_text: two prompt strings, e.g. ('a photo of a real', 'a photo of a fake')
    :param test: labeled batch, label 1 for target images
    """
    if len(pair_text) != 2:
        raise InvalidInputError("zero-shot baseline takes exactly two prompts")
    clf = ZeroShotClassifier(tuple(pair_text), enc.identifier, similarity or enc.default_similarity())
    scores = clf.score(enc, test.batch)
    labels = test.labels.numpy()
    value = auc(ScoreSet(scores[labels == TARGET], scores[labels == NON_TARGET]))
    return EvalReport.from_runs(
        task_name, [value], fingerprint(list(pair_text), enc.identifier, clf.similarity.model_dump()),
        method='zero_shot',
        n_positives=int((labels == TARGET).sum()),
        n_negatives=int((labels == NON_TARGET).sum()),
        encoder_id=enc.identifier,
        similarity=clf.similarity.model_dump(),
    )


def compare_ada_modes(bench, cfg, pair=None, modes=ADA_MODES, test_paths=None, methods=('ada',), n_reps=None,
                      run_fingerprint=None):
    """One row per augmentation mode, everything else fixed."""
    pair = pair or ClassPromptPair('real', 'fake')
    variants = [SweepVariant(mode, cfg.model_copy(update={'ada': cfg.ada.model_copy(update={'mode': mode})}),
                             pair, prefix=f'ada_mode={mode}:')
                for mode in modes]
    run_fingerprint = run_fingerprint or fingerprint(cfg.model_dump(mode='json'), list(modes), 'ada_mode')
    return bench.sweep(variants, test_paths or [bench.non_target_path], run_fingerprint, methods, n_reps, cfg.seed)


def shot_curve(bench, cfg, pair=None, shots=(10, 20, 50, 100, 200), test_paths=None, methods=('ada',), n_reps=None,
               run_fingerprint=None):
    """One row per shot count."""
    pair = pair or ClassPromptPair('real', 'fake')
    variants = [SweepVariant(str(n), cfg.model_copy(update={'shots': int(n)}), pair, prefix=f'shots={n}:')
                for n in shots]
    run_fingerprint = run_fingerprint or fingerprint(cfg.model_dump(mode='json'), list(shots), 'shots')
    return bench.sweep(variants, test_paths or [bench.non_target_path], run_fingerprint, methods, n_reps, cfg.seed)


def labeled_test_batch(positives, negatives):
    """Non-target images labeled 0 followed by target images labeled 1."""
    return concat_labeled([negatives, positives], [NON_TARGET, TARGET])
