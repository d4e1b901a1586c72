"""
Experiment driver behind the command line: typed experiment configuration and
the train / eval / sweep / attribute / export-embeddings commands.

Output layout under misc.output_dir:

    config.yaml                      merged configuration of the last command
    checkpoints/<target>/rep_XX.pt   one classifier per repetition
    logs/<target>/rep_XX.jsonl       training logs
    manifest.tsv                     test reservation and few-shot draws
    ensemble.yaml                    one classifier per trained target
    results.jsonl / .tsv / .html     eval reports
    sweep_<axis>.jsonl / .tsv / .html
    attribution_accuracy.json        ensemble (and direct multi-class) accuracy
    embeddings.tsv
"""

import glob
import json
import logging
import os
import sys
from typing import Literal, Optional

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

import reports
from ada import AdaConfig
from attribution import (attribute_batch, ensemble_accuracy, load_manifest, multiclass_accuracy,
                         train_direct_multiclass, update_manifest)
from classifier import OneClassClassifier
from data_pipeline import (OTHERS, PreprocessSpec, concat_labeled, discover_image_files, draw_few_shot,
                           export_manifest, ingest, load_images, load_pool, preprocess, reserve_test)
from encoders import SimilarityConfig, create_encoder, encode_images
from errors import CheckpointError, ConfigError, InvalidInputError
from evaluator import (ADA_MODES, EvalSettings, ProtocolBench, SweepVariant, compare_ada_modes, method_prefix,
                       repetition_config, shot_curve)
from prompt_learner import ClassPromptPair
from trainer import TrainConfig
from transforms import TRANSFORM_KINDS
from utils import ConfigManager, fingerprint

logger = logging.getLogger(__name__)

SWEEP_AXES = ('shots', 'epsilon', 'proportion', 'ada_mode', 'prompt_pair', 'augmentation', 'non_target')


class ToyEncoderSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    embed_dim: int = Field(16, gt=0)
    ctx_dim: int = Field(32, gt=0)
    pool: int = Field(4, gt=0)
    text_scale: float = Field(8.0, gt=0)


class SweepSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    shots: list[int] = [10, 20, 50, 100, 200]
    epsilon: list[float] = [0.0, 0.03125, 0.0625, 0.1, 0.2, 0.5]
    proportion: list[float] = [0.0, 0.25, 0.5, 0.75, 1.0]
    ada_mode: list[str] = list(ADA_MODES)
    prompt_pair: list[str] = ['fake-real', 'negative-positive', 'other-this', 'real-fake', 'positive-negative',
                              'this-other']
    augmentation: list[str] = ['none', 'gaussian_blur', 'gaussian_noise', 'grayscale', 'rotate90', 'flip',
                               'mixture']
    non_target: list[str] = []


class ExperimentConfig(BaseModel):
    """Typed view of the merged configuration."""
    model_config = ConfigDict(frozen=True)

    encoder_id: str = 'toy:0'
    device: Literal['auto', 'cuda', 'cpu'] = 'auto'
    toy: ToyEncoderSettings = ToyEncoderSettings()
    target_dataset: Optional[str] = None
    non_target_dataset: Optional[str] = None
    test_non_target_datasets: list[str] = []
    preprocess_size: Optional[int] = None
    preprocess_mean: Optional[tuple[float, float, float]] = None
    preprocess_std: Optional[tuple[float, float, float]] = None
    prompt_pair: str = 'real-fake'
    train: TrainConfig = TrainConfig()
    similarity_kind: Optional[Literal['dot', 'cosine']] = None
    similarity_temperature: Optional[float] = Field(None, gt=0)
    eval: EvalSettings = EvalSettings()
    sweep: SweepSettings = SweepSettings()
    threshold: float = Field(0.5, gt=0, lt=1)
    output_dir: str = 'runs'
    print_to_terminal: bool = True
    progress_bars: bool = False
    log_level: Literal['DEBUG', 'INFO', 'WARNING', 'ERROR'] = 'INFO'

    @classmethod
    def from_config(cls, config):
        """Build from a ConfigManager-style nested dict."""
        encoder, data, prompt = config['encoder'], config['data'], config['prompt']
        train_section, eval_section, misc = config['train'], config['eval'], config['misc']
        preprocess_section = data.get('preprocess') or {}
        try:
            return cls(
                encoder_id=encoder['id'],
                device=encoder['device'],
                toy=ToyEncoderSettings(**encoder['toy']),
                target_dataset=data['target_dataset'],
                non_target_dataset=data['non_target_dataset'],
                test_non_target_datasets=data['test_non_target_datasets'] or [],
                preprocess_size=preprocess_section.get('size'),
                preprocess_mean=preprocess_section.get('mean'),
                preprocess_std=preprocess_section.get('std'),
                prompt_pair=prompt['pair'],
                train=TrainConfig(
                    n_ctx=prompt['n_ctx'],
                    init_std=prompt['init_std'],
                    ada=AdaConfig(**config['ada']),
                    **train_section,
                ),
                similarity_kind=config['similarity']['kind'],
                similarity_temperature=config['similarity']['temperature'],
                eval=EvalSettings(test_cap=data['test_cap'], **eval_section),
                sweep=SweepSettings(**config['sweep']),
                threshold=config['attribution']['threshold'],
                output_dir=misc['output_dir'],
                print_to_terminal=misc['print_to_terminal'],
                progress_bars=misc['progress_bars'],
                log_level=misc['log_level'],
            )
        except (KeyError, TypeError) as e:
            raise ConfigError('config', f"incomplete configuration: {e}")
        except ValueError as e:
            raise ConfigError('config', str(e))

    def to_config(self):
        """Nested dict in the layout of config_schema.yaml."""
        train_section = self.train.model_dump(mode='json', exclude={'n_ctx', 'init_std', 'ada', 'similarity'})
        eval_section = self.eval.model_dump(mode='json', exclude={'test_cap'})
        return {
            'encoder': {'id': self.encoder_id, 'device': self.device, 'toy': self.toy.model_dump()},
            'data': {
                'target_dataset': self.target_dataset,
                'non_target_dataset': self.non_target_dataset,
                'test_non_target_datasets': list(self.test_non_target_datasets),
                'test_cap': self.eval.test_cap,
                'preprocess': {
                    'size': self.preprocess_size,
                    'mean': list(self.preprocess_mean) if self.preprocess_mean else None,
                    'std': list(self.preprocess_std) if self.preprocess_std else None,
                },
            },
            'prompt': {'pair': self.prompt_pair, 'n_ctx': self.train.n_ctx, 'init_std': self.train.init_std},
            'train': train_section,
            'ada': self.train.ada.model_dump(by_alias=True),
            'similarity': {'kind': self.similarity_kind, 'temperature': self.similarity_temperature},
            'eval': {**eval_section, 'transforms': list(self.eval.transforms), 'methods': list(self.eval.methods)},
            'sweep': self.sweep.model_dump(),
            'attribution': {'threshold': self.threshold},
            'misc': {
                'output_dir': self.output_dir,
                'print_to_terminal': self.print_to_terminal,
                'progress_bars': self.progress_bars,
                'log_level': self.log_level,
            },
        }

    def fingerprint(self):
        """Hash of every setting that can change a result; the misc section only affects where and how loudly."""
        config = self.to_config()
        del config['misc']
        return fingerprint(config)

    def path(self, *parts):
        return os.path.join(self.output_dir, *parts)


def load_experiment(config_path=None, overrides=()):
    ConfigManager.initialize(config_path, overrides)
    return ExperimentConfig.from_config(ConfigManager.get_config())


def build_encoder(cfg, encoder_id=None):
    return create_encoder(encoder_id or cfg.encoder_id, cfg.device, **cfg.toy.model_dump())


def preprocess_spec(cfg, enc):
    spec = enc.default_preprocess()
    update = {k: v for k, v in (('size', cfg.preprocess_size), ('mean', cfg.preprocess_mean),
                                ('std', cfg.preprocess_std)) if v is not None}
    return PreprocessSpec(**{**spec.model_dump(), **update}) if update else spec


def similarity_for(cfg, enc):
    """Encoder convention, overridden by any similarity setting given in the config."""
    default = enc.default_similarity()
    return SimilarityConfig(
        kind=cfg.similarity_kind or default.kind,
        temperature=cfg.similarity_temperature or default.temperature,
    )


def train_config(cfg, enc):
    return cfg.train.model_copy(update={'similarity': similarity_for(cfg, enc)})


def _require_dataset(key, path):
    if not path:
        raise ConfigError(key, "no dataset directory configured")
    if not os.path.isdir(path):
        raise ConfigError(key, f"dataset directory not found: {path}")
    return path


def _dataset_name(path):
    return os.path.basename(os.path.normpath(path))


def _test_datasets(cfg):
    paths = cfg.test_non_target_datasets or [cfg.non_target_dataset]
    return [_require_dataset('data.test_non_target_datasets', p) for p in paths]


def open_bench(cfg, enc, non_target_dataset=None):
    target = _require_dataset('data.target_dataset', cfg.target_dataset)
    non_target = _require_dataset('data.non_target_dataset', non_target_dataset or cfg.non_target_dataset)
    return ProtocolBench(target, non_target, enc, preprocess_spec(cfg, enc), cfg.eval)


def _save_config(cfg):
    os.makedirs(cfg.output_dir, exist_ok=True)
    if ConfigManager._instance is not None:
        ConfigManager.save_config(cfg.path('config.yaml'))


def _clear_repetitions(directory, pattern):
    stale = glob.glob(os.path.join(directory, pattern))
    for path in stale:
        os.remove(path)
    if stale:
        logger.info(f"Removed {len(stale)} files of an earlier run from {directory}")


def cmd_train(cfg):
    """Train one classifier per repetition seed; returns the checkpoint paths."""
    enc = build_encoder(cfg)
    bench = open_bench(cfg, enc)
    _save_config(cfg)
    train_cfg = train_config(cfg, enc)
    pair = ClassPromptPair.from_name(cfg.prompt_pair)
    checkpoint_dir = cfg.path('checkpoints', bench.target_name)
    log_dir = cfg.path('logs', bench.target_name)
    _clear_repetitions(checkpoint_dir, 'rep_*.pt')
    _clear_repetitions(log_dir, 'rep_*.jsonl')
    fingerprint_before = enc.frozen_fingerprint

    results = bench.train_repetitions(train_cfg, pair, log_dir=log_dir)
    if enc.frozen_fingerprint != fingerprint_before:
        raise RuntimeError("encoder parameters changed during training")

    paths = []
    for r, (clf, _) in enumerate(results):
        path = os.path.join(checkpoint_dir, f'rep_{r:02d}.pt')
        clf.save(path)
        paths.append(path)
    test_handles = [bench.target_test] + [bench.negatives(p)[0] for p in _test_datasets(cfg)]
    export_manifest(cfg.path('manifest.tsv'), test_handles, [(r, split) for r, (_, split) in enumerate(results)])
    update_manifest(cfg.path('ensemble.yaml'), bench.target_name, os.path.relpath(paths[0], cfg.output_dir),
                    cfg.threshold, target_dataset=os.path.abspath(cfg.target_dataset),
                    non_target_dataset=os.path.abspath(cfg.non_target_dataset))
    ConfigManager.console_print(f'Saved {len(paths)} checkpoints for {bench.target_name}')
    return paths


def load_classifiers(cfg, target_name, train_cfg):
    """
    Load rep_00 .. rep_{n_reps - 1}. Every checkpoint must have been trained
    with the repetition config derived from train_cfg.
    """
    classifiers = []
    for r in range(cfg.eval.n_reps):
        path = cfg.path('checkpoints', target_name, f'rep_{r:02d}.pt')
        if not os.path.isfile(path):
            raise CheckpointError(f"missing {path}: {cfg.eval.n_reps} repetitions expected; run train first")
        clf = OneClassClassifier.load(path)
        expected = repetition_config(train_cfg, r).fingerprint()
        if clf.train_fingerprint != expected:
            raise CheckpointError(f"{path} was trained with another configuration "
                                  f"({clf.train_fingerprint}, expected {expected}); run train again")
        classifiers.append(clf)
    return classifiers


def _emit_grid(cfg, stem, grid, title, row_label, run_fingerprint):
    """Append every report (plus one Overall per row) to <stem>.jsonl and render the table and HTML."""
    flat = []
    for row, cells in grid.items():
        flat.extend(cells.values())
        flat.append(reports.overall_report(list(cells.values()), name=f'{reports.OVERALL} [{row}]'))
    for report in flat:
        reports.append_report(cfg.path(f'{stem}.jsonl'), report)
    reports.write_table(cfg.path(f'{stem}.tsv'), grid, row_label=row_label, config_fingerprint=run_fingerprint)
    reports.write_html_report(cfg.path(f'{stem}.html'), title, grid,
                              meta={'encoder': cfg.encoder_id, 'fingerprint': run_fingerprint},
                              row_label=row_label)
    return flat


def cmd_eval(cfg):
    """
    Score every method of eval.methods on every (test dataset x transform)
    cell: the saved classifiers for 'ada', freshly trained or zero-shot
    classifiers for the baselines. Returns the reports, each row followed by
    its Overall report.
    """
    enc = build_encoder(cfg)
    bench = open_bench(cfg, enc)
    train_cfg = train_config(cfg, enc)
    pair = ClassPromptPair.from_name(cfg.prompt_pair)
    checkpoints = []
    if 'ada' in cfg.eval.methods:
        checkpoints = load_classifiers(cfg, bench.target_name, train_cfg)
        for clf in checkpoints:
            clf.check_encoder(enc)
    _save_config(cfg)

    run_fingerprint = fingerprint(cfg.fingerprint(), sorted(clf.train_fingerprint for clf in checkpoints))
    test_paths = _test_datasets(cfg)
    grid = {}
    for method in cfg.eval.methods:
        classifiers = checkpoints if method == 'ada' else bench.classifiers(method, train_cfg, pair)
        by_transform = bench.evaluate(classifiers, test_paths, cfg.eval.transforms, run_fingerprint, train_cfg.seed,
                                      row_prefix=method_prefix(method), method=method)
        for transform, cells in by_transform.items():
            label = transform if method == 'ada' else f'{method}, {transform}'
            grid[f'{bench.target_name} [{label}]'] = cells
    flat = _emit_grid(cfg, 'results', grid, f'{bench.target_name} attribution', 'Target', run_fingerprint)
    for report in flat:
        ConfigManager.console_print(f'{report.task_name} [{report.transform}]: '
                                    f'{report.auc_mean:.4f} +- {report.auc_std:.4f}')
    return flat


def _sweep_variant(cfg, train_cfg, axis, value):
    """Validated SweepVariant for one axis value."""
    pair_name, augment = cfg.prompt_pair, None
    row, prefix = str(value), f'{axis}={value}:'
    if axis == 'shots':
        train_cfg = train_cfg.model_copy(update={'shots': int(value)})
    elif axis == 'epsilon':
        train_cfg = train_cfg.model_copy(update={'ada': train_cfg.ada.model_copy(update={'epsilon': float(value)})})
    elif axis == 'proportion':
        train_cfg = train_cfg.model_copy(
            update={'ada': train_cfg.ada.model_copy(update={'proportion': float(value)})})
    elif axis == 'ada_mode':
        train_cfg = train_cfg.model_copy(update={'ada': train_cfg.ada.model_copy(update={'mode': value})})
    elif axis == 'prompt_pair':
        pair_name = value
    elif axis == 'augmentation':
        if value not in TRANSFORM_KINDS:
            raise ValueError(f"expected one of {TRANSFORM_KINDS}")
        augment = value
    elif axis == 'non_target':
        row = _dataset_name(value)
        prefix = f'{axis}={row}:'
    # Re-validate the copied models
    train_cfg = TrainConfig.model_validate(train_cfg.model_dump())
    try:
        pair = ClassPromptPair.from_name(pair_name)
    except InvalidInputError as e:
        raise ValueError(str(e))
    return SweepVariant(row, train_cfg, pair, augment, prefix)


def cmd_sweep(cfg, axis):
    """
    One row of reports per (axis value, method), emitted as
    sweep_<axis>.{jsonl,tsv,html}.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError('axis', f"unknown sweep axis {axis!r}, expected one of {SWEEP_AXES}")
    values = getattr(cfg.sweep, axis)
    if not values:
        raise ConfigError(f'sweep.{axis}', "no values to sweep")

    enc = build_encoder(cfg)
    base_train_cfg = train_config(cfg, enc)
    variants = []
    for value in values:
        try:
            variants.append(_sweep_variant(cfg, base_train_cfg, axis, value))
        except ValueError as e:
            raise ConfigError(f'sweep.{axis}', f"invalid value {value!r}: {e}")
    _save_config(cfg)
    test_paths = _test_datasets(cfg)
    methods = cfg.eval.methods
    run_fingerprint = fingerprint(cfg.fingerprint(), axis)
    pair = ClassPromptPair.from_name(cfg.prompt_pair)
    ConfigManager.console_print(f'Sweep {axis} over {len(values)} values, methods {", ".join(methods)}')

    if axis == 'non_target':
        grid = {}
        for value, variant in zip(values, variants):
            bench = open_bench(cfg, enc, _require_dataset(f'sweep.{axis}', value))
            grid.update(bench.sweep([variant], test_paths, run_fingerprint, methods, seed=base_train_cfg.seed))
    else:
        bench = open_bench(cfg, enc)
        if axis == 'ada_mode':
            grid = compare_ada_modes(bench, base_train_cfg, pair, values, test_paths, methods,
                                     run_fingerprint=run_fingerprint)
        elif axis == 'shots':
            grid = shot_curve(bench, base_train_cfg, pair, values, test_paths, methods,
                              run_fingerprint=run_fingerprint)
        else:
            grid = bench.sweep(variants, test_paths, run_fingerprint, methods, seed=base_train_cfg.seed)
    return _emit_grid(cfg, f'sweep_{axis}', grid, f'Sweep over {axis}', axis, run_fingerprint)


def expand_image_paths(paths):
    """Directories expand to their image files in sorted order."""
    expanded = []
    for path in paths:
        if os.path.isdir(path):
            expanded.extend(discover_image_files(path))
        else:
            expanded.append(path)
    return expanded


def cmd_attribute(cfg, manifest_path, image_paths, out=None):
    """
    One JSON record per image on stdout (or the given stream). Unreadable
    images produce an error record. Returns (records, number of failures).
    """
    ensemble = load_manifest(manifest_path)
    enc = build_encoder(cfg, ensemble.encoder_id)
    spec = preprocess_spec(cfg, enc)
    out = out or sys.stdout

    records, failures = [], 0
    for path in expand_image_paths(image_paths):
        raw = load_images([path])
        if len(raw) == 0:
            record = {'path': path, 'error': 'unreadable image'}
            failures += 1
        else:
            result = attribute_batch(ensemble, enc, preprocess(raw, spec))[0]
            record = result.to_record(ensemble.class_names)
        out.write(json.dumps(record) + '\n')
        records.append(record)
    return records, failures


def parse_labeled(items):
    """['sd=/data/sd', 'others=/data/real'] -> [('sd', '/data/sd'), ('others', '/data/real')]"""
    labeled = []
    for item in items:
        name, sep, path = item.partition('=')
        if not sep or not name.strip() or not path.strip():
            raise ConfigError('--labeled', f"expected NAME=DIR, got {item!r}")
        labeled.append((name.strip(), _require_dataset('--labeled', path.strip())))
    return labeled


def _labeled_test(ensemble, labeled, spec):
    """Images of every labeled directory, labeled with the index of their source or OTHERS."""
    batches, labels = [], []
    for name, path in labeled:
        if name == 'others':
            label = OTHERS
        elif name in ensemble.class_names:
            label = ensemble.class_names.index(name)
        else:
            raise ConfigError('--labeled', f"{name!r} is neither an ensemble class {ensemble.class_names} "
                                           f"nor 'others'")
        batches.append(load_pool(ingest(path), spec))
        labels.append(label)
    return concat_labeled(batches, labels)


def _direct_classifier(cfg, ensemble, enc, spec):
    """
    K + 1-way classifier trained on the datasets recorded in the manifest:
    the training pools of every source and of the first non-target dataset.
    """
    if not ensemble.sources or any(not s.get('target_dataset') or not s.get('non_target_dataset')
                                   for s in ensemble.sources):
        raise ConfigError('--direct', "the manifest does not record the training datasets; train the sources again")
    train_cfg = train_config(cfg, enc)
    _, non_target_train = reserve_test(ingest(ensemble.sources[0]['non_target_dataset']), cfg.eval.test_cap)
    splits = []
    for source in ensemble.sources:
        _, target_train = reserve_test(ingest(source['target_dataset']), cfg.eval.test_cap)
        splits.append(draw_few_shot(target_train, non_target_train, train_cfg.shots, train_cfg.seed, spec))
    pair = ClassPromptPair.from_name(cfg.prompt_pair)
    return train_direct_multiclass(splits, enc, train_cfg, pair.non_target_name, ensemble.class_names)


def cmd_attribution_accuracy(cfg, manifest_path, labeled, direct=False):
    """
    Accuracy of the ensemble decisions on labeled directories, and with
    direct=True of a multi-class classifier trained on the same sources.
    Written to attribution_accuracy.json and returned.
    """
    ensemble = load_manifest(manifest_path)
    enc = build_encoder(cfg, ensemble.encoder_id)
    spec = preprocess_spec(cfg, enc)
    test = _labeled_test(ensemble, labeled, spec)

    labels = test.labels.numpy()
    label_names = {OTHERS: 'others', **dict(enumerate(ensemble.class_names))}
    summary = {
        'manifest': os.path.abspath(manifest_path),
        'threshold': ensemble.threshold,
        'n_images': len(test),
        'per_label': {label_names[int(label)]: int((labels == label).sum()) for label in np.unique(labels)},
        'ensemble_accuracy': ensemble_accuracy(ensemble, enc, test),
    }
    if direct:
        summary['direct_accuracy'] = multiclass_accuracy(_direct_classifier(cfg, ensemble, enc, spec), enc, test)

    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(cfg.path('attribution_accuracy.json'), 'w') as file:
        json.dump(summary, file, indent=2)
    message = f"Ensemble accuracy {summary['ensemble_accuracy']:.4f} on {len(test)} images"
    if direct:
        message += f", direct multi-class {summary['direct_accuracy']:.4f}"
    ConfigManager.console_print(message)
    return summary


def cmd_export_embeddings(cfg, dataset_paths, batch_size=64):
    """Rows of (dataset, path, embedding...) in output_dir/embeddings.tsv."""
    enc = build_encoder(cfg)
    spec = preprocess_spec(cfg, enc)
    handles = [ingest(path) for path in dataset_paths]
    out_path = cfg.path('embeddings.tsv')
    os.makedirs(cfg.output_dir, exist_ok=True)

    n_rows = 0
    with open(out_path, 'w') as file:
        file.write('\t'.join(['dataset', 'path'] + [f'e{i}' for i in range(enc.embed_dim)]) + '\n')
        for handle in handles:
            for start in range(0, handle.count, batch_size):
                batch = preprocess(load_images(handle.files[start:start + batch_size]), spec)
                with torch.no_grad():
                    embeddings = encode_images(enc, batch).data.cpu().numpy()
                for path, row in zip(batch.paths, embeddings):
                    file.write('\t'.join([handle.name, path] + [repr(float(v)) for v in row]) + '\n')
                    n_rows += 1
    ConfigManager.console_print(f'Wrote {n_rows} embeddings to {out_path}')
    return out_path
