import os

import numpy as np
import pytest
import torch

from ada import AdaConfig
from classifier import OneClassClassifier
from data_pipeline import ImageBatch, draw_few_shot, load_pool, reserve_test, synth_toy_dataset
from encoders import ToyEncoderPair, encode_prompts
from errors import InvalidInputError
from evaluator import (EvalReport, EvalSettings, EvalTask, ProtocolBench, ScoreSet, apply_verification_transform,
                       auc, compare_ada_modes, labeled_test_batch, run_protocol, score_images, shot_curve,
                       standard_augmentation_train, zero_shot_baseline, zero_shot_prompts)
from prompt_learner import ClassPromptPair, assemble_prompts, init_context
from trainer import train
from transforms import masked_augmentation


def _pairwise_auc(positives, negatives):
    p, n = np.asarray(positives)[:, None], np.asarray(negatives)[None, :]
    wins = (p > n).sum() + 0.5 * (p == n).sum()
    return wins / (p.size * n.size)


def test_auc_examples():
    assert auc(ScoreSet([0.9, 0.8, 0.3], [0.7, 0.2])) == pytest.approx(5 / 6)
    assert auc(ScoreSet([0.9, 0.6], [0.6, 0.1])) == 0.875
    assert auc(ScoreSet([0.9, 0.4], [0.6, 0.1])) == 0.75
    assert auc(ScoreSet([0.9, 0.8], [0.2, 0.1])) == 1.0
    assert auc(ScoreSet([0.1, 0.2], [0.8, 0.9])) == 0.0
    assert auc(ScoreSet([0.5] * 4, [0.5] * 3)) == 0.5


def test_auc_matches_pairwise_count():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n_pos, n_neg = rng.integers(1, 201, size=2)
        # Coarse rounding produces plenty of ties
        positives = np.round(rng.random(n_pos), 1)
        negatives = np.round(rng.random(n_neg) * 0.9, 1)
        assert auc(ScoreSet(positives, negatives)) == _pairwise_auc(positives, negatives)


def test_auc_invariant_under_increasing_maps():
    rng = np.random.default_rng(1)
    positives, negatives = np.round(rng.random(40), 2), np.round(rng.random(30), 2)
    value = auc(ScoreSet(positives, negatives))
    assert auc(ScoreSet(np.exp(positives), np.exp(negatives))) == value
    assert auc(ScoreSet(positives ** 3 + 2, negatives ** 3 + 2)) == value


def test_auc_rejects_empty_and_non_finite():
    with pytest.raises(InvalidInputError):
        auc(ScoreSet([], [0.1]))
    with pytest.raises(InvalidInputError):
        auc(ScoreSet([0.2], []))
    with pytest.raises(InvalidInputError):
        ScoreSet([float('nan')], [0.1])


def test_report_statistics():
    report = EvalReport.from_runs('task', [0.9], 'fp')
    assert report.auc_mean == 0.9 and report.auc_std == 0.0
    report = EvalReport.from_runs('task', [0.8, 1.0], 'fp')
    assert report.auc_mean == pytest.approx(0.9)
    assert report.auc_std == pytest.approx(0.1)
    assert report.optimizer == {'name': 'sgd', 'momentum': 0.0, 'weight_decay': 0.0}
    with pytest.raises(InvalidInputError):
        EvalReport.from_runs('task', [], 'fp')


def test_score_of_image_aligned_with_target_direction(toy_encoder):
    ctx = init_context(4, toy_encoder.ctx_dim, std=0.5, seed=0)
    pair = ClassPromptPair('real', 'fake')
    clf = OneClassClassifier(ctx, pair, toy_encoder.identifier, toy_encoder.default_similarity(), AdaConfig(), 'fp')
    prompts = encode_prompts(toy_encoder, assemble_prompts(ctx, pair)).data
    direction = prompts[1] - prompts[0]

    # 4x4 images pool to themselves, so solve the affine image map for a chosen embedding
    weight, bias = toy_encoder.image_weight, toy_encoder.image_bias
    solve = torch.linalg.pinv(weight)
    towards = (solve @ (2.0 * direction - bias)).view(1, 3, 4, 4)
    away = (solve @ (-2.0 * direction - bias)).view(1, 3, 4, 4)
    scores = score_images(clf, toy_encoder, ImageBatch(torch.cat([towards, away])))
    assert len(scores) == 2
    assert scores[0] > 0.5 > scores[1]
    assert scores == score_images(clf, toy_encoder, ImageBatch(torch.cat([towards, away])))


def test_score_rejects_other_encoder(toy_encoder):
    ctx = init_context(4, toy_encoder.ctx_dim)
    clf = OneClassClassifier(ctx, ClassPromptPair('real', 'fake'), 'toy:0', toy_encoder.default_similarity(),
                             AdaConfig(), 'fp')
    with pytest.raises(InvalidInputError):
        score_images(clf, ToyEncoderPair(seed=1), ImageBatch(torch.zeros(1, 3, 4, 4, dtype=torch.float64)))


def test_verification_transforms():
    pixels = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    batch = ImageBatch(pixels, ('a.png', 'b.png'))

    assert torch.equal(apply_verification_transform(batch, 'none').pixels, pixels)
    flipped = apply_verification_transform(batch, 'flip')
    assert torch.equal(apply_verification_transform(flipped, 'flip').pixels, pixels)
    rotated = batch
    for _ in range(4):
        rotated = apply_verification_transform(rotated, 'rotate90')
    assert torch.equal(rotated.pixels, pixels)

    gray = apply_verification_transform(batch, 'grayscale').pixels
    assert torch.equal(gray[:, 0], gray[:, 1]) and torch.equal(gray[:, 1], gray[:, 2])

    noisy = apply_verification_transform(batch, 'gaussian_noise', seed=3).pixels
    assert torch.equal(noisy, apply_verification_transform(batch, 'gaussian_noise', seed=3).pixels)
    assert not torch.equal(noisy, apply_verification_transform(batch, 'gaussian_noise', seed=4).pixels)

    for kind in ('gaussian_blur', 'mixture'):
        out = apply_verification_transform(batch, kind)
        assert out.pixels.shape == pixels.shape
        assert out.paths == batch.paths

    with pytest.raises(InvalidInputError):
        apply_verification_transform(batch, 'jpeg')


def test_masked_augmentation_touches_only_masked_images():
    pixels = torch.randn(4, 3, 8, 8, dtype=torch.float64)
    mask = torch.tensor([True, False, True, False])
    out = masked_augmentation('flip')(ImageBatch(pixels), mask, 0).pixels
    assert torch.equal(out[~mask], pixels[~mask])
    assert torch.equal(out[mask], torch.flip(pixels[mask], dims=(3,)))
    assert torch.equal(masked_augmentation('none')(ImageBatch(pixels), mask, 0).pixels, pixels)
    with pytest.raises(InvalidInputError):
        masked_augmentation('sharpen')


@pytest.fixture(scope='module')
def toy_task(tmp_path_factory):
    root = tmp_path_factory.mktemp('protocol')
    non_target, target = synth_toy_dataset(110, separation=4.0, dim=(16, 16), seed=1, root=str(root))
    return EvalTask(name='toy', target=target.root, non_target=non_target.root)


def _protocol_settings(**overrides):
    return EvalSettings(**{'n_reps': 3, 'test_cap': 60, **overrides})


def test_run_protocol_on_separable_task(toy_encoder, toy_spec, toy_task, fast_train_cfg):
    cfg = fast_train_cfg()
    report = run_protocol(toy_task, 5, toy_encoder, cfg, _protocol_settings(), toy_spec)
    assert report.n_repetitions == 5
    assert len(report.per_run_auc) == 5
    assert report.n_positives == 60 and report.n_negatives == 60
    assert report.encoder_id == 'toy:0'
    assert report.auc_mean > 0.95

    again = run_protocol(toy_task, 5, toy_encoder, cfg, _protocol_settings(), toy_spec)
    assert again.per_run_auc == report.per_run_auc
    assert again.config_fingerprint == report.config_fingerprint


def test_single_repetition_has_zero_std(toy_encoder, toy_spec, toy_task, fast_train_cfg):
    report = run_protocol(toy_task, 1, toy_encoder, fast_train_cfg(epochs=10), _protocol_settings(), toy_spec)
    assert report.n_repetitions == 1
    assert report.auc_std == 0.0


def test_run_protocol_with_transform_and_workers(toy_encoder, toy_spec, toy_task, fast_train_cfg):
    cfg = fast_train_cfg(epochs=10)
    sequential = run_protocol(toy_task.model_copy(update={'transform': 'flip'}), 2, toy_encoder, cfg,
                              _protocol_settings(), toy_spec)
    threaded = run_protocol(toy_task.model_copy(update={'transform': 'flip'}), 2, toy_encoder, cfg,
                            _protocol_settings(workers=2), toy_spec)
    assert sequential.transform == 'flip'
    assert sequential.per_run_auc == threaded.per_run_auc


def test_indistinguishable_classes_score_near_chance(toy_encoder, toy_spec, tmp_path, fast_train_cfg):
    non_target, target = synth_toy_dataset(200, separation=0.0, dim=(16, 16), seed=2, root=str(tmp_path))
    task = EvalTask(name='chance', target=target.root, non_target=non_target.root)
    report = run_protocol(task, 5, toy_encoder, fast_train_cfg(epochs=30), _protocol_settings(test_cap=150),
                          toy_spec)
    assert 0.4 <= report.auc_mean <= 0.6


class _AlignedTextEncoder(ToyEncoderPair):
    """Toy encoder whose hand-written prompts embed to fixed vectors."""

    def __init__(self, prompt_embeddings, **kwargs):
        super().__init__(**kwargs)
        self.prompt_embeddings = prompt_embeddings

    def text_features(self, texts):
        return self.prompt_embeddings[:len(texts)]


def test_zero_shot_baseline(toy_encoder, toy_spec, toy_datasets):
    non_target, target = toy_datasets
    negatives = load_pool(reserve_test(non_target, 30)[0], toy_spec)
    positives = load_pool(reserve_test(target, 30)[0], toy_spec)
    test = labeled_test_batch(positives, negatives)

    means = torch.stack([toy_encoder.image_features(negatives.pixels).mean(dim=0),
                         toy_encoder.image_features(positives.pixels).mean(dim=0)])
    # Centre the prompts so the shared image component does not dominate the similarity
    aligned = _AlignedTextEncoder(means - means.mean(dim=0), seed=0)
    report = zero_shot_baseline(('a photo of a real', 'a photo of a fake'), aligned, test)
    assert report.n_repetitions == 1 and report.auc_std == 0.0
    assert report.auc_mean > 0.5
    assert report.n_positives == 30 and report.n_negatives == 30

    prompts = zero_shot_prompts(ClassPromptPair('real', 'fake'))
    assert prompts == ('a photo of a real', 'a photo of a fake')
    first = zero_shot_baseline(prompts, toy_encoder, test)
    assert first == zero_shot_baseline(prompts, toy_encoder, test)
    with pytest.raises(InvalidInputError):
        zero_shot_baseline(('only one',), toy_encoder, test)


def test_plain_augmentation_is_prompt_tuning(toy_encoder, toy_spec, toy_datasets, fast_train_cfg):
    non_target, target = toy_datasets
    split = draw_few_shot(reserve_test(target, 20)[1], reserve_test(non_target, 20)[1], 10, 0, toy_spec)
    cfg = fast_train_cfg(epochs=5)
    plain = standard_augmentation_train('none', split, toy_encoder, cfg)
    coop = train(split, toy_encoder, cfg.model_copy(update={'ada': AdaConfig(mode='none')}))
    assert torch.equal(plain.ctx.context, coop.ctx.context)

    flipped = standard_augmentation_train('flip', split, toy_encoder, cfg)
    assert not torch.equal(flipped.ctx.context, coop.ctx.context)


@pytest.fixture(scope='module')
def toy_bench(toy_task, toy_encoder, toy_spec):
    return ProtocolBench(toy_task.target, toy_task.non_target, toy_encoder, toy_spec, _protocol_settings())


def test_bench_reserves_test_pools_once(toy_bench, toy_task):
    assert len(toy_bench.positives) == 60
    assert toy_bench.target_train.count == 50
    handle, negatives = toy_bench.negatives(toy_task.non_target)
    assert toy_bench.negatives(toy_task.non_target + os.sep)[1] is negatives
    assert handle.files == toy_bench.non_target_test.files


def test_bench_workers_do_not_change_results(toy_task, toy_encoder, toy_spec, fast_train_cfg):
    cfg = fast_train_cfg(epochs=10)
    pair = ClassPromptPair('real', 'fake')
    results = {}
    for workers in (1, 3):
        bench = ProtocolBench(toy_task.target, toy_task.non_target, toy_encoder, toy_spec,
                              _protocol_settings(workers=workers))
        results[workers] = bench.train_repetitions(cfg, pair)
    assert len(results[3]) == 3
    for (a, split_a), (b, split_b) in zip(results[1], results[3]):
        assert torch.equal(a.ctx.context, b.ctx.context)
        assert split_a.target.paths == split_b.target.paths
    # Repetitions draw disjoint images
    drawn = [set(split.target.paths) for _, split in results[3]]
    assert not drawn[0] & drawn[1] and not drawn[1] & drawn[2]


def test_bench_classifiers_per_method(toy_bench, toy_encoder, fast_train_cfg):
    cfg = fast_train_cfg(epochs=5)
    pair = ClassPromptPair('real', 'fake')
    zero_shot = toy_bench.classifiers('zero_shot', cfg, pair)
    assert len(zero_shot) == 1
    assert zero_shot[0].prompts == ('a photo of a real', 'a photo of a fake')

    coop = toy_bench.classifiers('coop', cfg, pair, n_reps=2)
    assert all(clf.ada.mode == 'none' for clf in coop)
    plain = toy_bench.classifiers('ada', cfg.model_copy(update={'ada': AdaConfig(mode='none')}), pair, n_reps=2)
    assert all(torch.equal(a.ctx.context, b.ctx.context) for a, b in zip(coop, plain))
    with pytest.raises(InvalidInputError):
        toy_bench.classifiers('nearest_neighbour', cfg, pair)


def test_zero_shot_method_matches_baseline(toy_bench, toy_encoder, toy_task, fast_train_cfg):
    cfg = fast_train_cfg()
    report = run_protocol(toy_task, 1, toy_encoder, cfg, _protocol_settings(), toy_bench.spec, method='zero_shot')
    _, negatives = toy_bench.negatives(toy_task.non_target)
    baseline = zero_shot_baseline(zero_shot_prompts(ClassPromptPair('real', 'fake')), toy_encoder,
                                  labeled_test_batch(toy_bench.positives, negatives))
    assert report.method == 'zero_shot'
    assert report.per_run_auc == pytest.approx(baseline.per_run_auc)


def test_compare_ada_modes_reports_every_mode(toy_bench, fast_train_cfg):
    grid = compare_ada_modes(toy_bench, fast_train_cfg(epochs=5), n_reps=1)
    assert list(grid) == ['none', 'target', 'both', 'target_as_non_target', 'non_target']
    for mode, cells in grid.items():
        (report,) = cells.values()
        assert report.task_name == f'ada_mode={mode}:toy_target/toy_non_target'
        assert report.n_repetitions == 1


def test_sweep_rows_per_method_reuse_baselines(toy_bench, fast_train_cfg):
    grid = shot_curve(toy_bench, fast_train_cfg(epochs=5), shots=(5, 10), methods=('ada', 'coop', 'zero_shot'),
                      n_reps=1)
    assert list(grid) == ['5', '5 [coop]', '5 [zero_shot]', '10', '10 [coop]', '10 [zero_shot]']
    zero_shot = [next(iter(grid[row].values())) for row in ('5 [zero_shot]', '10 [zero_shot]')]
    # Zero-shot scoring does not depend on the shot count
    assert zero_shot[0].per_run_auc == zero_shot[1].per_run_auc
    assert zero_shot[0].task_name == 'zero_shot:shots=5:toy_target/toy_non_target'
    assert next(iter(grid['10 [coop]'].values())).method == 'coop'


def test_settings_reject_unknown_transforms_and_methods():
    with pytest.raises(ValueError):
        EvalSettings(transforms=('none', 'jpeg'))
    with pytest.raises(ValueError):
        EvalSettings(methods=('ada', 'nearest_neighbour'))
    with pytest.raises(ValueError):
        EvalSettings(methods=())
    assert EvalSettings(methods=['coop', 'ada', 'coop']).methods == ('coop', 'ada')
