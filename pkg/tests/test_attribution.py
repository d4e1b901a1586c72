import itertools

import numpy as np
import pytest
import torch
import yaml

from ada import AdaConfig
from attribution import (Ensemble, attribute, attribute_batch, decide, ensemble_accuracy, load_manifest,
                         multiclass_accuracy, one_vs_rest_test, train_direct_multiclass, update_manifest)
from classifier import MultiClassifier, OneClassClassifier
from data_pipeline import (OTHERS, ImageBatch, LabeledImageBatch, draw_few_shot, load_pool, reserve_test,
                           synth_toy_dataset)
from encoders import SimilarityConfig
from errors import CheckpointError, InvalidInputError
from prompt_learner import ClassPromptPair, init_context


class FixedScores:
    """Stands in for a one-class classifier: per-image scores looked up from the first pixel."""

    def __init__(self, column, encoder_id='toy:0', similarity=SimilarityConfig()):
        self.column = column
        self.encoder_id = encoder_id
        self.similarity = similarity

    def score(self, enc, batch):
        rows = batch.pixels[:, 0, 0, 0].long().tolist()
        return np.array([self.column[r] for r in rows])


def _index_batch(n):
    pixels = torch.zeros(n, 3, 2, 2, dtype=torch.float64)
    pixels[:, 0, 0, 0] = torch.arange(n, dtype=torch.float64)
    return ImageBatch(pixels)


def _ensemble(score_matrix, threshold=0.5, **kwargs):
    matrix = np.asarray(score_matrix, dtype=np.float64)
    return Ensemble([FixedScores(matrix[:, k]) for k in range(matrix.shape[1])], threshold=threshold, **kwargs)


def _oracle(scores, threshold):
    best, best_score = None, -np.inf
    for k, s in enumerate(scores):
        if s > best_score:
            best, best_score = k, s
    return best if best_score > threshold else OTHERS


def test_decision_examples():
    assert decide([0.9, 0.6], 0.5) == (0, 0.9)
    assert decide([0.4, 0.3], 0.5) == (OTHERS, 0.4)
    assert decide([0.7, 0.7], 0.5) == (0, 0.7)
    assert decide([0.5, 0.2], 0.5)[0] == OTHERS
    assert decide([0.51], 0.5)[0] == 0


GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
THRESHOLDS = (0.3, 0.5, 0.7)


def _grid_points():
    for k in (1, 2, 3):
        yield from itertools.product(GRID, repeat=k)


def test_decision_matches_enumeration():
    for scores in _grid_points():
        for threshold in THRESHOLDS:
            decision, max_score = decide(scores, threshold)
            assert decision == _oracle(scores, threshold)
            assert max_score == max(scores)


def test_raising_a_score_never_moves_the_decision_away_from_it():
    for scores in _grid_points():
        for threshold in THRESHOLDS:
            before = decide(scores, threshold)[0]
            for k, value in enumerate(scores):
                for raised in (v for v in GRID if v > value):
                    after = decide(scores[:k] + (raised,) + scores[k + 1:], threshold)[0]
                    assert after in (before, k)
                    if before == k:
                        assert after == k


def test_shuffling_lower_scores_keeps_decision_and_max():
    rng = np.random.default_rng(2)
    for scores in _grid_points():
        scores = np.asarray(scores)
        lower = np.flatnonzero(scores < scores.max())
        for threshold in THRESHOLDS:
            expected = decide(scores, threshold)
            for _ in range(3):
                shuffled = scores.copy()
                shuffled[lower] = scores[rng.permutation(lower)]
                assert decide(shuffled, threshold) == expected


def test_decision_is_monotone_in_threshold():
    rng = np.random.default_rng(0)
    for _ in range(200):
        scores = rng.random(3)
        low, high = sorted(rng.random(2))
        if decide(scores, high)[0] != OTHERS:
            assert decide(scores, low)[0] == decide(scores, high)[0]


def test_decision_follows_classifier_permutation():
    rng = np.random.default_rng(1)
    for _ in range(200):
        scores = rng.random(4)
        permutation = rng.permutation(4)
        decision = decide(scores, 0.5)[0]
        permuted = decide(scores[permutation], 0.5)[0]
        if decision == OTHERS:
            assert permuted == OTHERS
        else:
            assert permutation[permuted] == decision


def test_attribute_reports_scores_and_decision(toy_encoder):
    ens = _ensemble([[0.9, 0.6], [0.4, 0.3]], class_names=['sd', 'mj'])
    results = attribute_batch(ens, toy_encoder, _index_batch(2))
    assert [r.decision for r in results] == [0, OTHERS]
    assert results[0].scores == (0.9, 0.6)
    assert results[0].max_score == 0.9
    assert results[0].to_record(ens.class_names)['source'] == 'sd'
    assert results[1].to_record(ens.class_names)['source'] == 'others'

    single = attribute(ens, toy_encoder, ImageBatch(_index_batch(2).pixels[:1]))
    assert single.decision == 0
    with pytest.raises(InvalidInputError):
        attribute(ens, toy_encoder, _index_batch(2))


def test_ensemble_scores_with_workers(toy_encoder):
    matrix = np.random.default_rng(2).random((6, 3))
    sequential = _ensemble(matrix).scores(toy_encoder, _index_batch(6))
    threaded = _ensemble(matrix, workers=3).scores(toy_encoder, _index_batch(6))
    assert np.array_equal(sequential, matrix)
    assert np.array_equal(threaded, matrix)


def test_ensemble_validation():
    with pytest.raises(InvalidInputError):
        Ensemble([])
    with pytest.raises(InvalidInputError):
        Ensemble([FixedScores([0.5])], threshold=1.0)
    with pytest.raises(InvalidInputError):
        Ensemble([FixedScores([0.5]), FixedScores([0.5], encoder_id='toy:1')])
    with pytest.raises(InvalidInputError):
        Ensemble([FixedScores([0.5]), FixedScores([0.5], similarity=SimilarityConfig(kind='cosine'))])
    with pytest.raises(InvalidInputError):
        Ensemble([FixedScores([0.5])], class_names=['a', 'b'])
    assert Ensemble([FixedScores([0.5]), FixedScores([0.5])]).class_names == ['source_0', 'source_1']


def test_ensemble_accuracy(toy_encoder):
    labels = torch.tensor([0, 1, OTHERS])
    matrix = [[0.9, 0.2], [0.1, 0.8], [0.3, 0.2]]
    test = one_vs_rest_test([_index_batch(1)], None)
    assert test.labels.tolist() == [0]

    labeled = LabeledImageBatch(_index_batch(3), labels)
    assert ensemble_accuracy(_ensemble(matrix), toy_encoder, labeled) == 1.0
    # Everything above threshold except the last image
    assert ensemble_accuracy(_ensemble(matrix, threshold=0.25), toy_encoder, labeled) == pytest.approx(2 / 3)

    # A constant ensemble ignores the image: one third on a balanced K=2 + OTHERS set
    balanced = LabeledImageBatch(_index_batch(6), torch.tensor([0, 0, 1, 1, OTHERS, OTHERS]))
    constant = _ensemble([[0.6, 0.2]] * 6)
    assert ensemble_accuracy(constant, toy_encoder, balanced) == pytest.approx(1 / 3)

    with pytest.raises(InvalidInputError):
        bad_labels = LabeledImageBatch(_index_batch(3), torch.tensor([0, 1, 2]))
        ensemble_accuracy(_ensemble(matrix), toy_encoder, bad_labels)


def test_one_vs_rest_labels():
    test = one_vs_rest_test([_index_batch(2), _index_batch(3)], _index_batch(1))
    assert test.labels.tolist() == [0, 0, 1, 1, 1, OTHERS]


@pytest.fixture(scope='module')
def three_clusters(tmp_path_factory, toy_spec):
    """Non-target cluster plus two source clusters, as two few-shot splits sharing the non-target images."""
    root = tmp_path_factory.mktemp('clusters')
    non_target, source_a = synth_toy_dataset(40, 4.0, dim=(16, 16), seed=0, root=str(root / 'a'), pattern_seed=1,
                                             names=('real', 'sd'))
    _, source_b = synth_toy_dataset(40, 4.0, dim=(16, 16), seed=1, root=str(root / 'b'), pattern_seed=2,
                                    names=('real_b', 'mj'))
    pools = {name: reserve_test(handle, 20) for name, handle in
             (('real', non_target), ('sd', source_a), ('mj', source_b))}
    splits = [draw_few_shot(pools[name][1], pools['real'][1], 10, 0, toy_spec) for name in ('sd', 'mj')]
    tests = {name: load_pool(pools[name][0], toy_spec) for name in pools}
    return splits, tests


def test_direct_multiclass_training(toy_encoder, three_clusters, fast_train_cfg):
    splits, tests = three_clusters
    cfg = fast_train_cfg(epochs=20)
    clf = train_direct_multiclass(splits, toy_encoder, cfg)
    assert clf.class_names == ('real', 'sd', 'mj')
    assert clf.source_names == ('sd', 'mj')
    assert clf.ada.mode == 'non_target'
    assert clf.loss_history[-1] < clf.loss_history[0]

    test = one_vs_rest_test([tests['sd'], tests['mj']], tests['real'])
    probabilities = clf.probabilities(toy_encoder, test.batch)
    assert probabilities.shape == (len(test), 3)
    assert np.allclose(probabilities.sum(axis=1), 1.0)
    predictions = clf.predict(toy_encoder, test.batch)
    assert set(np.unique(predictions)) <= {OTHERS, 0, 1}
    assert 0.0 <= multiclass_accuracy(clf, toy_encoder, test) <= 1.0

    none_cfg = fast_train_cfg(epochs=5, ada=AdaConfig(mode='none'))
    assert train_direct_multiclass(splits, toy_encoder, none_cfg).ada.mode == 'none'
    with pytest.raises(InvalidInputError):
        train_direct_multiclass([], toy_encoder, cfg)
    with pytest.raises(InvalidInputError):
        train_direct_multiclass(splits, toy_encoder, fast_train_cfg(shots=50))


def test_multiclass_checkpoint_round_trip(toy_encoder, three_clusters, fast_train_cfg, tmp_path):
    splits, tests = three_clusters
    clf = train_direct_multiclass(splits, toy_encoder, fast_train_cfg(epochs=5))
    path = str(tmp_path / 'multi.pt')
    clf.save(path)
    loaded = MultiClassifier.load(path)
    assert loaded.class_names == clf.class_names
    assert np.array_equal(loaded.predict(toy_encoder, tests['sd']), clf.predict(toy_encoder, tests['sd']))
    with pytest.raises(CheckpointError):
        OneClassClassifier.load(path)


def _one_class(toy_encoder, seed):
    return OneClassClassifier(init_context(4, toy_encoder.ctx_dim, std=0.5, seed=seed), ClassPromptPair('real', 'fake'),
                              toy_encoder.identifier, toy_encoder.default_similarity(), AdaConfig(), f'fp{seed}')


def test_manifest_round_trip(toy_encoder, tmp_path):
    for name, seed in (('sd', 0), ('mj', 1)):
        _one_class(toy_encoder, seed).save(str(tmp_path / 'checkpoints' / f'{name}.pt'))
        update_manifest(str(tmp_path / 'ensemble.yaml'), name, f'checkpoints/{name}.pt', threshold=0.6)
    # Replacing an entry keeps one per name
    update_manifest(str(tmp_path / 'ensemble.yaml'), 'sd', 'checkpoints/sd.pt', threshold=0.6)

    manifest = yaml.safe_load((tmp_path / 'ensemble.yaml').read_text())
    assert [c['name'] for c in manifest['classifiers']] == ['mj', 'sd']

    ens = load_manifest(str(tmp_path / 'ensemble.yaml'))
    assert ens.threshold == 0.6
    assert ens.class_names == ['mj', 'sd']
    batch = ImageBatch(torch.randn(3, 3, 4, 4, dtype=torch.float64))
    scores = ens.scores(toy_encoder, batch)
    assert scores.shape == (3, 2)
    assert np.allclose(scores[:, 0], _one_class(toy_encoder, 1).score(toy_encoder, batch))


def test_manifest_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_manifest(str(tmp_path / 'missing.yaml'))
    empty = tmp_path / 'empty.yaml'
    empty.write_text('threshold: 0.5\nclassifiers: []\n')
    with pytest.raises(InvalidInputError):
        load_manifest(str(empty))
    dangling = tmp_path / 'dangling.yaml'
    dangling.write_text('classifiers:\n  - name: sd\n    checkpoint: nowhere.pt\n')
    with pytest.raises(CheckpointError):
        load_manifest(str(dangling))
