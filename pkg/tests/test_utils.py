import pytest
import yaml

from encoders import ToyEncoderPair
from errors import ConfigError
from experiment import ExperimentConfig, load_experiment, preprocess_spec, similarity_for, train_config
from utils import ConfigManager, fingerprint, parse_override


def test_defaults_come_from_schema():
    ConfigManager.initialize()
    assert ConfigManager.get_config_value('train', 'epochs') == 200
    assert ConfigManager.get_config_value('ada', 'ada_mode') == 'non_target'
    assert ConfigManager.get_config_value('encoder', 'toy', 'ctx_dim') == 32
    assert ConfigManager.get_config_value('missing', 'key') is None


def test_user_file_and_overrides_merge(tmp_path):
    path = tmp_path / 'config.yaml'
    path.write_text(yaml.safe_dump({'train': {'epochs': 50, 'shots': 10}, 'ada': {'epsilon': 0.2}}))
    ConfigManager.initialize(str(path), ['train.epochs=30', 'ada.ada_mode=both'])
    assert ConfigManager.get_config_value('train', 'epochs') == 30
    assert ConfigManager.get_config_value('train', 'shots') == 10
    assert ConfigManager.get_config_value('train', 'base_lr') == 0.0001
    assert ConfigManager.get_config_value('ada', 'epsilon') == 0.2
    assert ConfigManager.get_config_value('ada', 'ada_mode') == 'both'


def test_invalid_configuration_is_rejected(tmp_path):
    with pytest.raises(ConfigError):
        ConfigManager.initialize(None, ['train.epochz=3'])
    with pytest.raises(ConfigError):
        ConfigManager.initialize(None, ['ada.ada_mode=sideways'])
    with pytest.raises(ConfigError):
        ConfigManager.initialize(None, ['train.epochs=many'])
    with pytest.raises(ConfigError):
        ConfigManager.initialize(None, ['misc.print_to_terminal=3'])
    with pytest.raises(ConfigError):
        ConfigManager.initialize(None, ['train.epochs=true'])
    with pytest.raises(ConfigError):
        ConfigManager.initialize(str(tmp_path / 'missing.yaml'))
    broken = tmp_path / 'broken.yaml'
    broken.write_text('train: [unclosed\n')
    with pytest.raises(ConfigError):
        ConfigManager.initialize(str(broken))


def test_parse_override():
    assert parse_override('train.epochs=5') == (['train', 'epochs'], 5)
    assert parse_override('eval.transforms=[none, flip]') == (['eval', 'transforms'], ['none', 'flip'])
    assert parse_override('data.target_dataset=') == (['data', 'target_dataset'], None)
    with pytest.raises(ConfigError):
        parse_override('train.epochs')


def test_save_config_round_trip(tmp_path):
    ConfigManager.initialize(None, ['train.seed=7', 'eval.methods=[ada, zero_shot]'])
    path = tmp_path / 'saved.yaml'
    ConfigManager.save_config(str(path))
    saved = ConfigManager.get_config()
    ConfigManager.initialize(str(path))
    assert ConfigManager.get_config_value('train', 'seed') == 7
    assert ConfigManager.get_config() == saved


def test_fingerprint_is_key_order_independent():
    assert fingerprint({'a': 1, 'b': [1, 2]}) == fingerprint({'b': [1, 2], 'a': 1})
    assert fingerprint({'a': 1}) != fingerprint({'a': 2})
    assert len(fingerprint('x')) == 16


def test_experiment_config_round_trip():
    cfg = load_experiment(None, ['train.epochs=20', 'ada.ada_proportion=0.25', 'eval.transforms=[none, flip]',
                                 'data.test_cap=40', 'prompt.n_ctx=8', 'eval.methods=[coop, ada]',
                                 'misc.print_to_terminal=false', 'misc.progress_bars=true', 'misc.log_level=DEBUG'])
    assert cfg.train.epochs == 20
    assert cfg.train.n_ctx == 8
    assert cfg.train.ada.proportion == 0.25
    assert cfg.eval.transforms == ('none', 'flip')
    assert cfg.eval.methods == ('coop', 'ada')
    assert cfg.eval.test_cap == 40
    assert (cfg.print_to_terminal, cfg.progress_bars, cfg.log_level) == (False, True, 'DEBUG')
    assert ExperimentConfig.from_config(cfg.to_config()) == cfg
    assert ExperimentConfig.from_config(cfg.to_config()).fingerprint() == cfg.fingerprint()
    assert cfg.to_config()['misc'] == ConfigManager.get_config()['misc']


def test_fingerprint_ignores_output_settings():
    base = load_experiment(None, [])
    quiet = load_experiment(None, ['misc.print_to_terminal=false', 'misc.log_level=ERROR', 'misc.output_dir=elsewhere'])
    assert quiet.fingerprint() == base.fingerprint()
    assert load_experiment(None, ['train.epochs=20']).fingerprint() != base.fingerprint()


def test_unknown_transform_or_method_is_a_config_error():
    with pytest.raises(ConfigError):
        load_experiment(None, ['eval.transforms=[none, jpeg]'])
    with pytest.raises(ConfigError):
        load_experiment(None, ['eval.transforms=[]'])
    with pytest.raises(ConfigError):
        load_experiment(None, ['eval.methods=[ada, nearest_neighbour]'])


def test_experiment_config_rejects_invalid_schedule():
    with pytest.raises(ConfigError):
        load_experiment(None, ['train.epochs=1', 'train.warm_epochs=1'])


def test_encoder_conventions_and_overrides():
    enc = ToyEncoderPair(seed=0)
    cfg = load_experiment(None, [])
    assert similarity_for(cfg, enc) == enc.default_similarity()
    assert preprocess_spec(cfg, enc) == enc.default_preprocess()
    assert train_config(cfg, enc).similarity == enc.default_similarity()

    cfg = load_experiment(None, ['similarity.kind=cosine', 'similarity.temperature=0.05', 'data.preprocess.size=16'])
    similarity = similarity_for(cfg, enc)
    assert (similarity.kind, similarity.temperature) == ('cosine', 0.05)
    spec = preprocess_spec(cfg, enc)
    assert spec.size == 16 and spec.mean == enc.default_preprocess().mean
