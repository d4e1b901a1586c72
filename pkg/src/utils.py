import copy
import hashlib
import json
import logging
import os

import coloredlogs
import yaml
from tqdm import tqdm

from errors import ConfigError

logger = logging.getLogger(__name__)

_TYPES = {
    'str': str,
    'int': int,
    'float': (int, float),
    'bool': bool,
    'list': list,
}


def setup_logging(level='INFO'):
    """Install the colored console handler on the root logger."""
    coloredlogs.install(level=level, fmt='%(asctime)s %(name)s %(levelname)s %(message)s')


def fingerprint(*parts):
    """Short sha256 digest of JSON-serialisable parts, stable across runs."""
    payload = json.dumps(parts, sort_keys=True, default=str, separators=(',', ':'))
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()[:16]


def parse_override(text):
    """Split 'a.b.c=value' into (['a', 'b', 'c'], parsed value)."""
    if '=' not in text:
        raise ConfigError(text, "override must look like key.path=value")
    key, raw = text.split('=', 1)
    key = key.strip()
    if not key:
        raise ConfigError(text, "empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(key, f"cannot parse value {raw!r}: {e}")
    return key.split('.'), value


class ConfigManager:
    _instance = None

    def __init__(self):
        """Initialize the ConfigManager instance."""
        self.config = None
        self.schema = None

    @classmethod
    def initialize(cls, config_path=None, overrides=(), schema_path=None):
        """
        Build the configuration: schema defaults, then the user file, then key=value overrides.
        Re-initializing replaces the previous configuration.
        """
        instance = cls()
        instance.schema = instance.load_config_schema(schema_path)
        instance.config = instance.load_default_config()
        if config_path is not None:
            instance.load_user_config(config_path)
        for override in overrides:
            keys, value = parse_override(override)
            instance._check_known(keys)
            instance._set(value, *keys)
        instance.validate()
        cls._instance = instance
        return instance

    @classmethod
    def _require(cls):
        if cls._instance is None:
            raise RuntimeError("ConfigManager not initialized")
        return cls._instance

    @classmethod
    def get_config(cls):
        """Get a deep copy of the whole configuration."""
        return copy.deepcopy(cls._require().config)

    @classmethod
    def get_config_value(cls, *keys):
        """Get a specific configuration value using nested keys."""
        value = cls._require().config
        for key in keys:
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return None
        return value

    def _set(self, value, *keys):
        config = self.config
        for key in keys[:-1]:
            if key not in config or not isinstance(config[key], dict):
                config[key] = {}
            config = config[key]
        config[keys[-1]] = value

    def _schema_entry(self, keys):
        entry = self.schema
        for key in keys:
            if not isinstance(entry, dict) or 'value' in entry or key not in entry:
                return None
            entry = entry[key]
        return entry

    def _check_known(self, keys):
        entry = self._schema_entry(keys)
        if entry is None:
            raise ConfigError('.'.join(keys), "unknown configuration key")

    @staticmethod
    def load_config_schema(schema_path=None):
        """Load the configuration schema from a YAML file."""
        if schema_path is None:
            base_dir = os.path.dirname(os.path.abspath(__file__))
            schema_path = os.path.join(base_dir, 'config_schema.yaml')

        with open(schema_path, 'r') as file:
            schema = yaml.safe_load(file)
        return schema

    def load_default_config(self):
        """Load default configuration values from the schema."""
        def extract_value(item):
            if isinstance(item, dict):
                if 'value' in item:
                    return copy.deepcopy(item['value'])
                else:
                    return {k: extract_value(v) for k, v in item.items()}
            return item

        config = {}
        for category, settings in self.schema.items():
            config[category] = extract_value(settings)
        return config

    def load_user_config(self, config_path):
        """Load user configuration and merge with default config."""
        def deep_update(source, overrides, prefix):
            for key, value in overrides.items():
                path = prefix + [key]
                self._check_known(path)
                if isinstance(value, dict) and isinstance(source.get(key), dict):
                    deep_update(source[key], value, path)
                else:
                    source[key] = value

        if not os.path.isfile(config_path):
            raise ConfigError('config', f"configuration file not found: {config_path}")
        try:
            with open(config_path, 'r') as file:
                user_config = yaml.safe_load(file) or {}
        except yaml.YAMLError as e:
            raise ConfigError('config', f"error in configuration file {config_path}: {e}")
        if not isinstance(user_config, dict):
            raise ConfigError('config', "top level of the configuration file must be a mapping")
        deep_update(self.config, user_config, [])

    def validate(self):
        """Check every leaf value against its schema type and options."""
        def walk(schema, config, prefix):
            for key, entry in schema.items():
                path = prefix + [key]
                if isinstance(entry, dict) and 'value' in entry:
                    value = config.get(key)
                    if value is None:
                        continue
                    expected = _TYPES.get(entry.get('type'), object)
                    if isinstance(value, bool) and entry.get('type') in ('int', 'float'):
                        raise ConfigError('.'.join(path), f"expected {entry['type']}, got bool")
                    if not isinstance(value, expected):
                        raise ConfigError('.'.join(path),
                                          f"expected {entry.get('type')}, got {type(value).__name__}")
                    options = entry.get('options')
                    if options is not None and value not in options:
                        raise ConfigError('.'.join(path), f"{value!r} is not one of {options}")
                elif isinstance(entry, dict):
                    walk(entry, config.get(key) or {}, path)

        walk(self.schema, self.config, [])

    @classmethod
    def save_config(cls, config_path):
        """Save the current configuration to a YAML file."""
        instance = cls._require()
        with open(config_path, 'w') as file:
            yaml.safe_dump(instance.config, file, default_flow_style=False, sort_keys=True)

    @classmethod
    def console_print(cls, message):
        """Print a message to the console if enabled in the configuration."""
        if cls._instance is None or cls._instance.config['misc']['print_to_terminal']:
            logger.info(message)


def progress(iterable, desc=None, **kwargs):
    """tqdm progress bar, shown only when misc.progress_bars is enabled."""
    enabled = ConfigManager._instance is not None and bool(ConfigManager.get_config_value('misc', 'progress_bars'))
    return tqdm(iterable, desc=desc, disable=not enabled, leave=False, **kwargs)
