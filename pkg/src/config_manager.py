import copy
import json
import logging
import numbers
import os
import typing

import numpy as np

from errors import ConfigError


def deep_merge(base, update):
    """Return a copy of ``base`` with ``update`` merged in, recursing into dicts."""
    merged = copy.deepcopy(base)
    for key, value in (update or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(text):
    """Parse ``section.key=value``; the value is read as JSON, falling back to a string."""
    if '=' not in text:
        raise ConfigError(f"Override must look like key=value, got '{text}'")
    key, raw = text.split('=', 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"Override has an empty key: '{text}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _matches_type(value, annotation):
    """Whether a settings value fits its field annotation; ints are accepted for floats."""
    if annotation is typing.Any:
        return True
    if typing.get_origin(annotation) is typing.Union:
        return any(_matches_type(value, arg) for arg in typing.get_args(annotation))
    if annotation is type(None):
        return value is None
    if annotation is bool:
        return isinstance(value, (bool, np.bool_))
    if annotation is int:
        return isinstance(value, numbers.Integral) and not isinstance(value, (bool, np.bool_))
    if annotation is float:
        return isinstance(value, numbers.Real) and not isinstance(value, (bool, np.bool_))
    origin = typing.get_origin(annotation) or annotation
    return not isinstance(origin, type) or isinstance(value, origin)


def settings_from_dict(cls, data, section=''):
    """Build a settings dataclass from a dict, ignoring unknown keys and rejecting mistyped values."""
    logger = logging.getLogger(__name__)
    fields = cls.__dataclass_fields__
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in (data or {}).items():
        if key not in fields:
            logger.warning(f"Ignoring unknown setting '{section}.{key}'")
            continue
        if not _matches_type(value, hints.get(key, typing.Any)):
            raise ConfigError(f"Setting '{section}.{key}' has type {type(value).__name__}, "
                              f"expected {getattr(hints[key], '__name__', hints[key])}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid '{section}' settings: {e}") from e


class ConfigManager:
    def __init__(self, default_settings_path, user_settings_path, overrides=None):
        self.default_settings_path = default_settings_path
        self.user_settings_path = user_settings_path
        self.overrides = list(overrides or [])
        self.logger = logging.getLogger(__name__)
        self.config = self.load_config()

    def load_config(self):
        config = self._load_json_file(self.default_settings_path)
        user_config = self._load_json_file(self.user_settings_path)
        if user_config:
            config = deep_merge(config, user_config)
        for override in self.overrides:
            key, value = parse_override(override)
            self._set_path(config, key, value)
        return config

    def _load_json_file(self, file_path):
        if os.path.exists(file_path):
            with open(file_path, 'r') as f:
                try:
                    return json.load(f)
                except json.JSONDecodeError:
                    # Handle empty or invalid JSON
                    return {}
        return {}

    @staticmethod
    def _set_path(config, key, value):
        parts = key.split('.')
        node = config
        for part in parts[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = {}
                node[part] = child
            node = child
        node[parts[-1]] = value

    def get(self, key, default=None):
        node = self.config
        for part in key.split('.'):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def section(self, name):
        return copy.deepcopy(self.config.get(name, {}))

    def set(self, key, value):
        self._set_path(self.config, key, value)
        self.save_user_config(key, value)

    def save_user_config(self, key, value):
        user_config = self._load_json_file(self.user_settings_path)
        self._set_path(user_config, key, value)
        with open(self.user_settings_path, 'w') as f:
            json.dump(user_config, f, indent=4)
        self.logger.debug(f"Saved user setting {key}={value!r}")

    def reload_config(self):
        self.config = self.load_config()
