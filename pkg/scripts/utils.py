import hashlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import yaml

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

_handlers = []


class VWPError(Exception):
    """Root of all errors raised by the pipeline."""

    exit_code = 1


class ConfigError(VWPError, ValueError):
    exit_code = 1


class DataError(VWPError, ValueError):
    """Malformed or inconsistent input data.

    `context` names where the problem was found, e.g. ``data.jsonl:12`` or a
    sequence id.
    """

    exit_code = 2

    def __init__(self, message, context=None):
        self.context = context
        if context:
            message = "{}: {}".format(context, message)
        super().__init__(message)


class SizeError(DataError):
    pass


class ResourceError(DataError):
    pass


class TargetError(DataError, IndexError):
    """A token target outside the vocabulary."""


class NumericError(VWPError, ArithmeticError):
    exit_code = 3


class EmptyLossError(NumericError):
    pass


class StateError(NumericError):
    pass


class TrainingError(NumericError):
    def __init__(self, message, epoch=None, batch=None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(
            "{} (epoch={}, batch={})".format(message, epoch, batch)
            if epoch is not None
            else message
        )


def setup_logging(artifact_dir=None, stream=None):
    """Configure the root logger the way every pipeline step does.

    Args:
        artifact_dir (str): if given, a ``log.log`` file handler is added there
        stream: stream for progress lines, standard error by default

    Returns:
        logger: the configured root logger
    """
    level_name = os.environ.get("VWP_LOG", "info").lower()
    level = LOG_LEVELS.get(level_name, logging.INFO)

    logger = logging.getLogger()
    # repeated setup (tests, chained subcommands) must not duplicate output
    for handler in _handlers:
        logger.removeHandler(handler)
        handler.close()
    _handlers.clear()

    logger.setLevel(level)
    logging.captureWarnings(True)
    formatter = logging.Formatter(LOG_FORMAT, LOG_DATE_FORMAT)

    stream_handler = logging.StreamHandler(stream or sys.stderr)
    stream_handler.setLevel(level)
    stream_handler.setFormatter(formatter)
    logger.addHandler(stream_handler)
    _handlers.append(stream_handler)

    if artifact_dir is not None:
        os.makedirs(artifact_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(artifact_dir, "log.log"))
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
        _handlers.append(file_handler)

    if level_name not in LOG_LEVELS:
        warnings.warn(
            "Unknown VWP_LOG level `{}`, falling back to info".format(level_name)
        )
    return logger


def file_md5(path):
    with open(path, "rb") as f:
        return hashlib.md5(f.read()).hexdigest()


def dump_json(obj, indent=2):
    # sorted keys keep reports diffable
    return json.dumps(obj, sort_keys=True, indent=indent, ensure_ascii=False)


def read_jsonl(path):
    """Yield ``(line_number, object)`` for each non-blank line of a JSON Lines file."""
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(
                    "invalid JSON ({})".format(e.msg), "{}:{}".format(path, lineno)
                ) from e


def write_jsonl(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, ensure_ascii=False))
            f.write("\n")


def load_config(path):
    """Load a YAML config file into a ``subcommand -> {option: value}`` mapping."""
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        config = yaml.safe_load(f) or {}
    if not isinstance(config, dict) or not all(
        isinstance(v, dict) for v in config.values()
    ):
        raise ConfigError(
            "Config file {} must map subcommand names to option tables".format(path)
        )
    return {
        command: {key.replace("-", "_"): value for key, value in options.items()}
        for command, options in config.items()
    }
