"""
Binary model checkpoints.

Layout: the 8-byte magic ``VWPCKPT1``; a ``<Q`` length and the model config as
canonical ``key=value`` text; then, until end of file, one record per parameter:
``<I`` name length, UTF-8 name, ``<I`` rank, ``rank`` x ``<Q`` extents and the
little-endian float64 payload in C order.
"""

import logging
import struct
from pathlib import Path

import numpy as np

from scripts.model import ModelConfig, build_model
from scripts.utils import DataError

logger = logging.getLogger(__name__)

MAGIC = b"VWPCKPT1"


def save_checkpoint(path, model):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config_block = model.config.to_text().encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(config_block)))
        f.write(config_block)
        for name, value in model.store.params.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", value.ndim))
            f.write(struct.pack("<{}Q".format(value.ndim), *value.shape))
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    logger.debug("Wrote checkpoint {}".format(path))
    return path


def _read_exact(f, n, path):
    data = f.read(n)
    if len(data) != n:
        raise DataError("truncated checkpoint", str(path))
    return data


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; parameters must match its config exactly."""
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise DataError("not a model checkpoint", str(path))
        (config_len,) = struct.unpack("<Q", _read_exact(f, 8, path))
        config = ModelConfig.from_text(_read_exact(f, config_len, path).decode("utf-8"))
        params = {}
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise DataError("truncated checkpoint", str(path))
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, path).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, path))
            shape = struct.unpack("<{}Q".format(rank), _read_exact(f, 8 * rank, path))
            count = int(np.prod(shape)) if rank else 1
            payload = _read_exact(f, 8 * count, path)
            params[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)

    model = build_model(config)
    expected = model.store.params
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise DataError(
            "checkpoint parameters do not match config (missing {}, unexpected {})".format(
                missing, extra
            ),
            str(path),
        )
    for name, value in params.items():
        if value.shape != expected[name].shape:
            raise DataError(
                "parameter `{}` has shape {}, expected {}".format(
                    name, value.shape, expected[name].shape
                ),
                str(path),
            )
        expected[name][...] = value
    return model
