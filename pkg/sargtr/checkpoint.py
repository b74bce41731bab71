'''Binary checkpoint format.

    magic      8 bytes  b"SARGTRCK"
    version    uint32
    config     uint64 length + UTF-8 JSON of ModelConfig (sorted keys)
    count      uint32 number of arrays
    per array: uint32 name length + UTF-8 name, uint32 ndim, ndim x uint64 dims,
               uint64 byte length + little-endian float64 data

All integers are little-endian. Values are written as raw IEEE doubles, so a
save/load round trip is bit-exact.
'''
import json
import logging
import pathlib
import struct
from collections import OrderedDict
from typing import BinaryIO, Tuple, Union

import numpy as np

from .exceptions import CheckpointException, ValidationException
from .layers import ModelConfig, ModelParams, check_params

logger = logging.getLogger(__name__)

MAGIC = b"SARGTRCK"
VERSION = 1


def config_json(config: ModelConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)


def _read(f: BinaryIO, size: int) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise CheckpointException("The checkpoint is truncated.")
    return data


def _unpack(f: BinaryIO, fmt: str):
    return struct.unpack(fmt, _read(f, struct.calcsize(fmt)))


def save_checkpoint(path: Union[str, pathlib.Path], config: ModelConfig, params: ModelParams):
    '''Write config and params; params must match config.'''
    check_params(config, params)
    header = config_json(config).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            encoded = name.encode("utf-8")
            data = np.ascontiguousarray(value, dtype="<f8").tobytes()
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", value.ndim))
            f.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            f.write(struct.pack("<Q", len(data)))
            f.write(data)
    logger.info("Wrote checkpoint with %d arrays to %s", len(params), path)


def load_checkpoint(path: Union[str, pathlib.Path]) -> Tuple[ModelConfig, ModelParams]:
    '''Read a checkpoint written by save_checkpoint.'''
    with open(path, "rb") as f:
        if _read(f, len(MAGIC)) != MAGIC:
            raise CheckpointException(f"{path} is not a sargtr checkpoint.")
        (version,) = _unpack(f, "<I")
        if version != VERSION:
            raise CheckpointException(f"Unsupported checkpoint version {version} (expected {VERSION}).")
        (length,) = _unpack(f, "<Q")
        try:
            config = ModelConfig.from_dict(json.loads(_read(f, length).decode("utf-8")))
        except (ValueError, TypeError, ValidationException) as e:
            raise CheckpointException(f"The checkpoint configuration is invalid: {e}")

        arrays = OrderedDict()
        (count,) = _unpack(f, "<I")
        for _ in range(count):
            (name_length,) = _unpack(f, "<I")
            name = _read(f, name_length).decode("utf-8")
            (ndim,) = _unpack(f, "<I")
            shape = _unpack(f, f"<{ndim}Q") if ndim else ()
            (size,) = _unpack(f, "<Q")
            if size != 8 * int(np.prod(shape, dtype=np.int64)):
                raise CheckpointException(f"Array {name} has {size} bytes for shape {shape}.")
            arrays[name] = np.frombuffer(_read(f, size), dtype="<f8").astype(np.float64).reshape(shape)
        if f.read(1):
            raise CheckpointException("Trailing bytes after the last array.")

    params = ModelParams(arrays)
    check_params(config, params)
    logger.info("Loaded checkpoint with %d arrays from %s", len(params), path)
    return config, params
