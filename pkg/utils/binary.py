"""Flat binary container: shape header plus little-endian float64 payload.

Layout::

    b"FTSIM001"                      magic
    uint32 n_arrays
    n_arrays x (uint32 ndim, ndim x uint64 dim)
    payload: every array, row-major, '<f8', in header order

The payload of an adapter checkpoint is exactly the flattened adapter vector.
"""

import struct
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np

from core.errors import CheckpointFormatError

MAGIC = b"FTSIM001"


def encode_arrays(arrays: Sequence[np.ndarray]) -> bytes:
    """Serialize arrays into the container format."""
    header = [MAGIC, struct.pack("<I", len(arrays))]
    payload = []
    for array in arrays:
        array = np.asarray(array, dtype=np.float64)
        header.append(struct.pack("<I", array.ndim))
        header.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        payload.append(np.ascontiguousarray(array).astype("<f8").tobytes())
    return b"".join(header + payload)


def decode_arrays(data: bytes) -> List[np.ndarray]:
    """Parse the container format.

    Raises:
        CheckpointFormatError: On a bad magic, a truncated header or a payload
            whose size disagrees with the header
    """
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("bad magic")
    offset = len(MAGIC)
    try:
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shapes = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", data, offset)
            offset += 4
            shapes.append(struct.unpack_from(f"<{ndim}Q", data, offset))
            offset += 8 * ndim
    except struct.error as e:
        raise CheckpointFormatError(f"truncated header: {e}")

    expected = sum(int(np.prod(shape, dtype=np.int64)) for shape in shapes) * 8
    if len(data) - offset != expected:
        raise CheckpointFormatError(f"payload is {len(data) - offset} bytes, header describes {expected}")

    arrays = []
    for shape in shapes:
        size = int(np.prod(shape, dtype=np.int64))
        if size == 0:
            arrays.append(np.zeros(shape))
            continue
        chunk = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
        arrays.append(chunk.astype(np.float64).reshape(shape))
        offset += size * 8
    return arrays


def write_arrays(path: Union[str, Path], arrays: Sequence[np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_arrays(arrays))


def read_arrays(path: Union[str, Path]) -> List[np.ndarray]:
    return decode_arrays(Path(path).read_bytes())
