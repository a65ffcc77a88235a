"""
Parameter checkpoints.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header listing
`{name, shape, offset}` per tensor, then the tensors as little-endian
float64 in header order.
"""
import os
import json
import struct
import logging
import numpy as np
from typing import Dict

logger = logging.getLogger(__name__)

HEADER_LEN = struct.Struct('<Q')
DTYPE      = np.dtype('<f8')


def encode_checkpoint(state: Dict[str, np.ndarray]) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(state):
        array = np.ascontiguousarray(state[name], dtype=DTYPE)
        entries.append({'name': name, 'shape': list(array.shape), 'offset': offset})
        blobs.append(array.tobytes())
        offset += array.nbytes
    header = json.dumps({'tensors': entries}, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return HEADER_LEN.pack(len(header)) + header + b''.join(blobs)


def decode_checkpoint(blob: bytes) -> Dict[str, np.ndarray]:
    if len(blob) < HEADER_LEN.size:
        raise ValueError('Truncated checkpoint: missing header length')
    (size,) = HEADER_LEN.unpack_from(blob)
    start = HEADER_LEN.size + size
    if len(blob) < start:
        raise ValueError(f'Truncated checkpoint: header needs {size} bytes')
    try:
        header = json.loads(blob[HEADER_LEN.size:start].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f'Malformed checkpoint header: {e}') from e

    state = {}
    for entry in header.get('tensors', []):
        shape = tuple(entry['shape'])
        count = int(np.prod(shape, dtype=np.int64))
        lo    = start + entry['offset']
        hi    = lo + count * DTYPE.itemsize
        if hi > len(blob):
            raise ValueError(f'Truncated checkpoint: tensor {entry["name"]} ends at byte {hi} of {len(blob)}')
        state[entry['name']] = np.frombuffer(blob[lo:hi], dtype=DTYPE).reshape(shape).astype(np.float64)
    return state


def save_checkpoint(path: str, state: Dict[str, np.ndarray]) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(encode_checkpoint(state))
    logger.debug('Saved %d tensors to %s', len(state), path)


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    if not os.path.exists(path):
        raise FileNotFoundError(f'Checkpoint not found: {path}')
    with open(path, 'rb') as f:
        return decode_checkpoint(f.read())
