"""
Image and depth codecs: binary PPM (P6), PGM (P5) and PFM (Pf / PF).

PFM rasters are stored bottom-up; a negative scale marks little-endian
data, which is what the writer emits.
"""
import os
import logging
import numpy as np
from typing import List, Tuple

logger = logging.getLogger(__name__)

netpbm_magic = {b'P5': 1, b'P6': 3}
pfm_magic    = {b'Pf': 1, b'PF': 3}


# ------------------------------------------------------------------------------
# netpbm
def _netpbm_header(blob: bytes, path: str) -> Tuple[bytes, List[int], int]:
    """ Magic, [width, height, maxval] and the offset of the raster """
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b'#':
            while pos < len(blob) and blob[pos:pos + 1] not in (b'\n', b'\r'):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b'#':
            pos += 1
        if start == pos:
            raise ValueError(f'{path}: truncated header')
        tokens.append(blob[start:pos])
    if pos >= len(blob):
        raise ValueError(f'{path}: truncated header')
    magic = tokens[0]
    if magic not in netpbm_magic:
        raise ValueError(f'{path}: bad magic {magic!r}, expected one of {sorted(netpbm_magic)}')
    try:
        width, height, maxval = (int(tok) for tok in tokens[1:])
    except ValueError as e:
        raise ValueError(f'{path}: malformed header: {e}') from e
    if width <= 0 or height <= 0 or not 0 < maxval < 256:
        raise ValueError(f'{path}: unsupported geometry {width}x{height} maxval {maxval}')
    return magic, [width, height, maxval], pos + 1


def decode_netpbm(blob: bytes, path: str = '<bytes>') -> np.ndarray:
    magic, (width, height, _), offset = _netpbm_header(blob, path)
    channels = netpbm_magic[magic]
    count    = width * height * channels
    raster   = blob[offset:offset + count]
    if len(raster) < count:
        raise ValueError(f'{path}: truncated raster, {len(raster)} of {count} bytes')
    data = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return data[..., 0].copy() if channels == 1 else data.copy()


def encode_netpbm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise TypeError(f'Netpbm images must be uint8, got {image.dtype}')
    if image.ndim == 2:
        magic = b'P5'
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b'P6'
    else:
        raise ValueError(f'Netpbm images must be HxW or HxWx3, got {image.shape}')
    height, width = image.shape[:2]
    return magic + f'\n{width} {height}\n255\n'.encode('ascii') + np.ascontiguousarray(image).tobytes()


def read_ppm(path: str) -> np.ndarray:
    image = decode_netpbm(_read(path), path)
    if image.ndim != 3:
        raise ValueError(f'{path}: expected a P6 color image')
    return image


def read_pgm(path: str) -> np.ndarray:
    image = decode_netpbm(_read(path), path)
    if image.ndim != 2:
        raise ValueError(f'{path}: expected a P5 gray image')
    return image


def write_ppm(path: str, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f'PPM needs an HxWx3 image, got {image.shape}')
    _write(path, encode_netpbm(image))


def write_pgm(path: str, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f'PGM needs an HxW image, got {image.shape}')
    _write(path, encode_netpbm(image))


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def to_float(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) / 255.0


# ------------------------------------------------------------------------------
# pfm
def decode_pfm(blob: bytes, path: str = '<bytes>') -> np.ndarray:
    lines, pos = [], 0
    for _ in range(3):
        end = blob.find(b'\n', pos)
        if end < 0:
            raise ValueError(f'{path}: truncated header')
        lines.append(blob[pos:end].strip())
        pos = end + 1
    magic = lines[0]
    if magic not in pfm_magic:
        raise ValueError(f'{path}: bad magic {magic!r}, expected one of {sorted(pfm_magic)}')
    try:
        width, height = (int(tok) for tok in lines[1].split())
        scale = float(lines[2])
    except ValueError as e:
        raise ValueError(f'{path}: malformed header: {e}') from e
    if scale == 0.0:
        raise ValueError(f'{path}: scale must be non-zero')

    channels = pfm_magic[magic]
    dtype    = np.dtype('<f4' if scale < 0 else '>f4')
    count    = width * height * channels
    raster   = blob[pos:pos + count * 4]
    if len(raster) < count * 4:
        raise ValueError(f'{path}: truncated raster, {len(raster)} of {count * 4} bytes')
    data = np.frombuffer(raster, dtype=dtype).reshape(height, width, channels)[::-1]
    data = data.astype(np.float32)
    return data[..., 0] if channels == 1 else data


def encode_pfm(values: np.ndarray) -> bytes:
    values = np.asarray(values, dtype=np.float32)
    if values.ndim == 2:
        magic = b'Pf'
    elif values.ndim == 3 and values.shape[2] == 3:
        magic = b'PF'
    else:
        raise ValueError(f'PFM needs an HxW or HxWx3 array, got {values.shape}')
    height, width = values.shape[:2]
    raster = np.ascontiguousarray(values[::-1], dtype='<f4').tobytes()
    return magic + f'\n{width} {height}\n-1.0\n'.encode('ascii') + raster


def read_pfm(path: str) -> np.ndarray:
    return decode_pfm(_read(path), path)


def write_pfm(path: str, values: np.ndarray) -> None:
    _write(path, encode_pfm(values))


# ------------------------------------------------------------------------------
def write_png(path: str, image: np.ndarray) -> None:
    """ PNG preview through matplotlib (the `png` extra) """
    try:
        import matplotlib
        matplotlib.use('Agg')
        from matplotlib import pyplot
    except ImportError as e:
        raise RuntimeError('PNG output needs matplotlib: pip install posefield[png]') from e
    image = np.asarray(image)
    pyplot.imsave(path, image, cmap='gray' if image.ndim == 2 else None)


def _read(path: str) -> bytes:
    if not os.path.exists(path):
        raise FileNotFoundError(f'No such file: {path}')
    with open(path, 'rb') as f:
        return f.read()


def _write(path: str, blob: bytes) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        f.write(blob)
    logger.debug('Wrote %d bytes to %s', len(blob), path)
