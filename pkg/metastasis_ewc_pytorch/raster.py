from __future__ import annotations

import struct
from pathlib import Path
from dataclasses import dataclass

import numpy as np

from metastasis_ewc_pytorch.errors import FormatError

# simple raster format
# magic 'SRAS', width u32, height u32, spacing f32 (um / px), channels u8, bytes per sample u8, then row-major samples

RASTER_MAGIC = b'SRAS'
HEADER = struct.Struct('<4sIIfBB')

SAMPLE_DTYPES = {
    1: np.dtype('<u1'),
    2: np.dtype('<u2')
}

@dataclass
class Raster:
    pixels: np.ndarray
    spacing: float

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

def write_raster(
    path: str | Path,
    pixels: np.ndarray,
    spacing: float
):
    pixels = np.asarray(pixels)

    if pixels.ndim == 2:
        pixels = pixels[..., None]

    assert pixels.ndim == 3, 'raster must be (H, W) or (H, W, C)'

    bytes_per_sample = pixels.dtype.itemsize
    assert bytes_per_sample in SAMPLE_DTYPES and pixels.dtype.kind == 'u', f'unsupported raster dtype {pixels.dtype}'

    height, width, channels = pixels.shape
    header = HEADER.pack(RASTER_MAGIC, width, height, float(spacing), channels, bytes_per_sample)

    path = Path(path)
    path.parent.mkdir(parents = True, exist_ok = True)

    with path.open('wb') as f:
        f.write(header)
        f.write(np.ascontiguousarray(pixels, dtype = SAMPLE_DTYPES[bytes_per_sample]).tobytes())

def read_raster(
    path: str | Path,
    mmap = True
) -> Raster:

    path = Path(path)

    with path.open('rb') as f:
        header = f.read(HEADER.size)

    if len(header) < HEADER.size:
        raise FormatError(f'{path.name}: raster header truncated', len(header))

    magic, width, height, spacing, channels, bytes_per_sample = HEADER.unpack(header)

    if magic != RASTER_MAGIC:
        raise FormatError(f'{path.name}: expected magic {RASTER_MAGIC!r}, found {magic!r}', 0)

    if bytes_per_sample not in SAMPLE_DTYPES:
        raise FormatError(f'{path.name}: unsupported sample size {bytes_per_sample}', HEADER.size - 1)

    dtype = SAMPLE_DTYPES[bytes_per_sample]
    expected = HEADER.size + width * height * channels * dtype.itemsize

    if path.stat().st_size != expected:
        raise FormatError(f'{path.name}: expected {expected} bytes, file has {path.stat().st_size}', min(expected, path.stat().st_size))

    shape = (height, width, channels)

    if mmap:
        pixels = np.memmap(path, dtype = dtype, mode = 'r', offset = HEADER.size, shape = shape)
    else:
        pixels = np.fromfile(path, dtype = dtype, offset = HEADER.size).reshape(shape)

    if channels == 1:
        pixels = pixels[..., 0]

    return Raster(pixels, float(spacing))
