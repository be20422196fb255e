from __future__ import annotations

import math
import logging
from pathlib import Path
from dataclasses import dataclass

import numpy as np
from PIL import Image
from tqdm import tqdm

import torch
from torch import Tensor
from torch.nn import Module

from einops import rearrange

from metastasis_ewc_pytorch.numkit import PROB_FLOOR
from metastasis_ewc_pytorch.augment import dihedral8, inverse_dihedral8
from metastasis_ewc_pytorch.sampler import SlideRecord, open_slide, reflect_index
from metastasis_ewc_pytorch.binfmt import ByteWriter, ByteReader
from metastasis_ewc_pytorch.errors import InferenceError

logger = logging.getLogger(__name__)

MAP_MAGIC = b'LMAP'
MAP_VERSION = 1

CANCER_CHANNEL = 1

# functions

def exists(v):
    return v is not None

def default(v, d):
    return v if exists(v) else d

# likelihood map

@dataclass
class LikelihoodMap:
    probs: np.ndarray
    mask: np.ndarray
    stride: int
    spacing: float
    origin: int = 0
    slide_id: str = ''

    def __post_init__(self):
        assert self.probs.shape == self.mask.shape, 'probability grid and tissue mask must have the same shape'

    @property
    def shape(self):
        return self.probs.shape

    @property
    def pitch_um(self):
        return self.stride * self.spacing

    def position_um(self, row, col):
        # (x, y) of a cell center in the slide frame

        return (
            (self.origin + col * self.stride) * self.spacing,
            (self.origin + row * self.stride) * self.spacing
        )

    def masked_probs(self):
        return np.where(self.mask, self.probs, 0.)

def save_map(lmap: LikelihoodMap, path: str | Path):
    height, width = lmap.shape

    writer = ByteWriter()
    writer.raw(MAP_MAGIC)
    writer.pack('HIIIdi', MAP_VERSION, width, height, lmap.stride, lmap.spacing, lmap.origin)
    writer.string(lmap.slide_id)
    writer.raw(np.ascontiguousarray(lmap.probs, dtype = '<f4').tobytes())
    writer.raw(np.packbits(lmap.mask.astype(bool).ravel()).tobytes())

    path = Path(path)
    path.parent.mkdir(parents = True, exist_ok = True)
    path.write_bytes(writer.getvalue())

def load_map(path: str | Path) -> LikelihoodMap:
    reader = ByteReader(Path(path).read_bytes())
    reader.expect_magic(MAP_MAGIC)

    version, width, height, stride, spacing, origin = reader.unpack('HIIIdi')

    if version != MAP_VERSION:
        reader.fail('version', f'likelihood map version {version}, expected {MAP_VERSION}')

    slide_id = reader.string()
    count = width * height

    probs = np.frombuffer(reader.take(count * 4), dtype = '<f4').astype(np.float32).reshape(height, width)
    mask = np.unpackbits(np.frombuffer(reader.take(math.ceil(count / 8)), dtype = np.uint8), count = count).astype(bool).reshape(height, width)

    if not reader.at_end():
        reader.fail('truncated', 'unexpected trailing bytes after the mask')

    return LikelihoodMap(probs, mask, stride, spacing, origin, slide_id)

def export_pgm(lmap: LikelihoodMap, path: str | Path):
    gray = np.rint(np.clip(lmap.masked_probs(), 0., 1.) * 255.).astype(np.uint8)

    path = Path(path)
    path.parent.mkdir(parents = True, exist_ok = True)
    Image.fromarray(gray, mode = 'L').save(path, format = 'PPM')

# fully convolutional evaluation

def resolve_output_stride(shifts, net_stride):
    if shifts in (None, 'stride', 'none'):
        return net_stride

    if shifts == 'full':
        return 1

    output_stride = int(shifts)

    if output_stride <= 0 or (net_stride % output_stride) != 0:
        raise InferenceError(f'output stride {output_stride} must divide the network stride {net_stride}')

    return output_stride

def check_extent(height, width, field_size):
    if min(height, width) <= field_size // 2:
        raise InferenceError(f'slide of {height}x{width} px is too small for a receptive field of {field_size} px')

def reflect_pad(image: np.ndarray, before: int, after: int):
    height, width = image.shape[:2]
    rows = reflect_index(np.arange(-before, height + after), height)
    cols = reflect_index(np.arange(-before, width + after), width)
    return image[rows[:, None], cols[None, :]]

@torch.no_grad()
def infer_array(
    net: Module,
    image: np.ndarray,
    tissue: np.ndarray,
    output_stride: int | None = None,
    tile_cells = 32,
    progress = False,
    padded = False
) -> tuple[np.ndarray, np.ndarray]:

    field_size = net.receptive_field
    net_stride = net.stride
    half = field_size // 2

    output_stride = default(output_stride, net_stride)
    assert (net_stride % output_stride) == 0, 'output stride must divide the network stride'

    height, width = tissue.shape[:2]

    # cell (i, j) is centered on pixel (i * os, j * os), its window starts there in the padded frame
    # a padded image already carries half a receptive field of context on every side

    if padded:
        assert image.shape[:2] == (height + 2 * half, width + 2 * half), 'padded image must extend the tissue mask by half the receptive field on every side'
        frame = np.asarray(image)
    else:
        check_extent(height, width, field_size)
        frame = reflect_pad(np.asarray(image), half, half)

    grid_h = (height - 1) // output_stride + 1
    grid_w = (width - 1) // output_stride + 1

    mask = np.asarray(tissue)[::output_stride, ::output_stride] > 0
    probs = np.zeros((grid_h, grid_w), dtype = np.float32)

    ratio = net_stride // output_stride

    # every sub-stride shift gives an interleaved sub-grid, tiled over disjoint output regions

    jobs = []

    for shift_y in range(ratio):
        rows = len(range(shift_y, grid_h, ratio))

        for shift_x in range(ratio):
            cols = len(range(shift_x, grid_w, ratio))

            for tile_y in range(0, rows, tile_cells):
                for tile_x in range(0, cols, tile_cells):
                    jobs.append((shift_y, shift_x, tile_y, min(tile_cells, rows - tile_y), tile_x, min(tile_cells, cols - tile_x)))

    was_training = net.training
    net.eval()

    for shift_y, shift_x, tile_y, tile_rows, tile_x, tile_cols in tqdm(jobs, desc = 'inference', disable = not progress, leave = False):
        out_rows = slice(shift_y + tile_y * ratio, shift_y + (tile_y + tile_rows) * ratio, ratio)
        out_cols = slice(shift_x + tile_x * ratio, shift_x + (tile_x + tile_cols) * ratio, ratio)

        if not mask[out_rows, out_cols].any():
            continue

        top = shift_y * output_stride + tile_y * net_stride
        left = shift_x * output_stride + tile_x * net_stride

        window = frame[top:(top + net_stride * (tile_rows - 1) + field_size), left:(left + net_stride * (tile_cols - 1) + field_size)]

        batch = rearrange(torch.from_numpy(np.ascontiguousarray(window)).float() / 255., 'h w c -> 1 c h w')
        out = net(batch)[0, CANCER_CHANNEL]

        assert tuple(out.shape) == (tile_rows, tile_cols), f'network produced {tuple(out.shape)} cells, expected {(tile_rows, tile_cols)}'

        probs[out_rows, out_cols] = out.numpy()

    net.train(was_training)

    return probs, mask

def infer_map(
    net: Module,
    slide: SlideRecord,
    shifts: str | int | None = None,
    tile_cells = 32,
    progress = False
) -> LikelihoodMap:

    data = open_slide(slide)
    output_stride = resolve_output_stride(shifts, net.stride)

    probs, mask = infer_array(net, data.image, data.tissue, output_stride, tile_cells = tile_cells, progress = progress)

    logger.debug('likelihood map of %s: %s cells at stride %d', slide.slide_id, probs.shape, output_stride)

    return LikelihoodMap(probs, mask, output_stride, slide.spacing, 0, slide.slide_id)

# test time augmentation

def geometric_mean(maps: Tensor, dim = 0):
    # exp of the mean log, with probabilities clamped away from zero; a zero anywhere annihilates the cell

    log_mean = maps.clamp(PROB_FLOOR, 1.).log().mean(dim = dim)
    out = log_mean.exp()

    return torch.where((maps <= 0.).any(dim = dim), torch.zeros_like(out), out)

def infer_tta(
    net: Module,
    slide: SlideRecord,
    shifts: str | int | None = None,
    tile_cells = 32,
    progress = False
) -> LikelihoodMap:

    data = open_slide(slide)
    output_stride = resolve_output_stride(shifts, net.stride)

    height, width = data.shape
    grid_h = (height - 1) // output_stride + 1
    grid_w = (width - 1) // output_stride + 1

    half = net.receptive_field // 2
    check_extent(height, width, net.receptive_field)

    # square frame whose last pixel lies on the output grid, so the 8 transforms map cells onto cells
    # frame and context are both reflected about the slide edges, then transformed together

    side = math.ceil((max(height, width) - 1) / output_stride) * output_stride + 1

    rows = reflect_index(np.arange(-half, side + half), height)
    cols = reflect_index(np.arange(-half, side + half), width)

    image = np.asarray(data.image)[rows[:, None], cols[None, :]]
    tissue = np.asarray(data.tissue)[rows[half:(half + side), None], cols[None, half:(half + side)]]

    image = rearrange(torch.from_numpy(np.ascontiguousarray(image)), 'h w c -> c h w')
    tissue = torch.from_numpy(np.ascontiguousarray(tissue))

    maps = []

    for k in range(8):
        transformed = rearrange(dihedral8(image, k), 'c h w -> h w c').contiguous().numpy()
        transformed_tissue = dihedral8(tissue, k).contiguous().numpy()

        probs, _ = infer_array(net, transformed, transformed_tissue, output_stride, tile_cells = tile_cells, progress = progress, padded = True)
        maps.append(inverse_dihedral8(torch.from_numpy(probs), k))

    probs = geometric_mean(torch.stack(maps))[:grid_h, :grid_w].numpy().astype(np.float32)
    mask = np.asarray(data.tissue)[::output_stride, ::output_stride] > 0

    return LikelihoodMap(probs, mask, output_stride, slide.spacing, 0, slide.slide_id)
