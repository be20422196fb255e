from __future__ import annotations

import json
import logging
from pathlib import Path
from functools import lru_cache, cached_property
from dataclasses import dataclass, asdict, replace
from typing import NamedTuple

import numpy as np

import torch
from torch import Tensor
from torch.utils.data import Dataset, DataLoader

from einops import rearrange

from metastasis_ewc_pytorch.raster import read_raster
from metastasis_ewc_pytorch.augment import AugConfig, augment_patch
from metastasis_ewc_pytorch.errors import SamplingError, FormatError

logger = logging.getLogger(__name__)

TASKS = ('B', 'C', 'HN')
SPLITS = ('train', 'val', 'test', 'rfc_train', 'rfc_val', 'cases')

NORMAL = 0
CANCER = 1

LABEL_NAMES = {NORMAL: 'normal', CANCER: 'cancer'}

# functions

def exists(v):
    return v is not None

def derive_seed(*entropy):
    # independent integer seed from a tuple of integers

    return int(np.random.SeedSequence([int(e) for e in entropy]).generate_state(1)[0])

# records

@dataclass(frozen = True)
class SlideRecord:
    slide_id: str
    raster_path: Path
    tissue_path: Path
    lesion_path: Path
    label: str
    spacing: float = 0.5
    center: str = 'synthetic'
    case_id: str | None = None

    @property
    def is_positive(self):
        return self.label != 'negative'

@dataclass
class DatasetManifest:
    name: str
    task: str
    split: str
    slides: list[SlideRecord]

    def __post_init__(self):
        assert self.task in TASKS, f'unknown task {self.task}'
        assert self.split in SPLITS, f'unknown split {self.split}'

    def __len__(self):
        return len(self.slides)

def save_manifest(manifest: DatasetManifest, path: str | Path):
    path = Path(path)
    root = path.parent

    def relative(p):
        return Path(p).resolve().relative_to(root.resolve()).as_posix()

    slides = []

    for record in manifest.slides:
        entry = asdict(record)
        entry.update(
            raster_path = relative(record.raster_path),
            tissue_path = relative(record.tissue_path),
            lesion_path = relative(record.lesion_path)
        )
        slides.append(entry)

    document = dict(name = manifest.name, task = manifest.task, split = manifest.split, slides = slides)

    path.parent.mkdir(parents = True, exist_ok = True)
    path.write_text(json.dumps(document, indent = 2, sort_keys = True) + '\n')

def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)

    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f'{path.name}: {err.msg}', err.pos) from err

    root = path.parent
    slides = []

    for entry in document['slides']:
        for key in ('raster_path', 'tissue_path', 'lesion_path'):
            entry[key] = root / entry[key]

        slides.append(SlideRecord(**entry))

    return DatasetManifest(document['name'], document['task'], document['split'], slides)

# slide access, cached per process

class SlideData:
    def __init__(self, record: SlideRecord):
        self.record = record
        self.image = read_raster(record.raster_path).pixels
        self.tissue = read_raster(record.tissue_path).pixels
        self.lesion = read_raster(record.lesion_path).pixels

        assert self.image.shape[:2] == self.tissue.shape == self.lesion.shape, f'masks of slide {record.slide_id} are not congruent with its raster'

    @property
    def shape(self):
        return self.tissue.shape

    @cached_property
    def cancer_centers(self):
        return np.flatnonzero((np.asarray(self.tissue) > 0) & (np.asarray(self.lesion) != 0))

    @cached_property
    def normal_centers(self):
        return np.flatnonzero((np.asarray(self.tissue) > 0) & (np.asarray(self.lesion) == 0))

    def centers(self, label):
        return self.cancer_centers if label == CANCER else self.normal_centers

@lru_cache(maxsize = 64)
def open_slide(record: SlideRecord) -> SlideData:
    return SlideData(record)

# patch extraction with reflection at the borders

def reflect_index(index: np.ndarray, size: int):
    if size == 1:
        return np.zeros_like(index)

    period = 2 * (size - 1)
    index = np.mod(index, period)
    return np.where(index >= size, period - index, index)

def extract_patch(
    image: np.ndarray,
    center_y: int,
    center_x: int,
    size: int
) -> Tensor:

    height, width = image.shape[:2]
    half = size // 2

    rows = reflect_index(np.arange(center_y - half, center_y - half + size), height)
    cols = reflect_index(np.arange(center_x - half, center_x - half + size), width)

    window = np.asarray(image[rows[:, None], cols[None, :]])
    patch = torch.from_numpy(np.ascontiguousarray(window)).float() / 255.

    return rearrange(patch, 'h w c -> c h w')

def sample_patch(
    record: SlideRecord,
    want_label: int,
    rng: np.random.Generator,
    patch_size = 279
) -> tuple[Tensor, int]:

    slide = open_slide(record)
    candidates = slide.centers(want_label)

    if len(candidates) == 0:
        raise SamplingError(f'slide {record.slide_id} has no eligible center for label {LABEL_NAMES[want_label]}')

    flat = int(candidates[rng.integers(len(candidates))])
    center_y, center_x = divmod(flat, slide.shape[1])

    patch = extract_patch(slide.image, center_y, center_x, patch_size)

    # label of the central pixel

    label = int(slide.lesion[center_y, center_x] != 0)

    return patch, label

# epochs

@dataclass(frozen = True)
class PatchSpec:
    patch_size: int = 279
    spacing: float = 0.5
    normal_ratio: int = 4
    cancer_ratio: int = 1
    batch_size: int = 32
    epoch_size: int = 262144

    def __post_init__(self):
        assert self.normal_ratio > 0 and self.cancer_ratio > 0, 'class ratio must be positive'
        assert (self.epoch_size % self.batch_size) == 0, 'epoch size must be divisible by the batch size'

    @property
    def cancer_fraction(self):
        return self.cancer_ratio / (self.normal_ratio + self.cancer_ratio)

    @property
    def num_batches(self):
        return self.epoch_size // self.batch_size

    def with_epoch_size(self, epoch_size):
        return replace(self, epoch_size = epoch_size)

def draw_label(rng: np.random.Generator, spec: PatchSpec):
    return CANCER if rng.random() < spec.cancer_fraction else NORMAL

class Draw(NamedTuple):
    dataset: int
    label: int
    record: SlideRecord

class PatchEpoch(Dataset):
    # every draw owns an rng seeded by (seed, draw index), so order is fixed regardless of loader workers

    def __init__(
        self,
        manifests: list[DatasetManifest],
        spec: PatchSpec,
        seed: int,
        augment: AugConfig | None = None
    ):
        if len(manifests) == 0:
            raise SamplingError('no dataset manifests given')

        for manifest in manifests:
            if len(manifest) == 0:
                raise SamplingError(f'dataset manifest {manifest.name} ({manifest.split}) has no slides')

        self.manifests = manifests
        self.spec = spec
        self.seed = seed
        self.augment = augment

        self.pools = [
            {
                NORMAL: list(manifest.slides),
                CANCER: [record for record in manifest.slides if record.is_positive]
            }
            for manifest in manifests
        ]

    def __len__(self):
        return self.spec.epoch_size

    def draw(self, index, rng = None) -> Draw:
        rng = rng if exists(rng) else np.random.default_rng([self.seed, index])

        # dataset first, uniformly, so every dataset contributes equally

        dataset = int(rng.integers(len(self.manifests)))
        label = draw_label(rng, self.spec)

        pool = self.pools[dataset][label]

        if len(pool) == 0:
            manifest = self.manifests[dataset]
            raise SamplingError(f'dataset {manifest.name} ({manifest.split}) has no slide with {LABEL_NAMES[label]} pixels')

        record = pool[int(rng.integers(len(pool)))]
        return Draw(dataset, label, record)

    def __getitem__(self, index):
        rng = np.random.default_rng([self.seed, index])
        draw = self.draw(index, rng = rng)

        patch, label = sample_patch(draw.record, draw.label, rng, self.spec.patch_size)

        if exists(self.augment):
            patch = augment_patch(patch, self.augment, rng)

        return patch, label

def build_epoch(
    manifests: list[DatasetManifest],
    spec: PatchSpec,
    seed: int,
    augment: AugConfig | None = None
) -> PatchEpoch:

    assert len({manifest.split for manifest in manifests}) <= 1, 'an epoch draws from a single split across datasets'

    logger.debug('epoch over %s, %d patches, seed %d', [manifest.name for manifest in manifests], spec.epoch_size, seed)

    return PatchEpoch(manifests, spec, seed, augment = augment)

def epoch_batches(
    epoch: PatchEpoch,
    threads = 1
):
    return DataLoader(
        epoch,
        batch_size = epoch.spec.batch_size,
        shuffle = False,
        num_workers = max(0, threads - 1)
    )
