from __future__ import annotations

import json
import math
import logging
from pathlib import Path
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from tqdm import tqdm

import torch
import torch.nn.functional as F

from einops import rearrange

from metastasis_ewc_pytorch.raster import write_raster
from metastasis_ewc_pytorch.sampler import TASKS, SPLITS, SlideRecord, DatasetManifest, save_manifest
from metastasis_ewc_pytorch.postproc import MetastasisClass, PnStage, pn_stage
from metastasis_ewc_pytorch.errors import GenerationError

logger = logging.getLogger(__name__)

MIN_LESION_RADIUS = 3

# negative / positive slide counts per split, before scaling

SPLIT_COUNTS = {
    'B': dict(train = (167, 124), val = (42, 37), test = (80, 49), rfc_train = (186, 94), rfc_val = (82, 38)),
    'C': dict(train = (41, 34), val = (17, 13), test = (25, 19)),
    'HN': dict(train = (37, 23), val = (15, 9), test = (22, 13))
}

CASE_COUNT = 100
CASE_SIZE = 5

# slide label frequencies within cases, negative / itc / micro / macro

CASE_LABEL_WEIGHTS = (0.5, 0.1, 0.15, 0.25)

# functions

def exists(v):
    return v is not None

# textures

@dataclass(frozen = True)
class Texture:
    color: tuple[float, float, float]
    frequency: float
    noise: float

NORMAL_TEXTURE = Texture((0.88, 0.68, 0.80), 0.04, 0.06)
BACKGROUND_TEXTURE = Texture((0.95, 0.94, 0.95), 0.02, 0.01)

LESION_TEXTURES = {
    'B': Texture((0.48, 0.26, 0.58), 0.12, 0.10),
    'C': Texture((0.60, 0.22, 0.44), 0.20, 0.12),
    'HN': Texture((0.44, 0.34, 0.50), 0.08, 0.09)
}

@dataclass(frozen = True)
class SynthConfig:
    slide_size: int = 2048
    spacing: float = 0.5
    itc_max_um: float = 50.
    micro_max_um: float = 500.
    macro_max_factor: float = 1.2
    normal_texture: Texture = NORMAL_TEXTURE
    background_texture: Texture = BACKGROUND_TEXTURE
    lesion_textures: tuple[tuple[str, Texture], ...] = tuple(LESION_TEXTURES.items())
    slide_fraction: float = 0.05
    task_multipliers: tuple[tuple[str, float], ...] = (('B', 1.), ('C', 1.), ('HN', 1.))
    case_size: int = CASE_SIZE
    max_lesions: int = 3
    retries: int = 100

    def __post_init__(self):
        assert 0. < self.itc_max_um < self.micro_max_um, 'size class thresholds must satisfy 0 < itc < micro'
        assert self.macro_max_factor > 1.
        assert 0. < self.slide_fraction <= 1.
        assert self.max_lesions >= 1 and self.retries >= 1
        assert self.case_size == CASE_SIZE, 'pN staging is defined over cases of five slides'

        largest = self.macro_max_um / self.spacing
        assert largest <= 0.6 * self.slide_size, f'macro lesions up to {self.macro_max_um:.0f} um do not fit a {self.slide_size} px slide'

    @property
    def macro_max_um(self):
        return self.micro_max_um * self.macro_max_factor

    def lesion_texture(self, task):
        return dict(self.lesion_textures)[task]

    def multiplier(self, task):
        return dict(self.task_multipliers).get(task, 1.)

    def scaled_count(self, count, task):
        return max(1, round(count * self.slide_fraction * self.multiplier(task)))

    def split_counts(self, task):
        return {split: tuple(self.scaled_count(count, task) for count in counts) for split, counts in SPLIT_COUNTS[task].items()}

    def case_count(self):
        return self.scaled_count(CASE_COUNT, 'B')

    def size_class(self, diameter_um) -> MetastasisClass:
        if diameter_um <= 0.:
            return MetastasisClass.negative
        if diameter_um <= self.itc_max_um:
            return MetastasisClass.itc
        if diameter_um <= self.micro_max_um:
            return MetastasisClass.micro
        return MetastasisClass.macro

    def diameter_range(self, cls: MetastasisClass):
        smallest = 2 * MIN_LESION_RADIUS * self.spacing

        return {
            MetastasisClass.itc: (smallest, self.itc_max_um),
            MetastasisClass.micro: (self.itc_max_um, self.micro_max_um),
            MetastasisClass.macro: (self.micro_max_um, self.macro_max_um)
        }[cls]

# value noise

def value_noise(
    rng: np.random.Generator,
    height: int,
    width: int,
    frequency: float,
    channels = 3
):
    # gaussian values on a coarse lattice, bilinearly upsampled, so spectrum is limited by the lattice pitch

    grid_h = max(2, math.ceil(height * frequency) + 1)
    grid_w = max(2, math.ceil(width * frequency) + 1)

    lattice = torch.from_numpy(rng.standard_normal((1, channels, grid_h, grid_w))).float()
    noise = F.interpolate(lattice, size = (height, width), mode = 'bilinear', align_corners = True)

    return rearrange(noise, '1 c h w -> h w c').numpy()

def render_texture(
    rng: np.random.Generator,
    texture: Texture,
    height: int,
    width: int
):
    noise = value_noise(rng, height, width, texture.frequency)
    return np.asarray(texture.color, dtype = np.float32) + texture.noise * noise

# geometry

@dataclass
class Lesion:
    lesion_id: int
    center_y: int
    center_x: int
    radius: float
    diameter_um: float

    @property
    def analytic_area(self):
        return math.pi * self.radius ** 2

@dataclass
class SyntheticSlide:
    image: np.ndarray
    tissue: np.ndarray
    lesion: np.ndarray
    label: MetastasisClass
    lesions: list[Lesion] = field(default_factory = list)

def tissue_mask(rng: np.random.Generator, size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)

    # one large blob near the middle, sometimes a small satellite blob

    blobs = [(
        size * rng.uniform(0.45, 0.55),
        size * rng.uniform(0.45, 0.55),
        size * rng.uniform(0.38, 0.46),
        size * rng.uniform(0.38, 0.46)
    )]

    if rng.random() < 0.5:
        radius = size * rng.uniform(0.06, 0.1)
        corner = rng.integers(4)
        blobs.append((
            size * (0.12 if corner < 2 else 0.88),
            size * (0.12 if (corner % 2) == 0 else 0.88),
            radius,
            radius
        ))

    wobble = value_noise(rng, size, size, 4. / size, channels = 1)[..., 0]

    mask = np.zeros((size, size), dtype = bool)

    for cy, cx, ry, rx in blobs:
        distance = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        mask |= (distance + 0.08 * wobble) < 1.

    return mask

def place_lesions(
    rng: np.random.Generator,
    tissue: np.ndarray,
    diameters_um: list[float],
    spacing: float,
    retries: int
) -> list[Lesion]:

    # distance to the nearest non-tissue pixel bounds the radius a lesion centered there may have

    clearance = ndimage.distance_transform_edt(tissue)
    placed = []

    for index, diameter_um in enumerate(diameters_um):
        radius = diameter_um / spacing / 2.
        candidates = np.flatnonzero(clearance > (radius + 1.))

        lesion = None

        for _ in range(retries if len(candidates) > 0 else 0):
            flat = int(candidates[rng.integers(len(candidates))])
            cy, cx = divmod(flat, tissue.shape[1])

            overlaps = any(math.hypot(cy - other.center_y, cx - other.center_x) <= (radius + other.radius + 2.) for other in placed)

            if not overlaps:
                lesion = Lesion(len(placed) + 1, cy, cx, radius, diameter_um)
                break

        if not exists(lesion):
            if index == 0:
                raise GenerationError(f'could not place a lesion of diameter {diameter_um:.1f} um inside tissue after {retries} attempts')

            # smaller satellite lesions are optional

            logger.debug('dropped a satellite lesion of diameter %.1f um', diameter_um)
            continue

        placed.append(lesion)

    return placed

def lesion_diameters(
    rng: np.random.Generator,
    cfg: SynthConfig,
    label: MetastasisClass
):
    if label == MetastasisClass.negative:
        return []

    low, high = cfg.diameter_range(label)
    largest = float(rng.uniform(low, high))

    # nudge off the class boundary so the derived label is the requested one

    largest = min(max(largest, np.nextafter(low, math.inf)), high)

    smallest = 2 * MIN_LESION_RADIUS * cfg.spacing
    count = int(rng.integers(1, cfg.max_lesions + 1))

    satellites = [float(rng.uniform(smallest, max(smallest, largest * 0.5))) for _ in range(count - 1)]
    return [largest, *satellites]

def generate_slide(
    cfg: SynthConfig,
    task: str,
    label: MetastasisClass,
    rng: np.random.Generator
) -> SyntheticSlide:

    size = cfg.slide_size

    tissue = tissue_mask(rng, size)
    lesions = place_lesions(rng, tissue, lesion_diameters(rng, cfg, label), cfg.spacing, cfg.retries)

    yy, xx = np.ogrid[0:size, 0:size]
    lesion_ids = np.zeros((size, size), dtype = np.uint16)

    for lesion in lesions:
        disc = ((yy - lesion.center_y) ** 2 + (xx - lesion.center_x) ** 2) <= lesion.radius ** 2
        lesion_ids[disc] = lesion.lesion_id

    background = render_texture(rng, cfg.background_texture, size, size)
    normal = render_texture(rng, cfg.normal_texture, size, size)

    image = np.where(tissue[..., None], normal, background)

    if len(lesions) > 0:
        cancer = render_texture(rng, cfg.lesion_texture(task), size, size)
        image = np.where((lesion_ids > 0)[..., None], cancer, image)

    image = np.clip(np.rint(image * 255.), 0, 255).astype(np.uint8)

    # label follows from the largest constructed lesion

    derived = cfg.size_class(max((lesion.diameter_um for lesion in lesions), default = 0.))

    return SyntheticSlide(image, tissue.astype(np.uint8), lesion_ids, derived, lesions)

def slide_label_name(task, label: MetastasisClass):
    if label == MetastasisClass.negative:
        return 'negative'

    return label.name if task == 'B' else 'positive'

# cases

@dataclass
class CaseRecord:
    case_id: str
    slide_ids: tuple[str, ...]
    stage: PnStage

    def __post_init__(self):
        assert len(self.slide_ids) == CASE_SIZE, 'a case groups exactly five slides'

def save_cases(cases: list[CaseRecord], path: str | Path):
    document = [dict(case_id = case.case_id, slide_ids = list(case.slide_ids), pn = case.stage.label) for case in cases]
    Path(path).write_text(json.dumps(document, indent = 2) + '\n')

def load_cases(path: str | Path) -> list[CaseRecord]:
    document = json.loads(Path(path).read_text())
    return [CaseRecord(entry['case_id'], tuple(entry['slide_ids']), PnStage.from_label(entry['pn'])) for entry in document]

def reference_pn(labels) -> PnStage:
    return pn_stage(labels)

# dataset generation

def slide_rng(seed, task, split, index):
    return np.random.default_rng(np.random.SeedSequence([seed, TASKS.index(task), SPLITS.index(split), index]))

def positive_label(rng, task):
    if task != 'B':
        return MetastasisClass(int(rng.integers(2, 4)))

    return MetastasisClass(int(rng.integers(1, 4)))

def write_slide(slide: SyntheticSlide, root: Path, slide_id: str, spacing: float):
    raster_path = root / f'{slide_id}.rgb.sras'
    tissue_path = root / f'{slide_id}.tissue.sras'
    lesion_path = root / f'{slide_id}.lesion.sras'

    write_raster(raster_path, slide.image, spacing)
    write_raster(tissue_path, slide.tissue, spacing)
    write_raster(lesion_path, slide.lesion, spacing)

    return raster_path, tissue_path, lesion_path

@dataclass
class GeneratedDataset:
    task: str
    manifests: dict[str, DatasetManifest]
    cases: list[CaseRecord] = field(default_factory = list)

def generate_dataset(
    cfg: SynthConfig,
    task: str,
    seed: int,
    out_dir: str | Path,
    splits: tuple[str, ...] | None = None,
    progress = False
) -> GeneratedDataset:

    assert task in TASKS, f'unknown task {task}'

    out_dir = Path(out_dir) / task
    counts = cfg.split_counts(task)
    splits = splits if exists(splits) else (*counts.keys(), *(('cases',) if task == 'B' else ()))

    generated = GeneratedDataset(task, dict())

    for split in splits:
        root = out_dir / split

        if split == 'cases':
            assert task == 'B', 'only the breast dataset is staged per case'

            plan = []

            for case_index in range(cfg.case_count()):
                case_rng = slide_rng(seed, task, split, 10_000 + case_index)
                labels = case_rng.choice(4, size = CASE_SIZE, p = CASE_LABEL_WEIGHTS)
                plan.extend((f'case{case_index:03d}', node, MetastasisClass(int(label))) for node, label in enumerate(labels))
        else:
            negatives, positives = counts[split]
            plan = [(None, index, MetastasisClass.negative) for index in range(negatives)]
            plan += [(None, negatives + index, None) for index in range(positives)]

        records = []
        case_labels = dict()

        for index, (case_id, node, label) in enumerate(tqdm(plan, desc = f'{task} {split}', disable = not progress, leave = False)):
            rng = slide_rng(seed, task, split, index)
            label = label if exists(label) else positive_label(rng, task)

            slide = generate_slide(cfg, task, label, rng)

            slide_id = f'{task}-{split}-{index:04d}' if not exists(case_id) else f'{task}-{case_id}-node{node}'
            paths = write_slide(slide, root, slide_id, cfg.spacing)

            records.append(SlideRecord(slide_id, *paths, label = slide_label_name(task, slide.label), spacing = cfg.spacing, case_id = case_id))

            if exists(case_id):
                case_labels.setdefault(case_id, []).append((slide_id, slide.label))

        manifest = DatasetManifest(f'synthetic-{task}', task, split, records)
        save_manifest(manifest, out_dir / f'{split}.json')
        generated.manifests[split] = manifest

        if split == 'cases':
            generated.cases = [
                CaseRecord(case_id, tuple(slide_id for slide_id, _ in nodes), reference_pn([label for _, label in nodes]))
                for case_id, nodes in case_labels.items()
            ]

            save_cases(generated.cases, out_dir / 'pn_reference.json')

        logger.info('generated %d %s slides for task %s', len(records), split, task)

    return generated
