from __future__ import annotations

import math
from enum import IntEnum
from pathlib import Path
from dataclasses import dataclass, astuple

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial.distance import pdist

from metastasis_ewc_pytorch.infermap import LikelihoodMap
from metastasis_ewc_pytorch.errors import StagingError

# functions

def exists(v):
    return v is not None

# classes

class MetastasisClass(IntEnum):
    negative = 0
    itc = 1
    micro = 2
    macro = 3

    @classmethod
    def coerce(cls, value):
        if isinstance(value, str):
            return cls[value.lower()]

        return cls(int(value))

class PnStage(IntEnum):
    pN0 = 0
    pN0_itc = 1
    pN1mi = 2
    pN1 = 3
    pN2 = 4

    @property
    def label(self):
        return 'pN0(i+)' if self is PnStage.pN0_itc else self.name

    @classmethod
    def from_label(cls, label: str):
        return cls.pN0_itc if label == 'pN0(i+)' else cls[label]

@dataclass(frozen = True)
class Detection:
    x_um: float
    y_um: float
    likelihood: float

@dataclass(frozen = True)
class RegionFeatures:
    diameter: float
    area: float
    max_prob: float
    mean_prob: float

    def to_array(self):
        return np.array(astuple(self), dtype = np.float64)

NUM_FEATURES = 4

# detections by non-maxima suppression

def nms(
    lmap: LikelihoodMap,
    radius_um = 150.,
    stop = 0.5
) -> list[Detection]:

    assert radius_um > 0., 'suppression radius must be positive'

    values = lmap.masked_probs().astype(np.float64)
    pitch = lmap.pitch_um
    height, width = values.shape

    reach = int(math.floor(radius_um / pitch))
    detections = []

    while values.size > 0:
        flat = int(np.argmax(values))
        peak = values.flat[flat]

        if peak <= stop:
            break

        row, col = divmod(flat, width)
        detections.append(Detection(*lmap.position_um(row, col), float(peak)))

        # zero every cell within the radius, measured in micrometers between cell centers

        top, bottom = max(0, row - reach), min(height, row + reach + 1)
        left, right = max(0, col - reach), min(width, col + reach + 1)

        rows, cols = np.ogrid[top:bottom, left:right]
        within = (((rows - row) * pitch) ** 2 + ((cols - col) * pitch) ** 2) <= radius_um ** 2

        values[top:bottom, left:right][within] = 0.

    return detections

def slide_score(lmap: LikelihoodMap) -> float:
    if not lmap.mask.any():
        return 0.

    return float(lmap.probs[lmap.mask].max())

# region features

def region_diameter(cells: np.ndarray, region: np.ndarray, pitch: float):
    # farthest pair of cell centers, plus one cell pitch so a single cell spans one pitch

    if len(cells) == 1:
        return pitch

    boundary = region & ~ndimage.binary_erosion(region, structure = np.ones((3, 3)), border_value = 0)
    points = np.argwhere(boundary)

    return float(pdist(points.astype(np.float64)).max()) * pitch + pitch

def extract_features(
    lmap: LikelihoodMap,
    threshold = 0.5
) -> RegionFeatures:

    above = lmap.mask & (lmap.probs > threshold)
    labels, count = ndimage.label(above, structure = np.ones((3, 3), dtype = bool))

    if count == 0:
        return RegionFeatures(0., 0., 0., 0.)

    pitch = lmap.pitch_um
    best = None

    for index, window in enumerate(ndimage.find_objects(labels), start = 1):
        region = labels[window] == index
        cells = np.argwhere(region)
        probs = lmap.probs[window][region].astype(np.float64)

        features = RegionFeatures(
            diameter = region_diameter(cells, region, pitch),
            area = len(cells) * pitch ** 2,
            max_prob = float(probs.max()),
            mean_prob = float(probs.mean())
        )

        if not exists(best) or features.diameter > best.diameter:
            best = features

    return best

# pN staging

def pn_stage(labels) -> PnStage:
    labels = [MetastasisClass.coerce(label) for label in labels]

    if len(labels) != 5:
        raise StagingError(f'pN staging needs exactly 5 slide labels, got {len(labels)}')

    # itc slides are not positive nodes

    positive_nodes = sum(label >= MetastasisClass.micro for label in labels)

    if MetastasisClass.macro in labels:
        return PnStage.pN1 if positive_nodes <= 3 else PnStage.pN2

    if MetastasisClass.micro in labels:
        return PnStage.pN1mi

    if MetastasisClass.itc in labels:
        return PnStage.pN0_itc

    return PnStage.pN0

# csv

DETECTION_COLUMNS = ['x_um', 'y_um', 'likelihood']

def save_detections(detections: list[Detection], path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents = True, exist_ok = True)

    frame = pd.DataFrame([astuple(detection) for detection in detections], columns = DETECTION_COLUMNS)
    frame.to_csv(path, index = False)

def load_detections(path: str | Path) -> list[Detection]:
    frame = pd.read_csv(path, dtype = float, float_precision = 'round_trip')
    return [Detection(*row) for row in frame[DETECTION_COLUMNS].itertuples(index = False)]

def save_staging(stages: dict[str, PnStage], path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents = True, exist_ok = True)

    frame = pd.DataFrame(dict(case_id = list(stages.keys()), pN = [stage.label for stage in stages.values()]))
    frame.to_csv(path, index = False)

def load_staging(path: str | Path) -> dict[str, PnStage]:
    frame = pd.read_csv(path, dtype = str)
    return {row.case_id: PnStage.from_label(row.pN) for row in frame.itertuples(index = False)}
