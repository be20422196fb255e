from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.stats import mannwhitneyu
from tqdm import tqdm

from metastasis_ewc_pytorch.postproc import Detection, PnStage
from metastasis_ewc_pytorch.errors import EvaluationError

logger = logging.getLogger(__name__)

FROC_RATES = (0.25, 0.5, 1., 2., 4., 8.)

# froc

@dataclass
class FrocSlide:
    negative: bool
    false_positives: np.ndarray
    lesion_hits: np.ndarray

    @property
    def num_lesions(self):
        return len(self.lesion_hits)

def froc_slide(
    detections: list[Detection],
    lesion_mask: np.ndarray,
    spacing: float,
    negative: bool | None = None
) -> FrocSlide:

    lesion_mask = np.asarray(lesion_mask)
    height, width = lesion_mask.shape

    lesion_ids = np.unique(lesion_mask)
    lesion_ids = lesion_ids[lesion_ids != 0]

    negative = len(lesion_ids) == 0 if negative is None else negative

    # per lesion, the highest likelihood of a detection inside it; -inf when never hit

    hits = {int(lesion_id): -np.inf for lesion_id in lesion_ids}
    false_positives = []

    for detection in detections:
        col = min(max(int(round(detection.x_um / spacing)), 0), width - 1)
        row = min(max(int(round(detection.y_um / spacing)), 0), height - 1)

        lesion_id = int(lesion_mask[row, col])

        if lesion_id == 0:
            false_positives.append(detection.likelihood)
            continue

        hits[lesion_id] = max(hits[lesion_id], detection.likelihood)

    return FrocSlide(
        negative,
        np.asarray(false_positives, dtype = np.float64),
        np.asarray(list(hits.values()), dtype = np.float64)
    )

@dataclass
class FrocResult:
    false_positive_rates: np.ndarray
    sensitivities: np.ndarray
    rate_sensitivities: np.ndarray
    score: float

def sensitivity_at(fps: np.ndarray, sens: np.ndarray, rate: float):
    # step-wise, the best sensitivity among operating points within the false positive budget

    allowed = fps <= rate
    return float(sens[allowed].max()) if allowed.any() else 0.

def froc(slides: Sequence[FrocSlide]) -> FrocResult:
    negatives = [slide for slide in slides if slide.negative]
    positives = [slide for slide in slides if not slide.negative]

    if len(negatives) == 0:
        raise EvaluationError('froc needs at least one metastasis-free slide')

    hits = np.concatenate([slide.lesion_hits for slide in positives] or [np.zeros(0)])

    if len(hits) == 0:
        raise EvaluationError('froc needs at least one lesion')

    false_positives = np.concatenate([slide.false_positives for slide in negatives])

    thresholds = np.unique(np.concatenate((hits[np.isfinite(hits)], false_positives)))[::-1]
    thresholds = np.concatenate(([np.inf], thresholds))

    sens = np.array([(hits >= t).sum() / len(hits) for t in thresholds])
    fps = np.array([(false_positives >= t).sum() / len(negatives) for t in thresholds])

    rate_sensitivities = np.array([sensitivity_at(fps, sens, rate) for rate in FROC_RATES])
    return FrocResult(fps, sens, rate_sensitivities, float(rate_sensitivities.mean()))

# roc

def roc_auc(scores, labels) -> float:
    scores = np.asarray(scores, dtype = np.float64)
    labels = np.asarray(labels).astype(bool)

    positives, negatives = scores[labels], scores[~labels]

    if len(positives) == 0 or len(negatives) == 0:
        raise EvaluationError('roc auc needs both positive and negative slides')

    # mann-whitney u of the positives counts concordant pairs plus half the ties

    with warnings.catch_warnings(), np.errstate(all = 'ignore'):
        warnings.simplefilter('ignore')
        statistic = mannwhitneyu(positives, negatives, alternative = 'two-sided', method = 'asymptotic').statistic

    return float(statistic) / (len(positives) * len(negatives))

class OperatingPoint(NamedTuple):
    sensitivity: float
    specificity: float

def slide_operating_point(scores, labels, threshold = 0.5) -> OperatingPoint:
    scores = np.asarray(scores, dtype = np.float64)
    labels = np.asarray(labels).astype(bool)

    if labels.all() or not labels.any():
        raise EvaluationError('an operating point needs both positive and negative slides')

    predicted = scores > threshold

    return OperatingPoint(
        float((predicted & labels).sum() / labels.sum()),
        float((~predicted & ~labels).sum() / (~labels).sum())
    )

# kappa

@dataclass
class KappaResult:
    kappa: float
    confusion: np.ndarray

def kappa_quadratic(
    predicted,
    reference,
    num_classes = len(PnStage)
) -> KappaResult:

    predicted = np.asarray([int(stage) for stage in predicted], dtype = np.int64)
    reference = np.asarray([int(stage) for stage in reference], dtype = np.int64)

    if len(predicted) != len(reference):
        raise EvaluationError(f'{len(predicted)} predicted stages against {len(reference)} reference stages')

    if len(predicted) == 0:
        raise EvaluationError('kappa needs at least one case')

    # rows are reference stages, columns predicted stages

    confusion = np.zeros((num_classes, num_classes), dtype = np.int64)
    np.add.at(confusion, (reference, predicted), 1)

    observed = confusion / confusion.sum()
    expected = np.outer(observed.sum(axis = 1), observed.sum(axis = 0))

    index = np.arange(num_classes)
    weights = (index[:, None] - index[None, :]) ** 2 / (num_classes - 1) ** 2

    disagreement = (weights * expected).sum()

    if disagreement == 0.:
        return KappaResult(1., confusion)

    return KappaResult(float(1. - (weights * observed).sum() / disagreement), confusion)

# bootstrap

@dataclass
class BootstrapCI:
    estimate: float
    lower: float
    upper: float
    samples: int
    seed: int
    failures: int = 0

def bootstrap(
    metric: Callable[[list], float],
    units: Sequence,
    n = 10000,
    seed = 0,
    progress = False
) -> BootstrapCI:

    units = list(units)
    assert len(units) > 0 and n > 0

    estimate = float(metric(units))
    values = []
    failures = 0

    for index in tqdm(range(n), desc = 'bootstrap', disable = not progress, leave = False):

        # resample rngs derived from the index, so the result does not depend on evaluation order

        rng = np.random.default_rng([seed, index])
        sample = [units[i] for i in rng.integers(len(units), size = len(units))]

        try:
            values.append(float(metric(sample)))
        except EvaluationError:
            failures += 1

    if failures > n / 2:
        raise EvaluationError(f'metric failed on {failures} of {n} bootstrap resamples')

    if failures > 0:
        logger.info('skipped %d degenerate bootstrap resamples of %d', failures, n)

    lower, upper = np.percentile(values, [2.5, 97.5])
    return BootstrapCI(estimate, float(lower), float(upper), n, seed, failures)
