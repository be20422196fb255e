from __future__ import annotations

import math
import logging
from pathlib import Path
from dataclasses import dataclass

import numpy as np

from metastasis_ewc_pytorch.postproc import MetastasisClass
from metastasis_ewc_pytorch.binfmt import ByteWriter, ByteReader

logger = logging.getLogger(__name__)

FOREST_MAGIC = b'RFCM'
FOREST_VERSION = 1

LEAF = -1

# functions

def exists(v):
    return v is not None

def balanced_class_weights(labels: np.ndarray, num_classes: int):
    # w_c = N / (k * N_c) over the k classes present, absent classes weigh nothing

    counts = np.bincount(labels, minlength = num_classes).astype(np.float64)
    present = counts > 0

    weights = np.zeros(num_classes, dtype = np.float64)
    weights[present] = len(labels) / (present.sum() * counts[present])
    return weights

def gini(histogram: np.ndarray):
    total = histogram.sum(axis = -1, keepdims = True)
    fractions = np.divide(histogram, total, out = np.zeros_like(histogram), where = total > 0)
    return 1. - (fractions ** 2).sum(axis = -1)

# trees

@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def num_nodes(self):
        return len(self.feature)

    def leaves(self, features: np.ndarray):
        node = np.zeros(len(features), dtype = np.int64)
        rows = np.arange(len(features))

        while True:
            internal = self.feature[node] != LEAF

            if not internal.any():
                return node

            go_left = features[rows, np.maximum(self.feature[node], 0)] <= self.threshold[node]
            child = np.where(go_left, self.left[node], self.right[node])
            node = np.where(internal, child, node)

    def predict(self, features: np.ndarray):
        # argmax picks the lower class on ties

        return self.value[self.leaves(features)].argmax(axis = -1)

def best_split(
    features: np.ndarray,
    onehot: np.ndarray,
    candidates
):
    best = None

    for feature in candidates:
        order = np.argsort(features[:, feature], kind = 'stable')
        values = features[order, feature]

        distinct = np.flatnonzero(values[1:] > values[:-1])

        if len(distinct) == 0:
            continue

        cumulative = np.cumsum(onehot[order], axis = 0)
        left = cumulative[distinct]
        right = cumulative[-1] - left

        left_total = left.sum(axis = -1)
        right_total = right.sum(axis = -1)
        total = left_total + right_total

        impurity = (left_total * gini(left) + right_total * gini(right)) / np.maximum(total, 1e-300)

        position = int(np.argmin(impurity))

        if exists(best) and impurity[position] >= best[0]:
            continue

        split_at = distinct[position]
        threshold = (values[split_at] + values[split_at + 1]) / 2.
        best = (float(impurity[position]), int(feature), float(threshold))

    return best

def grow_tree(
    features: np.ndarray,
    labels: np.ndarray,
    class_weights: np.ndarray,
    num_classes: int,
    max_features: int,
    rng: np.random.Generator
) -> Tree:

    num_features = features.shape[1]
    onehot_all = np.eye(num_classes)[labels] * class_weights[labels, None]

    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(histogram):
        feature.append(LEAF)
        threshold.append(0.)
        left.append(LEAF)
        right.append(LEAF)
        value.append(histogram)
        return len(feature) - 1

    root = new_node(onehot_all.sum(axis = 0))
    stack = [(root, np.arange(len(labels)))]

    while stack:
        node, index = stack.pop()
        onehot = onehot_all[index]

        # grown until every leaf holds a single class

        if np.count_nonzero(value[node] > 0) <= 1:
            continue

        subset = rng.choice(num_features, size = max_features, replace = False)
        split = best_split(features[index], onehot, subset)

        if not exists(split) and max_features < num_features:
            split = best_split(features[index], onehot, range(num_features))

        if not exists(split):
            continue

        _, split_feature, split_threshold = split
        goes_left = features[index, split_feature] <= split_threshold

        left_index, right_index = index[goes_left], index[~goes_left]

        feature[node] = split_feature
        threshold[node] = split_threshold
        left[node] = new_node(onehot_all[left_index].sum(axis = 0))
        right[node] = new_node(onehot_all[right_index].sum(axis = 0))

        stack.append((right[node], right_index))
        stack.append((left[node], left_index))

    return Tree(
        np.asarray(feature, dtype = np.int32),
        np.asarray(threshold, dtype = np.float64),
        np.asarray(left, dtype = np.int32),
        np.asarray(right, dtype = np.int32),
        np.asarray(value, dtype = np.float64).reshape(-1, num_classes)
    )

# forest

@dataclass
class ForestModel:
    trees: list[Tree]
    class_weights: np.ndarray
    num_features: int

    @property
    def num_classes(self):
        return len(self.class_weights)

    def votes(self, features: np.ndarray):
        features = np.asarray(features, dtype = np.float64).reshape(-1, self.num_features)
        return np.stack([tree.predict(features) for tree in self.trees])

def forest_train(
    features: np.ndarray,
    labels: np.ndarray,
    seed: int,
    num_trees = 100,
    num_classes = len(MetastasisClass),
    max_features: int | None = None
) -> ForestModel:

    features = np.asarray(features, dtype = np.float64)
    labels = np.asarray(labels, dtype = np.int64)

    assert features.ndim == 2 and len(features) == len(labels) and len(labels) > 0, 'need a non-empty (N, d) feature matrix with one label per row'

    num_samples, num_features = features.shape
    max_features = max_features if exists(max_features) else max(1, int(math.sqrt(num_features)))

    if len(np.unique(labels)) == 1:
        logger.warning('random forest trained on a single class (%d), it will always predict it', labels[0])

    class_weights = balanced_class_weights(labels, num_classes)
    trees = []

    for index in range(num_trees):
        rng = np.random.default_rng([seed, index])
        sample = rng.integers(num_samples, size = num_samples)

        trees.append(grow_tree(features[sample], labels[sample], class_weights, num_classes, max_features, rng))

    return ForestModel(trees, class_weights, num_features)

def forest_predict(
    model: ForestModel,
    features: np.ndarray
) -> list[MetastasisClass]:

    votes = model.votes(features)
    counts = np.apply_along_axis(np.bincount, 0, votes, minlength = model.num_classes)

    return [MetastasisClass(int(c)) for c in counts.argmax(axis = 0)]

@dataclass
class ForestReport:
    accuracy: float
    confusion: np.ndarray

def forest_evaluate(
    model: ForestModel,
    features: np.ndarray,
    labels: np.ndarray
) -> ForestReport:

    labels = np.asarray(labels, dtype = np.int64)
    predicted = np.asarray(forest_predict(model, features), dtype = np.int64)

    confusion = np.zeros((model.num_classes, model.num_classes), dtype = np.int64)
    np.add.at(confusion, (labels, predicted), 1)

    accuracy = float((labels == predicted).mean()) if len(labels) > 0 else 0.
    return ForestReport(accuracy, confusion)

# persistence

def save_forest(model: ForestModel, path: str | Path):
    writer = ByteWriter()
    writer.raw(FOREST_MAGIC)
    writer.pack('HIII', FOREST_VERSION, len(model.trees), model.num_classes, model.num_features)
    writer.array(model.class_weights)

    for tree in model.trees:
        for arr in (tree.feature, tree.threshold, tree.left, tree.right, tree.value):
            writer.array(arr)

    path = Path(path)
    path.parent.mkdir(parents = True, exist_ok = True)
    path.write_bytes(writer.getvalue())

def load_forest(path: str | Path) -> ForestModel:
    reader = ByteReader(Path(path).read_bytes())
    reader.expect_magic(FOREST_MAGIC)

    version, num_trees, num_classes, num_features = reader.unpack('HIII')

    if version != FOREST_VERSION:
        reader.fail('version', f'forest format version {version}, expected {FOREST_VERSION}')

    class_weights = reader.array()
    trees = [Tree(*(reader.array() for _ in range(5))) for _ in range(num_trees)]

    if not reader.at_end():
        reader.fail('truncated', 'unexpected trailing bytes after the last tree')

    assert len(class_weights) == num_classes
    return ForestModel(trees, class_weights, num_features)
