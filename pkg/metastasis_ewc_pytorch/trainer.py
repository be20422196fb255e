from __future__ import annotations

import math
import logging
from copy import deepcopy
from pathlib import Path
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import pandas as pd
from tqdm import tqdm

import torch
from torch import Tensor
from torch.nn import Module

from metastasis_ewc_pytorch.numkit import (
    AdamState,
    adam_step,
    backward,
    cross_entropy_l2,
    to_class_probs
)

from metastasis_ewc_pytorch.augment import AugConfig
from metastasis_ewc_pytorch.sampler import (
    DatasetManifest,
    PatchSpec,
    build_epoch,
    epoch_batches,
    derive_seed
)

logger = logging.getLogger(__name__)

LOG_COLUMNS = ('step', 'epoch', 'train_loss', 'ewc_loss', 'val_accuracy', 'learning_rate')

# functions

def exists(v):
    return v is not None

# config

@dataclass(frozen = True)
class TrainConfig:
    learning_rate: float = 1e-4
    l2: float = 1e-4
    batch_size: int = 32
    patch_size: int = 279
    epoch_size: int = 262144
    val_epoch_size: int = 262144
    lr_patience: int = 4
    stop_patience: int = 20
    lr_factor: float = 0.1
    max_epochs: int = 200
    augment: AugConfig | None = field(default_factory = AugConfig)
    threads: int = 1
    progress: bool = True

    def __post_init__(self):
        assert self.learning_rate > 0. and self.l2 >= 0.
        assert (self.epoch_size % self.batch_size) == 0, 'epoch size must be divisible by the batch size'
        assert (self.val_epoch_size % self.batch_size) == 0, 'validation epoch size must be divisible by the batch size'
        assert 0 < self.lr_patience <= self.stop_patience
        assert self.max_epochs >= 1

    def patch_spec(self, validation = False):
        epoch_size = self.val_epoch_size if validation else self.epoch_size
        return PatchSpec(patch_size = self.patch_size, batch_size = self.batch_size, epoch_size = epoch_size)

# plateau schedule driven by validation accuracy

class ScheduleDecision(NamedTuple):
    improved: bool
    lr_dropped: bool
    stop: bool

class PlateauSchedule:
    def __init__(
        self,
        learning_rate,
        lr_patience = 4,
        stop_patience = 20,
        factor = 0.1
    ):
        self.learning_rate = learning_rate
        self.lr_patience = lr_patience
        self.stop_patience = stop_patience
        self.factor = factor

        self.best = -math.inf
        self.streak = 0
        self.lr_streak = 0

    def update(self, accuracy) -> ScheduleDecision:

        # only a strictly greater accuracy counts as improvement

        if accuracy > self.best:
            self.best = accuracy
            self.streak = 0
            self.lr_streak = 0
            return ScheduleDecision(True, False, False)

        self.streak += 1
        self.lr_streak += 1

        lr_dropped = self.lr_streak >= self.lr_patience

        if lr_dropped:
            self.learning_rate *= self.factor
            self.lr_streak = 0

        return ScheduleDecision(False, lr_dropped, self.streak >= self.stop_patience)

# validation

@torch.no_grad()
def evaluate_accuracy(
    net: Module,
    manifests: list[DatasetManifest],
    spec: PatchSpec,
    seed: int,
    threads = 1
):
    was_training = net.training
    net.eval()

    correct = total = 0

    for patches, labels in epoch_batches(build_epoch(manifests, spec, seed), threads):
        predicted = to_class_probs(net(patches)).argmax(dim = -1)
        correct += (predicted == labels).sum().item()
        total += labels.numel()

    net.train(was_training)
    return correct / max(total, 1)

# one strategy step

@dataclass
class TrainOutcome:
    net: Module
    log: pd.DataFrame
    best_accuracy: float
    best_epoch: int
    adam: AdamState

def train_step(
    net: Module,
    train_manifests: list[DatasetManifest],
    val_manifests: list[DatasetManifest],
    cfg: TrainConfig,
    seed: int,
    penalty: Callable[[dict[str, Tensor]], Tensor] | None = None,
    step_name = 'step',
    log_path: str | Path | None = None
) -> TrainOutcome:

    params = dict(net.named_parameters())
    l2_params = list(net.l2_parameters()) if hasattr(net, 'l2_parameters') else list(params.values())

    adam = AdamState(params, learning_rate = cfg.learning_rate)
    schedule = PlateauSchedule(cfg.learning_rate, cfg.lr_patience, cfg.stop_patience, cfg.lr_factor)

    train_spec = cfg.patch_spec()
    val_spec = cfg.patch_spec(validation = True)
    val_seed = derive_seed(seed, 1)

    best_state = deepcopy(net.state_dict())
    best_adam = deepcopy(adam.optimizer.state_dict())
    best_epoch = 0
    rows = []

    for epoch in range(cfg.max_epochs):
        net.train()

        epoch_data = build_epoch(train_manifests, train_spec, derive_seed(seed, 0, epoch), augment = cfg.augment)
        batches = tqdm(epoch_batches(epoch_data, cfg.threads), desc = f'{step_name} epoch {epoch}', disable = not cfg.progress, leave = False)

        loss_sum = ewc_sum = 0.

        for patches, labels in batches:
            probs = net(patches)
            loss = cross_entropy_l2(probs, labels, l2_params, cfg.l2)

            ewc_term = penalty(params) if exists(penalty) else None

            if exists(ewc_term):
                loss = loss + ewc_term
                ewc_sum += ewc_term.item()

            grads = backward(loss, params)
            adam_step(params, grads, adam)

            loss_sum += loss.item()

        # validation patches are re-drawn every epoch, seeded from the validation seed and the epoch

        accuracy = evaluate_accuracy(net, val_manifests, val_spec, derive_seed(val_seed, epoch), cfg.threads)
        decision = schedule.update(accuracy)

        if decision.improved:
            best_state = deepcopy(net.state_dict())
            best_adam = deepcopy(adam.optimizer.state_dict())
            best_epoch = epoch

        if decision.lr_dropped:
            adam.learning_rate = schedule.learning_rate
            logger.info('%s: learning rate lowered to %.1e', step_name, schedule.learning_rate)

        rows.append((step_name, epoch, loss_sum / train_spec.num_batches, ewc_sum / train_spec.num_batches, accuracy, adam.learning_rate))

        logger.info('%s epoch %d: loss %.4f, val accuracy %.4f', step_name, epoch, rows[-1][2], accuracy)

        if decision.stop:
            logger.info('%s: stopped after %d epochs without improvement', step_name, schedule.streak)
            break

    # the best validation parameters, with the adam moments they were reached with, are the outcome of the step

    net.load_state_dict(best_state)
    adam.optimizer.load_state_dict(best_adam)

    log = pd.DataFrame(rows, columns = list(LOG_COLUMNS))

    if exists(log_path):
        log_path = Path(log_path)
        log_path.parent.mkdir(parents = True, exist_ok = True)
        log.to_csv(log_path, index = False)

    return TrainOutcome(net, log, schedule.best, best_epoch, adam)
