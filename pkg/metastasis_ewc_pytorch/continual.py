from __future__ import annotations

import logging
from pathlib import Path
from functools import partial
from dataclasses import dataclass, field, replace

from tqdm import tqdm

import torch
from torch import Tensor
from torch.nn import Module
from torch.func import functional_call, vmap, grad
from torch.utils.data import DataLoader

from metastasis_ewc_pytorch.numkit import PROB_FLOOR, to_class_probs
from metastasis_ewc_pytorch.archnet import (
    NetConfig,
    DenseNet,
    build_network,
    save_checkpoint,
    load_network
)

from metastasis_ewc_pytorch.sampler import (
    TASKS,
    DatasetManifest,
    PatchSpec,
    PatchEpoch,
    derive_seed
)

from metastasis_ewc_pytorch.trainer import TrainConfig, TrainOutcome, train_step
from metastasis_ewc_pytorch.errors import EwcShapeError, PlanError

logger = logging.getLogger(__name__)

# functions

def exists(v):
    return v is not None

def default(v, d):
    return v if exists(v) else d

# anchors

@dataclass
class FisherAnchor:
    task_id: str
    fisher: dict[str, Tensor]
    theta_star: dict[str, Tensor]
    sample_count: int

    def __post_init__(self):
        assert self.fisher.keys() == self.theta_star.keys(), 'fisher and reference parameters must name the same parameters'

        for name, value in self.fisher.items():
            assert value.shape == self.theta_star[name].shape, f'fisher and reference shapes differ for `{name}`'
            assert (value >= 0).all(), f'fisher diagonal for `{name}` has negative entries'

@dataclass
class EwcConfig:
    phi: float = 0.01
    anchors: list[FisherAnchor] = field(default_factory = list)

    def __post_init__(self):
        assert self.phi >= 0., 'phi must be non-negative'

    @property
    def active(self):
        return self.phi > 0. and len(self.anchors) > 0

    @property
    def anchor_weight(self):
        # phi distributed evenly over the anchors

        return self.phi / len(self.anchors)

def checked_pair(theta, anchor, name):
    if name not in theta:
        raise EwcShapeError(f'anchor {anchor.task_id} references parameter `{name}` the network does not have')

    param = theta[name]

    if param.shape != anchor.fisher[name].shape:
        raise EwcShapeError(f'parameter `{name}` has shape {tuple(param.shape)}, anchor {anchor.task_id} expects {tuple(anchor.fisher[name].shape)}')

    return param, anchor.fisher[name].to(param), anchor.theta_star[name].to(param)

def ewc_loss(
    theta: dict[str, Tensor],
    cfg: EwcConfig
) -> Tensor:

    reference = next(iter(theta.values()))
    loss = reference.new_zeros(())

    if not cfg.active:
        return loss

    weight = cfg.anchor_weight

    for anchor in cfg.anchors:
        for name in anchor.fisher.keys():
            param, fisher, theta_star = checked_pair(theta, anchor, name)
            loss = loss + weight * (fisher * (param - theta_star).square()).sum()

    return loss

def ewc_grad(
    theta: dict[str, Tensor],
    cfg: EwcConfig
) -> dict[str, Tensor]:

    grads = {name: torch.zeros_like(param) for name, param in theta.items()}

    if not cfg.active:
        return grads

    weight = cfg.anchor_weight

    for anchor in cfg.anchors:
        for name in anchor.fisher.keys():
            param, fisher, theta_star = checked_pair(theta, anchor, name)
            grads[name] = grads[name] + 2. * weight * fisher * (param.detach() - theta_star)

    return grads

# fisher diagonal

def fisher_diagonal(
    model: Module,
    batches,
    generator: torch.Generator | None = None,
    empirical = False,
    progress = False
) -> tuple[dict[str, Tensor], int]:

    params = {name: param.detach() for name, param in model.named_parameters()}
    buffers = {name: buffer.detach() for name, buffer in model.named_buffers()}

    def log_likelihood(params, patch, target):
        probs = functional_call(model, (params, buffers), (patch[None],))
        log_probs = to_class_probs(probs)[0].clamp(min = PROB_FLOOR).log()
        return (log_probs * target).sum()

    # per-sample score vectors, one gradient per patch

    per_sample_grads = vmap(grad(log_likelihood), in_dims = (None, 0, 0))

    fisher = {name: torch.zeros_like(param) for name, param in params.items()}
    count = 0

    for patches, labels in tqdm(batches, desc = 'fisher', disable = not progress, leave = False):

        with torch.no_grad():
            probs = to_class_probs(functional_call(model, (params, buffers), (patches,)))

        if empirical:
            sampled = labels.long()
        else:
            # labels drawn from the predictive distribution give the true fisher

            sampled = torch.multinomial(probs, 1, generator = generator)[:, 0]

        targets = torch.nn.functional.one_hot(sampled, probs.shape[-1]).to(probs)

        scores = per_sample_grads(params, patches, targets)

        for name, score in scores.items():
            fisher[name] += score.square().sum(dim = 0)

        count += patches.shape[0]

    assert count > 0, 'fisher estimation needs at least one patch'

    return {name: value / count for name, value in fisher.items()}, count

def estimate_fisher(
    net: Module,
    manifest: DatasetManifest,
    n_patches: int,
    seed: int,
    spec: PatchSpec = PatchSpec(),
    empirical = False,
    task_id: str | None = None,
    progress = False
) -> FisherAnchor:

    assert n_patches > 0, 'fisher estimation needs at least one patch'

    # no augmentation, running batch norm statistics

    epoch = PatchEpoch([manifest], replace(spec, epoch_size = n_patches, batch_size = 1), derive_seed(seed, 2))
    batches = DataLoader(epoch, batch_size = spec.batch_size, shuffle = False)

    was_training = net.training
    net.eval()

    generator = torch.Generator().manual_seed(derive_seed(seed, 3))

    fisher, count = fisher_diagonal(net, batches, generator = generator, empirical = empirical, progress = progress)

    net.train(was_training)

    theta_star = {name: param.detach().clone() for name, param in net.named_parameters()}

    logger.info('fisher diagonal for %s estimated from %d patches', default(task_id, manifest.task), count)

    return FisherAnchor(default(task_id, manifest.task), fisher, theta_star, count)

# strategy plans

@dataclass(frozen = True)
class StrategyStep:
    datasets: tuple[str, ...]
    init: str = 'fresh'
    ewc: bool = False

    @property
    def init_checkpoint(self):
        prefix = 'checkpoint:'
        return Path(self.init[len(prefix):]) if self.init.startswith(prefix) else None

@dataclass(frozen = True)
class StrategyPlan:
    name: str
    title: str
    steps: tuple[StrategyStep, ...]

    def __post_init__(self):
        if len(self.steps) == 0:
            raise PlanError(f'plan {self.name} has no steps')

        for index, step in enumerate(self.steps):
            unknown = set(step.datasets) - set(TASKS)

            if unknown:
                raise PlanError(f'plan {self.name} step {index + 1} names unknown datasets {sorted(unknown)}')

            if not (step.init in ('fresh', 'previous') or exists(step.init_checkpoint)):
                raise PlanError(f'plan {self.name} step {index + 1} has unknown init source {step.init}')

            if index == 0 and step.init == 'previous':
                raise PlanError(f'plan {self.name} cannot initialize its first step from a previous step')

            if step.ewc and index == 0:
                raise PlanError(f'plan {self.name} has ewc on its first step, no task precedes it')

    @property
    def uses_ewc(self):
        return any(step.ewc for step in self.steps)

    @property
    def datasets(self):
        return tuple(sorted({task for step in self.steps for task in step.datasets}, key = TASKS.index))

    @property
    def final_datasets(self):
        return self.steps[-1].datasets

def plan(name, title, *steps):
    return StrategyPlan(name, title, tuple(StrategyStep(*step) for step in steps))

PLANS = {p.name: p for p in (
    plan('specialized1', 'Specialized 1', (('B',),)),
    plan('specialized2', 'Specialized 2', (('C',),)),
    plan('specialized3', 'Specialized 3', (('HN',),)),
    plan('generic1', 'Generic 1', (('B', 'C'),)),
    plan('generic2', 'Generic 2', (('B', 'C', 'HN'),)),
    plan('extended1', 'Extended 1', (('B',),), (('B', 'C'), 'previous')),
    plan('extended2', 'Extended 2', (('B',),), (('B', 'C'), 'previous'), (('B', 'C', 'HN'), 'previous')),
    plan('transferred1', 'Transferred 1', (('B',),), (('C',), 'previous')),
    plan('adapted1', 'Adapted 1', (('B',),), (('C',), 'previous', True)),
    plan('adapted2', 'Adapted 2', (('B',),), (('C',), 'previous', True), (('HN',), 'previous', True)),
)}

def get_plan(name: str) -> StrategyPlan:
    key = name.lower().replace(' ', '').replace('_', '')

    if key not in PLANS:
        raise PlanError(f'unknown plan {name}, expected one of {", ".join(PLANS)}')

    return PLANS[key]

# running a plan

@dataclass
class StepResult:
    index: int
    step: StrategyStep
    state: dict[str, Tensor]
    log: object
    best_accuracy: float
    anchors: list[FisherAnchor]
    checkpoint_path: Path | None = None
    cached: bool = False

@dataclass
class StrategyResult:
    plan: StrategyPlan
    steps: list[StepResult]

    @property
    def final(self):
        return self.steps[-1]

    def network(self, cfg: NetConfig) -> DenseNet:
        net = build_network(cfg, seed = 0)
        net.load_state_dict(self.final.state)
        net.eval()
        return net

def required_manifests(datasets, tasks, split, plan_name):
    manifests = []

    for task in tasks:
        manifest = datasets.get(task, dict()).get(split)

        if not exists(manifest):
            raise PlanError(f'plan {plan_name} needs the {split} split of dataset {task}, which is missing')

        manifests.append(manifest)

    return manifests

def run_strategy(
    plan: StrategyPlan,
    datasets: dict[str, dict[str, DatasetManifest]],
    train_cfg: TrainConfig,
    seed: int,
    net_cfg: NetConfig = NetConfig(),
    phi = 0.01,
    fisher_patches: int | None = None,
    empirical_fisher = False,
    out_dir: str | Path | None = None,
    cache: dict | None = None
) -> StrategyResult:

    for step in plan.steps:
        required_manifests(datasets, step.datasets, 'train', plan.name)
        required_manifests(datasets, step.datasets, 'val', plan.name)

    fisher_patches = default(fisher_patches, train_cfg.epoch_size)

    anchors: list[FisherAnchor] = []
    results: list[StepResult] = []
    lineage = ()

    for index, step in enumerate(plan.steps):
        step_name = f'{plan.name} step {index + 1}'

        ewc = EwcConfig(phi = phi if step.ewc else 0., anchors = list(anchors) if step.ewc else [])

        # steps with identical lineage train identically, so they are shared across plans

        lineage = lineage + ((step.datasets, step.init, ewc.phi, tuple(anchor.task_id for anchor in ewc.anchors)),)
        key = (lineage, seed, train_cfg, net_cfg, fisher_patches, empirical_fisher)

        cached = exists(cache) and key in cache

        if cached:
            outcome_state, log, best_accuracy, adam = cache[key]
            net = build_network(net_cfg, seed = derive_seed(seed, 4))
            net.load_state_dict(outcome_state)
            logger.info('%s: reusing a previously trained step', step_name)
        else:
            if step.init == 'fresh':
                net = build_network(net_cfg, seed = derive_seed(seed, 4))
            elif step.init == 'previous':
                net = build_network(net_cfg, seed = derive_seed(seed, 4))
                net.load_state_dict(results[-1].state)
            else:
                net, _ = load_network(step.init_checkpoint, net_cfg)

            outcome: TrainOutcome = train_step(
                net,
                required_manifests(datasets, step.datasets, 'train', plan.name),
                required_manifests(datasets, step.datasets, 'val', plan.name),
                train_cfg,
                seed = derive_seed(seed, 5, index),
                penalty = partial(ewc_loss, cfg = ewc) if ewc.active else None,
                step_name = step_name
            )

            net = outcome.net
            log, best_accuracy, adam = outcome.log, outcome.best_accuracy, outcome.adam

            if exists(cache):
                cache[key] = ({name: t.clone() for name, t in net.state_dict().items()}, log, best_accuracy, adam)

        # a finished task becomes an anchor when the next step consolidates it

        next_step = plan.steps[index + 1] if (index + 1) < len(plan.steps) else None

        if exists(next_step) and next_step.ewc:
            for task in step.datasets:
                anchors.append(estimate_fisher(
                    net,
                    datasets[task]['train'],
                    fisher_patches,
                    seed = derive_seed(seed, 6, index),
                    spec = train_cfg.patch_spec(),
                    empirical = empirical_fisher,
                    task_id = task,
                    progress = train_cfg.progress
                ))

        checkpoint_path = None

        if exists(out_dir):
            out_dir = Path(out_dir)
            checkpoint_path = out_dir / f'{plan.name}-step{index + 1}.lnmc'

            save_checkpoint(net, checkpoint_path, adam = adam, anchors = anchors)
            log.to_csv(checkpoint_path.with_suffix('.csv'), index = False)

        results.append(StepResult(
            index = index,
            step = step,
            state = {name: t.detach().clone() for name, t in net.state_dict().items()},
            log = log,
            best_accuracy = best_accuracy,
            anchors = list(ewc.anchors),
            checkpoint_path = checkpoint_path,
            cached = cached
        ))

    return StrategyResult(plan, results)
