from __future__ import annotations

import json
import hashlib
import logging
from pathlib import Path
from dataclasses import dataclass

import numpy as np
import pandas as pd

import torch

from metastasis_ewc_pytorch.config import ExperimentConfig
from metastasis_ewc_pytorch.archnet import DenseNet, save_checkpoint, load_network
from metastasis_ewc_pytorch.sampler import TASKS, SPLITS, DatasetManifest, load_manifest, open_slide, derive_seed
from metastasis_ewc_pytorch.synthwsi import generate_dataset, load_cases, CaseRecord
from metastasis_ewc_pytorch.continual import PLANS, get_plan, run_strategy, estimate_fisher, StrategyResult
from metastasis_ewc_pytorch.infermap import LikelihoodMap, infer_map, infer_tta, save_map, export_pgm
from metastasis_ewc_pytorch.postproc import (
    MetastasisClass,
    PnStage,
    nms,
    slide_score,
    extract_features,
    pn_stage,
    save_detections,
    save_staging
)

from metastasis_ewc_pytorch.forest import ForestModel, forest_train, forest_predict, forest_evaluate, save_forest
from metastasis_ewc_pytorch.evalstat import froc_slide, froc, roc_auc, kappa_quadratic, bootstrap, BootstrapCI
from metastasis_ewc_pytorch.errors import PlanError

logger = logging.getLogger(__name__)

# functions

def exists(v):
    return v is not None

def default(v, d):
    return v if exists(v) else d

def sha256_file(path: Path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

# run directory

@dataclass
class RunPaths:
    root: Path

    @property
    def checkpoints(self):
        return self.root / 'checkpoints'

    @property
    def maps(self):
        return self.root / 'maps'

    @property
    def detections(self):
        return self.root / 'detections'

    @property
    def results(self):
        return self.root / 'results'

    def create(self):
        for path in (self.checkpoints, self.maps, self.detections, self.results):
            path.mkdir(parents = True, exist_ok = True)

        return self

def run_paths(cfg: ExperimentConfig) -> RunPaths:
    return RunPaths(cfg.run_dir).create()

def input_hashes(inputs: dict[str, Path]):
    # a directory input records every file directly inside it

    hashes = dict()

    for name, path in inputs.items():
        path = Path(path)

        if path.is_dir():
            hashes.update({f'{name}/{file.name}': sha256_file(file) for file in sorted(path.iterdir()) if file.is_file()})
        elif path.exists():
            hashes[name] = sha256_file(path)

    return hashes

def write_run_manifest(
    cfg: ExperimentConfig,
    command: str,
    inputs: dict[str, Path] | None = None,
    seeds: dict | None = None
):
    paths = run_paths(cfg)

    checkpoints = {path.name: sha256_file(path) for path in sorted(paths.checkpoints.glob('*.lnmc'))}
    datasets = {f'{task}/{path.name}': sha256_file(path) for task in TASKS for path in sorted((Path(cfg.data_root) / task).glob('*.json'))}

    document = dict(
        command = command,
        config = cfg.to_dict(),
        config_sha256 = cfg.digest(),
        seeds = seeds if exists(seeds) else dict(seed = cfg.seed),
        inputs = {name: str(path) for name, path in default(inputs, dict()).items()},
        input_sha256 = input_hashes(default(inputs, dict())),
        datasets = datasets,
        checkpoints = checkpoints
    )

    path = paths.root / 'manifest.json'
    path.write_text(json.dumps(document, indent = 2, sort_keys = True) + '\n')

    logger.info('run manifest written to %s', path)
    return path

# datasets

def synthesize(cfg: ExperimentConfig, tasks = TASKS):
    synth_cfg = cfg.synth_config()

    return {
        task: generate_dataset(synth_cfg, task, derive_seed(cfg.seed, TASKS.index(task)), cfg.data_root, progress = cfg.progress)
        for task in tasks
    }

def load_datasets(data_root: str | Path, tasks = TASKS) -> dict[str, dict[str, DatasetManifest]]:
    datasets = dict()

    for task in tasks:
        splits = dict()

        for split in SPLITS:
            path = Path(data_root) / task / f'{split}.json'

            if path.exists():
                splits[split] = load_manifest(path)

        if splits:
            datasets[task] = splits

    return datasets

def load_case_records(data_root: str | Path) -> list[CaseRecord]:
    path = Path(data_root) / 'B' / 'pn_reference.json'
    return load_cases(path) if path.exists() else []

# training

def plan_names(spec: str):
    if spec in ('all', ''):
        return list(PLANS)

    return [get_plan(name).name for name in spec.split(',')]

def train_plan(
    cfg: ExperimentConfig,
    plan_name: str,
    datasets: dict | None = None,
    cache: dict | None = None
) -> StrategyResult:

    datasets = datasets if exists(datasets) else load_datasets(cfg.data_root)
    torch.set_num_threads(cfg.threads)

    return run_strategy(
        get_plan(plan_name),
        datasets,
        cfg.train_config(),
        seed = cfg.seed,
        net_cfg = cfg.net_config(),
        phi = cfg.phi,
        fisher_patches = cfg.fisher_patches or None,
        empirical_fisher = cfg.empirical_fisher,
        out_dir = run_paths(cfg).checkpoints,
        cache = cache
    )

def compute_fisher(
    cfg: ExperimentConfig,
    checkpoint: Path,
    task: str,
    out: Path | None = None
) -> Path:

    net, loaded = load_network(checkpoint, cfg.net_config())
    manifest = load_datasets(cfg.data_root, (task,)).get(task, dict()).get('train')

    if not exists(manifest):
        raise PlanError(f'dataset {task} has no train split under {cfg.data_root}')

    anchor = estimate_fisher(
        net,
        manifest,
        cfg.fisher_patches or cfg.epoch_size,
        seed = cfg.seed,
        spec = cfg.train_config().patch_spec(),
        empirical = cfg.empirical_fisher,
        task_id = task,
        progress = cfg.progress
    )

    out = Path(out) if exists(out) else Path(checkpoint)
    save_checkpoint(net, out, adam = loaded.adam, anchors = [*loaded.anchors, anchor])
    return out

# inference and post-processing

def infer_slides(
    cfg: ExperimentConfig,
    net: DenseNet,
    manifest: DatasetManifest,
    out_dir: Path | None = None
) -> dict[str, LikelihoodMap]:

    infer = infer_tta if cfg.tta else infer_map
    maps = dict()

    net.eval()

    for record in manifest.slides:
        lmap = infer(net, record, shifts = cfg.shifts, progress = cfg.progress)
        maps[record.slide_id] = lmap

        if exists(out_dir):
            save_map(lmap, Path(out_dir) / f'{record.slide_id}.lmap')
            export_pgm(lmap, Path(out_dir) / f'{record.slide_id}.pgm')

    logger.info('inferred %d likelihood maps for %s %s', len(maps), manifest.task, manifest.split)
    return maps

def detect(
    cfg: ExperimentConfig,
    maps: dict[str, LikelihoodMap],
    out_dir: Path | None = None
):
    detections = dict()

    for slide_id, lmap in maps.items():
        detections[slide_id] = nms(lmap, cfg.nms_radius_um, cfg.nms_stop)

        if exists(out_dir):
            save_detections(detections[slide_id], Path(out_dir) / f'{slide_id}.csv')

    return detections

def slide_features(cfg: ExperimentConfig, maps: dict[str, LikelihoodMap]):
    return np.stack([extract_features(maps[slide_id], cfg.feature_threshold).to_array() for slide_id in maps])

def train_forest(
    cfg: ExperimentConfig,
    net: DenseNet,
    datasets: dict,
    out: Path | None = None
) -> ForestModel:

    breast = datasets['B']
    train_manifest = breast['rfc_train']

    maps = infer_slides(cfg, net, train_manifest)
    labels = [MetastasisClass.coerce(record.label) for record in train_manifest.slides]

    model = forest_train(slide_features(cfg, maps), labels, seed = derive_seed(cfg.seed, 7), num_trees = cfg.trees)

    if 'rfc_val' in breast:
        val_manifest = breast['rfc_val']
        val_maps = infer_slides(cfg, net, val_manifest)
        report = forest_evaluate(model, slide_features(cfg, val_maps), [MetastasisClass.coerce(record.label) for record in val_manifest.slides])
        logger.info('random forest validation accuracy %.4f', report.accuracy)

    if exists(out):
        save_forest(model, out)

    return model

def stage_cases(
    cfg: ExperimentConfig,
    net: DenseNet,
    forest: ForestModel,
    manifest: DatasetManifest,
    cases: list[CaseRecord]
) -> dict[str, PnStage]:

    maps = infer_slides(cfg, net, manifest)
    predicted = dict(zip(maps.keys(), forest_predict(forest, slide_features(cfg, maps))))

    return {case.case_id: pn_stage([predicted[slide_id] for slide_id in case.slide_ids]) for case in cases}

# evaluation

def ci_columns(prefix: str, ci: BootstrapCI):
    return {prefix: ci.estimate, f'{prefix}_lower': ci.lower, f'{prefix}_upper': ci.upper}

def evaluate_test_set(
    cfg: ExperimentConfig,
    net: DenseNet,
    manifest: DatasetManifest,
    maps_dir: Path | None = None,
    detections_dir: Path | None = None
):
    maps = infer_slides(cfg, net, manifest, maps_dir)
    detections = detect(cfg, maps, detections_dir)

    records = manifest.slides
    scored = [(slide_score(maps[record.slide_id]), record.is_positive) for record in records]

    summaries = [
        froc_slide(detections[record.slide_id], open_slide(record).lesion, record.spacing, negative = not record.is_positive)
        for record in records
    ]

    seed = derive_seed(cfg.seed, 8, TASKS.index(manifest.task))

    def roc_metric(units):
        scores, labels = zip(*units)
        return roc_auc(scores, labels)

    def froc_metric(units):
        return froc(units).score

    columns = dict()
    columns.update(ci_columns(f'{manifest.task}_roc', bootstrap(roc_metric, scored, cfg.bootstrap_samples, seed)))
    columns.update(ci_columns(f'{manifest.task}_froc', bootstrap(froc_metric, summaries, cfg.bootstrap_samples, seed)))
    return columns

def evaluate_network(
    cfg: ExperimentConfig,
    net: DenseNet,
    datasets: dict,
    label: str,
    cases: list[CaseRecord] | None = None
) -> dict:

    paths = run_paths(cfg)
    row = dict(network = label)

    # every network is tested on every dataset

    for task in TASKS:
        if 'test' not in datasets.get(task, dict()):
            continue

        row.update(evaluate_test_set(
            cfg,
            net,
            datasets[task]['test'],
            maps_dir = paths.maps / label / task,
            detections_dir = paths.detections / label / task
        ))

    breast = datasets.get('B', dict())

    if exists(cases) and len(cases) > 0 and 'rfc_train' in breast and 'cases' in breast:
        forest = train_forest(cfg, net, datasets, paths.checkpoints / f'{label}.rfcm')
        stages = stage_cases(cfg, net, forest, breast['cases'], cases)

        save_staging(stages, paths.results / f'{label}-staging.csv')

        pairs = [(stages[case.case_id], case.stage) for case in cases]

        def kappa_metric(units):
            predicted, reference = zip(*units)
            return kappa_quadratic(predicted, reference).kappa

        row.update(ci_columns('B_kappa', bootstrap(kappa_metric, pairs, cfg.bootstrap_samples, derive_seed(cfg.seed, 9))))

    return row

def write_results(rows: list[dict], path: Path):
    frame = pd.DataFrame(rows)
    path.parent.mkdir(parents = True, exist_ok = True)
    frame.to_csv(path, index = False, float_format = '%.6f')
    return frame

def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint: Path) -> pd.DataFrame:
    torch.set_num_threads(cfg.threads)

    net, _ = load_network(checkpoint, cfg.net_config())
    datasets = load_datasets(cfg.data_root)

    row = evaluate_network(cfg, net, datasets, Path(checkpoint).stem, load_case_records(cfg.data_root))
    return write_results([row], run_paths(cfg).results / f'{Path(checkpoint).stem}.csv')

def replicate(cfg: ExperimentConfig, plans: str | None = None) -> pd.DataFrame:
    torch.set_num_threads(cfg.threads)

    datasets = load_datasets(cfg.data_root)
    cases = load_case_records(cfg.data_root)
    cache = dict()

    rows = []

    for name in plan_names(plans if exists(plans) else cfg.plans):
        result = train_plan(cfg, name, datasets, cache = cache)
        net = result.network(cfg.net_config())

        row = dict(plan = result.plan.title)
        row.update(evaluate_network(cfg, net, datasets, name, cases))
        rows.append(row)

    return write_results(rows, run_paths(cfg).results / 'replicate.csv')
