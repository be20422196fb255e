from __future__ import annotations

import sys
import logging
import argparse
from pathlib import Path

from metastasis_ewc_pytorch import pipeline
from metastasis_ewc_pytorch.config import ExperimentConfig, load_config
from metastasis_ewc_pytorch.archnet import load_network
from metastasis_ewc_pytorch.sampler import TASKS, SPLITS
from metastasis_ewc_pytorch.infermap import load_map
from metastasis_ewc_pytorch.forest import load_forest
from metastasis_ewc_pytorch.postproc import save_staging
from metastasis_ewc_pytorch.errors import MetastasisError, PlanError, EXIT_CODES

logger = logging.getLogger('metastasis_ewc_pytorch')

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

# functions

def exists(v):
    return v is not None

def key_value(text):
    if '=' not in text:
        raise argparse.ArgumentTypeError(f'expected KEY=VALUE, got {text!r}')

    key, value = text.split('=', 1)
    return key.strip(), value.strip()

def task_list(text):
    tasks = tuple(task.strip() for task in text.split(',') if task.strip())
    unknown = set(tasks) - set(TASKS)

    if unknown:
        raise argparse.ArgumentTypeError(f'unknown datasets {sorted(unknown)}, expected a subset of {", ".join(TASKS)}')

    return tasks

def require_file(path: Path, what: str):
    if not Path(path).exists():
        raise PlanError(f'{what} {path} does not exist')

    return Path(path)

# parser

def build_parser():
    parser = argparse.ArgumentParser(prog = 'metastasis-ewc', description = 'lymph node metastasis detection with continual learning')

    parser.add_argument('--config', type = Path, help = 'experiment config file, one `key = value` per line')
    parser.add_argument('--seed', type = int, help = 'master seed')
    parser.add_argument('--threads', type = int, help = 'torch intra-op threads, 1 is bit-exact')
    parser.add_argument('--name', help = 'run name, artifacts go to runs/<name>')
    parser.add_argument('--data-root', type = Path, help = 'synthetic dataset root')
    parser.add_argument('--set', type = key_value, action = 'append', default = [], metavar = 'KEY=VALUE', help = 'override any config key')
    parser.add_argument('--progress', action = 'store_true', help = 'show progress bars')
    parser.add_argument('-v', '--verbose', action = 'store_true', help = 'debug logging')

    commands = parser.add_subparsers(dest = 'command', required = True)

    synth = commands.add_parser('synth', help = 'generate synthetic slides and manifests')
    synth.add_argument('--tasks', type = task_list, default = TASKS)

    train = commands.add_parser('train', help = 'run one strategy plan')
    train.add_argument('--plan', help = 'plan name, e.g. adapted2')

    fisher = commands.add_parser('fisher', help = 'estimate a fisher anchor and append it to a checkpoint')
    fisher.add_argument('--checkpoint', type = Path, required = True)
    fisher.add_argument('--task', choices = TASKS, required = True)
    fisher.add_argument('--out', type = Path)

    infer = commands.add_parser('infer', help = 'write likelihood maps for a dataset split')
    infer.add_argument('--checkpoint', type = Path, required = True)
    infer.add_argument('--task', choices = TASKS, required = True)
    infer.add_argument('--split', choices = SPLITS, default = 'test')
    infer.add_argument('--tta', action = 'store_true', help = 'average the 8 dihedral transforms')
    infer.add_argument('--shifts', help = 'stride, full or an output stride dividing the network stride')

    detect = commands.add_parser('detect', help = 'non-maxima suppression over likelihood maps')
    detect.add_argument('--maps', type = Path, required = True, help = 'directory of .lmap files')
    detect.add_argument('--out', type = Path)

    rfc = commands.add_parser('rfc-train', help = 'train the slide-level random forest')
    rfc.add_argument('--checkpoint', type = Path, required = True)
    rfc.add_argument('--out', type = Path)

    stage = commands.add_parser('stage', help = 'pN stage the 5-slide cases')
    stage.add_argument('--checkpoint', type = Path, required = True)
    stage.add_argument('--forest', type = Path, required = True)
    stage.add_argument('--out', type = Path)

    evaluate = commands.add_parser('evaluate', help = 'roc, froc and kappa with bootstrap intervals for one network')
    evaluate.add_argument('--checkpoint', type = Path, required = True)

    replicate = commands.add_parser('replicate', help = 'train and evaluate strategy plans')
    replicate.add_argument('--plans', help = 'comma separated plan names, default all')

    return parser

def resolve_config(args) -> ExperimentConfig:
    # flags left unset keep the values from the config file and --set

    overrides = dict(args.set)

    flags = dict(
        seed = args.seed,
        threads = args.threads,
        name = args.name,
        data_root = args.data_root,
        progress = True if args.progress else None,
        plan = getattr(args, 'plan', None),
        plans = getattr(args, 'plans', None),
        tta = True if getattr(args, 'tta', False) else None,
        shifts = getattr(args, 'shifts', None)
    )

    overrides.update({key: value for key, value in flags.items() if exists(value)})

    return load_config(args.config, **overrides)

def command_inputs(args) -> dict[str, Path]:
    return {name: getattr(args, name) for name in ('checkpoint', 'forest', 'maps') if exists(getattr(args, name, None))}

# subcommands

def run_synth(cfg, args):
    generated = pipeline.synthesize(cfg, args.tasks)

    for task, dataset in generated.items():
        logger.info('dataset %s: %s', task, ', '.join(f'{split} {len(manifest)}' for split, manifest in dataset.manifests.items()))

def run_train(cfg, args):
    result = pipeline.train_plan(cfg, cfg.plan)

    for step in result.steps:
        logger.info('%s step %d: best validation accuracy %.4f, checkpoint %s', result.plan.name, step.index + 1, step.best_accuracy, step.checkpoint_path)

def run_fisher(cfg, args):
    out = pipeline.compute_fisher(cfg, require_file(args.checkpoint, 'checkpoint'), args.task, args.out)
    logger.info('fisher anchor for %s written to %s', args.task, out)

def split_manifest(cfg, task, split):
    manifest = pipeline.load_datasets(cfg.data_root, (task,)).get(task, dict()).get(split)

    if not exists(manifest):
        raise PlanError(f'dataset {task} has no {split} split under {cfg.data_root}')

    return manifest

def run_infer(cfg, args):
    net, _ = load_network(require_file(args.checkpoint, 'checkpoint'), cfg.net_config())
    manifest = split_manifest(cfg, args.task, args.split)

    out_dir = pipeline.run_paths(cfg).maps / args.checkpoint.stem / args.task
    pipeline.infer_slides(cfg, net, manifest, out_dir)

def run_detect(cfg, args):
    maps_dir = require_file(args.maps, 'maps directory')
    maps = {path.stem: load_map(path) for path in sorted(maps_dir.glob('*.lmap'))}

    if len(maps) == 0:
        raise PlanError(f'no likelihood maps in {maps_dir}')

    out_dir = args.out if exists(args.out) else pipeline.run_paths(cfg).detections / maps_dir.name
    detections = pipeline.detect(cfg, maps, out_dir)

    logger.info('%d detections over %d maps written to %s', sum(map(len, detections.values())), len(maps), out_dir)

def run_rfc_train(cfg, args):
    net, _ = load_network(require_file(args.checkpoint, 'checkpoint'), cfg.net_config())
    datasets = pipeline.load_datasets(cfg.data_root, ('B',))

    if 'rfc_train' not in datasets.get('B', dict()):
        raise PlanError(f'dataset B has no rfc_train split under {cfg.data_root}')

    out = args.out if exists(args.out) else pipeline.run_paths(cfg).checkpoints / f'{args.checkpoint.stem}.rfcm'
    pipeline.train_forest(cfg, net, datasets, out)

def run_stage(cfg, args):
    net, _ = load_network(require_file(args.checkpoint, 'checkpoint'), cfg.net_config())
    forest = load_forest(require_file(args.forest, 'forest model'))

    cases = pipeline.load_case_records(cfg.data_root)

    if len(cases) == 0:
        raise PlanError(f'no cases under {cfg.data_root}')

    stages = pipeline.stage_cases(cfg, net, forest, split_manifest(cfg, 'B', 'cases'), cases)

    out = args.out if exists(args.out) else pipeline.run_paths(cfg).results / f'{args.checkpoint.stem}-staging.csv'
    save_staging(stages, out)

def run_evaluate(cfg, args):
    frame = pipeline.evaluate_checkpoint(cfg, require_file(args.checkpoint, 'checkpoint'))
    logger.info('results\n%s', frame.to_string(index = False))

def run_replicate(cfg, args):
    frame = pipeline.replicate(cfg)
    logger.info('results\n%s', frame.to_string(index = False))

COMMANDS = {
    'synth': run_synth,
    'train': run_train,
    'fisher': run_fisher,
    'infer': run_infer,
    'detect': run_detect,
    'rfc-train': run_rfc_train,
    'stage': run_stage,
    'evaluate': run_evaluate,
    'replicate': run_replicate
}

# entry

def main(argv = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(level = logging.DEBUG if args.verbose else logging.INFO, format = LOG_FORMAT)

    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg, args)
        pipeline.write_run_manifest(cfg, args.command, inputs = command_inputs(args))

    except MetastasisError as err:
        print(f'error: {err.category}: {err}', file = sys.stderr)
        return EXIT_CODES[err.category]

    except FileNotFoundError as err:
        print(f'error: usage: {err}', file = sys.stderr)
        return EXIT_CODES['usage']

    return 0

if __name__ == '__main__':
    sys.exit(main())
