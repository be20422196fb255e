import pytest

SEEDS = (0, 1, 2)

def experiment_config(seed, root, **kwargs):
    from metastasis_ewc_pytorch.config import ExperimentConfig

    settings = dict(
        name = f'seed{seed}',
        seed = seed,
        data_root = root / 'data',
        runs_root = root / 'runs',
        slide_size = 512,
        itc_max_um = 10.,
        micro_max_um = 80.,
        slide_fraction = 0.2,
        filter_scale = 0.25,
        epoch_size = 8192,
        val_epoch_size = 2048,
        max_epochs = 8
    )

    settings.update(kwargs)
    return ExperimentConfig(**settings)

def slide_roc(cfg, net, manifest):
    from metastasis_ewc_pytorch.pipeline import infer_slides
    from metastasis_ewc_pytorch.postproc import slide_score
    from metastasis_ewc_pytorch.evalstat import roc_auc

    maps = infer_slides(cfg, net, manifest)
    return roc_auc([slide_score(maps[record.slide_id]) for record in manifest.slides], [record.is_positive for record in manifest.slides])

@pytest.mark.slow
@pytest.mark.parametrize('seed', SEEDS)
def test_forgetting_and_consolidation(seed, tmp_path):
    from metastasis_ewc_pytorch.pipeline import synthesize, load_datasets, train_plan

    cfg = experiment_config(seed, tmp_path)
    synthesize(cfg, ('B', 'C'))

    datasets = load_datasets(cfg.data_root, ('B', 'C'))
    cache = dict()

    nets = {name: train_plan(cfg, name, datasets, cache).network(cfg.net_config()) for name in ('specialized1', 'transferred1', 'adapted1')}

    source = {name: slide_roc(cfg, net, datasets['B']['test']) for name, net in nets.items()}
    target = slide_roc(cfg, nets['adapted1'], datasets['C']['test'])

    # fine-tuning on the target forgets the source, the quadratic anchor recovers part of it

    assert source['transferred1'] <= source['specialized1'] - 0.05
    assert source['adapted1'] >= source['transferred1'] + 0.03
    assert target >= 0.8

@pytest.mark.slow
@pytest.mark.parametrize('seed', SEEDS)
def test_combined_data_helps_small_target(seed, tmp_path):
    from metastasis_ewc_pytorch.pipeline import synthesize, load_datasets, train_plan

    # C's training split at a quarter of B's

    b_train, c_train = 291, 75
    cfg = experiment_config(seed, tmp_path, c_multiplier = 0.25 * b_train / c_train)

    synthesize(cfg, ('B', 'C'))
    datasets = load_datasets(cfg.data_root, ('B', 'C'))

    generic = train_plan(cfg, 'generic1', datasets).network(cfg.net_config())
    specialized = train_plan(cfg, 'specialized2', datasets).network(cfg.net_config())

    test = datasets['C']['test']
    assert slide_roc(cfg, generic, test) >= slide_roc(cfg, specialized, test) - 0.02
