import pytest
param = pytest.mark.parametrize

import torch
from torch import nn

def scalar_anchor(task_id = 'B', fisher = 2., theta_star = 1.):
    from metastasis_ewc_pytorch.continual import FisherAnchor

    return FisherAnchor(
        task_id,
        dict(w = torch.tensor([fisher], dtype = torch.float64)),
        dict(w = torch.tensor([theta_star], dtype = torch.float64)),
        1
    )

def tiny_train_config(**kwargs):
    from metastasis_ewc_pytorch.trainer import TrainConfig

    defaults = dict(batch_size = 4, epoch_size = 8, val_epoch_size = 8, max_epochs = 1, augment = None, progress = False)
    defaults.update(kwargs)
    return TrainConfig(**defaults)

TINY_NET = dict(filter_scale = 0.125)

# ewc algebra

def test_ewc_loss_examples():
    from metastasis_ewc_pytorch.continual import EwcConfig, ewc_loss

    theta = dict(w = torch.tensor([3.], dtype = torch.float64))

    single = ewc_loss(theta, EwcConfig(0.01, [scalar_anchor()]))
    assert abs(single.item() - 0.08) < 1e-12

    double = ewc_loss(theta, EwcConfig(0.01, [scalar_anchor('B'), scalar_anchor('C')]))
    assert abs(double.item() - 0.08) < 1e-12

    at_anchor = ewc_loss(dict(w = torch.tensor([1.], dtype = torch.float64)), EwcConfig(0.01, [scalar_anchor()]))
    assert at_anchor.item() == 0.

def test_ewc_inactive():
    from metastasis_ewc_pytorch.continual import EwcConfig, ewc_loss

    theta = dict(w = torch.tensor([3.], dtype = torch.float64))

    assert ewc_loss(theta, EwcConfig(0., [scalar_anchor()])).item() == 0.
    assert ewc_loss(theta, EwcConfig(0.01, [])).item() == 0.

def test_ewc_grad_examples():
    from metastasis_ewc_pytorch.continual import EwcConfig, ewc_grad

    cfg = EwcConfig(0.01, [scalar_anchor()])

    grad = ewc_grad(dict(w = torch.tensor([3.], dtype = torch.float64)), cfg)['w']
    assert abs(grad.item() - 0.08) < 1e-12

    zero = ewc_grad(dict(w = torch.tensor([1.], dtype = torch.float64)), cfg)['w']
    assert zero.item() == 0.

def test_ewc_grad_against_finite_differences():
    from metastasis_ewc_pytorch.continual import FisherAnchor, EwcConfig, ewc_loss, ewc_grad

    gen = torch.Generator().manual_seed(0)

    def rand(*shape):
        return torch.randn(*shape, generator = gen, dtype = torch.float64)

    anchors = [
        FisherAnchor(task, dict(a = rand(3).abs(), b = rand(2, 2).abs()), dict(a = rand(3), b = rand(2, 2)), 10)
        for task in ('B', 'C')
    ]

    cfg = EwcConfig(0.37, anchors)
    theta = dict(a = rand(3), b = rand(2, 2))

    analytic = ewc_grad(theta, cfg)

    h = 1e-5

    for name, param in theta.items():
        for index in range(param.numel()):
            plus = {k: v.clone() for k, v in theta.items()}
            minus = {k: v.clone() for k, v in theta.items()}

            plus[name].view(-1)[index] += h
            minus[name].view(-1)[index] -= h

            numeric = (ewc_loss(plus, cfg) - ewc_loss(minus, cfg)).item() / (2 * h)
            exact = analytic[name].view(-1)[index].item()

            assert abs(numeric - exact) <= 1e-6 * max(1., abs(exact))

def test_fisher_scale_equals_phi_scale():
    from metastasis_ewc_pytorch.continual import EwcConfig, ewc_loss

    theta = dict(w = torch.tensor([3.], dtype = torch.float64))

    scaled_fisher = ewc_loss(theta, EwcConfig(0.01, [scalar_anchor(fisher = 8.)]))
    scaled_phi = ewc_loss(theta, EwcConfig(0.04, [scalar_anchor(fisher = 2.)]))

    assert scaled_fisher.item() == scaled_phi.item()

def test_ewc_shape_errors():
    from metastasis_ewc_pytorch.continual import EwcConfig, ewc_loss, ewc_grad
    from metastasis_ewc_pytorch.errors import EwcShapeError

    cfg = EwcConfig(0.01, [scalar_anchor()])

    with pytest.raises(EwcShapeError, match = '`w`'):
        ewc_loss(dict(w = torch.zeros(2, dtype = torch.float64)), cfg)

    with pytest.raises(EwcShapeError, match = '`w`'):
        ewc_grad(dict(v = torch.zeros(1, dtype = torch.float64)), cfg)

# fisher

class Logistic(nn.Module):
    def __init__(self, w, b):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(w, dtype = torch.float64))
        self.b = nn.Parameter(torch.tensor(b, dtype = torch.float64))

    def forward(self, x):
        p = torch.sigmoid(x[:, 0] * self.w + self.b)
        return torch.stack((1. - p, p), dim = -1)

def test_fisher_matches_logistic_oracle():
    from metastasis_ewc_pytorch.continual import fisher_diagonal

    model = Logistic(1.5, -0.5)
    points = torch.tensor([[-2.], [-0.5], [1.], [2.5]], dtype = torch.float64)

    # expectation over the 4 inputs and both labels, d log p(y) / dz = y - p

    with torch.no_grad():
        p = model(points)[:, 1]

    expected_w = (p * (1 - p) * points[:, 0] ** 2).mean().item()
    expected_b = (p * (1 - p)).mean().item()

    batches = [(points.repeat(250, 1), torch.zeros(1000, dtype = torch.long)) for _ in range(100)]

    fisher, count = fisher_diagonal(model, batches, generator = torch.Generator().manual_seed(0))

    assert count == 100_000
    assert fisher['w'].item() == pytest.approx(expected_w, rel = 0.02)
    assert fisher['b'].item() == pytest.approx(expected_b, rel = 0.02)

def test_empirical_fisher_uses_labels():
    from metastasis_ewc_pytorch.continual import fisher_diagonal

    model = Logistic(0.7, 0.2)
    points = torch.tensor([[-1.], [0.5], [2.]], dtype = torch.float64)
    labels = torch.tensor([0, 1, 1])

    fisher, _ = fisher_diagonal(model, [(points, labels)], empirical = True)

    with torch.no_grad():
        p = model(points)[:, 1]

    residual = labels.double() - p

    assert fisher['w'].item() == pytest.approx((residual ** 2 * points[:, 0] ** 2).mean().item(), rel = 1e-9)
    assert fisher['b'].item() == pytest.approx((residual ** 2).mean().item(), rel = 1e-9)

def test_dead_unit_has_zero_fisher():
    from metastasis_ewc_pytorch.archnet import NetConfig, build_network
    from metastasis_ewc_pytorch.continual import fisher_diagonal

    net = build_network(NetConfig(**TINY_NET), seed = 0).eval()

    with torch.no_grad():
        net.stem.norm.bias[0] = -1e6

    gen = torch.Generator().manual_seed(0)
    batches = [(torch.rand(2, 3, 279, 279, generator = gen), torch.zeros(2, dtype = torch.long))]

    fisher, count = fisher_diagonal(net, batches, generator = gen)

    assert count == 2
    assert all((value >= 0).all() for value in fisher.values())

    assert torch.equal(fisher['stem.conv.weight'][0], torch.zeros_like(fisher['stem.conv.weight'][0]))
    assert fisher['stem.norm.weight'][0].item() == 0.
    assert fisher['stem.conv.weight'][1:].abs().sum() > 0

def test_estimate_fisher(tiny_datasets):
    from metastasis_ewc_pytorch.archnet import NetConfig, build_network
    from metastasis_ewc_pytorch.continual import estimate_fisher
    from metastasis_ewc_pytorch.sampler import PatchSpec

    net = build_network(NetConfig(**TINY_NET), seed = 0)
    spec = PatchSpec(batch_size = 4, epoch_size = 8)

    anchor = estimate_fisher(net, tiny_datasets['B']['train'], 8, seed = 0, spec = spec)
    again = estimate_fisher(net, tiny_datasets['B']['train'], 8, seed = 0, spec = spec)

    assert anchor.task_id == 'B' and anchor.sample_count == 8
    assert net.training

    params = dict(net.named_parameters())

    assert anchor.fisher.keys() == params.keys()
    assert all(torch.equal(anchor.theta_star[name], params[name].detach()) for name in params)
    assert all(torch.equal(anchor.fisher[name], again.fisher[name]) for name in params)

# plans

def test_plan_table():
    from metastasis_ewc_pytorch.continual import PLANS, get_plan

    assert len(PLANS) == 10

    specialized = get_plan('specialized1')
    assert len(specialized.steps) == 1 and specialized.steps[0].init == 'fresh' and not specialized.uses_ewc

    adapted = get_plan('Adapted 2')
    assert [step.datasets for step in adapted.steps] == [('B',), ('C',), ('HN',)]
    assert [step.ewc for step in adapted.steps] == [False, True, True]

    extended = get_plan('extended1')
    assert extended.steps[1].init == 'previous' and extended.steps[1].datasets == ('B', 'C')

    assert get_plan('generic2').datasets == ('B', 'C', 'HN')

def test_plan_errors():
    from metastasis_ewc_pytorch.continual import StrategyPlan, StrategyStep, get_plan
    from metastasis_ewc_pytorch.errors import PlanError

    with pytest.raises(PlanError):
        get_plan('adapted9')

    with pytest.raises(PlanError):
        StrategyPlan('bad', 'Bad', (StrategyStep(('X',)),))

    with pytest.raises(PlanError):
        StrategyPlan('bad', 'Bad', (StrategyStep(('B',), ewc = True),))

    with pytest.raises(PlanError):
        StrategyPlan('bad', 'Bad', (StrategyStep(('B',), init = 'previous'),))

    with pytest.raises(PlanError):
        StrategyPlan('bad', 'Bad', (StrategyStep(('B',)), StrategyStep(('C',), init = 'somewhere')))

def test_missing_dataset(tiny_datasets):
    from metastasis_ewc_pytorch.continual import get_plan, run_strategy
    from metastasis_ewc_pytorch.errors import PlanError

    datasets = dict(B = tiny_datasets['B'])

    with pytest.raises(PlanError, match = 'C'):
        run_strategy(get_plan('transferred1'), datasets, tiny_train_config(), seed = 0)

def test_adapted_anchors_accumulate(tiny_datasets, tmp_path):
    from metastasis_ewc_pytorch.archnet import NetConfig, load_checkpoint
    from metastasis_ewc_pytorch.continual import get_plan, run_strategy

    result = run_strategy(
        get_plan('adapted2'),
        tiny_datasets,
        tiny_train_config(),
        seed = 0,
        net_cfg = NetConfig(**TINY_NET),
        fisher_patches = 4,
        out_dir = tmp_path
    )

    assert [[anchor.task_id for anchor in step.anchors] for step in result.steps] == [[], ['B'], ['B', 'C']]

    for index in range(3):
        path = tmp_path / f'adapted2-step{index + 1}.lnmc'

        assert path.exists()
        assert path.with_suffix('.csv').exists()

    last = load_checkpoint(tmp_path / 'adapted2-step3.lnmc', NetConfig(**TINY_NET))
    assert [anchor.task_id for anchor in last.anchors] == ['B', 'C']
    assert last.adam_step > 0

def test_zero_phi_adapted_equals_transferred(tiny_datasets):
    from metastasis_ewc_pytorch.archnet import NetConfig
    from metastasis_ewc_pytorch.continual import get_plan, run_strategy

    kwargs = dict(seed = 3, net_cfg = NetConfig(**TINY_NET), phi = 0., fisher_patches = 4)

    adapted = run_strategy(get_plan('adapted1'), tiny_datasets, tiny_train_config(), **kwargs)
    transferred = run_strategy(get_plan('transferred1'), tiny_datasets, tiny_train_config(), **kwargs)

    a, b = adapted.final.state, transferred.final.state

    assert all(torch.equal(a[name], b[name]) for name in a)
    assert adapted.final.log['val_accuracy'].tolist() == transferred.final.log['val_accuracy'].tolist()

def test_shared_steps_are_reused(tiny_datasets):
    from metastasis_ewc_pytorch.archnet import NetConfig
    from metastasis_ewc_pytorch.continual import get_plan, run_strategy

    cache = dict()
    kwargs = dict(seed = 0, net_cfg = NetConfig(**TINY_NET), cache = cache)

    extended = run_strategy(get_plan('extended1'), tiny_datasets, tiny_train_config(), **kwargs)
    specialized = run_strategy(get_plan('specialized1'), tiny_datasets, tiny_train_config(), **kwargs)

    assert not extended.steps[0].cached
    assert specialized.final.cached

    a, b = extended.steps[0].state, specialized.final.state
    assert all(torch.equal(a[name], b[name]) for name in a)

    net = specialized.network(NetConfig(**TINY_NET))
    assert not net.training
