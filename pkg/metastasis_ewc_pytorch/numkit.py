from __future__ import annotations

import math

import torch
from torch import nn, Tensor
import torch.nn.functional as F
from torch.nn import Module
from torch.optim import Adam

from einops import rearrange

from metastasis_ewc_pytorch.errors import (
    DimensionError,
    TapeError,
    NonFiniteGradientError
)

# precision - float32 for training and inference, float64 only for gradient checking

TRAIN_DTYPE = torch.float32
GRADCHECK_DTYPE = torch.float64

BATCH_NORM_EPS = 1e-5
PROB_FLOOR = 1e-12

# functions

def exists(v):
    return v is not None

def default(v, d):
    return v if exists(v) else d

# valid padding convolution

def conv2d_valid(
    x: Tensor,
    weights: Tensor,
    bias: Tensor | None = None,
    stride = 1
):
    assert stride > 0, 'stride must be positive'

    if x.ndim != 4:
        raise DimensionError(f'expected input of shape (N, C, H, W), got {tuple(x.shape)}')

    if weights.ndim != 4:
        raise DimensionError(f'expected kernel of shape (F, C, kh, kw), got {tuple(weights.shape)}')

    _, channels, height, width = x.shape
    filters, kernel_channels, kernel_height, kernel_width = weights.shape

    if channels != kernel_channels:
        raise DimensionError(f'input has {channels} channels but the kernel expects {kernel_channels}')

    if height < kernel_height or width < kernel_width:
        raise DimensionError(f'input extent {height}x{width} is smaller than the kernel {kernel_height}x{kernel_width}')

    if exists(bias) and tuple(bias.shape) != (filters,):
        raise DimensionError(f'bias of shape {tuple(bias.shape)} does not match {filters} filters')

    return F.conv2d(x, weights, bias, stride = stride)

def valid_extent(extent, kernel, stride = 1):
    return (extent - kernel) // stride + 1

# he initialization, biases start at zero

def he_init(
    shape,
    generator: torch.Generator | None = None,
    dtype = TRAIN_DTYPE
):
    fan_in = math.prod(shape[1:])
    assert fan_in > 0, f'cannot compute fan-in for shape {tuple(shape)}'

    return torch.randn(shape, generator = generator, dtype = dtype) * math.sqrt(2. / fan_in)

# layers

class ConvValid(Module):
    def __init__(
        self,
        dim_in,
        dim_out,
        kernel_size,
        stride = 1,
        bias = True,
        generator: torch.Generator | None = None
    ):
        super().__init__()
        assert kernel_size > 0 and stride > 0

        self.kernel_size = kernel_size
        self.stride = stride

        self.weight = nn.Parameter(he_init((dim_out, dim_in, kernel_size, kernel_size), generator = generator))

        if bias:
            self.bias = nn.Parameter(torch.zeros(dim_out))
        else:
            self.register_parameter('bias', None)

    def output_extent(self, extent):
        return valid_extent(extent, self.kernel_size, self.stride)

    def forward(self, x):
        return conv2d_valid(x, self.weight, self.bias, stride = self.stride)

def batch_norm(dim):
    # torch weighs the incoming batch by `momentum`, so running = 0.9 * running + 0.1 * batch

    return nn.BatchNorm2d(dim, eps = BATCH_NORM_EPS, momentum = 0.1)

def crop_concat(
    earlier: Tensor,
    later: Tensor
):
    height, width = later.shape[-2:]
    margin_y = earlier.shape[-2] - height
    margin_x = earlier.shape[-1] - width

    if margin_y < 0 or margin_x < 0 or (margin_y % 2) or (margin_x % 2):
        raise DimensionError(f'cannot center crop {tuple(earlier.shape[-2:])} to {(height, width)}')

    top, left = margin_y // 2, margin_x // 2
    cropped = earlier[..., top:(top + height), left:(left + width)]

    return torch.cat((cropped, later), dim = -3)

def channel_softmax(x: Tensor):
    return x.softmax(dim = -3)

def to_class_probs(out: Tensor):
    if out.ndim == 4:
        return rearrange(out, 'b c 1 1 -> b c')

    assert out.ndim == 2, f'expected class probabilities of shape (N, C), got {tuple(out.shape)}'
    return out

# loss

def cross_entropy_l2(
    probs: Tensor,
    labels: Tensor,
    params = (),
    l2 = 1e-4
):
    probs = to_class_probs(probs)

    row_sums = probs.sum(dim = -1)
    assert torch.allclose(row_sums, torch.ones_like(row_sums), atol = 1e-5), 'probabilities must sum to 1 per row'

    # a zero probability on the true label is clamped rather than producing inf

    picked = probs.gather(-1, rearrange(labels.long(), 'b -> b 1'))
    nll = -picked.clamp(min = PROB_FLOOR).log().mean()

    penalty = probs.new_zeros(())

    for param in params:
        penalty = penalty + param.square().sum()

    return nll + l2 * penalty

# backward over the recorded forward

def backward(
    loss: Tensor,
    params: dict[str, Tensor],
    loss_grad: Tensor | None = None,
    retain_graph = False
) -> dict[str, Tensor]:

    if not loss.requires_grad or not exists(loss.grad_fn):
        raise TapeError('backward called before a forward pass was recorded')

    names = list(params.keys())
    tensors = list(params.values())

    grads = torch.autograd.grad(
        loss,
        tensors,
        grad_outputs = loss_grad,
        allow_unused = True,
        retain_graph = retain_graph
    )

    # parameters the loss never touched get zero gradients

    return {name: default(grad, torch.zeros_like(tensor)) for name, grad, tensor in zip(names, grads, tensors)}

# adam

class AdamState:
    def __init__(
        self,
        params: dict[str, Tensor],
        learning_rate = 1e-4,
        beta1 = 0.9,
        beta2 = 0.999,
        epsilon = 1e-8
    ):
        self.params = params
        self.optimizer = Adam(list(params.values()), lr = learning_rate, betas = (beta1, beta2), eps = epsilon)

    @property
    def group(self):
        return self.optimizer.param_groups[0]

    @property
    def learning_rate(self):
        return self.group['lr']

    @learning_rate.setter
    def learning_rate(self, value):
        for group in self.optimizer.param_groups:
            group['lr'] = value

    @property
    def beta1(self):
        return self.group['betas'][0]

    @property
    def beta2(self):
        return self.group['betas'][1]

    @property
    def epsilon(self):
        return self.group['eps']

    def moment(self, key):
        state = self.optimizer.state
        return {name: state[param][key] for name, param in self.params.items() if param in state}

    @property
    def m(self):
        return self.moment('exp_avg')

    @property
    def v(self):
        return self.moment('exp_avg_sq')

    @property
    def step(self):
        for param in self.params.values():
            state = self.optimizer.state.get(param)

            if exists(state) and 'step' in state:
                return int(state['step'])

        return 0

    def load_moments(
        self,
        step: int,
        m: dict[str, Tensor],
        v: dict[str, Tensor]
    ):
        for name, param in self.params.items():
            self.optimizer.state[param] = dict(
                step = torch.tensor(float(step), dtype = torch.float32),
                exp_avg = m[name].clone().to(param),
                exp_avg_sq = v[name].clone().to(param)
            )

def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    state: AdamState
):
    assert params.keys() == state.params.keys(), 'adam state was built for a different parameter set'

    for name, grad in grads.items():
        if not torch.isfinite(grad).all():
            raise NonFiniteGradientError(name)

    for name, param in params.items():
        grad = grads[name]
        assert grad.shape == param.shape, f'gradient shape {tuple(grad.shape)} does not match parameter `{name}` {tuple(param.shape)}'

        param.grad = grad.detach().to(param.dtype)

    state.optimizer.step()

    for param in params.values():
        param.grad = None

    return params, state
