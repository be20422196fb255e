from __future__ import annotations

from pathlib import Path
from typing import NamedTuple
from dataclasses import dataclass, field

import torch
from torch import nn, Tensor
import torch.nn.functional as F
from torch.nn import Module, ModuleList

from metastasis_ewc_pytorch.numkit import (
    ConvValid,
    batch_norm,
    crop_concat,
    channel_softmax,
    valid_extent
)

from metastasis_ewc_pytorch.binfmt import ByteWriter, ByteReader
from metastasis_ewc_pytorch.errors import NetConstructionError, CheckpointError

CHECKPOINT_MAGIC = b'LNMC'
CHECKPOINT_VERSION = 1

HAS_ADAM = 1
HAS_FISHER = 2

# functions

def exists(v):
    return v is not None

# config

@dataclass(frozen = True)
class NetConfig:
    input_size: int = 279
    in_channels: int = 3
    initial_filters: int = 64
    initial_kernel: int = 7
    initial_stride: int = 2
    pool_kernel: int = 3
    pool_stride: int = 2
    dense_blocks: int = 3
    units_per_block: int = 4
    bottleneck_filters: int = 64
    growth_filters: int = 32
    unit_kernel: int = 3
    compression: float = 0.5
    transition_pool: int = 2
    final_kernel: int = 3
    classes: int = 2
    filter_scale: float = 1.

    def __post_init__(self):
        assert 0. < self.compression <= 1., 'compression must lie in (0, 1]'
        assert self.filter_scale > 0., 'filter scale must be positive'
        assert self.dense_blocks >= 1 and self.units_per_block >= 1
        assert self.classes >= 2
        assert (self.unit_kernel % 2) == 1, 'in-block convolutions need an odd kernel for symmetric cropping'

    def scaled(self, filters):
        return max(1, round(filters * self.filter_scale))

# shape trace

@dataclass(frozen = True)
class TraceEntry:
    name: str
    kernel: int
    input_extent: int
    output_extent: int
    stride: int

@dataclass(frozen = True)
class ShapeTrace:
    entries: tuple[TraceEntry, ...]

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    @property
    def output_extent(self):
        return self.entries[-1].output_extent

    @property
    def stride(self):
        return self.entries[-1].stride

    def extents(self):
        return [(entry.input_extent, entry.output_extent) for entry in self.entries]

def layer_plan(cfg: NetConfig):
    plan = [
        ('stem.conv', cfg.initial_kernel, cfg.initial_stride),
        ('stem.pool', cfg.pool_kernel, cfg.pool_stride)
    ]

    for block in range(1, cfg.dense_blocks + 1):
        for unit in range(1, cfg.units_per_block + 1):
            plan.append((f'block{block}.unit{unit}.bottleneck', 1, 1))
            plan.append((f'block{block}.unit{unit}.conv', cfg.unit_kernel, 1))

        if block == cfg.dense_blocks:
            continue

        plan.append((f'transition{block}.conv', 1, 1))
        plan.append((f'transition{block}.pool', cfg.transition_pool, cfg.transition_pool))

    plan.append(('final.conv', cfg.final_kernel, 1))
    return plan

def trace_shapes(
    cfg: NetConfig,
    input_size: int | None = None
) -> ShapeTrace:

    extent = input_size if exists(input_size) else cfg.input_size
    stride = 1
    entries = []

    for name, kernel, layer_stride in layer_plan(cfg):
        output_extent = valid_extent(extent, kernel, layer_stride)

        if output_extent <= 0:
            raise NetConstructionError(name, output_extent)

        stride *= layer_stride
        entries.append(TraceEntry(name, kernel, extent, output_extent, stride))
        extent = output_extent

    return ShapeTrace(tuple(entries))

def receptive_field(cfg: NetConfig):
    field_size = 1

    for _, kernel, stride in reversed(layer_plan(cfg)):
        field_size = (field_size - 1) * stride + kernel

    return field_size

# network

class ConvBnRelu(Module):
    def __init__(
        self,
        dim_in,
        dim_out,
        kernel_size,
        stride = 1,
        generator = None
    ):
        super().__init__()
        self.conv = ConvValid(dim_in, dim_out, kernel_size, stride = stride, generator = generator)
        self.norm = batch_norm(dim_out)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))

class DenseUnit(Module):
    def __init__(
        self,
        dim_in,
        dim_bottleneck,
        dim_growth,
        kernel_size = 3,
        generator = None
    ):
        super().__init__()
        self.bottleneck = ConvBnRelu(dim_in, dim_bottleneck, 1, generator = generator)
        self.conv = ConvBnRelu(dim_bottleneck, dim_growth, kernel_size, generator = generator)

    def forward(self, x):
        return self.conv(self.bottleneck(x))

class DenseBlock(Module):
    def __init__(
        self,
        dim_in,
        num_units,
        dim_bottleneck,
        dim_growth,
        kernel_size = 3,
        generator = None
    ):
        super().__init__()

        units = []
        dim = dim_in

        for _ in range(num_units):
            units.append(DenseUnit(dim, dim_bottleneck, dim_growth, kernel_size, generator = generator))
            dim += dim_growth

        self.units = ModuleList(units)
        self.dim_out = dim

    def forward(self, x):

        # every unit sees the block input and all previous unit outputs, cropped to its own extent

        for unit in self.units:
            x = crop_concat(x, unit(x))

        return x

class Transition(Module):
    def __init__(
        self,
        dim_in,
        dim_out,
        pool_size = 2,
        generator = None
    ):
        super().__init__()
        self.conv = ConvBnRelu(dim_in, dim_out, 1, generator = generator)
        self.pool = nn.AvgPool2d(pool_size, stride = pool_size)

    def forward(self, x):
        return self.pool(self.conv(x))

class DenseNet(Module):
    def __init__(
        self,
        cfg: NetConfig = NetConfig(),
        generator: torch.Generator | None = None
    ):
        super().__init__()
        self.cfg = cfg
        self.trace = trace_shapes(cfg)

        dim = cfg.scaled(cfg.initial_filters)

        self.stem = ConvBnRelu(cfg.in_channels, dim, cfg.initial_kernel, stride = cfg.initial_stride, generator = generator)
        self.pool = nn.MaxPool2d(cfg.pool_kernel, stride = cfg.pool_stride)

        blocks = []
        transitions = []

        for index in range(cfg.dense_blocks):
            block = DenseBlock(
                dim,
                cfg.units_per_block,
                cfg.scaled(cfg.bottleneck_filters),
                cfg.scaled(cfg.growth_filters),
                kernel_size = cfg.unit_kernel,
                generator = generator
            )

            blocks.append(block)
            dim = block.dim_out

            if index == (cfg.dense_blocks - 1):
                continue

            dim_compressed = max(1, int(dim * cfg.compression))
            transitions.append(Transition(dim, dim_compressed, cfg.transition_pool, generator = generator))
            dim = dim_compressed

        self.blocks = ModuleList(blocks)
        self.transitions = ModuleList(transitions)

        # last layer has no batch norm, only the channel softmax

        self.final = ConvValid(dim, cfg.classes, cfg.final_kernel, generator = generator)

    @property
    def stride(self):
        return self.trace.stride

    @property
    def receptive_field(self):
        return receptive_field(self.cfg)

    def l2_parameters(self):
        # batch norm scale and shift are left out of the l2 penalty

        for module in self.modules():
            if not isinstance(module, ConvValid):
                continue

            yield from module.parameters()

    def measure_shapes(self, x):
        spatial_types = (ConvValid, nn.MaxPool2d, nn.AvgPool2d)
        extents = []

        def hook(module, inputs, output):
            extents.append((inputs[0].shape[-1], output.shape[-1]))

        handles = [module.register_forward_hook(hook) for module in self.modules() if isinstance(module, spatial_types)]

        try:
            self.forward(x)
        finally:
            for handle in handles:
                handle.remove()

        return extents

    def forward(self, x):
        x = self.pool(self.stem(x))

        for index, block in enumerate(self.blocks):
            x = block(x)

            if index < len(self.transitions):
                x = self.transitions[index](x)

        return channel_softmax(self.final(x))

def build_network(
    cfg: NetConfig = NetConfig(),
    seed: int | torch.Generator | None = None
) -> DenseNet:

    generator = seed

    if isinstance(seed, int):
        generator = torch.Generator().manual_seed(seed)

    return DenseNet(cfg, generator = generator)

# checkpoint

def scratch_network(cfg: NetConfig):
    # private generator, so loading never advances the global torch rng

    return DenseNet(cfg, generator = torch.Generator().manual_seed(0))

class StoredAdam(NamedTuple):
    step: int
    m: dict[str, Tensor]
    v: dict[str, Tensor]

@dataclass
class Checkpoint:
    state: dict[str, Tensor]
    adam_step: int | None = None
    adam_m: dict[str, Tensor] = field(default_factory = dict)
    adam_v: dict[str, Tensor] = field(default_factory = dict)
    anchors: list = field(default_factory = list)

    @property
    def adam(self):
        if self.adam_step is None:
            return None

        return StoredAdam(self.adam_step, self.adam_m, self.adam_v)

    def validate(self, cfg: NetConfig):
        expected = scratch_network(cfg).state_dict()

        missing = expected.keys() - self.state.keys()
        unexpected = self.state.keys() - expected.keys()

        if missing or unexpected:
            raise CheckpointError('dims', f'parameter names differ from the configured network, missing {sorted(missing)[:3]}, unexpected {sorted(unexpected)[:3]}')

        for name, tensor in expected.items():
            found = tuple(self.state[name].shape)

            if found != tuple(tensor.shape):
                raise CheckpointError('dims', f'parameter `{name}` has dims {found}, network expects {tuple(tensor.shape)}')

    def to_network(self, cfg: NetConfig) -> DenseNet:
        self.validate(cfg)

        net = scratch_network(cfg)
        net.load_state_dict(self.state)
        return net

class CheckpointReader(ByteReader):
    def fail(self, code, message):
        raise CheckpointError(code, message, self.offset)

def save_checkpoint(
    net_or_state: Module | dict[str, Tensor],
    path: str | Path,
    adam = None,
    anchors = ()
):
    state = net_or_state.state_dict() if isinstance(net_or_state, Module) else net_or_state

    flags = (HAS_ADAM if exists(adam) else 0) | (HAS_FISHER if len(anchors) > 0 else 0)

    writer = ByteWriter()
    writer.raw(CHECKPOINT_MAGIC)
    writer.pack('HHI', CHECKPOINT_VERSION, flags, len(state))

    for name, tensor in state.items():
        writer.blob(name, tensor)

    if exists(adam):
        m, v = adam.m, adam.v

        writer.pack('QI', adam.step, len(m))

        for name in m.keys():
            writer.blob(name, m[name])
            writer.array(v[name])

    if len(anchors) > 0:
        writer.pack('I', len(anchors))

        for anchor in anchors:
            writer.string(anchor.task_id)
            writer.pack('QI', anchor.sample_count, len(anchor.fisher))

            for name in anchor.fisher.keys():
                writer.blob(name, anchor.fisher[name])
                writer.array(anchor.theta_star[name])

    path = Path(path)
    path.parent.mkdir(parents = True, exist_ok = True)
    path.write_bytes(writer.getvalue())

def load_checkpoint(
    path: str | Path,
    cfg: NetConfig | None = None
) -> Checkpoint:

    from metastasis_ewc_pytorch.continual import FisherAnchor

    reader = CheckpointReader(Path(path).read_bytes())
    reader.expect_magic(CHECKPOINT_MAGIC)

    version, flags, count = reader.unpack('HHI')

    if version != CHECKPOINT_VERSION:
        reader.fail('version', f'checkpoint format version {version}, expected {CHECKPOINT_VERSION}')

    state = dict(reader.blob() for _ in range(count))
    checkpoint = Checkpoint(state = state)

    if flags & HAS_ADAM:
        step, moment_count = reader.unpack('QI')
        checkpoint.adam_step = step

        for _ in range(moment_count):
            name, m = reader.blob()
            checkpoint.adam_m[name] = m
            checkpoint.adam_v[name] = reader.tensor()

    if flags & HAS_FISHER:
        for _ in range(reader.unpack('I')):
            task_id = reader.string()
            sample_count, param_count = reader.unpack('QI')

            fisher, theta_star = dict(), dict()

            for _ in range(param_count):
                name, fisher[name] = reader.blob()
                theta_star[name] = reader.tensor()

            checkpoint.anchors.append(FisherAnchor(task_id, fisher, theta_star, sample_count))

    if not reader.at_end():
        reader.fail('truncated', 'unexpected trailing bytes after the last section')

    if exists(cfg):
        checkpoint.validate(cfg)

    return checkpoint

def load_network(
    path: str | Path,
    cfg: NetConfig
) -> tuple[DenseNet, Checkpoint]:

    checkpoint = load_checkpoint(path)
    return checkpoint.to_network(cfg), checkpoint
