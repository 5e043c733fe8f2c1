"""Coordinate-gated building blocks."""
from __future__ import annotations

import zlib
from typing import Dict, Iterator, List, Optional

import numpy as np

from .. import ndauto as nd
from ..ndauto import Parameter, Tensor


def _rng_for(seed: int, name: str) -> np.random.Generator:
    # per-parameter stream: ablation variants get identical weights for shared names
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def uniform_param(name: str, shape, fan_in: int, seed: int) -> Parameter:
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(name, _rng_for(seed, name).uniform(-bound, bound, size=shape))


def const_param(name: str, shape, value: float) -> Parameter:
    return Parameter(name, np.full(shape, float(value)))


class Module:
    """Plain container; parameters are discovered from attributes in definition order."""

    def parameters(self) -> List[Parameter]:
        out: List[Parameter] = []
        for value in self.__dict__.values():
            out.extend(_collect(value))
        return out

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in self.__dict__.values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for v in value:
                    if isinstance(v, Module):
                        yield from v.modules()


def _collect(value) -> List[Parameter]:
    if isinstance(value, Parameter):
        return [value]
    if isinstance(value, Module):
        return value.parameters()
    if isinstance(value, (list, tuple)):
        out = []
        for v in value:
            out.extend(_collect(v))
        return out
    return []


class MaskMLP(Module):
    """Per-pixel MLP from a coordinate encoding to a C-channel mask.

    Hidden layers use GELU, the output is linear. The last layer starts at
    weight 0 / bias 1 so a fresh mask is identically one.
    """

    evaluations = 0  # instrumented: number of forward evaluations, process-wide

    def __init__(self, name: str, in_dim: int, hidden: int, out_dim: int, layers: int, seed: int):
        self.name = name
        widths = [in_dim] + [hidden] * layers
        self.weights: List[Parameter] = []
        self.biases: List[Parameter] = []
        for i in range(layers):
            self.weights.append(uniform_param(f"{name}.w{i}", (widths[i + 1], widths[i], 1, 1), widths[i], seed))
            self.biases.append(uniform_param(f"{name}.b{i}", (widths[i + 1],), widths[i], seed))
        self.weights.append(const_param(f"{name}.w{layers}", (out_dim, widths[-1], 1, 1), 0.0))
        self.biases.append(const_param(f"{name}.b{layers}", (out_dim,), 1.0))
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, encoding) -> Tensor:
        encoding = nd.as_tensor(encoding)
        if encoding.shape[-3] != self.in_dim:
            raise ValueError(f"{self.name}: encoding has {encoding.shape[-3]} channels, MLP expects {self.in_dim}")
        MaskMLP.evaluations += 1
        h = encoding
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = nd.conv2d_same(h, w, b)
            if i < last:
                h = nd.gelu(h)
        return h


def eval_mask(mlp: MaskMLP, encoding) -> Tensor:
    """Mask C x H x W (or N x C x H x W) from a D-channel encoding, pixel by pixel."""
    return mlp(encoding)


def coordgate_conv(features, kernel, mask, bias=None, groups: int = 1) -> Tensor:
    """``mask * conv(features, kernel)``.

    The mask must match the convolution output; a convolution output with
    1 x 1 spatial extent (pooled features) is broadcast over the mask.
    """
    y = nd.conv2d_same(features, kernel, bias, groups)
    if mask is None:
        return y
    mask = nd.as_tensor(mask)
    ys, ms = y.shape, mask.shape
    if len(ys) != len(ms) or ys[:-2] != ms[:-2] or not (ys[-2:] == ms[-2:] or ys[-2:] == (1, 1)):
        raise ValueError(f"mask shape {ms} incompatible with convolution output {ys}")
    return y * mask


class GatedConv(Module):
    def __init__(self, name: str, cin: int, cout: int, k: int, scale: int, mcfg, groups: int = 1):
        self.name = name
        self.scale = scale
        self.groups = groups
        fan_in = (cin // groups) * k * k
        self.weight = uniform_param(f"{name}.weight", (cout, cin // groups, k, k), fan_in, mcfg.seed)
        self.bias = uniform_param(f"{name}.bias", (cout,), fan_in, mcfg.seed)
        self.mlp = MaskMLP(f"{name}.mask", mcfg.mask_in_dim, mcfg.mlp_hidden, cout, mcfg.mlp_layers, mcfg.seed)
        self.use_cg = mcfg.use_cg

    def __call__(self, x, masks) -> Tensor:
        return coordgate_conv(x, self.weight, masks.mask(self), self.bias, self.groups)


class LayerNorm2d(Module):
    def __init__(self, name: str, c: int):
        self.weight = const_param(f"{name}.weight", (c,), 1.0)
        self.bias = const_param(f"{name}.bias", (c,), 0.0)

    def __call__(self, x) -> Tensor:
        return nd.layer_norm_channels(x, self.weight, self.bias)


def simple_gate(x) -> Tensor:
    a, b = nd.split_channels(x, 2)
    return a * b


class CoDeBlock(Module):
    """NAF-style block in which every convolution is coordinate gated.

    Branch 1: LN -> 1x1 (2C) -> 3x3 depthwise -> SimpleGate -> channel
    attention (pool, 1x1) -> 1x1 -> residual.
    Branch 2: LN -> 1x1 (2C) -> SimpleGate -> 1x1 -> residual.
    """

    def __init__(self, name: str, c: int, scale: int, mcfg):
        if c % 2:
            raise ValueError(f"CoDe block width must be even, got {c}")
        self.name = name
        self.norm1 = LayerNorm2d(f"{name}.norm1", c)
        self.conv1 = GatedConv(f"{name}.conv1", c, 2 * c, 1, scale, mcfg)
        self.conv2 = GatedConv(f"{name}.conv2", 2 * c, 2 * c, 3, scale, mcfg, groups=2 * c)
        self.sca = GatedConv(f"{name}.sca", c, c, 1, scale, mcfg)
        self.conv3 = GatedConv(f"{name}.conv3", c, c, 1, scale, mcfg)
        self.norm2 = LayerNorm2d(f"{name}.norm2", c)
        self.conv4 = GatedConv(f"{name}.conv4", c, 2 * c, 1, scale, mcfg)
        self.conv5 = GatedConv(f"{name}.conv5", c, c, 1, scale, mcfg)

    def __call__(self, x, masks) -> Tensor:
        y = self.norm1(x)
        y = self.conv2(self.conv1(y, masks), masks)
        y = simple_gate(y)
        y = y * self.sca(nd.global_avg_pool(y), masks)
        y = self.conv3(y, masks)
        x = x + y
        y = self.conv4(self.norm2(x), masks)
        y = self.conv5(simple_gate(y), masks)
        return x + y


def code_block(features, coords, block: CoDeBlock, model) -> Tensor:
    """Run one block on a single C x P x P feature map with its 2 x P x P coordinates."""
    f = nd.as_tensor(features)
    squeeze = f.ndim == 3
    if squeeze:
        f = nd.reshape(f, (1,) + f.shape)
        coords = np.asarray(coords)[None]
    out = block(f, model.mask_source(coords))
    return nd.reshape(out, out.shape[1:]) if squeeze else out
