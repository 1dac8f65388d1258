"""Neural-network layers over the autodiff engine.

Modules own parameter Tensors and optional non-trainable buffers
(batchnorm running statistics). State iteration order is attribute
definition order, which fixes the layout of checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import ShapeError, Tensor


class Module:
    """Base class: tracks parameters, buffers and train/eval mode."""

    def __init__(self):
        self.training = True

    def __call__(self, *args):
        return self.forward(*args)

    def _children(self):
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item

    def parameters(self):
        """Trainable tensors in definition order."""
        out = []
        for value in vars(self).values():
            if isinstance(value, Tensor):
                out.append(value)
        for child in self._children():
            out.extend(child.parameters())
        return out

    def buffers(self):
        """Non-trainable state arrays (running statistics) in definition order."""
        out = []
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray) and name.startswith("running_"):
                out.append(value)
        for child in self._children():
            out.extend(child.buffers())
        return out

    def state_arrays(self):
        """Parameters followed by buffers; the checkpoint serialization order."""
        return [p.data for p in self.parameters()] + self.buffers()

    def train(self):
        self.training = True
        for child in self._children():
            child.train()
        return self

    def eval(self):
        self.training = False
        for child in self._children():
            child.eval()
        return self

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def count_parameters(module):
    """Exact count of the module's trainable scalars."""
    return module.num_parameters()


def init_normal(rng, *shape, std=0.02, dtype=np.float32):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, pad=0, rng=None, bias=True):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.weight = init_normal(rng, out_ch, in_ch, kernel, kernel)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        return engine.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    def flops(self, in_h, in_w):
        oh = (in_h + 2 * self.pad - self.kernel) // self.stride + 1
        ow = (in_w + 2 * self.pad - self.kernel) // self.stride + 1
        return 2 * oh * ow * self.out_ch * self.in_ch * self.kernel * self.kernel, oh, ow


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, pad=0, rng=None, bias=True):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad = kernel, stride, pad
        # stored in conv layout (in_ch filters of out_ch channels): the layer
        # applies the adjoint of a conv2d that maps out_ch -> in_ch
        self.weight = init_normal(rng, in_ch, out_ch, kernel, kernel)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        return engine.conv_transpose2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    def flops(self, in_h, in_w):
        oh = (in_h - 1) * self.stride - 2 * self.pad + self.kernel
        ow = (in_w - 1) * self.stride - 2 * self.pad + self.kernel
        return 2 * in_h * in_w * self.out_ch * self.in_ch * self.kernel * self.kernel, oh, ow


class BatchNorm2d(Module):
    def __init__(self, ch, momentum=0.1, eps=1e-5):
        super().__init__()
        self.ch = ch
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(ch, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(ch, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(ch, dtype=np.float32)
        self.running_var = np.ones(ch, dtype=np.float32)

    def forward(self, x):
        return engine.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = init_normal(rng, in_dim, out_dim)
        self.bias = Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"linear: input {x.shape} does not match weight {self.weight.shape}"
            )
        return engine.matmul(x, self.weight) + self.bias

    def flops(self):
        return 2 * self.in_dim * self.out_dim


class ReLU(Module):
    def forward(self, x):
        return engine.relu(x)


class LeakyReLU(Module):
    def __init__(self, slope=0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        return engine.leaky_relu(x, self.slope)


class Sigmoid(Module):
    def forward(self, x):
        return engine.sigmoid(x)


class Tanh(Module):
    def forward(self, x):
        return engine.tanh(x)


class Flatten(Module):
    def forward(self, x):
        return engine.reshape(x, (x.shape[0], -1))


class Downsample2(Module):
    """Stride-2 downsampling (2x2 average)."""

    def forward(self, x):
        return engine.avg_pool2x2(x)


class Sequential(Module):
    def __init__(self, *mods):
        super().__init__()
        self.mods = list(mods)

    def forward(self, x):
        for m in self.mods:
            x = m(x)
        return x


_LAYER_KINDS = {
    "conv2d", "conv_transpose2d", "batchnorm2d", "relu", "leaky_relu",
    "sigmoid", "tanh", "linear", "concat_channels", "downsample_stride2",
    "flatten",
}


@dataclass
class LayerSpec:
    """Declarative layer description; build() instantiates the module.

    Convolutional kinds validate that (size, kernel, stride, pad) yield an
    integer output size before any parameters are allocated.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def validate_geometry(self, in_size):
        k = self.params.get("kernel", 1)
        stride = self.params.get("stride", 1)
        pad = self.params.get("pad", 0)
        if self.kind == "conv2d":
            return (in_size + 2 * pad - k) and engine._conv_out_size(in_size, k, stride, pad)
        if self.kind == "conv_transpose2d":
            out = (in_size - 1) * stride - 2 * pad + k
            if out <= 0:
                raise ShapeError(f"conv_transpose geometry gives size {out}")
            return out
        return in_size

    def build(self, rng=None):
        p = dict(self.params)
        if self.kind == "conv2d":
            return Conv2d(p["in_ch"], p["out_ch"], p["kernel"],
                          p.get("stride", 1), p.get("pad", 0), rng=rng)
        if self.kind == "conv_transpose2d":
            return ConvTranspose2d(p["in_ch"], p["out_ch"], p["kernel"],
                                   p.get("stride", 1), p.get("pad", 0), rng=rng)
        if self.kind == "batchnorm2d":
            return BatchNorm2d(p["ch"], p.get("momentum", 0.1), p.get("eps", 1e-5))
        if self.kind == "linear":
            return Linear(p["in_dim"], p["out_dim"], rng=rng)
        if self.kind == "relu":
            return ReLU()
        if self.kind == "leaky_relu":
            return LeakyReLU(p.get("slope", 0.2))
        if self.kind == "sigmoid":
            return Sigmoid()
        if self.kind == "tanh":
            return Tanh()
        if self.kind == "flatten":
            return Flatten()
        if self.kind == "downsample_stride2":
            return Downsample2()
        raise ValueError(f"{self.kind} has no standalone module")  # concat_channels


def forward(layer, *inputs):
    """Apply a layer (or a LayerSpec's kind) to input tensors."""
    if isinstance(layer, LayerSpec):
        if layer.kind == "concat_channels":
            return engine.concat(inputs, axis=1)
        layer = layer.build()
    return layer(*inputs)
