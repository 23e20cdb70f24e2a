"""Parameter containers and the handful of layers the tracker is built from."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from ..errors import ShapeError
from . import functional as F
from .tensor import Tensor, relu


class Parameter(Tensor):
    """A learnable leaf tensor."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Attribute-discovered tree of parameters, buffers, and sub-modules.

    Names are dotted attribute paths (lists contribute their index), which
    makes them unique within a model by construction.
    """

    training = True
    _buffers: tuple = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix=""):
        yield prefix.rstrip("."), self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for attr in self._buffers:
            yield f"{prefix}{attr}", getattr(self, attr)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def state_dict(self):
        sd = OrderedDict()
        for name, p in self.named_parameters():
            sd[name] = p.data.copy()
        for name, b in self.named_buffers():
            sd[name] = np.array(b, dtype=np.float64)
        return sd

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        buffers = {name for name, _ in self.named_buffers()}
        expected = set(params) | buffers
        if strict and set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ShapeError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if name in params:
                if params[name].shape != value.shape:
                    raise ShapeError(f"{name}: checkpoint shape {value.shape}, model {params[name].shape}")
                params[name].data = value.copy()
            elif name in buffers:
                owner, attr = self._resolve(name)
                if np.shape(getattr(owner, attr)) != value.shape:
                    raise ShapeError(f"{name}: checkpoint shape {value.shape}")
                setattr(owner, attr, value.copy())

    def _resolve(self, dotted):
        *path, attr = dotted.split(".")
        obj = self
        for part in path:
            obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
        return obj, attr

    def train(self, mode=True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)  # He-uniform, suits the ReLU stacks
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=None, bias=True):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(_uniform(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, din, dout, rng, bias=True):
        self.weight = Parameter(_uniform(rng, (dout, din), din))
        self.bias = Parameter(np.zeros(dout)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x):
        state = F.BNState(len(self.running_mean), self.momentum, self.eps)
        state.running_mean, state.running_var = self.running_mean, self.running_var
        out = F.batch_norm(x, self.gamma, self.beta, state, self.training)
        self.running_mean, self.running_var = state.running_mean, state.running_var
        return out


class ConvBNReLU(Module):
    """Convolution, batch norm, ReLU: the ``xi(psi(.))`` unit used throughout."""

    def __init__(self, cin, cout, k, rng, stride=1):
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return relu(self.bn(self.conv(x)))
