"""Parameter containers and the small set of layers the model is built from."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv2d, gelu, layer_norm, linear


def parameter(arr, dtype=np.float32):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def xavier_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Base container; parameters are discovered from instance attributes.

    Attribute order is construction order, so parameter naming and traversal
    are deterministic for a fixed architecture.
    """

    def named_parameters(self, prefix=""):
        for attr, val in vars(self).items():
            name = f"{prefix}{attr}"
            yield from _walk(name, val)

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def state(self):
        return {name: t.data for name, t in self.named_parameters()}

    def load_state(self, arrays):
        for name, t in self.named_parameters():
            src = arrays[name]
            if tuple(src.shape) != t.shape:
                raise ValueError(
                    f"parameter {name}: checkpoint shape {src.shape} != {t.shape}"
                )
            t.data = np.ascontiguousarray(src.astype(t.dtype))

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def parameter_count(self):
        return sum(t.size for t in self.parameters())


def _walk(name, val):
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(prefix=name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(f"{name}.{i}", item)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True, dtype=np.float32):
        self.w = parameter(
            xavier_uniform(rng, (d_in, d_out), d_in, d_out), dtype=dtype
        )
        self.b = parameter(np.zeros(d_out), dtype=dtype) if bias else None

    def __call__(self, x):
        return linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        self.gamma = parameter(np.ones(dim), dtype=dtype)
        self.beta = parameter(np.zeros(dim), dtype=dtype)
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Mlp(Module):
    """Two linear layers with a GELU in between; hidden width = ratio * dim."""

    def __init__(self, rng, dim, ratio=4, dtype=np.float32):
        self.fc1 = Linear(rng, dim, ratio * dim, dtype=dtype)
        self.fc2 = Linear(rng, ratio * dim, dim, dtype=dtype)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k, stride=1, pad=0, bias=True,
                 dtype=np.float32):
        fan_in = c_in * k * k
        fan_out = c_out * k * k
        self.w = parameter(
            xavier_uniform(rng, (c_out, c_in, k, k), fan_in, fan_out), dtype=dtype
        )
        self.b = parameter(np.zeros(c_out), dtype=dtype) if bias else None
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)
