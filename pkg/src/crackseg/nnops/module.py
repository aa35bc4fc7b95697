"""Parameter containers and the handful of layers the model is built from."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor


class Module:
    """Minimal layer base: named parameters, named buffers, train/eval flag."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        self._children[name] = module
        object.__setattr__(self, name, module)

    def children(self) -> Iterator["Module"]:
        return iter(self._children.values())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (used for float64 gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for mod in self._iter_modules():
            for name, buf in list(mod._buffers.items()):
                new = buf.astype(dtype)
                mod._buffers[name] = new
                object.__setattr__(mod, name, new)
        return self

    def _iter_modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child._iter_modules()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data.copy()
        for name, b in self.named_buffers():
            state[name] = b.copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        expected = [n for n, _ in self.named_parameters()] + [n for n, _ in self.named_buffers()]
        missing = [n for n in expected if n not in state]
        unexpected = [n for n in state if n not in expected]
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        # Validate every shape before touching anything so a failure leaves no partial state.
        current = dict(self.named_parameters())
        current.update(self.named_buffers())
        for name, ref in current.items():
            if np.shape(state[name]) != ref.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {np.shape(state[name])} vs model {ref.shape}")
        for name, p in self.named_parameters():
            p.data = np.asarray(state[name]).astype(p.dtype, copy=True)
        for mod_prefix, mod in self._named_modules():
            for bname, buf in list(mod._buffers.items()):
                buf[...] = state[mod_prefix + bname]

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for cname, child in self._children.items():
            yield from child._named_modules(prefix + cname + ".")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    """Convolution with framework-default Kaiming-uniform init (bound = 1/sqrt(fan_in))."""

    def __init__(self, in_ch, out_ch, kernel_size, stride=1, padding=0, bias=True, *, rng, dtype=np.float32):
        super().__init__()
        kh, kw = F._pair(kernel_size)
        self.stride = F._pair(stride)
        self.padding = F._pair(padding)
        fan_in = in_ch * kh * kw
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Parameter(_uniform(rng, (out_ch, in_ch, kh, kw), bound, dtype))
        self.bias = Parameter(_uniform(rng, (out_ch,), bound, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels, kernel_size=3, padding=1, *, rng, dtype=np.float32):
        super().__init__()
        kh, kw = F._pair(kernel_size)
        self.padding = F._pair(padding)
        bound = 1.0 / np.sqrt(kh * kw)
        self.weight = Parameter(_uniform(rng, (channels, 1, kh, kw), bound, dtype))
        self.bias = Parameter(_uniform(rng, (channels,), bound, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.depthwise_conv2d(x, self.weight, self.bias, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, *, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class LayerNorm(Module):
    """Layer norm over one axis; ``axis=1`` normalises the channels of a [B,D,H,W] map."""

    def __init__(self, dim, axis=-1, eps=1e-5, *, dtype=np.float32):
        super().__init__()
        self.axis = axis
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.axis, self.eps)
