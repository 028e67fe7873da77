"""Parameter containers and the few layers the pipeline is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor, ops, parameter


class Module:
    """Collects parameters from attributes in assignment order.

    Attributes holding a parameter tensor, a Module, or a list of Modules
    are traversed; names are dotted paths, which keeps weight files stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        from .errors import ConfigError

        own = dict(self.named_parameters())
        problems = sorted(set(own) ^ set(state))
        problems += sorted(
            n for n in set(own) & set(state) if own[n].shape != np.shape(state[n])
        )
        if problems:
            raise ConfigError("weight/config mismatch: " + ", ".join(problems))
        for name, p in own.items():
            p.data = np.array(state[name], dtype=np.float64)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, bias=True, zero_init=False):
        shape = (cout, cin, kernel, kernel)
        w = np.zeros(shape) if zero_init else kaiming(rng, shape, cin * kernel * kernel)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        """Accepts ``[..., C, H, W]``; leading axes are folded into the batch."""
        if x.ndim == 4:
            return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)
        lead = x.shape[:-3]
        y = ops.conv2d(x.reshape((-1,) + x.shape[-3:]), self.weight, self.bias, self.stride, self.padding)
        return y.reshape(lead + y.shape[1:])


class Linear(Module):
    """Affine map applied along one axis (a pointwise 1x1 conv for feature maps)."""

    def __init__(self, cin, cout, rng, bias=True, zero_init=False):
        w = np.zeros((cin, cout)) if zero_init else rng.normal(0.0, 1.0 / np.sqrt(cin), size=(cin, cout))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor, axis: int = -1) -> Tensor:
        axis %= x.ndim
        if axis != x.ndim - 1:
            order = [i for i in range(x.ndim) if i != axis] + [axis]
            y = self(x.permute(order))
            inv = list(np.argsort(order))
            return y.permute(inv)
        y = ops.matmul(x.reshape(-1, x.shape[-1]), self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(x.shape[:-1] + (self.weight.shape[1],))


class ChannelNorm(Module):
    """Layer normalization over the channel axis of ``[..., C, H, W]`` maps."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.gain = parameter(np.ones((channels, 1, 1)))
        self.shift = parameter(np.zeros((channels, 1, 1)))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, axis=-3, eps=self.eps) * self.gain + self.shift
