"""Layer building blocks on top of the autodiff engine."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .autodiff import Tensor
from .autodiff import ops


@dataclass
class RunContext:
    """How a forward pass should behave.

    ``training`` selects batch statistics and active dropout; ``frozen`` routes
    every parameter through a stop-gradient barrier; ``update_stats`` lets
    batch-norm layers fold batch statistics into their running averages.
    """

    training: bool = False
    rng: Optional[np.random.Generator] = None
    frozen: bool = False
    update_stats: bool = False
    dropout: bool = True


EVAL = RunContext()


class Module:
    """Parameter container: requires-grad tensors, child modules, named buffers."""

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items():
            yield f"{prefix}{name}", buf
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.named_parameters()}
        state.update({f"buffer:{k}": b.copy() for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | {f"buffer:{k}" for k in buffers}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)
        for k, b in buffers.items():
            b[...] = state[f"buffer:{k}"]

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        for k in self._buffers:
            self._buffers[k] = self._buffers[k].astype(dtype)
        for value in vars(self).values():
            if isinstance(value, Module):
                value._cast_buffers(dtype)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item._cast_buffers(dtype)

    @staticmethod
    def use(p: Tensor, ctx: RunContext) -> Tensor:
        return ops.stop_grad(p) if ctx.frozen else p


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=(n_out,)), requires_grad=True) if bias else None

    def __call__(self, x: Tensor, ctx: RunContext = EVAL) -> Tensor:
        y = ops.matmul(x, self.use(self.weight, ctx))
        if self.bias is not None:
            y = ops.add(y, self.use(self.bias, ctx))
        return y


class BatchNorm1d(Module):
    def __init__(self, n: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.weight = Tensor(np.ones(n), requires_grad=True)
        self.bias = Tensor(np.zeros(n), requires_grad=True)
        self.momentum = momentum
        self.eps = eps
        self._buffers["running_mean"] = np.zeros(n)
        self._buffers["running_var"] = np.ones(n)

    def __call__(self, x: Tensor, ctx: RunContext = EVAL) -> Tensor:
        w, b = self.use(self.weight, ctx), self.use(self.bias, ctx)
        if ctx.training:
            out, mu, var = ops.batch_norm(x, w, b, self.eps)
            if ctx.update_stats:
                n = x.shape[0]
                m = self.momentum
                self._buffers["running_mean"][...] = (1 - m) * self._buffers["running_mean"] + m * mu
                self._buffers["running_var"][...] = (1 - m) * self._buffers["running_var"] + m * var * n / (n - 1)
            return out
        rm = self._buffers["running_mean"]
        rv = self._buffers["running_var"]
        scale = ops.div(w, np.sqrt(rv + self.eps))
        return ops.add(ops.mul(ops.sub(x, rm), scale), b)


class LayerNorm(Module):
    def __init__(self, n: int, eps: float = 1e-5):
        super().__init__()
        self.weight = Tensor(np.ones(n), requires_grad=True)
        self.bias = Tensor(np.zeros(n), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor, ctx: RunContext = EVAL) -> Tensor:
        return ops.layer_norm(x, self.use(self.weight, ctx), self.use(self.bias, ctx), self.eps)


def dropout(x: Tensor, p: float, ctx: RunContext) -> Tensor:
    if not ctx.training or not ctx.dropout or p <= 0:
        return x
    if ctx.rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (ctx.rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return ops.mul(x, keep)


def batchnorm_layers(module: Module) -> list[BatchNorm1d]:
    found = [module] if isinstance(module, BatchNorm1d) else []
    for name, value in vars(module).items():
        if name.startswith("_"):
            continue
        items = value if isinstance(value, (list, tuple)) else [value]
        for item in items:
            if isinstance(item, Module):
                found.extend(batchnorm_layers(item))
    return found


def calibrate_batchnorm(module: Module, x) -> None:
    """Set every running mean/variance to the statistics of ``x`` (no weight change)."""
    layers = batchnorm_layers(module)
    saved = [bn.momentum for bn in layers]
    try:
        for bn in layers:
            bn.momentum = 1.0
        module(x, RunContext(training=True, update_stats=True, dropout=False))
    finally:
        for bn, m in zip(layers, saved):
            bn.momentum = m
