"""Parameters, modules and the block primitives shared by every model."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import (
    DTYPE,
    ShapeError,
    Tensor,
    UsageError,
    conv1d,
    embedding,
    glu,
    lightweight_conv,
    normalize,
    relu,
)


class Parameter(Tensor):
    """A trainable leaf tensor.  Its ``name`` is filled in by the owning module tree."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Minimal container: parameters and sub-modules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, root: str) -> None:
        for name, p in self.named_parameters(root + "."):
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _parameter_slots(self):
        """(container, key, parameter) for every parameter reachable from this module."""
        for attr, value in list(vars(self).items()):
            if attr.startswith("_"):
                continue
            if isinstance(value, Parameter):
                yield self.__dict__, attr, value
            elif isinstance(value, Module):
                yield from value._parameter_slots()
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._parameter_slots()
                    elif isinstance(item, Parameter):
                        yield value, i, item

    @contextlib.contextmanager
    def frozen(self):
        """Inside the block the module computes with constant copies of its weights.

        Graphs built here have no edges into the parameters, so a later
        ``backward`` cannot reach them.
        """
        slots = list(self._parameter_slots())
        for container, key, p in slots:
            container[key] = Tensor(p.data)
        try:
            yield self
        finally:
            for container, key, p in slots:
                container[key] = p

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = value.copy()


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else _glorot(rng, d_in, d_out, (d_in, d_out))
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, num: int, dim: int, scale: float = 0.3):
        self.table = Parameter(rng.normal(0.0, scale, size=(num, dim)))

    @property
    def num_embeddings(self) -> int:
        return self.table.shape[0]

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_embeddings):
            raise KeyError(f"id out of range [0, {self.num_embeddings}): {ids.min()}..{ids.max()}")
        return embedding(self.table, ids)


class Conv1d(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, kernel_size: int):
        fan = kernel_size * d_in
        self.w = Parameter(_glorot(rng, fan, d_out, (kernel_size, d_in, d_out)))
        self.b = Parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.scale = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self._eps = eps

    def __call__(self, x: Tensor, condition: Tensor | None = None) -> Tensor:
        if condition is not None:
            raise UsageError("plain LayerNorm does not take a condition")
        return normalize(x, self._eps) * self.scale + self.bias


class ConditionalLayerNorm(Module):
    """Layer norm whose scale and bias are affine functions of a condition vector.

    scale = 1 + condition @ Ws + bs and bias = condition @ Wb + bb; zero
    projections reduce it exactly to an identity-affine layer norm.
    """

    def __init__(self, rng: np.random.Generator, dim: int, condition_dim: int,
                 zero_init: bool = True, eps: float = 1e-5):
        self.to_scale = Linear(rng, condition_dim, dim, zero=zero_init)
        self.to_bias = Linear(rng, condition_dim, dim, zero=zero_init)
        self._eps = eps

    def __call__(self, x: Tensor, condition: Tensor | None = None) -> Tensor:
        if condition is None:
            raise UsageError("conditional layer norm called without a condition")
        scale = self.to_scale(condition) + 1.0
        bias = self.to_bias(condition)
        if x.ndim == 3 and scale.ndim == 2:
            # [B, C] condition against [B, T, D] input
            scale = scale.reshape(scale.shape[0], 1, scale.shape[1])
            bias = bias.reshape(bias.shape[0], 1, bias.shape[1])
        return normalize(x, self._eps) * scale + bias


@dataclass
class LConvBlockConfig:
    model_dim: int = 64
    kernel_size: int = 5
    num_heads: int = 4
    ff_dim: int = 128
    conditional: bool = False
    condition_dim: int = 0

    def validate(self) -> None:
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.conditional and self.condition_dim < 1:
            raise ValueError("conditional blocks need condition_dim >= 1")


class LConvBlock(Module):
    """GLU -> lightweight conv -> residual + norm, then FF -> residual + norm.

    Positions where ``mask`` is 0 are zeroed before the convolution so that
    padding behaves exactly like the zero padding at a sequence boundary.
    """

    def __init__(self, rng: np.random.Generator, cfg: LConvBlockConfig):
        cfg.validate()
        d = cfg.model_dim
        self.cfg = cfg
        self.proj = Linear(rng, d, 2 * d)
        self.kernel = Parameter(rng.normal(0.0, 0.1, size=(cfg.num_heads, cfg.kernel_size)))
        self.ff1 = Linear(rng, d, cfg.ff_dim)
        self.ff2 = Linear(rng, cfg.ff_dim, d)
        if cfg.conditional:
            self.norm1 = ConditionalLayerNorm(rng, d, cfg.condition_dim)
            self.norm2 = ConditionalLayerNorm(rng, d, cfg.condition_dim)
        else:
            self.norm1 = LayerNorm(d)
            self.norm2 = LayerNorm(d)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None,
                 condition: Tensor | None = None) -> Tensor:
        if self.cfg.conditional != (condition is not None):
            raise UsageError(
                "condition must be supplied iff the block is conditional "
                f"(conditional={self.cfg.conditional})"
            )
        if x.shape[-1] != self.cfg.model_dim:
            raise ShapeError(f"block expects width {self.cfg.model_dim}, got {x.shape[-1]}")
        gated = glu(self.proj(x))
        if mask is not None:
            gated = gated * mask
        y = self.norm1(x + lightweight_conv(gated, self.kernel), condition)
        ff = self.ff2(relu(self.ff1(y)))
        return self.norm2(y + ff, condition)


class ConvStack(Module):
    """Stack of same-length conv layers with ReLU and layer norm, then a linear head."""

    def __init__(self, rng: np.random.Generator, d_in: int, hidden: int, d_out: int,
                 num_layers: int = 2, kernel_size: int = 3):
        dims = [d_in] + [hidden] * num_layers
        self.convs = [Conv1d(rng, a, b, kernel_size) for a, b in zip(dims[:-1], dims[1:])]
        self.norms = [LayerNorm(hidden) for _ in range(num_layers)]
        self.head = Linear(rng, hidden, d_out)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = x
        for conv, norm in zip(self.convs, self.norms):
            if mask is not None:
                h = h * mask
            h = norm(relu(conv(h)))
        return self.head(h)
