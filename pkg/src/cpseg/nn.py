"""Parameter containers and the pre-norm transformer block."""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from cpseg.autodiff import Parameter, Rng, Tensor
from cpseg.autodiff import functional as F
from cpseg.exceptions import DimensionError


class Module:
    """Walks attributes to find parameters; order follows attribute creation."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def init_uniform(rng: Rng, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return _param(rng.uniform(-bound, bound, shape))


def _param(values) -> Parameter:
    return Parameter(values)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, zero: bool = False):
        if zero:
            self.weight = _param(np.zeros((d_in, d_out)))
        else:
            self.weight = init_uniform(rng, d_in, (d_in, d_out))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"Linear expects last axis {self.weight.shape[0]}, got input {x.shape}")
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = _param(np.ones(d))
        self.beta = _param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng: Rng, zero_out: bool = False):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class AttentionBlock(Module):
    """Pre-norm residual block: ``x + Attn(LN(x))`` then ``+ MLP(LN(.))``.

    ``mask`` is an additive array broadcastable to ``[B, heads, n, n]``;
    use large negative entries to hide keys. The last attention weights are
    kept on ``last_attention`` for inspection.
    """

    def __init__(self, d: int, heads: int, rng: Rng, mlp_ratio: int = 2):
        if d % heads:
            raise DimensionError(f"embedding dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.ln1 = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio * d, rng)
        self.last_attention: Optional[np.ndarray] = None

    def attend(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        b, n, d = x.shape
        dh = d // self.heads
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        if mask is not None:
            scores = scores + mask
        attn = F.softmax(scores, axis=-1)
        self.last_attention = attn.data
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        out = self.proj(out)
        return out.reshape(n, d) if squeeze else out

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        x = x + self.attend(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))


def attention_block(x: Tensor, block: AttentionBlock, mask: Optional[np.ndarray] = None) -> Tensor:
    return block(x, mask)
