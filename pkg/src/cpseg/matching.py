"""Pixel-text score maps, chain refinement of the class text bank, and losses.

Shapes: dense pixel features ``[..., h, w, d]``, class text bank
``[..., K, d]``, score maps ``[..., h, w, K]``. A leading batch axis is
optional everywhere.
"""

from __future__ import annotations

import enum
from typing import Optional

import numpy as np

from cpseg.autodiff import Parameter, Rng, Tensor, as_tensor, concat
from cpseg.autodiff import functional as F
from cpseg.exceptions import ConfigError, ContractError, DimensionError, ShapeError
from cpseg.nn import MLP, LayerNorm, Linear, Module

TEMPERATURE = 0.07


class Reduction(str, enum.Enum):
    SUM = "sum"
    MEAN = "mean"


def compute_score_map(dense: Tensor, bank: Tensor, normalize: bool = True) -> Tensor:
    """``s[..., y, x, k] = sim(dense[..., y, x], bank[..., k])``.

    Cosine similarity when ``normalize`` is set, raw dot product otherwise.
    """
    dense, bank = as_tensor(dense), as_tensor(bank)
    if dense.shape[-1] != bank.shape[-1]:
        raise DimensionError(f"pixel dim {dense.shape[-1]} != text dim {bank.shape[-1]}")
    *lead, h, w, d = dense.shape
    flat = dense.reshape(*lead, h * w, d)
    if normalize:
        scores = F.pairwise_cosine(flat, bank)
    else:
        scores = flat @ bank.swapaxes(-1, -2)
    return scores.reshape(*lead, h, w, bank.shape[-2])


class FusionBlock(Module):
    """One cross-attention decoder step from class embeddings to a thought.

    Each class query attends over the thought's slots plus a learned null
    slot, so a class can decline to absorb a thought. A thought is either one
    ``[d]`` vector or a ``[L, d]`` token sequence with a validity mask; the
    latter lets a query pick out single words such as the answer. Output
    projections start at zero (``zero_init``), making the block an identity
    at init.
    """

    def __init__(self, dim: int, rng: Rng, zero_init: bool = True, mlp_ratio: int = 2, heads: int = 1):
        if dim % heads:
            raise DimensionError(f"embedding dim {dim} not divisible by {heads} heads")
        bound = 1.0 / np.sqrt(dim)
        self.heads = heads
        self.ln_query = LayerNorm(dim)
        self.ln_thought = LayerNorm(dim)
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.null_slot = Parameter(rng.uniform(-bound, bound, dim))
        self.out = Linear(dim, dim, rng, zero=zero_init)
        self.ln_mlp = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, rng, zero_out=zero_init)
        self.last_attention: Optional[np.ndarray] = None

    def __call__(self, bank: Tensor, thought: Tensor, active: Optional[np.ndarray] = None,
                 thought_mask: Optional[np.ndarray] = None) -> Tensor:
        bank, thought = as_tensor(bank), as_tensor(thought)
        squeeze = bank.ndim == 2
        if squeeze:
            bank = bank.reshape(1, *bank.shape)
            thought = thought.reshape(1, *thought.shape)
            if thought_mask is not None:
                thought_mask = np.asarray(thought_mask)[None]
        b, k, d = bank.shape
        if thought.ndim == 2:
            thought = thought.reshape(thought.shape[0], 1, thought.shape[1])
        if thought.ndim != 3 or thought.shape[0] != b or thought.shape[2] != d:
            raise DimensionError(f"thought shape {thought.shape} does not match bank {bank.shape}")
        n = thought.shape[1]
        slots = concat([self.ln_thought(thought),
                        self.null_slot.reshape(1, 1, d).broadcast_to((b, 1, d))], axis=1)
        h, dh = self.heads, d // self.heads
        q = self.query(self.ln_query(bank)).reshape(b, k, h, dh).transpose(0, 2, 1, 3)
        keys = self.key(slots).reshape(b, n + 1, h, dh).transpose(0, 2, 3, 1)
        values = self.value(slots).reshape(b, n + 1, h, dh).transpose(0, 2, 1, 3)
        scores = (q @ keys) * (1.0 / np.sqrt(dh))
        if thought_mask is not None:
            thought_mask = np.asarray(thought_mask, dtype=bool).reshape(b, n)
            bias = np.concatenate([np.where(thought_mask, 0.0, -1e9), np.zeros((b, 1))], axis=1)
            scores = scores + bias[:, None, None, :]
        attn = F.softmax(scores, axis=-1)
        self.last_attention = attn.data
        delta = self.out((attn @ values).transpose(0, 2, 1, 3).reshape(b, k, d))
        if active is not None:
            delta = delta * np.asarray(active, dtype=np.float64).reshape(b, 1, 1)
        bank = bank + delta
        delta = self.mlp(self.ln_mlp(bank))
        if active is not None:
            delta = delta * np.asarray(active, dtype=np.float64).reshape(b, 1, 1)
        bank = bank + delta
        return bank.reshape(k, d) if squeeze else bank


def refine_with_thought(bank: Tensor, thought_embedding: Tensor, fusion: FusionBlock,
                        active: Optional[np.ndarray] = None,
                        thought_mask: Optional[np.ndarray] = None) -> Tensor:
    return fusion(bank, thought_embedding, active, thought_mask)


def refine_with_chain(bank: Tensor, thoughts, fusion: FusionBlock) -> Tensor:
    """Fold the thoughts into the bank in order."""
    for t in thoughts:
        bank = fusion(bank, t)
    return bank


def pixel_text_matching_loss(pixels: Tensor, prompts: Tensor, reduction=Reduction.MEAN) -> Tensor:
    """Negated accumulated cosine similarity over every (pixel, prompt) pair.

    ``pixels`` is ``[..., N, d]`` and ``prompts`` ``[..., M, d]``. ``SUM``
    is the literal sum; ``MEAN`` divides by the number of pairs.
    """
    pixels, prompts = as_tensor(pixels), as_tensor(prompts)
    if pixels.shape[-2] == 0 or prompts.shape[-2] == 0:
        raise ContractError("pixel-text matching needs at least one pixel and one prompt")
    sims = F.pairwise_cosine(pixels, prompts)
    if Reduction(reduction) is Reduction.SUM:
        return -sims.sum()
    return -sims.mean()


def segmentation_loss(s: Tensor, y: np.ndarray, tau: float = TEMPERATURE) -> Tensor:
    """Mean cross-entropy of ``softmax(s / tau)`` against labels ``y``."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    s = as_tensor(s)
    y = np.asarray(y)
    if s.shape[:-1] != y.shape:
        raise DimensionError(f"score map {s.shape} does not match labels {y.shape}")
    k = s.shape[-1]
    return F.softmax_cross_entropy(s.reshape(-1, k) * (1.0 / tau), y.reshape(-1))


def total_loss(s: Tensor, y: np.ndarray, pixels: Tensor, prompts: Tensor, lam: float = 0.1,
               tau: float = TEMPERATURE, reduction=Reduction.MEAN) -> Tensor:
    """``L_seg + lam * L_PTM``; with ``lam == 0`` this is exactly ``L_seg``."""
    if lam < 0:
        raise ConfigError(f"lambda must be non-negative, got {lam}")
    seg = segmentation_loss(s, y, tau)
    if lam == 0:
        return seg
    return seg + pixel_text_matching_loss(pixels, prompts, reduction) * lam


def downsample_labels(mask: np.ndarray, factor: int, n_classes: Optional[int] = None) -> np.ndarray:
    """Per-block majority vote; ties go to the smallest class id."""
    mask = np.asarray(mask)
    *lead, h, w = mask.shape
    if h % factor or w % factor:
        raise ShapeError(f"mask {h}x{w} not divisible by {factor}")
    k = int(mask.max()) + 1 if n_classes is None else n_classes
    blocks = mask.reshape(*lead, h // factor, factor, w // factor, factor)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // factor, w // factor, factor * factor)
    counts = (blocks[..., None] == np.arange(k)).sum(axis=-2)
    return counts.argmax(axis=-1).astype(np.int64)
