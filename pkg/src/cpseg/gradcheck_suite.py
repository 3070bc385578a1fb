"""Finite-difference checks of every differentiable building block.

Each check builds a small instance, randomises all of its parameters
(zero-initialised layers included, otherwise whole paths would carry no
gradient), and compares backprop against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from cpseg.autodiff import Parameter, Rng, Tensor, gradient_check
from cpseg.config import TrainConfig
from cpseg.data.sample import SegSample
from cpseg.data.taxonomy import default_taxonomy
from cpseg.decoder import RefinementHead, decode
from cpseg.encoders import TextEncoder, VisionEncoder, _causal_mask
from cpseg.matching import (
    FusionBlock,
    Reduction,
    pixel_text_matching_loss,
    segmentation_loss,
    total_loss,
)
from cpseg.model import build_model
from cpseg.nn import AttentionBlock, Module
from cpseg.prompt_chain import annotated_chain, scene_is_flooded

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _randomise(module: Module, rng: Rng, scale: float = 0.3) -> List[Tensor]:
    params = module.parameters()
    for p in params:
        p.data += rng.normal(0.0, scale, p.shape)
    return params


def _probe(out: Tensor, rng: Rng) -> Tensor:
    # fixed random projection turns any output into a scalar
    return Tensor(rng.normal(0.0, 1.0, out.shape))


def check_attention(cfg: TrainConfig, rng: Rng) -> float:
    d = cfg.heads * 2
    block = AttentionBlock(d, cfg.heads, rng)
    params = _randomise(block, rng)
    x = Parameter(rng.normal(0.0, 1.0, (2, 4, d)))
    mask = _causal_mask(4)
    w = _probe(block(x, mask), rng)
    return gradient_check(lambda: (block(x, mask) * w).sum(), params + [x])


def check_text_encoder(cfg: TrainConfig, rng: Rng) -> float:
    d = cfg.heads * 2
    enc = TextEncoder(7, d, 1, cfg.heads, 5, rng, cfg.text_pooling)
    params = _randomise(enc, rng)
    ids = np.array([[2, 4, 5, 3, 0], [2, 6, 4, 6, 3]])
    w = _probe(enc(ids), rng)
    return gradient_check(lambda: (enc(ids) * w).sum(), params)


def check_vision_encoder(cfg: TrainConfig, rng: Rng) -> float:
    d, p = cfg.heads * 2, cfg.patch_size
    enc = VisionEncoder((2 * p, 2 * p), p, d, 1, cfg.heads, rng)
    params = _randomise(enc, rng)
    images = rng.uniform(0.0, 1.0, (2, 2 * p, 2 * p, 3))
    dense, glob = enc(images)
    w1, w2 = _probe(dense, rng), _probe(glob, rng)

    def f():
        dense, glob = enc(images)
        return (dense * w1).sum() + (glob * w2).sum()

    return gradient_check(f, params)


def check_fusion(cfg: TrainConfig, rng: Rng) -> float:
    d = 6
    fusion = FusionBlock(d, rng, heads=2)
    params = _randomise(fusion, rng)
    bank = Parameter(rng.normal(0.0, 1.0, (2, 3, d)))
    thought = Parameter(rng.normal(0.0, 1.0, (2, d)))
    active = np.array([1.0, 0.0])
    w = _probe(fusion(bank, thought, active), rng)
    # two folds so the thought-to-thought path is exercised too
    return gradient_check(lambda: (fusion(fusion(bank, thought, active), thought) * w).sum(),
                          params + [bank, thought])


def check_segmentation_loss(cfg: TrainConfig, rng: Rng) -> float:
    s = Parameter(rng.uniform(-1.0, 1.0, (2, 2, 2, 4)))
    y = rng.integers(0, 4, (2, 2, 2))
    return gradient_check(lambda: segmentation_loss(s, y, cfg.tau), s)


def check_ptm_loss(cfg: TrainConfig, rng: Rng) -> float:
    pixels = Parameter(rng.normal(0.0, 1.0, (5, 4)))
    prompts = Parameter(rng.normal(0.0, 1.0, (3, 4)))
    return max(gradient_check(lambda: pixel_text_matching_loss(pixels, prompts, r), [pixels, prompts])
               for r in Reduction)


def check_total_loss(cfg: TrainConfig, rng: Rng) -> float:
    s = Parameter(rng.uniform(-1.0, 1.0, (2, 2, 3)))
    y = rng.integers(0, 3, (2, 2))
    pixels = Parameter(rng.normal(0.0, 1.0, (4, 5)))
    prompts = Parameter(rng.normal(0.0, 1.0, (3, 5)))
    lam = cfg.lam if cfg.lam > 0 else 0.1
    return gradient_check(lambda: total_loss(s, y, pixels, prompts, lam, cfg.tau), [s, pixels, prompts])


def check_decoder(cfg: TrainConfig, rng: Rng) -> float:
    p, k = cfg.patch_size, 3
    head = RefinementHead(k, p, rng)
    params = _randomise(head, rng)
    s = Parameter(rng.uniform(-1.0, 1.0, (1, 2, 2, k)))
    image = rng.uniform(0.0, 1.0, (1, 2 * p, 2 * p, 3))
    w = _probe(decode(s, head, (2 * p, 2 * p), image), rng)
    return gradient_check(lambda: (decode(s, head, (2 * p, 2 * p), image) * w).sum(), params + [s])


def check_model(cfg: TrainConfig, rng: Rng) -> float:
    """End to end: chain fold, pool, both losses and the decoder loss."""
    tiny = cfg.with_(dim=cfg.heads * 2, text_layers=1, vision_layers=1, pool_size=4,
                     pool_top_k=min(cfg.pool_top_k, 2), m_max=3, lam=cfg.lam or 0.1)
    size = (2 * tiny.patch_size, 2 * tiny.patch_size)
    taxonomy = default_taxonomy()
    images = rng.uniform(0.0, 1.0, (2,) + size + (3,))
    masks = rng.integers(0, taxonomy.K, (2,) + size)
    samples = [SegSample(f"g{i}", images[i], masks[i], scene_is_flooded(masks[i], taxonomy))
               for i in range(2)]
    model = build_model(tiny, taxonomy, size)
    params = _randomise(model, rng, 0.1)
    chains = [annotated_chain(s, taxonomy, tiny.m_max) for s in samples]
    return gradient_check(lambda: model.loss(images, masks, chains)[0], params)


CHECKS: Dict[str, Callable[[TrainConfig, Rng], float]] = {
    "attention_block": check_attention,
    "text_encoder": check_text_encoder,
    "vision_encoder": check_vision_encoder,
    "fusion": check_fusion,
    "segmentation_loss": check_segmentation_loss,
    "pixel_text_matching_loss": check_ptm_loss,
    "total_loss": check_total_loss,
    "decoder": check_decoder,
    "full_model": check_model,
}


def run_gradcheck(config: Optional[TrainConfig] = None, names=None, seed: int = 0) -> List[CheckResult]:
    config = config or TrainConfig()
    root = Rng(seed)
    results = []
    for i, (name, fn) in enumerate(CHECKS.items()):
        if names is not None and name not in names:
            continue
        start = time.perf_counter()
        err = fn(config, root.child(i))
        results.append(CheckResult(name, err, time.perf_counter() - start))
    return results
