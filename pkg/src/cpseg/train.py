"""Optimizers and the task / epoch / mini-batch training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from cpseg.autodiff import Rng, Tensor
from cpseg.config import TrainConfig
from cpseg.data.sample import SegSample
from cpseg.data.taxonomy import ClassTaxonomy
from cpseg.exceptions import ContractError, DatasetError, TrainingDivergedError
from cpseg.model import CPSegModel, build_model
from cpseg.prompt_chain import PromptChain, chain_modes

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8

# independent random streams derived from the config seed
STREAM_SHUFFLE = 1
STREAM_PROMPTS = 2
STREAM_EVAL_PROMPTS = 3


@dataclass
class OptimizerState:
    step: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
                   state: OptimizerState, optimizer: str = "adam", lr: float = 1e-3) -> OptimizerState:
    """Update ``params`` in place from ``grads``.

    SGD is ``theta -= lr * g``. Adam uses the usual bias-corrected moments.
    A ``None`` gradient is a contract violation, not a silent skip.
    """
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, g in enumerate(grads):
        if g is None:
            raise ContractError(f"parameter {i} has no gradient")
    state.step += 1
    if optimizer == "sgd":
        for p, g in zip(params, grads):
            p.data -= lr * g
        return state
    if optimizer != "adam":
        raise ContractError(f"unknown optimizer {optimizer!r}")
    t = state.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.m.get(i, np.zeros_like(p.data))
        v = state.v.get(i, np.zeros_like(p.data))
        m = BETA1 * m + (1.0 - BETA1) * g
        v = BETA2 * v + (1.0 - BETA2) * g * g
        state.m[i], state.v[i] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return state


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> List[np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= max_norm:
        return list(grads)
    return [g * (max_norm / norm) for g in grads]


def learning_rate(config: TrainConfig, step: int, total_steps: int) -> float:
    """Rate for the update that follows ``step`` completed updates."""
    if config.lr_schedule == "cosine":
        return 0.5 * config.lr * (1.0 + math.cos(math.pi * step / total_steps))
    return config.lr


def chains_for(samples: Sequence[SegSample], mode, taxonomy: ClassTaxonomy, m_max: int,
               rng: Optional[Rng] = None) -> List[PromptChain]:
    return [chain_modes(mode, s, taxonomy, rng, m_max) for s in samples]


def task_splits(n: int, config: TrainConfig) -> List[np.ndarray]:
    """Contiguous sample ranges, one per task."""
    if config.samples_per_task:
        per = config.samples_per_task
        splits = [np.arange(t * per, min(n, (t + 1) * per)) for t in range(config.tasks)]
    else:
        splits = [a for a in np.array_split(np.arange(n), config.tasks)]
    splits = [s for s in splits if len(s)]
    if not splits:
        raise DatasetError("no samples assigned to any task")
    return splits


@dataclass
class TrainResult:
    model: CPSegModel
    loss_trace: List[float]
    config: TrainConfig


def train(config: TrainConfig, samples: Sequence[SegSample], taxonomy: ClassTaxonomy,
          callback: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    if not samples:
        raise DatasetError("cannot train on an empty dataset")
    config.validate()
    image_size = samples[0].image.shape[:2]
    model = build_model(config, taxonomy, image_size)
    params = model.trainable_parameters()
    state = OptimizerState()
    root = Rng(config.seed)
    shuffle_rng = root.child(STREAM_SHUFFLE)
    prompt_rng = root.child(STREAM_PROMPTS)
    mode = config.mode
    trace: List[float] = []

    splits = task_splits(len(samples), config)
    total_steps = config.epochs * sum(-(-len(t) // config.batch_size) for t in splits)
    epoch_no = 0
    for task in splits:
        for _ in range(config.epochs):
            epoch_no += 1
            order = task[shuffle_rng.permutation(len(task))]
            losses = []
            for step, start in enumerate(range(0, len(order), config.batch_size)):
                batch = [samples[i] for i in order[start:start + config.batch_size]]
                images = np.stack([s.image for s in batch])
                masks = np.stack([s.mask for s in batch])
                chains = chains_for(batch, mode, taxonomy, config.m_max, prompt_rng)
                model.zero_grad()
                loss, _ = model.loss(images, masks, chains)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(epoch_no, step, value)
                loss.backward()
                # parameters the graph never reached this step get a zero gradient
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
                if config.grad_clip is not None:
                    grads = clip_by_global_norm(grads, config.grad_clip)
                lr = learning_rate(config, state.step, total_steps)
                optimizer_step(params, grads, state, config.optimizer, lr)
                losses.append(value)
            mean = float(np.mean(losses))
            trace.append(mean)
            log.info("epoch %d loss %.5f", epoch_no, mean)
            if callback is not None:
                callback(epoch_no, mean)
    return TrainResult(model, trace, config)
