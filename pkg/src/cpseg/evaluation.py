"""Evaluation of a trained model and the prompt / merge ablation runners."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from cpseg.autodiff import Rng
from cpseg.config import TrainConfig
from cpseg.data.io import merge_dataset
from cpseg.data.sample import SegSample
from cpseg.data.taxonomy import ClassTaxonomy
from cpseg.decoder import predict
from cpseg.exceptions import ConfigError
from cpseg.metrics import MetricsReport, aggregate_confusion, confusion_matrix, rows_to_csv
from cpseg.model import CPSegModel
from cpseg.prompt_chain import PromptMode
from cpseg.train import STREAM_EVAL_PROMPTS, chains_for, train

log = logging.getLogger(__name__)

MIN_ABLATION_SEEDS = 3
PROMPT_ROWS = (PromptMode.STANDARD, PromptMode.TWO, PromptMode.RANDOM, PromptMode.CHAIN_OF_THOUGHT)


def predict_masks(model: CPSegModel, samples: Sequence[SegSample], batch_size: int = 8,
                  mode: Optional[PromptMode] = None) -> List[np.ndarray]:
    """Predicted label masks in the model's own taxonomy."""
    cfg = model.config
    mode = PromptMode.parse(mode or cfg.mode)
    rng = Rng(cfg.seed).child(STREAM_EVAL_PROMPTS)
    out = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        chains = chains_for(batch, mode, model.taxonomy, cfg.m_max, rng)
        logits = model.predict_logits(np.stack([s.image for s in batch]), chains)
        out.extend(predict(logits))
    return out


def evaluate(model: CPSegModel, samples: Sequence[SegSample], taxonomy: ClassTaxonomy,
             merge: bool = False, timed: bool = False) -> MetricsReport:
    """Confusion-based metrics of ``model`` on ``samples``.

    With ``merge`` the prediction and ground truth are both mapped through
    the taxonomy's merge map and scored over the merged classes.
    """
    if tuple(taxonomy.names) != tuple(model.taxonomy.names):
        raise ConfigError(f"dataset classes {taxonomy.names} do not match the model's {model.taxonomy.names}")
    k = taxonomy.K
    start = time.perf_counter()
    preds = predict_masks(model, samples, model.config.batch_size)
    elapsed = time.perf_counter() - start
    conf = np.zeros((k, k), dtype=np.int64)
    for p, s in zip(preds, samples):
        conf += confusion_matrix(p, s.mask, k)
    names = list(taxonomy.names)
    if merge:
        if taxonomy.merge_map is None:
            raise ConfigError("evaluation with merge needs a taxonomy merge map")
        target = taxonomy.merged()
        conf = aggregate_confusion(conf, taxonomy.merge_lut(), target.K)
        names = list(target.names)
    runtime = elapsed / len(samples) if timed else None
    return MetricsReport.from_confusion(conf, names, runtime)


# -- ablations ----------------------------------------------------------------

@dataclass
class AblationRow:
    label: str
    scores: List[float]        # mIoU per seed

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def sd(self) -> float:
        return float(np.std(self.scores, ddof=1)) if len(self.scores) > 1 else 0.0

    def as_dict(self, first_column: str, seeds: Sequence[int]) -> dict:
        out = {first_column: self.label, "mIoU": f"{100 * self.mean:.4f}", "sd": f"{100 * self.sd:.4f}"}
        for s, v in zip(seeds, self.scores):
            out[f"seed {s}"] = f"{100 * v:.4f}"
        return out


@dataclass
class AblationResult:
    first_column: str
    rows: List[AblationRow]
    seeds: List[int]
    configs: List[TrainConfig]    # every config that was trained, in run order

    def to_csv(self) -> str:
        return rows_to_csv([r.as_dict(self.first_column, self.seeds) for r in self.rows])

    def row(self, label: str) -> AblationRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


def _check_seeds(seeds: Sequence[int]) -> List[int]:
    seeds = [int(s) for s in seeds]
    if len(seeds) < MIN_ABLATION_SEEDS:
        raise ConfigError(f"ablations need at least {MIN_ABLATION_SEEDS} seeds, got {len(seeds)}")
    return seeds


def ablate_prompts(base: TrainConfig, train_samples: Sequence[SegSample],
                   val_samples: Sequence[SegSample], taxonomy: ClassTaxonomy,
                   seeds: Sequence[int]) -> AblationResult:
    """Train and score each prompting mode per seed; only ``prompt_mode`` varies."""
    seeds = _check_seeds(seeds)
    rows = [AblationRow(m.label, []) for m in PROMPT_ROWS]
    configs = []
    for seed in seeds:
        for row, mode in zip(rows, PROMPT_ROWS):
            cfg = base.with_(seed=seed, prompt_mode=mode.value)
            configs.append(cfg)
            model = train(cfg, train_samples, taxonomy).model
            report = evaluate(model, val_samples, taxonomy)
            log.info("seed %d %s mIoU %.4f", seed, mode.label, report.miou)
            row.scores.append(report.miou)
    return AblationResult("Prompts", rows, seeds, configs)


def ablate_merge(base: TrainConfig, train_samples: Sequence[SegSample],
                 val_samples: Sequence[SegSample], taxonomy: ClassTaxonomy,
                 seeds: Sequence[int]) -> AblationResult:
    """Chain-of-thought runs on the original and on the merged taxonomy."""
    seeds = _check_seeds(seeds)
    if taxonomy.merge_map is None:
        raise ConfigError("merge ablation needs a taxonomy merge map")
    merged_train, merged_tax = merge_dataset(train_samples, taxonomy)
    merged_val, _ = merge_dataset(val_samples, taxonomy)
    setups = [("Original Data", train_samples, val_samples, taxonomy),
              ("Combined Data", merged_train, merged_val, merged_tax)]
    rows = [AblationRow(label, []) for label, *_ in setups]
    configs = []
    for seed in seeds:
        for row, (label, tr, va, tax) in zip(rows, setups):
            cfg = base.with_(seed=seed, prompt_mode=PromptMode.CHAIN_OF_THOUGHT.value)
            configs.append(cfg)
            model = train(cfg, tr, tax).model
            report = evaluate(model, va, tax)
            log.info("seed %d %s mIoU %.4f", seed, label, report.miou)
            row.scores.append(report.miou)
    return AblationResult("Data Type", rows, seeds, configs)
