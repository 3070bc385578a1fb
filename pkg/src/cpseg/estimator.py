"""scikit-learn style front end: ``fit(X, y)`` / ``predict(X, prompts)``."""

from __future__ import annotations

from dataclasses import fields
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from cpseg.config import TrainConfig
from cpseg.data.sample import SegSample
from cpseg.data.taxonomy import ClassTaxonomy, default_taxonomy
from cpseg.decoder import predict
from cpseg.exceptions import ContractError
from cpseg.metrics import MetricsReport
from cpseg.prompt_chain import build_chain, scene_is_flooded
from cpseg.train import train
from cpseg.validation import check_images, check_masks, check_prompts, is_fitted


class CPSegSegmenter(BaseEstimator):
    """Chain-of-thought prompted segmenter.

    Hyperparameters mirror :class:`TrainConfig`. ``fit`` derives training
    chains from the masks unless ``prompts`` are given; ``predict`` uses
    whatever prompts accompany the images (none by default).
    """

    def __init__(self, tasks=1, epochs=30, lr=1e-3, lam=0.1, tau=0.07, batch_size=8, seed=0,
                 prompt_mode="cot", optimizer="adam", samples_per_task=None, grad_clip=None,
                 lr_schedule="constant", dim=32, text_layers=2, vision_layers=2, heads=2,
                 patch_size=4, max_len=16, text_pooling="eos", thought_slots="tokens", class_context=1.0,
                 pool_size=16, pool_top_k=4, m_max=8,
                 normalize=True, freeze_text_encoder=False, ptm_reduction="mean", ptm_prompts="bank",
                 decoder_loss=True, decoder_weight=1.0, taxonomy: Optional[ClassTaxonomy] = None):
        self.tasks = tasks
        self.epochs = epochs
        self.lr = lr
        self.lam = lam
        self.tau = tau
        self.batch_size = batch_size
        self.seed = seed
        self.prompt_mode = prompt_mode
        self.optimizer = optimizer
        self.samples_per_task = samples_per_task
        self.grad_clip = grad_clip
        self.lr_schedule = lr_schedule
        self.dim = dim
        self.text_layers = text_layers
        self.vision_layers = vision_layers
        self.heads = heads
        self.patch_size = patch_size
        self.max_len = max_len
        self.text_pooling = text_pooling
        self.thought_slots = thought_slots
        self.class_context = class_context
        self.pool_size = pool_size
        self.pool_top_k = pool_top_k
        self.m_max = m_max
        self.normalize = normalize
        self.freeze_text_encoder = freeze_text_encoder
        self.ptm_reduction = ptm_reduction
        self.ptm_prompts = ptm_prompts
        self.decoder_loss = decoder_loss
        self.decoder_weight = decoder_weight
        self.taxonomy = taxonomy

    def to_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in names})

    @classmethod
    def from_config(cls, config: TrainConfig, taxonomy: Optional[ClassTaxonomy] = None) -> "CPSegSegmenter":
        return cls(taxonomy=taxonomy, **config.to_dict())

    def _taxonomy(self) -> ClassTaxonomy:
        return self.taxonomy or default_taxonomy()

    def fit(self, X, y, prompts=None) -> "CPSegSegmenter":
        config = self.to_config()
        taxonomy = self._taxonomy()
        X = check_images(X, config.patch_size)
        y = check_masks(y, X, taxonomy.K)
        samples = []
        for i, (image, mask) in enumerate(zip(X, y)):
            s = SegSample(f"x{i:05d}", image, mask, scene_is_flooded(mask, taxonomy))
            s.prompt_records = build_chain(s, taxonomy, config.m_max).nodes
            samples.append(s)
        if prompts is not None:
            for s, chain in zip(samples, check_prompts(prompts, len(samples))):
                s.prompt_records = list(chain.nodes)
        result = train(config, samples, taxonomy)
        self.model_ = result.model
        self.loss_trace_ = result.loss_trace
        self.n_classes_ = taxonomy.K
        self.classes_ = np.arange(taxonomy.K)
        return self

    def _check_fitted(self):
        if not is_fitted(self):
            raise ContractError(f"{type(self).__name__} is not fitted yet; call fit first")

    def decision_function(self, X, prompts=None) -> np.ndarray:
        """Full-resolution logits ``[N, H, W, K]``."""
        self._check_fitted()
        X = check_images(X, self.patch_size)
        chains = check_prompts(prompts, len(X))
        out = []
        for start in range(0, len(X), self.batch_size):
            out.append(self.model_.predict_logits(X[start:start + self.batch_size],
                                                  chains[start:start + self.batch_size]))
        return np.concatenate(out)

    def predict(self, X, prompts=None) -> np.ndarray:
        return predict(self.decision_function(X, prompts))

    def score(self, X, y, prompts=None) -> float:
        """Mean IoU over classes present in ground truth or prediction."""
        X = check_images(X, self.patch_size)
        y = check_masks(y, X, self.n_classes_)
        pred = self.predict(X, prompts)
        return MetricsReport.from_masks(pred, y, self._taxonomy().names).miou
