"""The full segmentation network: encoders, prompt pool, chain fold, decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from cpseg.autodiff import Parameter, Rng, Tensor, concat, no_grad
from cpseg.autodiff import functional as F
from cpseg.config import TrainConfig
from cpseg.data.taxonomy import KINDS, ClassTaxonomy
from cpseg.decoder import RefinementHead, decode
from cpseg.encoders import TextEncoder, Tokenizer, VisionEncoder, build_vocab
from cpseg.matching import (
    FusionBlock,
    Reduction,
    compute_score_map,
    downsample_labels,
    pixel_text_matching_loss,
    total_loss,
)
from cpseg.nn import Module
from cpseg.prompt_chain import (
    Level,
    PromptChain,
    PromptPool,
    condition_question,
    presence_question,
    quantity_question,
    scene_question,
    select_indices,
)

MAX_COUNT_WORD = 20


def template_corpus(taxonomies: Sequence[ClassTaxonomy]) -> List[str]:
    """Every sentence the scene annotator can emit, plus class descriptions."""
    corpus = [f"{scene_question()} {a}" for a in ("yes", "no")]
    for kind in KINDS:
        corpus += [f"{presence_question(kind)} {a}" for a in ("yes", "no")]
        corpus += [f"{condition_question(kind)} {a}" for a in ("yes", "no")]
        corpus += [f"{quantity_question(kind)} {n}" for n in range(MAX_COUNT_WORD + 1)]
    for tax in taxonomies:
        corpus += [tax.description(k) for k in range(tax.K)]
    return corpus


def default_tokenizer(taxonomy: ClassTaxonomy, max_len: int = 16) -> Tokenizer:
    taxonomies = [taxonomy]
    if taxonomy.merge_map is not None:
        taxonomies.append(taxonomy.merged())
    return build_vocab(template_corpus(taxonomies), max_len)


@dataclass
class ForwardOutput:
    scores: Tensor                  # [B, h, w, K]
    dense: Tensor                   # [B, h, w, d]
    global_feature: Tensor          # [B, d]
    bank: Tensor                    # [B, K, d]
    thoughts: List[Optional[Tensor]]  # per sample [m_b, d] chain embeddings
    # per sample: (sentence, [h, w, K] score map) right after each chain thought
    snapshots: List[List[Tuple[str, np.ndarray]]] = field(default_factory=list)


class CPSegModel(Module):
    def __init__(self, config: TrainConfig, tokenizer: Tokenizer, taxonomy: ClassTaxonomy,
                 image_size: Tuple[int, int]):
        rng = Rng(config.seed).child(0)
        d = config.dim
        self.config = config
        self.tokenizer = tokenizer
        self.taxonomy = taxonomy
        self.image_size = tuple(image_size)
        self.text_encoder = TextEncoder(tokenizer.size, d, config.text_layers, config.heads,
                                        config.max_len, rng.child(1), config.text_pooling)
        self.vision_encoder = VisionEncoder(self.image_size, config.patch_size, d,
                                            config.vision_layers, config.heads, rng.child(2))
        self.pool = PromptPool(config.pool_size, d, rng.child(3))
        self.fusion = FusionBlock(d, rng.child(4), heads=config.heads)
        self.head = RefinementHead(taxonomy.K, config.patch_size, rng.child(5))
        # an untrained encoder maps all descriptions close to the <eos> embedding;
        # a learnable offset per class keeps the bank rows apart from the start
        self.class_context = None
        if config.class_context > 0:
            self.class_context = Parameter(rng.child(6).normal(0.0, config.class_context, (taxonomy.K, d)))
        if config.freeze_text_encoder:
            self.text_encoder.set_trainable(False)

    @property
    def K(self) -> int:
        return self.taxonomy.K

    def trainable_parameters(self) -> List[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    # -- forward ---------------------------------------------------------------
    def _thought_order(self, chain: PromptChain, pool_idx: Sequence[int]):
        """Pool prompts and chain thoughts interleaved by level, pool first."""
        items = [(int(self.pool.levels[j]), 0, n, ("pool", n)) for n, j in enumerate(pool_idx)]
        items += [(int(node.level), 1, n, ("text", n)) for n, node in enumerate(chain.nodes)]
        return [src for *_, src in sorted(items)]

    def forward(self, images: np.ndarray, chains: Sequence[PromptChain],
                snapshots: bool = False) -> ForwardOutput:
        images = np.asarray(images, dtype=np.float64)
        b = images.shape[0]
        if len(chains) != b:
            raise ValueError(f"{b} images but {len(chains)} chains")
        K, d, k = self.K, self.config.dim, self.config.pool_top_k
        dense, glob = self.vision_encoder(images)

        class_sents = [self.taxonomy.description(c) for c in range(K)]
        chain_sents: List[str] = []
        slot: Dict[str, int] = {}
        for chain in chains:
            for s in chain.sentences():
                if s not in slot:
                    slot[s] = len(chain_sents)
                    chain_sents.append(s)
        tokens, valid, emb = self.text_encoder.encode(self.tokenizer.encode_batch(class_sents + chain_sents))
        bank = emb[:K] if self.class_context is None else emb[:K] + self.class_context
        bank = bank.reshape(1, K, d).broadcast_to((b, K, d))
        sent_emb = emb[K:]
        n_sent = len(chain_sents)
        by_token = self.config.thought_slots == "tokens"
        L = tokens.shape[1] if by_token else 1

        # every thought becomes an [L, d] slot sequence with a mask
        rows = [tokens[K:] if by_token else sent_emb.reshape(n_sent, 1, d)]
        masks = [valid[K:] if by_token else np.ones((n_sent, 1), dtype=bool)]
        sel = np.zeros((b, 0), dtype=np.int64)
        if k > 0:
            sel = np.array([select_indices(self.pool, glob.data[i], k) for i in range(b)], dtype=np.int64)
            sims = F.pairwise_cosine(glob, self.pool.keys)
            weights = sims[np.arange(b)[:, None], sel]
            pool_rows = (self.pool.prompts[sel] * weights.reshape(b, k, 1)).reshape(b * k, 1, d)
            if L > 1:
                pool_rows = concat([pool_rows, Tensor(np.zeros((b * k, L - 1, d)))], axis=1)
            rows.append(pool_rows)
            pool_mask = np.zeros((b * k, L), dtype=bool)
            pool_mask[:, 0] = True
            masks.append(pool_mask)

        table = concat(rows + [Tensor(np.zeros((1, L, d)))], axis=0)
        table_mask = np.concatenate(masks + [np.zeros((1, L), dtype=bool)], axis=0)
        zero_row = n_sent + b * k
        orders = [self._thought_order(c, sel[i]) for i, c in enumerate(chains)]
        steps = max((len(o) for o in orders), default=0)

        snaps: List[List[Tuple[str, np.ndarray]]] = [[] for _ in range(b)]
        for step in range(steps):
            idx = np.full(b, zero_row, dtype=np.int64)
            active = np.zeros(b)
            text_step = []
            for i, order in enumerate(orders):
                if step < len(order):
                    src, n = order[step]
                    if src == "text":
                        idx[i] = slot[chains[i].nodes[n].sentence]
                        text_step.append((i, chains[i].nodes[n].sentence))
                    else:
                        idx[i] = n_sent + i * k + n
                    active[i] = 1.0
            bank = self.fusion(bank, table[idx], active, table_mask[idx])
            if snapshots and text_step:
                current = compute_score_map(dense, bank, self.config.normalize).data
                for i, sentence in text_step:
                    snaps[i].append((sentence, current[i].copy()))

        scores = compute_score_map(dense, bank, self.config.normalize)
        thoughts = []
        for chain in chains:
            rows = [slot[s] for s in chain.sentences()]
            thoughts.append(sent_emb[np.array(rows, dtype=np.int64)] if rows else None)
        return ForwardOutput(scores, dense, glob, bank, thoughts, snaps)

    def logits(self, out: ForwardOutput, images: np.ndarray) -> Tensor:
        return decode(out.scores, self.head, self.image_size, images)

    # -- losses ------------------------------------------------------------------
    def loss(self, images: np.ndarray, masks: np.ndarray, chains: Sequence[PromptChain]):
        """Total training loss and a dict of its named parts (as floats)."""
        cfg = self.config
        out = self.forward(images, chains)
        masks = np.asarray(masks, dtype=np.int64)
        b = masks.shape[0]
        y_small = downsample_labels(masks, cfg.patch_size, self.K)
        pixels = out.dense.reshape(b, -1, cfg.dim)
        reduction = Reduction(cfg.ptm_reduction)
        if cfg.ptm_prompts == "bank" or cfg.lam == 0:
            loss = total_loss(out.scores, y_small, pixels, out.bank, cfg.lam, cfg.tau, reduction)
            seg_value = None
        else:
            from cpseg.matching import segmentation_loss

            seg = segmentation_loss(out.scores, y_small, cfg.tau)
            seg_value = seg.item()
            terms = [pixel_text_matching_loss(pixels[i], t, reduction)
                     for i, t in enumerate(out.thoughts) if t is not None]
            loss = seg
            if terms:
                ptm = terms[0]
                for t in terms[1:]:
                    ptm = ptm + t
                if reduction is Reduction.MEAN:
                    ptm = ptm * (1.0 / len(terms))
                loss = seg + ptm * cfg.lam
        parts = {"score_map": loss.item() if seg_value is None else seg_value}
        if cfg.decoder_loss and cfg.decoder_weight > 0:
            logits = self.logits(out, images)
            full = F.softmax_cross_entropy(logits.reshape(-1, self.K) * (1.0 / cfg.tau), masks.reshape(-1))
            parts["decoder"] = full.item()
            loss = loss + full * cfg.decoder_weight
        parts["total"] = loss.item()
        return loss, parts

    # -- inference ---------------------------------------------------------------
    def predict_logits(self, images: np.ndarray, chains: Sequence[PromptChain]) -> np.ndarray:
        with no_grad():
            out = self.forward(images, chains)
            return self.logits(out, images).data


def build_model(config: TrainConfig, taxonomy: ClassTaxonomy, image_size: Tuple[int, int],
                tokenizer: Optional[Tokenizer] = None) -> CPSegModel:
    tokenizer = tokenizer or default_tokenizer(taxonomy, config.max_len)
    return CPSegModel(config, tokenizer, taxonomy, image_size)


def chain_level_counts(chain: PromptChain) -> Dict[Level, int]:
    counts = {lvl: 0 for lvl in Level}
    for n in chain.nodes:
        counts[n.level] += 1
    return counts
