"""Word-level tokenizer, text transformer, and ViT-style image encoder."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from cpseg.autodiff import Parameter, Rng, Tensor, concat
from cpseg.exceptions import ConfigError, EmptyPromptError, ShapeError
from cpseg.nn import AttentionBlock, LayerNorm, Linear, Module

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")
_WORD = re.compile(r"[a-z0-9]+")
_NEG = -1e9


def normalize_words(text: str) -> List[str]:
    """Lower-case words with punctuation stripped."""
    return _WORD.findall(text.lower())


@dataclass
class Tokenizer:
    vocab: Dict[str, int]
    max_len: int = 16
    inverse: Dict[int, str] = field(init=False, repr=False)

    def __post_init__(self):
        if self.max_len < 3:
            raise ConfigError(f"max_len must leave room for a word, got {self.max_len}")
        self.inverse = {i: w for w, i in self.vocab.items()}

    @property
    def size(self) -> int:
        return len(RESERVED) + len(self.vocab)

    def encode(self, text: str) -> np.ndarray:
        """``[bos] words... [eos] [pad]...`` of length ``max_len``.

        Words past ``max_len - 2`` are dropped.
        """
        words = normalize_words(text)
        if not words:
            raise EmptyPromptError(f"prompt {text!r} is empty after normalisation")
        words = words[: self.max_len - 2]
        ids = [BOS] + [self.vocab.get(w, UNK) for w in words] + [EOS]
        return np.array(ids + [PAD] * (self.max_len - len(ids)), dtype=np.int64)

    def encode_batch(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.encode(t) for t in texts]) if texts else np.zeros((0, self.max_len), np.int64)

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(RESERVED[UNK] if i == UNK else self.inverse[i])
        return " ".join(words)


def build_vocab(corpus: Sequence[str], max_len: int = 16) -> Tokenizer:
    """Word vocabulary ordered by descending frequency, then alphabetically."""
    if not corpus:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    counts = Counter(w for text in corpus for w in normalize_words(text))
    if not counts:
        raise ConfigError("corpus contains no words")
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    return Tokenizer({w: i + len(RESERVED) for i, w in enumerate(ordered)}, max_len)


def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), _NEG), k=1)


POOLINGS = ("eos", "mean")


class TextEncoder(Module):
    """Causal transformer over token ids.

    ``pooling="eos"`` takes the feature at ``<eos>``; ``"mean"`` averages the
    features from ``<bos>`` through ``<eos>``. With a causal mask the padding
    after ``<eos>`` never reaches either.
    """

    def __init__(self, vocab_size: int, dim: int, layers: int, heads: int, max_len: int, rng: Rng,
                 pooling: str = "eos"):
        if pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got {pooling!r}")
        self.pooling = pooling
        bound = 1.0 / np.sqrt(dim)
        # one-hot input, so fan_in is 1
        self.token_embedding = Parameter(rng.uniform(-1.0, 1.0, (vocab_size, dim)))
        self.positional_embedding = Parameter(rng.uniform(-bound, bound, (max_len, dim)))
        self.layers = [AttentionBlock(dim, heads, rng) for _ in range(layers)]
        self.ln_final = LayerNorm(dim)
        self.max_len = max_len
        self._mask = _causal_mask(max_len)

    @property
    def dim(self) -> int:
        return self.token_embedding.shape[1]

    def encode(self, ids: np.ndarray) -> Tuple[Tensor, np.ndarray, Tensor]:
        """Token features ``[n, L, d]``, their validity mask (``<bos>``..``<eos>``) and the pooled ``[n, d]``."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != self.max_len:
            raise ShapeError(f"token ids must be [n, {self.max_len}], got {ids.shape}")
        x = self.token_embedding[ids] + self.positional_embedding
        for block in self.layers:
            x = block(x, self._mask)
        x = self.ln_final(x)
        eos_at = np.argmax(ids == EOS, axis=1)
        valid = np.arange(self.max_len)[None, :] <= eos_at[:, None]
        if self.pooling == "eos":
            return x, valid, x[np.arange(len(ids)), eos_at]
        weights = valid.astype(np.float64)
        weights /= weights.sum(axis=1, keepdims=True)
        return x, valid, (x * weights[:, :, None]).sum(axis=1)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return self.encode(ids)[2]


class VisionEncoder(Module):
    """Patch embedding + class token + transformer blocks.

    Returns a dense ``[B, H/P, W/P, d]`` grid and a ``[B, d]`` global
    feature taken from the class token.
    """

    def __init__(self, image_size: Tuple[int, int], patch_size: int, dim: int, layers: int,
                 heads: int, rng: Rng, channels: int = 3):
        h, w = image_size
        if h % patch_size or w % patch_size:
            raise ShapeError(f"image size {image_size} not divisible by patch size {patch_size}")
        self.patch_size = patch_size
        self.image_size = (h, w)
        self.channels = channels
        self.grid = (h // patch_size, w // patch_size)
        n_tokens = 1 + self.grid[0] * self.grid[1]
        bound = 1.0 / np.sqrt(dim)
        self.patch_projection = Linear(patch_size * patch_size * channels, dim, rng)
        self.class_token = Parameter(rng.uniform(-bound, bound, dim))
        self.positional_embedding = Parameter(rng.uniform(-bound, bound, (n_tokens, dim)))
        self.layers = [AttentionBlock(dim, heads, rng) for _ in range(layers)]
        self.ln_final = LayerNorm(dim)

    @property
    def dim(self) -> int:
        return self.class_token.shape[0]

    def patchify(self, images: np.ndarray) -> np.ndarray:
        b, h, w, c = images.shape
        p = self.patch_size
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
        if (h, w) != self.image_size or c != self.channels:
            raise ShapeError(f"encoder built for {self.image_size}x{self.channels}, got {h}x{w}x{c}")
        x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, (h // p) * (w // p), p * p * c)

    def __call__(self, images: np.ndarray):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4:
            raise ShapeError(f"images must be [B, H, W, C], got {images.shape}")
        b = images.shape[0]
        d = self.dim
        tokens = self.patch_projection(Tensor(self.patchify(images)))
        cls = self.class_token.reshape(1, 1, d).broadcast_to((b, 1, d))
        x = concat([cls, tokens], axis=1) + self.positional_embedding
        for block in self.layers:
            x = block(x)
        x = self.ln_final(x)
        gh, gw = self.grid
        dense = x[:, 1:, :].reshape(b, gh, gw, d)
        return dense, x[:, 0, :]


def encode_text(tok: Tokenizer, enc: TextEncoder, sentence: str) -> Tensor:
    return enc(tok.encode(sentence)[None, :])[0]


def encode_image(enc: VisionEncoder, image: np.ndarray):
    """Single image ``[H, W, C]`` -> (dense ``[H/P, W/P, d]``, global ``[d]``)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"image must be [H, W, C], got {image.shape}")
    dense, glob = enc(image[None])
    return dense[0], glob[0]
