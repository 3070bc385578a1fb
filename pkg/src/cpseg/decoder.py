"""Score map to full-resolution logits and masks."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from cpseg.autodiff import Parameter, Rng, Tensor, as_tensor, concat
from cpseg.autodiff import functional as F
from cpseg.data.synth import BASE_COLORS
from cpseg.data.taxonomy import ClassTaxonomy
from cpseg.exceptions import NumericError, ShapeError
from cpseg.nn import Module


class RefinementHead(Module):
    """Residual 3x3 convolution over upsampled scores and the RGB image.

    Weights start at zero, so at init the output equals the bilinear
    upsample of the score map.
    """

    def __init__(self, n_classes: int, patch_size: int, rng: Rng, use_image: bool = True,
                 zero_init: bool = True):
        self.n_classes = n_classes
        self.patch_size = patch_size
        self.use_image = use_image
        c_in = n_classes + (3 if use_image else 0)
        if zero_init:
            self.weight = Parameter(np.zeros((9 * c_in, n_classes)))
        else:
            bound = 1.0 / np.sqrt(9 * c_in)
            self.weight = Parameter(rng.uniform(-bound, bound, (9 * c_in, n_classes)))
        self.bias = Parameter(np.zeros(n_classes))


def decode(s: Tensor, head: RefinementHead, target: Tuple[int, int],
           image: Optional[np.ndarray] = None) -> Tensor:
    """Bilinear upsample of ``s`` to ``target`` plus one residual 3x3 conv.

    ``s`` is ``[h, w, K]`` or ``[B, h, w, K]``; ``target`` must be exactly
    ``patch_size`` times ``(h, w)``.
    """
    s = as_tensor(s)
    squeeze = s.ndim == 3
    if squeeze:
        s = s.reshape(1, *s.shape)
        if image is not None:
            image = np.asarray(image)[None]
    _, h, w, k = s.shape
    p = head.patch_size
    if tuple(target) != (h * p, w * p):
        raise ShapeError(f"cannot decode a {h}x{w} map to {tuple(target)} with factor {p}")
    up = F.resize_bilinear(s, tuple(target))
    feats = up
    if head.use_image:
        if image is None:
            raise ShapeError("refinement head expects the input image")
        image = np.asarray(image, dtype=np.float64)
        if image.shape[:3] != up.shape[:3]:
            raise ShapeError(f"image {image.shape} does not match decode target {up.shape[:3]}")
        feats = concat([up, Tensor(image)], axis=-1)
    out = up + F.im2col3x3(feats) @ head.weight + head.bias
    return out.reshape(*out.shape[1:]) if squeeze else out


def predict(logits) -> np.ndarray:
    """Per-pixel argmax over the last axis; ties go to the smallest class id."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if np.isnan(data).any():
        raise NumericError("logits contain NaN")
    return data.argmax(axis=-1).astype(np.int64)


def palette(taxonomy: ClassTaxonomy) -> list:
    out = []
    for i, name in enumerate(taxonomy.names):
        rgb = np.array(BASE_COLORS[taxonomy.kind(i)])
        if taxonomy.is_flooded(i):
            rgb = 0.5 * rgb + 0.5 * np.array(BASE_COLORS["water"])
        out.append({"id": i, "name": name, "color": [int(round(c * 255)) for c in rgb]})
    return out


def write_mask(path, labels: np.ndarray, taxonomy: ClassTaxonomy) -> Path:
    """8-bit single-channel mask (PGM or PNG by suffix) plus ``<stem>.json`` palette."""
    path = Path(path)
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"mask must be 2-d, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= taxonomy.K or taxonomy.K > 256:
        raise ValueError(f"mask values must lie in [0, {taxonomy.K})")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint8)).save(path)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({"classes": palette(taxonomy)}, indent=2))
    return sidecar


def write_score_snapshot(path, scores: np.ndarray) -> None:
    """Grayscale image of a cosine score plane, [-1, 1] mapped to [0, 255]."""
    g = np.clip((np.asarray(scores) + 1.0) * 127.5, 0, 255)
    Image.fromarray(np.round(g).astype(np.uint8)).save(path)
