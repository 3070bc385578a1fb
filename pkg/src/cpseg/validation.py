"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from cpseg.exceptions import LabelError, ShapeError
from cpseg.prompt_chain import PromptChain, PromptNode


def check_images(X, patch_size: Optional[int] = None) -> np.ndarray:
    """``[N, H, W, 3]`` float64 in [0, 1]; a single ``[H, W, 3]`` image is promoted."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeError(f"images must be [N, H, W, 3], got {X.shape}")
    if X.shape[0] == 0:
        raise ShapeError("no images given")
    if not np.all(np.isfinite(X)) or X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must be finite and lie in [0, 1]")
    if patch_size and (X.shape[1] % patch_size or X.shape[2] % patch_size):
        raise ShapeError(f"image size {X.shape[1:3]} not divisible by patch size {patch_size}")
    return X


def check_masks(y, X: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != X.shape[:3]:
        raise ShapeError(f"masks {y.shape} do not match images {X.shape[:3]}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise LabelError("mask values must be integers")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= n_classes:
        raise LabelError(f"mask values must lie in [0, {n_classes})")
    return y


def check_prompts(prompts, n: int) -> List[PromptChain]:
    """One chain per image; accepts chains, node lists, or ``None`` for no prompts."""
    if prompts is None:
        return [PromptChain([]) for _ in range(n)]
    prompts = list(prompts)
    if len(prompts) != n:
        raise ShapeError(f"{n} images but {len(prompts)} prompt chains")
    out = []
    for p in prompts:
        if isinstance(p, PromptChain):
            out.append(p)
        elif p is None:
            out.append(PromptChain([]))
        else:
            nodes = [n if isinstance(n, PromptNode) else PromptNode.from_record(n) for n in p]
            out.append(PromptChain(nodes))
    return out


def check_seeds(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ValueError(f"seeds must be comma-separated integers, got {text!r}") from None


def is_fitted(est, attributes: Sequence[str] = ("model_",)) -> bool:
    return all(hasattr(est, a) for a in attributes)
