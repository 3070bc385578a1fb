"""Single-image segmentation with optional per-thought score-map dumps."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import List

import numpy as np
from PIL import Image

from cpseg.autodiff import no_grad
from cpseg.decoder import predict, write_mask, write_score_snapshot
from cpseg.exceptions import DatasetError, ShapeError
from cpseg.model import CPSegModel
from cpseg.prompt_chain import PromptChain, read_prompt_records
from cpseg.validation import check_images


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing image {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def prompts_for_image(image_path, prompts_path=None) -> PromptChain:
    """Stored prompts for an image, looked up by file stem.

    Without ``prompts_path`` the ``prompts.jsonl`` of the dataset holding
    the image (``<root>/images/<id>.png``) is used when present.
    """
    image_path = Path(image_path)
    if prompts_path is None:
        candidate = image_path.parent.parent / "prompts.jsonl"
        if not candidate.exists():
            return PromptChain([])
        prompts_path = candidate
    records = read_prompt_records(prompts_path)
    return PromptChain(records.get(image_path.stem, []))


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-")


def segment_image(model: CPSegModel, image: np.ndarray, chain: PromptChain, out_path,
                  dump_dir=None) -> np.ndarray:
    """Predict a mask for one image, write it, and optionally dump thought maps.

    The dump holds one grayscale image per (chain thought, class), named
    ``thought<i>_class<k>_<name>.png``, plus ``thoughts.json`` listing them.
    """
    image = check_images(image, model.config.patch_size)
    if image.shape[1:3] != model.image_size:
        raise ShapeError(f"model expects {model.image_size} images, got {image.shape[1:3]}")
    chain = PromptChain(list(chain.nodes)[: model.config.m_max])
    with no_grad():
        out = model.forward(image, [chain], snapshots=dump_dir is not None)
        labels = predict(model.logits(out, image))[0]
    write_mask(out_path, labels, model.taxonomy)
    if dump_dir is not None:
        dump_thought_maps(dump_dir, out.snapshots[0], model.taxonomy.names)
    return labels


def dump_thought_maps(dump_dir, snapshots, class_names) -> List[Path]:
    dump_dir = Path(dump_dir)
    dump_dir.mkdir(parents=True, exist_ok=True)
    written, index = [], []
    for i, (sentence, scores) in enumerate(snapshots):
        entry = {"thought": i, "sentence": sentence, "maps": []}
        for k, name in enumerate(class_names):
            path = dump_dir / f"thought{i:02d}_class{k}_{_slug(name)}.png"
            write_score_snapshot(path, scores[..., k])
            entry["maps"].append(path.name)
            written.append(path)
        index.append(entry)
    (dump_dir / "thoughts.json").write_text(json.dumps(index, indent=2))
    return written
