"""On-disk dataset layout and the flooded/non-flooded class merge.

Layout of a dataset directory::

    images/<id>.png     8-bit RGB; pixel value v stands for v / 255
    masks/<id>.pgm      binary PGM (P5), one byte per pixel holding the class id
    prompts.jsonl       one prompt record per line, keyed by image_id
    taxonomy.json       {"classes": [...], "merge_map": {...}}
    manifest.json       format tag, counts, seed, size, train/val id lists

Images are stored quantised to 8 bits and the generator emits quantised
values, so write followed by load is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from cpseg.data.sample import SegSample
from cpseg.data.taxonomy import ClassTaxonomy
from cpseg.exceptions import ConfigError, DatasetError, ValidationError
from cpseg.prompt_chain import (
    PromptChain,
    PromptNode,
    chain_violations,
    read_prompt_records,
    scene_is_flooded,
    verify_relevance,
    write_prompt_records,
)

FORMAT = "cpseg-dataset"
VERSION = 1


def write_dataset(samples: Sequence[SegSample], root, taxonomy: ClassTaxonomy,
                  seed: Optional[int] = None, n_val: int = 0) -> Path:
    """Write ``samples``; the last ``n_val`` ids form the validation split."""
    if not samples:
        raise DatasetError("refusing to write an empty dataset")
    if not 0 <= n_val < len(samples):
        raise ConfigError(f"n_val={n_val} must be in [0, {len(samples)})")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        rgb = np.round(np.asarray(s.image) * 255.0)
        Image.fromarray(rgb.astype(np.uint8)).save(root / "images" / f"{s.image_id}.png")
        Image.fromarray(np.asarray(s.mask).astype(np.uint8)).save(root / "masks" / f"{s.image_id}.pgm")
    write_prompt_records(root / "prompts.jsonl", samples)
    (root / "taxonomy.json").write_text(json.dumps(taxonomy.to_json(), indent=2))
    ids = [s.image_id for s in samples]
    cut = len(ids) - n_val
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "count": len(samples),
        "seed": seed,
        "size": list(samples[0].mask.shape),
        "num_classes": taxonomy.K,
        "scene_flooded": {s.image_id: bool(s.scene_flooded) for s in samples},
        "splits": {"train": ids[:cut], "val": ids[cut:]},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from exc


def _read_image(path: Path, mode: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing file {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != mode:
                raise ValidationError(f"{path} has mode {im.mode}, expected {mode}")
            return np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ValidationError(f"cannot decode {path}: {exc}") from exc


class Dataset:
    """Loaded dataset: samples in manifest order plus metadata."""

    def __init__(self, samples: List[SegSample], taxonomy: ClassTaxonomy, manifest: dict):
        self.samples = samples
        self.taxonomy = taxonomy
        self.manifest = manifest
        self._by_id = {s.image_id: s for s in samples}

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i) -> SegSample:
        return self.samples[i]

    def split(self, name: str) -> List[SegSample]:
        ids = self.manifest.get("splits", {}).get(name)
        if ids is None:
            raise DatasetError(f"dataset has no {name!r} split")
        return [self._by_id[i] for i in ids]

    @property
    def train(self) -> List[SegSample]:
        return self.split("train")

    @property
    def val(self) -> List[SegSample]:
        """Validation split, or every sample when the split is empty."""
        val = self.split("val")
        return val or list(self.samples)


def load_dataset(root) -> Dataset:
    """Read a dataset directory and check every invariant."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    manifest = _read_json(root / "manifest.json")
    if manifest.get("format") != FORMAT:
        raise ValidationError(f"{root / 'manifest.json'} is not a {FORMAT} manifest")
    taxonomy = ClassTaxonomy.from_json(_read_json(root / "taxonomy.json"))
    prompts_path = root / "prompts.jsonl"
    if not prompts_path.exists():
        raise DatasetError(f"missing file {prompts_path}")
    try:
        records = read_prompt_records(prompts_path)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ValidationError(f"bad prompt record in {prompts_path}: {exc}") from exc

    ids = list(manifest["splits"]["train"]) + list(manifest["splits"]["val"])
    n_images = len(list((root / "images").glob("*.png")))
    if manifest["count"] != len(ids) or n_images != len(ids):
        raise ValidationError(
            f"manifest lists {manifest['count']} samples, splits hold {len(ids)}, found {n_images} images")
    size = tuple(manifest["size"])
    flooded = manifest.get("scene_flooded", {})
    samples = []
    for image_id in ids:
        rgb = _read_image(root / "images" / f"{image_id}.png", "RGB")
        mask = _read_image(root / "masks" / f"{image_id}.pgm", "L").astype(np.int64)
        if rgb.shape[:2] != size or mask.shape != size:
            raise ValidationError(f"{image_id}: image {rgb.shape} / mask {mask.shape} do not match size {size}")
        if mask.max() >= taxonomy.K:
            raise ValidationError(f"{image_id}: mask holds class {mask.max()} >= K={taxonomy.K}")
        sample = SegSample(image_id, rgb.astype(np.float64) / 255.0, mask,
                           bool(flooded.get(image_id, scene_is_flooded(mask, taxonomy))),
                           list(records.get(image_id, [])))
        bad = [n.sentence for n in sample.prompt_records if not verify_relevance(n, sample, taxonomy)]
        if bad:
            raise ValidationError(f"{image_id}: prompt answers do not match the mask: {bad}")
        samples.append(sample)
    return Dataset(samples, taxonomy, manifest)


# -- merge --------------------------------------------------------------------

def merge_taxonomy(taxonomy: ClassTaxonomy, merge_map: Optional[Dict[str, str]] = None
                   ) -> Tuple[ClassTaxonomy, np.ndarray]:
    """Merged taxonomy and the old-id -> new-id lookup table."""
    if merge_map is not None:
        taxonomy = ClassTaxonomy(taxonomy.names, dict(merge_map))
    if taxonomy.merge_map is None:
        raise ConfigError("no merge map defined for this taxonomy")
    return taxonomy.merged(), taxonomy.merge_lut()


def apply_merge(sample: SegSample, taxonomy: ClassTaxonomy,
                merge_map: Optional[Dict[str, str]] = None) -> SegSample:
    """Relabel the mask and prompt targets into the merged taxonomy.

    Prompt nodes whose answers no longer verify under the merged classes
    (flood counts, once flooded and dry variants share a class) are dropped.
    """
    target, lut = merge_taxonomy(taxonomy, merge_map)
    mask = lut[np.asarray(sample.mask)]
    nodes = []
    for n in sample.prompt_records:
        t = None if n.target_class is None else int(lut[n.target_class])
        nodes.append(PromptNode(n.level, n.question, n.answer, t))
    merged = sample.with_(mask=mask, prompt_records=[])
    merged.prompt_records = [n for n in nodes if verify_relevance(n, merged, target)]
    return merged


def merge_dataset(samples: Sequence[SegSample], taxonomy: ClassTaxonomy
                  ) -> Tuple[List[SegSample], ClassTaxonomy]:
    target, _ = merge_taxonomy(taxonomy)
    return [apply_merge(s, taxonomy) for s in samples], target


def dataset_violations(samples: Sequence[SegSample], taxonomy: ClassTaxonomy) -> Dict[str, List[str]]:
    out = {}
    for s in samples:
        problems = chain_violations(PromptChain(list(s.prompt_records)), s, taxonomy)
        if problems:
            out[s.image_id] = problems
    return out
