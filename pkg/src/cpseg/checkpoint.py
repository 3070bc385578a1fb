"""JSON checkpoint manifest.

One JSON object holding the training config, taxonomy, vocabulary, image
size, and every named parameter as ``{"name", "shape", "values"}`` with
row-major values. Floats are written with ``repr`` precision, so a save and
load cycle restores parameters bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from cpseg.config import TrainConfig
from cpseg.data.taxonomy import ClassTaxonomy
from cpseg.encoders import Tokenizer
from cpseg.exceptions import ConfigError, DatasetError, ValidationError
from cpseg.model import CPSegModel

FORMAT = "cpseg-checkpoint"
VERSION = 1


def checkpoint_dict(model: CPSegModel, loss_trace: Optional[list] = None) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "config": model.config.to_dict(),
        "taxonomy": model.taxonomy.to_json(),
        "vocab": model.tokenizer.vocab,
        "image_size": list(model.image_size),
        "loss_trace": list(loss_trace or []),
        "parameters": [
            {"name": name, "shape": list(p.shape), "values": p.data.ravel().tolist()}
            for name, p in model.named_parameters()
        ],
    }


def save_checkpoint(path, model: CPSegModel, loss_trace: Optional[list] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(checkpoint_dict(model, loss_trace)))
    return path


def model_from_dict(obj: dict) -> CPSegModel:
    if obj.get("format") != FORMAT:
        raise ValidationError("not a checkpoint manifest")
    if obj.get("version") != VERSION:
        raise ValidationError(f"unsupported checkpoint version {obj.get('version')}")
    config = TrainConfig.from_dict(obj["config"])
    taxonomy = ClassTaxonomy.from_json(obj["taxonomy"])
    tokenizer = Tokenizer(dict(obj["vocab"]), config.max_len)
    model = CPSegModel(config, tokenizer, taxonomy, tuple(obj["image_size"]))
    params = dict(model.named_parameters())
    stored = {entry["name"]: entry for entry in obj["parameters"]}
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise ValidationError(f"checkpoint parameters do not match the model: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        entry = stored[name]
        shape = tuple(entry["shape"])
        if shape != p.shape:
            raise ValidationError(f"parameter {name}: checkpoint shape {shape}, model expects {p.shape}")
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != p.data.size:
            raise ValidationError(f"parameter {name}: {values.size} values for shape {shape}")
        p.data[...] = values.reshape(shape)
    return model


def load_checkpoint(path) -> CPSegModel:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except OSError as exc:
        raise DatasetError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    try:
        return model_from_dict(obj)
    except KeyError as exc:
        raise ValidationError(f"checkpoint {path} lacks field {exc}") from exc
    except ConfigError:
        raise
