"""The unit record of a flood-scene dataset."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List

import numpy as np


@dataclass
class SegSample:
    """One scene: image in [0, 1], integer mask, and its prompt annotations."""

    image_id: str
    image: np.ndarray
    mask: np.ndarray
    scene_flooded: bool
    prompt_records: List = field(default_factory=list)

    @property
    def size(self):
        return self.mask.shape

    def with_(self, **changes) -> "SegSample":
        return replace(self, **changes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SegSample):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.scene_flooded == other.scene_flooded
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
            and list(self.prompt_records) == list(other.prompt_records)
        )
