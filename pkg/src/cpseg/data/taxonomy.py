"""Class taxonomy for flood scenes and the flooded/non-flooded merge."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from cpseg.exceptions import ConfigError, TaxonomyError

DEFAULT_CLASSES = (
    "Building-Flooded",
    "Building-NonFlooded",
    "Road-Flooded",
    "Road-NonFlooded",
    "Water",
    "Tree",
    "Vehicle",
    "Pool",
    "Grass",
)

# Folds each flooded/non-flooded pair into one class (K 9 -> 7).
FLOOD_MERGE = {
    "Building-Flooded": "Building",
    "Building-NonFlooded": "Building",
    "Road-Flooded": "Road",
    "Road-NonFlooded": "Road",
    "Water": "Water",
    "Tree": "Tree",
    "Vehicle": "Vehicle",
    "Pool": "Pool",
    "Grass": "Grass",
}

# kind -> (plural noun used in questions, countable)
KINDS: Dict[str, Tuple[str, bool]] = {
    "building": ("buildings", True),
    "road": ("roads", True),
    "water": ("water", False),
    "tree": ("trees", True),
    "vehicle": ("vehicles", True),
    "pool": ("pools", True),
    "grass": ("grass", False),
}

BACKGROUND_KIND = "grass"


@dataclass(frozen=True)
class ClassTaxonomy:
    """Ordered class names; class id is the position in ``names``."""

    names: Tuple[str, ...] = DEFAULT_CLASSES
    merge_map: Optional[Dict[str, str]] = field(default=None, compare=False)

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(set(names)) != len(names):
            raise TaxonomyError(f"duplicate class names in {names}")
        if not names:
            raise TaxonomyError("taxonomy is empty")
        for name in names:
            if kind_of(name) not in KINDS:
                raise TaxonomyError(f"unknown class {name!r}")
        if self.merge_map is not None:
            missing = [n for n in names if n not in self.merge_map]
            if missing:
                raise ConfigError(f"merge map does not cover classes {missing}")
            for target in self.merge_map.values():
                if kind_of(target) not in KINDS:
                    raise TaxonomyError(f"unknown merge target {target!r}")

    @property
    def K(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise TaxonomyError(f"class {name!r} not in taxonomy {self.names}") from None

    def kind(self, class_id: int) -> str:
        return kind_of(self.names[class_id])

    def is_flooded(self, class_id: int) -> bool:
        return self.names[class_id].endswith("-Flooded")

    def kinds(self) -> List[str]:
        """Kinds in order of first appearance."""
        seen: List[str] = []
        for name in self.names:
            k = kind_of(name)
            if k not in seen:
                seen.append(k)
        return seen

    def ids_of_kind(self, kind: str) -> List[int]:
        return [i for i, n in enumerate(self.names) if kind_of(n) == kind]

    def flooded_id(self, kind: str) -> Optional[int]:
        for i in self.ids_of_kind(kind):
            if self.is_flooded(i):
                return i
        return None

    def base_id(self, kind: str) -> int:
        """The non-flooded (or only) class of a kind."""
        for i in self.ids_of_kind(kind):
            if not self.is_flooded(i):
                return i
        return self.ids_of_kind(kind)[0]

    def flooded_ids(self) -> List[int]:
        return [i for i in range(self.K) if self.is_flooded(i)]

    def description(self, class_id: int) -> str:
        """Short sentence naming the class, used to seed its text embedding."""
        name = self.names[class_id]
        kind = kind_of(name)
        if name.endswith("-NonFlooded"):
            return f"a dry {kind} not flooded"
        if name.endswith("-Flooded"):
            return f"a flooded {kind} under water"
        return f"an area of {kind}"

    # -- merging -----------------------------------------------------------
    def merged(self) -> "ClassTaxonomy":
        """Target taxonomy; its own merge map is the identity, so merging twice is a no-op."""
        if self.merge_map is None:
            raise ConfigError("taxonomy has no merge map")
        targets: List[str] = []
        for name in self.names:
            t = self.merge_map[name]
            if t not in targets:
                targets.append(t)
        return ClassTaxonomy(tuple(targets), {t: t for t in targets})

    def merge_lut(self) -> np.ndarray:
        """Array mapping each old class id to its merged id."""
        target = self.merged()
        return np.array([target.index(self.merge_map[n]) for n in self.names], dtype=np.int64)

    def to_json(self) -> dict:
        out = {"classes": list(self.names)}
        if self.merge_map is not None:
            out["merge_map"] = dict(self.merge_map)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ClassTaxonomy":
        return cls(tuple(obj["classes"]), obj.get("merge_map"))


def kind_of(name: str) -> str:
    return name.split("-")[0].lower()


def default_taxonomy(with_merge: bool = True) -> ClassTaxonomy:
    return ClassTaxonomy(DEFAULT_CLASSES, dict(FLOOD_MERGE) if with_merge else None)


def taxonomy_from_names(names: Sequence[str]) -> ClassTaxonomy:
    return ClassTaxonomy(tuple(names))
