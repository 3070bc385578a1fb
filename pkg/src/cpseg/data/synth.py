"""Procedural flood scenes with masks and chain-of-thought annotations.

Scenes are painted back to front on a grass background: water blobs,
tree blobs, road polylines, building and pool rectangles, then vehicles.
Flooded buildings and roads keep the hue of their dry counterparts (see
``SceneSpec.flood_tint``), so which of them is flooded can only be read
from the accompanying text.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from cpseg.autodiff import Rng
from cpseg.data.sample import SegSample
from cpseg.data.taxonomy import ClassTaxonomy, default_taxonomy
from cpseg.exceptions import ConfigError, GenerationError, ShapeError
from cpseg.prompt_chain import DEFAULT_MAX_CHAIN, build_chain, scene_is_flooded

Range = Tuple[int, int]

BASE_COLORS: Dict[str, Tuple[float, float, float]] = {
    "building": (0.80, 0.25, 0.20),
    "road": (0.85, 0.85, 0.80),
    "water": (0.10, 0.20, 0.75),
    "tree": (0.05, 0.30, 0.08),
    "vehicle": (0.95, 0.90, 0.15),
    "pool": (0.15, 0.85, 0.90),
    "grass": (0.40, 0.75, 0.25),
}


@dataclass
class SceneSpec:
    """Instance-count ranges (inclusive) and shape sizes for one scene.

    Trees are the most numerous instances and cover the most area after
    the grass background, buildings and roads next, vehicles and pools
    least.
    """

    water: Range = (0, 1)
    water_if_flooded: Range = (1, 2)
    water_radius: Range = (5, 10)
    trees: Range = (8, 16)
    tree_radius: Range = (3, 6)
    roads: Range = (1, 2)
    road_width: Range = (1, 4)
    buildings: Range = (1, 5)
    building_size: Range = (6, 12)
    pools: Range = (0, 2)
    pool_size: Range = (4, 7)
    vehicles: Range = (0, 4)
    vehicle_size: Range = (3, 4)
    flood_probability: float = 0.5
    class_flood_probability: float = 0.5
    noise_sigma: float = 0.05
    flood_tint: float = 0.0
    max_retries: int = 50
    colors: Dict[str, Tuple[float, float, float]] = field(default_factory=lambda: dict(BASE_COLORS))

    def __post_init__(self):
        for name in ("water", "water_if_flooded", "water_radius", "trees", "tree_radius", "roads",
                     "road_width", "buildings", "building_size", "pools", "pool_size", "vehicles", "vehicle_size"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"bad range {name}=({lo}, {hi})")

    @classmethod
    def empty(cls) -> "SceneSpec":
        zero = (0, 0)
        return cls(water=zero, water_if_flooded=zero, trees=zero, roads=zero, buildings=zero,
                   pools=zero, vehicles=zero, flood_probability=0.0)


def _draw(rng: Rng, r: Range) -> int:
    return int(rng.integers(r[0], r[1] + 1))


def _paint_blob(mask, cls_id, rng, radius: Range) -> None:
    h, w = mask.shape
    ry, rx = _draw(rng, radius), _draw(rng, radius)
    cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    yy, xx = np.ogrid[:h, :w]
    inside = ((yy - cy) / max(ry, 1)) ** 2 + ((xx - cx) / max(rx, 1)) ** 2 <= 1.0
    mask[inside] = cls_id


def _paint_road(mask, cls_id, rng, width: Range) -> np.ndarray:
    """Straight or L-shaped axis-aligned road crossing from one edge."""
    h, w = mask.shape
    wd = _draw(rng, width)
    painted = np.zeros_like(mask, dtype=bool)
    horizontal = rng.random() < 0.5
    turn = rng.random() < 0.4
    if horizontal:
        y = int(rng.integers(0, h - wd + 1))
        x_end = int(rng.integers(w // 3, w)) if turn else w
        painted[y:y + wd, :x_end] = True
        if turn:
            if rng.random() < 0.5:
                painted[:y + wd, x_end - wd:x_end] = True
            else:
                painted[y:, x_end - wd:x_end] = True
    else:
        x = int(rng.integers(0, w - wd + 1))
        y_end = int(rng.integers(h // 3, h)) if turn else h
        painted[:y_end, x:x + wd] = True
        if turn:
            if rng.random() < 0.5:
                painted[y_end - wd:y_end, :x + wd] = True
            else:
                painted[y_end - wd:y_end, x:] = True
    mask[painted] = cls_id
    return painted


def _place_rect(occupied, rng, size: Range, max_retries: int, what: str,
                anchor_pool: Optional[np.ndarray] = None):
    h, w = occupied.shape
    for _ in range(max_retries):
        rh, rw = _draw(rng, size), _draw(rng, size)
        if rh > h or rw > w:
            continue
        if anchor_pool is not None and len(anchor_pool):
            cy, cx = anchor_pool[int(rng.integers(0, len(anchor_pool)))]
            y0 = int(np.clip(cy - rh // 2, 0, h - rh))
            x0 = int(np.clip(cx - rw // 2, 0, w - rw))
        else:
            y0 = int(rng.integers(0, h - rh + 1))
            x0 = int(rng.integers(0, w - rw + 1))
        box = (slice(y0, y0 + rh), slice(x0, x0 + rw))
        if not occupied[box].any():
            return box
    raise GenerationError(f"could not place {what} after {max_retries} attempts")


def render_image(mask: np.ndarray, taxonomy: ClassTaxonomy, spec: SceneSpec, rng: Rng) -> np.ndarray:
    """Class colours plus Gaussian noise, quantised to 8 bits and scaled to [0, 1]."""
    water = np.array(spec.colors["water"])
    table = np.zeros((taxonomy.K, 3))
    for i in range(taxonomy.K):
        color = np.array(spec.colors[taxonomy.kind(i)])
        if taxonomy.is_flooded(i):
            color = (1 - spec.flood_tint) * color + spec.flood_tint * water
        table[i] = color
    img = table[mask] + rng.normal(0.0, spec.noise_sigma, mask.shape + (3,))
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_scene(spec: SceneSpec, rng: Rng, size: Tuple[int, int] = (64, 64),
                   taxonomy: Optional[ClassTaxonomy] = None, image_id: str = "scene",
                   patch_size: int = 4, m_max: int = DEFAULT_MAX_CHAIN) -> SegSample:
    taxonomy = taxonomy or default_taxonomy()
    h, w = size
    if h % patch_size or w % patch_size:
        raise ShapeError(f"scene size {size} not divisible by patch size {patch_size}")
    grass = taxonomy.base_id("grass")
    mask = np.full((h, w), grass, dtype=np.int64)

    flooded = rng.random() < spec.flood_probability
    flood_kind = {"building": False, "road": False}
    if flooded:
        for kind in flood_kind:
            flood_kind[kind] = rng.random() < spec.class_flood_probability
        if not any(flood_kind.values()):
            flood_kind["building" if rng.random() < 0.5 else "road"] = True

    def cls_for(kind):
        fid = taxonomy.flooded_id(kind)
        return fid if (flood_kind.get(kind) and fid is not None) else taxonomy.base_id(kind)

    for _ in range(_draw(rng, spec.water_if_flooded if flooded else spec.water)):
        _paint_blob(mask, taxonomy.base_id("water"), rng, spec.water_radius)
    for _ in range(_draw(rng, spec.trees)):
        _paint_blob(mask, taxonomy.base_id("tree"), rng, spec.tree_radius)
    road_px = np.zeros((h, w), dtype=bool)
    for _ in range(_draw(rng, spec.roads)):
        road_px |= _paint_road(mask, cls_for("road"), rng, spec.road_width)

    occupied = np.zeros((h, w), dtype=bool)
    for _ in range(_draw(rng, spec.buildings)):
        box = _place_rect(occupied | road_px, rng, spec.building_size, spec.max_retries, "building")
        mask[box] = cls_for("building")
        occupied[box] = True
    for _ in range(_draw(rng, spec.pools)):
        box = _place_rect(occupied | road_px, rng, spec.pool_size, spec.max_retries, "pool")
        mask[box] = taxonomy.base_id("pool")
        occupied[box] = True
    anchors = np.argwhere(road_px & ~occupied)
    for _ in range(_draw(rng, spec.vehicles)):
        box = _place_rect(occupied, rng, spec.vehicle_size, spec.max_retries, "vehicle", anchors)
        mask[box] = taxonomy.base_id("vehicle")
        occupied[box] = True

    image = render_image(mask, taxonomy, spec, rng)
    sample = SegSample(image_id, image, mask, scene_is_flooded(mask, taxonomy))
    sample.prompt_records = build_chain(sample, taxonomy, m_max).nodes
    return sample


def generate_dataset(n: int, seed: int, size: Tuple[int, int] = (64, 64),
                     spec: Optional[SceneSpec] = None, taxonomy: Optional[ClassTaxonomy] = None,
                     patch_size: int = 4) -> List[SegSample]:
    """``n`` scenes, scene ``i`` drawn from its own stream derived from (seed, i)."""
    if n < 1:
        raise ConfigError(f"need at least one sample, got n={n}")
    spec = spec or SceneSpec()
    root = Rng(seed)
    return [generate_scene(spec, root.child(i), size, taxonomy, f"scene_{i:05d}", patch_size)
            for i in range(n)]


def class_pixel_frequencies(samples, k: int) -> np.ndarray:
    counts = np.zeros(k, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.mask.reshape(-1), minlength=k)
    return counts
