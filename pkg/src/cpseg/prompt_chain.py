"""Chain-of-thought prompt construction, verification and the prompt pool.

A chain walks from a scene-level question, through class-presence
questions, down to flood condition and count questions for classes that
were confirmed present.
Answers are read off the ground-truth mask, so a generated chain always
verifies against its own sample.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from cpseg.autodiff import Parameter, Rng
from cpseg.data.taxonomy import BACKGROUND_KIND, KINDS, ClassTaxonomy
from cpseg.exceptions import ConfigError, TaxonomyError
from cpseg.nn import Module

DEFAULT_MAX_CHAIN = 8
CORE_KINDS = ("building", "road")
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class Level(enum.IntEnum):
    SCENE = 0
    CLASS_PRESENCE = 1
    QUANTITY_CONDITION = 2

    @property
    def label(self) -> str:
        return _LEVEL_LABELS[self]

    @classmethod
    def parse(cls, value) -> "Level":
        if isinstance(value, Level):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        for level, label in _LEVEL_LABELS.items():
            if value in (label, level.name):
                return level
        raise ValueError(f"unknown prompt level {value!r}")


_LEVEL_LABELS = {
    Level.SCENE: "Scene",
    Level.CLASS_PRESENCE: "ClassPresence",
    Level.QUANTITY_CONDITION: "QuantityCondition",
}


class PromptMode(str, enum.Enum):
    STANDARD = "standard"
    TWO = "two"
    RANDOM = "random"
    CHAIN_OF_THOUGHT = "cot"

    @property
    def label(self) -> str:
        return {
            PromptMode.STANDARD: "Standard prompt",
            PromptMode.TWO: "Two prompts",
            PromptMode.RANDOM: "Random prompt",
            PromptMode.CHAIN_OF_THOUGHT: "Chain-of-thought prompt",
        }[self]

    @classmethod
    def parse(cls, value) -> "PromptMode":
        if isinstance(value, PromptMode):
            return value
        key = str(value).lower().replace("-", "").replace("_", "").replace(" ", "")
        aliases = {
            "standard": cls.STANDARD,
            "two": cls.TWO,
            "random": cls.RANDOM,
            "cot": cls.CHAIN_OF_THOUGHT,
            "chainofthought": cls.CHAIN_OF_THOUGHT,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ConfigError(f"unknown prompt mode {value!r}") from None


@dataclass(frozen=True)
class PromptNode:
    level: Level
    question: str
    answer: str
    target_class: Optional[int] = None

    @property
    def sentence(self) -> str:
        """Question and answer joined; this is what the text encoder reads."""
        return f"{self.question} {self.answer}"

    def to_record(self, image_id: str) -> dict:
        return {
            "image_id": image_id,
            "level": self.level.label,
            "question": self.question,
            "answer": self.answer,
            "target_class": self.target_class,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PromptNode":
        target = rec.get("target_class")
        return cls(Level.parse(rec["level"]), rec["question"], str(rec["answer"]),
                   None if target is None else int(target))


@dataclass
class PromptChain:
    nodes: List[PromptNode]

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def sentences(self) -> List[str]:
        return [n.sentence for n in self.nodes]


# -- questions ----------------------------------------------------------------

def scene_question() -> str:
    return "is the area flooded?"


def presence_question(kind: str) -> str:
    noun, countable = KINDS[kind]
    return f"are there {noun}?" if countable else f"is there {noun}?"


def quantity_question(kind: str) -> str:
    return f"how many {KINDS[kind][0]} are flooded?"


def condition_question(kind: str) -> str:
    return f"are the {KINDS[kind][0]} flooded?"


def _yes_no(flag: bool) -> str:
    return "yes" if flag else "no"


def count_components(binary: np.ndarray) -> int:
    """Number of 4-connected components of a boolean image."""
    _, n = ndimage.label(binary, structure=_FOUR_CONNECTED)
    return int(n)


def _check_mask(mask: np.ndarray, taxonomy: ClassTaxonomy) -> None:
    if mask.size and (mask.min() < 0 or mask.max() >= taxonomy.K):
        raise TaxonomyError(f"mask holds class ids outside [0, {taxonomy.K})")


def _kind_present(mask: np.ndarray, taxonomy: ClassTaxonomy, kind: str) -> bool:
    return bool(np.isin(mask, taxonomy.ids_of_kind(kind)).any())


def scene_is_flooded(mask: np.ndarray, taxonomy: ClassTaxonomy) -> bool:
    ids = taxonomy.flooded_ids()
    return bool(ids) and bool(np.isin(mask, ids).any())


# -- chain construction -------------------------------------------------------

def build_chain(sample, taxonomy: ClassTaxonomy, m_max: int = DEFAULT_MAX_CHAIN,
                core_kinds: Sequence[str] = CORE_KINDS) -> PromptChain:
    """Scene question, then presence questions, then flood condition and counts.

    Presence is always asked for ``core_kinds`` and for any other kind that
    is present. Every present floodable kind gets a yes/no condition
    question, and a count question when it is flooded. Past ``m_max`` nodes,
    optional presence questions go first, then counts, then conditions.
    """
    if m_max < 1:
        raise ConfigError(f"m_max must be >= 1, got {m_max}")
    mask = np.asarray(sample.mask)
    _check_mask(mask, taxonomy)

    scene = PromptNode(Level.SCENE, scene_question(), _yes_no(bool(sample.scene_flooded)))
    presence = []  # (kind, node, optional)
    for kind in taxonomy.kinds():
        if kind == BACKGROUND_KIND:
            continue
        present = _kind_present(mask, taxonomy, kind)
        if present or kind in core_kinds:
            node = PromptNode(Level.CLASS_PRESENCE, presence_question(kind), _yes_no(present),
                              taxonomy.base_id(kind))
            presence.append((kind, node, kind not in core_kinds))

    conditions, counts = [], []  # (kind, node)
    for kind, node, _ in presence:
        fid = taxonomy.flooded_id(kind)
        if fid is None or node.answer != "yes":
            continue
        n = count_components(mask == fid)
        conditions.append((kind, PromptNode(Level.QUANTITY_CONDITION, condition_question(kind), _yes_no(n > 0), fid)))
        if n > 0:
            counts.append((kind, PromptNode(Level.QUANTITY_CONDITION, quantity_question(kind), str(n), fid)))

    while 1 + len(presence) + len(conditions) + len(counts) > m_max:
        optional = [i for i, (_, _, opt) in enumerate(presence) if opt]
        if optional:
            presence.pop(optional[-1])
        elif counts:
            counts.pop()
        elif conditions:
            conditions.pop()
        else:
            presence.pop()
        kept = {kind for kind, _, _ in presence}
        conditions = [(k, q) for k, q in conditions if k in kept]
        counts = [(k, q) for k, q in counts if k in kept]
    details = [q for _, q in conditions] + [q for _, q in counts]
    return PromptChain([scene] + [n for _, n, _ in presence] + details)


def verify_relevance(node: PromptNode, sample, taxonomy: ClassTaxonomy) -> bool:
    """Recompute the node's answer from ground truth and compare."""
    try:
        mask = np.asarray(sample.mask)
        level = Level.parse(node.level)
        if level is Level.SCENE:
            return node.question == scene_question() and node.answer == _yes_no(bool(sample.scene_flooded))
        t = node.target_class
        if t is None or not 0 <= t < taxonomy.K:
            return False
        kind = taxonomy.kind(t)
        if level is Level.CLASS_PRESENCE:
            return (node.question == presence_question(kind)
                    and node.answer == _yes_no(_kind_present(mask, taxonomy, kind)))
        if not taxonomy.is_flooded(t):
            return False
        n = count_components(mask == t)
        if node.question == condition_question(kind):
            return node.answer == _yes_no(n > 0)
        return node.question == quantity_question(kind) and node.answer == str(n)
    except (ValueError, KeyError, TypeError, IndexError):
        return False


def chain_violations(chain: PromptChain, sample, taxonomy: ClassTaxonomy,
                     m_max: int = DEFAULT_MAX_CHAIN) -> List[str]:
    """Every broken chain invariant, as readable messages (empty when valid)."""
    problems = []
    nodes = chain.nodes
    if not 1 <= len(nodes) <= m_max:
        problems.append(f"length {len(nodes)} outside [1, {m_max}]")
    if nodes and nodes[0].level is not Level.SCENE:
        problems.append("first node is not scene-level")
    for a, b in zip(nodes, nodes[1:]):
        if b.level < a.level:
            problems.append(f"level decreases: {a.question!r} -> {b.question!r}")
    affirmed = set()
    for node in nodes:
        if node.level is Level.CLASS_PRESENCE and node.answer == "yes":
            affirmed.add(taxonomy.kind(node.target_class))
        if node.level is Level.QUANTITY_CONDITION:
            if node.target_class is None:
                problems.append(f"quantity node without target: {node.question!r}")
            elif taxonomy.kind(node.target_class) not in affirmed:
                problems.append(f"quantity node not gated by presence: {node.question!r}")
        if not verify_relevance(node, sample, taxonomy):
            problems.append(f"answer does not verify: {node.sentence!r}")
    return problems


def annotated_chain(sample, taxonomy: ClassTaxonomy, m_max: int = DEFAULT_MAX_CHAIN) -> PromptChain:
    """The sample's stored prompts with irrelevant nodes dropped.

    Samples without stored prompts get a freshly built chain.
    """
    records = list(sample.prompt_records)
    if not records:
        return build_chain(sample, taxonomy, m_max)
    nodes = [n for n in records if verify_relevance(n, sample, taxonomy)]
    return PromptChain(sorted(nodes, key=lambda n: n.level)[:m_max])


def chain_modes(mode, sample, taxonomy: ClassTaxonomy, rng: Optional[Rng] = None,
                m_max: int = DEFAULT_MAX_CHAIN) -> PromptChain:
    """Restrict the full chain to what a prompting mode is allowed to see."""
    return restrict_chain(PromptMode.parse(mode), annotated_chain(sample, taxonomy, m_max), rng)


def restrict_chain(mode: PromptMode, full: PromptChain, rng: Optional[Rng] = None) -> PromptChain:
    nodes = full.nodes
    if mode is PromptMode.CHAIN_OF_THOUGHT or not nodes:
        return PromptChain(list(nodes))
    scene = [n for n in nodes if n.level is Level.SCENE][:1]
    if mode is PromptMode.STANDARD:
        return PromptChain(scene)
    if mode is PromptMode.TWO:
        presence = [n for n in nodes if n.level is Level.CLASS_PRESENCE][:1]
        return PromptChain(scene + presence)
    if rng is None:
        raise ConfigError("random prompt mode needs an Rng")
    return PromptChain([nodes[rng.choice(len(nodes))]])


# -- prompt pool --------------------------------------------------------------

@dataclass(frozen=True)
class PoolEntry:
    index: int
    level: Level
    key: np.ndarray
    prompt: np.ndarray


class PromptPool(Module):
    """Learnable prompt vectors with companion keys, one level tag each.

    Levels are assigned cyclically (scene, presence, quantity, scene, ...).
    """

    def __init__(self, size: int, dim: int, rng: Rng):
        if size < 1:
            raise ConfigError(f"pool size must be >= 1, got {size}")
        bound = 1.0 / np.sqrt(dim)
        self.keys = Parameter(rng.uniform(-bound, bound, (size, dim)))
        self.prompts = Parameter(rng.uniform(-bound, bound, (size, dim)))
        self.levels = np.array([i % len(Level) for i in range(size)], dtype=np.int64)

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    @property
    def entries(self) -> List[PoolEntry]:
        return [PoolEntry(i, Level(int(self.levels[i])), self.keys.data[i], self.prompts.data[i])
                for i in range(self.size)]


def _rank(keys: np.ndarray, levels: np.ndarray, query: np.ndarray, k: int) -> List[int]:
    kn = np.linalg.norm(keys, axis=1)
    qn = np.linalg.norm(query)
    sims = (keys @ query) / np.where(kn * qn == 0, 1.0, kn * qn)
    top = sorted(range(len(keys)), key=lambda i: (-sims[i], i))[:k]
    return sorted(top, key=lambda i: (levels[i], -sims[i], i))


def select_indices(pool: PromptPool, query: np.ndarray, k: int) -> List[int]:
    if not 1 <= k <= pool.size:
        raise ConfigError(f"cannot select k={k} entries from a pool of {pool.size}")
    return _rank(pool.keys.data, pool.levels, np.asarray(query, dtype=np.float64).reshape(-1), k)


def select_prompts(pool: PromptPool, query, k: int) -> List[PoolEntry]:
    """Top-``k`` entries by key/query cosine, then grouped by level.

    Ties in similarity go to the lower pool index.
    """
    q = query.data if hasattr(query, "data") else query
    entries = pool.entries
    return [entries[i] for i in select_indices(pool, q, k)]


# -- annotation file ----------------------------------------------------------

def write_prompt_records(path, samples: Iterable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            for node in s.prompt_records:
                fh.write(json.dumps(node.to_record(s.image_id)) + "\n")


def read_prompt_records(path) -> dict:
    out: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.setdefault(rec["image_id"], []).append(PromptNode.from_record(rec))
    return out
