"""Self-refining LLM clustering of category names, and per-image cluster vectors."""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from pcc.errors import ParseError
from pcc.llm import LLMClient

logger = logging.getLogger(__name__)

MISC_TAG = "misc"

DEFAULT_GEN_TEMPLATE = """You are grouping object categories into clusters of semantically similar categories.
Categories that share visual or functional features (for example cat and dog are both animals and pets)
should share at least one cluster tag. A category may belong to several clusters.

Categories:
{categories}

Reply with exactly one line per category, in the form
category: tag, tag, ...
Use short lowercase tags and no other text."""

DEFAULT_REFINE_TEMPLATE = """Below is a clustering of object categories into cluster tags.
Review it: merge tags that mean the same thing, split tags that group dissimilar categories,
and make sure similar categories share tags. If the clustering is already good, repeat it unchanged.

Current clustering:
{assignment}

Reply with exactly one line per category, in the form
category: tag, tag, ...
Use short lowercase tags and no other text."""

REPROMPT_SUFFIX = (
    "\n\nYour previous reply could not be read. Answer only with lines of the form "
    "`category: tag, tag`."
)

_LIST_MARKER = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


@dataclass(frozen=True)
class PromptTemplates:
    gen_template: str = DEFAULT_GEN_TEMPLATE
    refine_template: str = DEFAULT_REFINE_TEMPLATE

    def __post_init__(self) -> None:
        for name, tpl, slot in (
            ("gen_template", self.gen_template, "{categories}"),
            ("refine_template", self.refine_template, "{assignment}"),
        ):
            if tpl.count(slot) != 1:
                raise ValueError(f"{name} must contain {slot} exactly once")

    def gen_prompt(self, categories: Sequence[str]) -> str:
        return self.gen_template.replace("{categories}", "\n".join(categories))

    def refine_prompt(self, z: "ClusterAssignment") -> str:
        return self.refine_template.replace("{assignment}", z.to_text())

    @classmethod
    def from_files(cls, gen_path=None, refine_path=None) -> "PromptTemplates":
        gen = Path(gen_path).read_text(encoding="utf-8") if gen_path else DEFAULT_GEN_TEMPLATE
        ref = Path(refine_path).read_text(encoding="utf-8") if refine_path else DEFAULT_REFINE_TEMPLATE
        return cls(gen, ref)


@dataclass(frozen=True)
class StopCondition:
    """Stop once the last ``stability_window`` iterates agree, or after ``max_iterations`` refines."""

    stability_window: int = 2
    max_iterations: int = 10

    def __post_init__(self) -> None:
        if not 1 <= self.stability_window < self.max_iterations:
            raise ValueError("need 1 <= stability_window < max_iterations")


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    """Category name -> set of cluster tags.

    Equality compares the per-category tag sets only; iteration bookkeeping is ignored.
    """

    mapping: Mapping[str, frozenset[str]]
    iteration_index: int = 0
    stalled: bool = False
    categories: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        mapping = {k: frozenset(v) for k, v in self.mapping.items()}
        object.__setattr__(self, "mapping", mapping)
        if not self.categories:
            object.__setattr__(self, "categories", tuple(mapping))

    @property
    def vocabulary(self) -> list[str]:
        return sorted(set().union(*self.mapping.values())) if self.mapping else []

    @property
    def num_clusters(self) -> int:
        return len(self.vocabulary)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClusterAssignment):
            return NotImplemented
        return assignments_equal(self, other)

    def __hash__(self) -> int:
        return hash(frozenset(self.mapping.items()))

    def to_text(self) -> str:
        return "\n".join(f"{c}: {', '.join(sorted(self.mapping[c]))}" for c in self.categories)

    def to_dict(self) -> dict:
        return {
            "vocabulary": self.vocabulary,
            "mapping": {c: sorted(self.mapping[c]) for c in self.categories},
            "iteration_index": self.iteration_index,
            "stalled": self.stalled,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterAssignment":
        z = cls(
            {c: frozenset(t) for c, t in data["mapping"].items()},
            iteration_index=int(data.get("iteration_index", 0)),
            stalled=bool(data.get("stalled", False)),
            categories=tuple(data["mapping"]),
        )
        if "vocabulary" in data and list(data["vocabulary"]) != z.vocabulary:
            raise ValueError("cluster map vocabulary does not match its mapping")
        return z

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ClusterAssignment":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def validate_categories(categories: Sequence[str]) -> tuple[str, ...]:
    names = tuple(categories)
    if any(not n or not n.strip() for n in names):
        raise ValueError("category names must be non-empty")
    if len(set(names)) != len(names):
        raise ValueError("category names must be unique")
    return names


def parse_assignment(
    response: str, categories: Sequence[str]
) -> tuple[ClusterAssignment, list[str]]:
    """Parse ``category: tag, tag`` lines.

    Category matching is case-insensitive; tags are lowercased and stripped.
    Lines naming unknown categories are ignored. Returns the assignment over
    the matched categories together with the dataset categories that were
    not mentioned.
    """
    lookup = {c.strip().lower(): c for c in categories}
    found: dict[str, set[str]] = {}
    for raw in response.splitlines():
        line = _LIST_MARKER.sub("", raw).strip().strip("`")
        if ":" not in line:
            continue
        name, _, tags = line.partition(":")
        cat = lookup.get(name.strip().strip("*").strip().lower())
        if cat is None:
            continue
        tag_set = {t.strip().strip(".").lower() for t in tags.split(",")}
        found.setdefault(cat, set()).update(t for t in tag_set if t)
    if not found:
        raise ParseError("no dataset category found in response")
    ordered = [c for c in categories if c in found]
    unmatched = [c for c in categories if c not in found]
    return ClusterAssignment({c: found[c] for c in ordered}, categories=tuple(ordered)), unmatched


def _repair(z: ClusterAssignment, categories: Sequence[str]) -> ClusterAssignment:
    mapping = {c: (z.mapping.get(c) or frozenset({MISC_TAG})) for c in categories}
    return ClusterAssignment(mapping, categories=tuple(categories))


def assignments_equal(a: ClusterAssignment, b: ClusterAssignment) -> bool:
    if set(a.mapping) != set(b.mapping):
        return False
    return all(a.mapping[c] == b.mapping[c] for c in a.mapping)


def _ask(client: LLMClient, prompt: str, categories: Sequence[str]) -> ClusterAssignment:
    try:
        z, missing = parse_assignment(client.complete(prompt), categories)
    except ParseError:
        logger.info("unparseable reply, reprompting once")
        z, missing = parse_assignment(client.complete(prompt + REPROMPT_SUFFIX), categories)
    if missing:
        logger.info("categories missing from reply, assigned %r: %s", MISC_TAG, missing)
    return _repair(z, categories)


def generate_clusters(
    categories: Sequence[str],
    client: LLMClient,
    templates: PromptTemplates | None = None,
    stop: StopCondition | None = None,
) -> ClusterAssignment:
    """Generate an initial clustering, then refine it until it stops changing.

    Iterates ``z[t+1] = M(refine || z[t])`` and returns ``z[t+1]`` as soon as the
    last ``stop.stability_window`` iterates (``z[0]`` included) are identical.
    If that never happens by ``t + 1 == stop.max_iterations`` the final iterate
    is returned with ``stalled=True``.
    """
    categories = validate_categories(categories)
    if not categories:
        raise ValueError("category list is empty")
    templates = templates or PromptTemplates()
    stop = stop or StopCondition()

    history = [_ask(client, templates.gen_prompt(categories), categories)]
    r = stop.stability_window
    for t in range(stop.max_iterations):
        history.append(_ask(client, templates.refine_prompt(history[-1]), categories))
        window = history[-r:]
        if len(window) == r and all(assignments_equal(window[0], z) for z in window[1:]):
            return _finish(history[-1], t + 1, stalled=False)
    logger.warning("clustering did not stabilise within %d refinements", stop.max_iterations)
    return _finish(history[-1], stop.max_iterations, stalled=True)


def _finish(z: ClusterAssignment, index: int, stalled: bool) -> ClusterAssignment:
    return ClusterAssignment(z.mapping, iteration_index=index, stalled=stalled, categories=z.categories)


def cluster_vector(image_labels: Iterable[str], z: ClusterAssignment) -> np.ndarray:
    """Multi-hot membership over ``z.vocabulary`` for an image carrying ``image_labels``."""
    vocab = z.vocabulary
    index = {tag: i for i, tag in enumerate(vocab)}
    bits = np.zeros(len(vocab), dtype=np.int64)
    for label in image_labels:
        if label not in z.mapping:
            raise KeyError(f"label {label!r} is not a clustered category")
        for tag in z.mapping[label]:
            bits[index[tag]] = 1
    return bits
