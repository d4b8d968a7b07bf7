"""Utterance records and the JSON-lines dataset format.

One record per line::

    {"tokens": ["which", "states", "border", "texas"],
     "entities": [{"span": [3, 4], "id": "texas", "score": 1.0}],
     "funql": "answer(state(next_to(texas)))"}

``funql`` holds a grounded form; a record may instead carry ``denotation``
(a list of entity ids or a non-negative integer).  An optional
``ungrounded`` field holds a reference ungrounded form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

from .funql import LogicalForm, parse_funql, print_funql
from .kb import Denotation


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class EntityMention:
    span: Tuple[int, int]
    entity: str
    score: float = 1.0

    def to_json(self) -> dict:
        return {"span": list(self.span), "id": self.entity, "score": self.score}


@dataclass
class Example:
    tokens: List[str]
    entities: List[EntityMention] = field(default_factory=list)
    form: Optional[LogicalForm] = None
    denotation: Optional[Denotation] = None
    ungrounded: Optional[LogicalForm] = None

    def __post_init__(self):
        if not self.tokens:
            raise DataError("empty utterance")
        n = len(self.tokens)
        covered = set()
        for m in self.entities:
            start, end = m.span
            if not 0 <= start < end <= n:
                raise DataError(f"entity span {m.span} outside utterance of length {n}")
            positions = set(range(start, end))
            if positions & covered:
                raise DataError(f"overlapping entity spans in {' '.join(self.tokens)!r}")
            covered |= positions

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def to_json(self) -> dict:
        record = {"tokens": self.tokens, "entities": [m.to_json() for m in self.entities]}
        if self.form is not None:
            record["funql"] = print_funql(self.form)
        if self.denotation is not None:
            record["denotation"] = self.denotation.to_json()
        if self.ungrounded is not None:
            record["ungrounded"] = print_funql(self.ungrounded)
        return record


def example_from_json(record: dict) -> Example:
    try:
        tokens = [str(t) for t in record["tokens"]]
        mentions = [
            EntityMention((int(e["span"][0]), int(e["span"][1])), str(e["id"]), float(e.get("score", 1.0)))
            for e in record.get("entities", [])
        ]
    except (KeyError, TypeError, IndexError) as exc:
        raise DataError(f"malformed record: {exc}") from None
    form = parse_funql(record["funql"], grounded=True) if record.get("funql") else None
    denotation = Denotation.from_json(record["denotation"]) if "denotation" in record else None
    ungrounded = parse_funql(record["ungrounded"]) if record.get("ungrounded") else None
    return Example(tokens, mentions, form, denotation, ungrounded)


def read_examples(path) -> List[Example]:
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                examples.append(example_from_json(json.loads(line)))
            except (ValueError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return examples


def write_examples(path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_json(), sort_keys=True) + "\n")


def data_path(name: str) -> Path:
    """Path of a file bundled under ``funql_parser/data``."""
    return Path(__file__).resolve().parent / "data" / name
