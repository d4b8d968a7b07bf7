"""Closed-domain knowledge base and execution of grounded FunQL."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple, Union

from .funql import (
    AGGREGATIONS,
    ALL_TERM,
    ANSWER,
    CONNECTIVES,
    TYPE_PREDICATES,
    IDENTIFIER,
    LogicalForm,
    Term,
    TermKind,
    print_funql,
)

DEFAULT_RANK_ATTRIBUTE = "size"


class ExecutionError(ValueError):
    pass


class KBFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Denotation:
    """Either a set of entity ids or a count."""

    value: Union[FrozenSet[str], int]

    def __post_init__(self):
        if isinstance(self.value, bool):
            raise TypeError("denotation cannot be a boolean")
        if isinstance(self.value, int):
            if self.value < 0:
                raise ValueError("count denotations are non-negative")
        else:
            object.__setattr__(self, "value", frozenset(self.value))

    @property
    def is_count(self) -> bool:
        return isinstance(self.value, int)

    @classmethod
    def from_json(cls, obj) -> "Denotation":
        if isinstance(obj, int) and not isinstance(obj, bool):
            return cls(obj)
        if isinstance(obj, (list, tuple, set, frozenset)):
            return cls(frozenset(str(x) for x in obj))
        raise ValueError(f"cannot read denotation from {obj!r}")

    def to_json(self):
        return self.value if self.is_count else sorted(self.value)

    def __str__(self) -> str:
        if self.is_count:
            return str(self.value)
        return "{" + ", ".join(sorted(self.value)) + "}"


@dataclass(frozen=True)
class KnowledgeBase:
    entities: FrozenSet[str]
    unary: Mapping[str, FrozenSet[str]]
    binary: Mapping[str, FrozenSet[Tuple[str, str]]]
    magnitudes: Mapping[Tuple[str, str], float] = field(default_factory=dict)
    # object -> subjects, per binary relation
    _preimage: Dict[str, Dict[str, FrozenSet[str]]] = field(
        init=False, repr=False, compare=False, default_factory=dict
    )
    _domain: Dict[str, FrozenSet[str]] = field(init=False, repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        clash = set(self.unary) & set(self.binary)
        if clash:
            raise KBFormatError(f"relations declared both unary and binary: {sorted(clash)}")
        for name, members in self.unary.items():
            if not members <= self.entities:
                raise KBFormatError(f"unary relation {name!r} mentions unknown entities")
        for name, pairs in self.binary.items():
            index: Dict[str, set] = {}
            for a, b in pairs:
                if a not in self.entities or b not in self.entities:
                    raise KBFormatError(f"binary relation {name!r} mentions unknown entities")
                index.setdefault(b, set()).add(a)
            self._preimage[name] = {b: frozenset(s) for b, s in index.items()}
            self._domain[name] = frozenset(a for a, _ in pairs)

    @classmethod
    def build(cls, unary=None, binary=None, magnitudes=None, entities=()) -> "KnowledgeBase":
        unary = {k: frozenset(v) for k, v in (unary or {}).items()}
        binary = {k: frozenset(tuple(p) for p in v) for k, v in (binary or {}).items()}
        magnitudes = dict(magnitudes or {})
        ents = set(entities)
        for members in unary.values():
            ents |= members
        for pairs in binary.values():
            for a, b in pairs:
                ents.update((a, b))
        ents.update(e for e, _ in magnitudes)
        return cls(frozenset(ents), unary, binary, magnitudes)

    @property
    def relations(self) -> List[str]:
        return sorted(set(self.unary) | set(self.binary))

    def apply_relation(self, name: str, argument: FrozenSet[str]) -> FrozenSet[str]:
        if name in self.unary:
            return self.unary[name] & argument
        if name in self.binary:
            if argument is self.entities or argument == self.entities:
                return self._domain[name]
            index = self._preimage[name]
            out = set()
            for b in argument:
                out.update(index.get(b, ()))
            return frozenset(out)
        raise ExecutionError(f"unknown predicate {name!r}")

    def magnitude(self, entity: str, attribute: str) -> float:
        try:
            return self.magnitudes[(entity, attribute)]
        except KeyError:
            raise ExecutionError(f"entity {entity!r} has no {attribute!r} attribute") from None


def parse_kb(text: str) -> KnowledgeBase:
    """Read the line-oriented KB format (``unary``/``binary``/``attr`` records)."""
    unary: Dict[str, set] = {}
    binary: Dict[str, set] = {}
    magnitudes: Dict[Tuple[str, str], float] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        kind, args = fields[0], fields[1:]
        if kind == "unary" and len(args) == 2:
            unary.setdefault(args[0], set()).add(args[1])
        elif kind == "binary" and len(args) == 3:
            binary.setdefault(args[0], set()).add((args[1], args[2]))
        elif kind == "attr" and len(args) == 3:
            try:
                magnitudes[(args[0], args[1])] = float(args[2])
            except ValueError:
                raise KBFormatError(f"line {lineno}: bad number {args[2]!r}") from None
        else:
            raise KBFormatError(f"line {lineno}: cannot parse {raw.strip()!r}")
        for name in args[:2] if kind != "attr" else args[:1]:
            if not IDENTIFIER.match(name):
                raise KBFormatError(f"line {lineno}: bad identifier {name!r}")
    return KnowledgeBase.build(unary, binary, magnitudes)


def load_kb(path) -> KnowledgeBase:
    return parse_kb(Path(path).read_text(encoding="utf-8"))


def _as_set(value, label: str) -> FrozenSet[str]:
    if isinstance(value, int):
        raise ExecutionError(f"count result passed to {label!r}")
    return value


def _rank(values: FrozenSet[str], kb: KnowledgeBase, attribute: str, largest: bool):
    if not values:
        return frozenset()
    # ties go to the lexicographically smallest id
    sign = -1.0 if largest else 1.0
    best = min(values, key=lambda e: (sign * kb.magnitude(e, attribute), e))
    return frozenset([best])


def apply_general(label: str, args: list, kb: KnowledgeBase, attribute: str):
    """Evaluate a domain-general predicate on already-evaluated arguments."""
    if label == ANSWER:
        return args[0]
    if label == "count":
        return len(_as_set(args[0], label))
    if label in ("largest", "smallest"):
        return _rank(_as_set(args[0], label), kb, attribute, label == "largest")
    if label in CONNECTIVES:
        a, b = (_as_set(x, label) for x in args)
        if label == "intersect":
            return a & b
        if label == "union":
            return a | b
        return a - b
    raise ExecutionError(f"cannot apply {label!r} to evaluated arguments")


def execute(g: LogicalForm, kb: KnowledgeBase, rank_attribute: str = DEFAULT_RANK_ATTRIBUTE) -> Denotation:
    """Evaluate a grounded form bottom-up."""

    def ev(node: LogicalForm):
        head = node.head
        if head.kind is TermKind.ALL:
            return kb.entities
        if head.kind is TermKind.ENTITY:
            if head.label not in kb.entities:
                raise ExecutionError(f"unknown entity {head.label!r}")
            return frozenset([head.label])
        if head.kind is TermKind.NL_PREDICATE:
            raise ExecutionError(f"ungrounded predicate {head.label!r}")
        if head.kind is TermKind.GENERAL and head.label in TYPE_PREDICATES:
            child = node.children[0]
            if child.head.kind is not TermKind.ENTITY:
                raise ExecutionError(f"{head.label!r} expects an entity argument")
            if child.head.label not in kb.entities:
                raise ExecutionError(f"unknown entity {child.head.label!r}")
            return frozenset([child.head.label])
        args = [ev(c) for c in node.children]
        if head.kind is TermKind.GENERAL:
            return apply_general(head.label, args, kb, rank_attribute)
        if len(args) != 1:
            raise ExecutionError(f"predicate {head.label!r} takes one argument, got {len(args)}")
        return kb.apply_relation(head.label, _as_set(args[0], head.label))

    return Denotation(ev(g))


@dataclass(frozen=True)
class SearchLimits:
    max_depth: int = 4
    max_predicates: int = 4
    type_predicates: bool = False
    rank_attribute: str = DEFAULT_RANK_ATTRIBUTE
    # drop forms containing a no-op step; see ``is_trivial_step``
    prune_trivial: bool = True


def is_trivial_step(op: Term, children: list, child_values: list, value) -> bool:
    """Whether one construction step is degenerate for surrogate purposes.

    Degenerate steps: an empty intermediate set; a bare ``all`` or a bare
    entity under a connective; a connective whose result equals one of its
    arguments; ranking a set of fewer than two entities.  Rules that need
    relation arities live in ``_trivial_relation_step``.
    """
    if isinstance(value, frozenset) and not value:
        return True
    if op.label in CONNECTIVES and op.kind is TermKind.GENERAL:
        if any(c.head.kind in (TermKind.ALL, TermKind.ENTITY) for c in children):
            return True
        return any(value == v for v in child_values)
    if op.label in ("largest", "smallest") and op.kind is TermKind.GENERAL:
        return len(child_values[0]) < 2
    return False


def _trivial_relation_step(op: Term, child: LogicalForm, kb: KnowledgeBase) -> bool:
    # a unary relation or a non-count aggregation over a single entity, or
    # a unary relation re-applied to its own output
    unary = op.kind is TermKind.GENERAL or op.label in kb.unary
    if child.head.kind is TermKind.ENTITY:
        return unary and op.label != "count"
    return op.kind is TermKind.GROUNDED and op.label in kb.unary and child.head == op


@dataclass(frozen=True)
class _Item:
    form: LogicalForm
    value: Union[FrozenSet[str], int]
    used: FrozenSet[str]
    depth: int


def _mention_ids(entity_annotations: Iterable) -> List[str]:
    return sorted({getattr(a, "entity", a) for a in entity_annotations})


def enumerate_forms(kb: KnowledgeBase, entities: Iterable[str], limits: SearchLimits = SearchLimits()):
    """All ``answer``-rooted forms within ``limits``, paired with their denotations.

    Forms whose execution raises are dropped.  Each entity occurs at most
    once per form; ``all`` may be repeated.
    """
    inner_depth = limits.max_depth - 1
    inner_preds = limits.max_predicates - 1
    leaves = [_Item(LogicalForm.leaf(ALL_TERM), kb.entities, frozenset(), 0)]
    for e in sorted(set(entities)):
        if e in kb.entities:
            leaves.append(_Item(LogicalForm.leaf(Term.entity(e)), frozenset([e]), frozenset([e]), 0))
    unary_ops = [Term.grounded(r) for r in kb.relations]
    unary_ops += [Term.general(a) for a in sorted(AGGREGATIONS)]
    type_ops = [Term.general(t) for t in sorted(TYPE_PREDICATES)] if limits.type_predicates else []
    connectives = [Term.general(c) for c in sorted(CONNECTIVES)]
    attribute = limits.rank_attribute
    prune = limits.prune_trivial

    pools: List[List[_Item]] = [leaves]
    for k in range(1, inner_preds + 1):
        items: List[_Item] = []
        for child in pools[k - 1]:
            if child.depth + 1 > inner_depth:
                continue
            for op in unary_ops:
                try:
                    if op.kind is TermKind.GENERAL:
                        value = apply_general(op.label, [child.value], kb, attribute)
                    else:
                        value = kb.apply_relation(op.label, _as_set(child.value, op.label))
                except ExecutionError:
                    continue
                if prune:
                    if is_trivial_step(op, [child.form], [child.value], value):
                        continue
                    if _trivial_relation_step(op, child.form, kb):
                        continue
                items.append(_Item(LogicalForm(op, (child.form,)), value, child.used, child.depth + 1))
            if k == 1 and child.form.head.kind is TermKind.ENTITY:
                for op in type_ops:
                    items.append(_Item(LogicalForm(op, (child.form,)), child.value, child.used, 1))
        for k1 in range(k):
            for a, b in itertools.product(pools[k1], pools[k - 1 - k1]):
                depth = max(a.depth, b.depth) + 1
                if depth > inner_depth or a.used & b.used:
                    continue
                for op in connectives:
                    try:
                        value = apply_general(op.label, [a.value, b.value], kb, attribute)
                    except ExecutionError:
                        continue
                    if prune and is_trivial_step(op, [a.form, b.form], [a.value, b.value], value):
                        continue
                    items.append(_Item(LogicalForm(op, (a.form, b.form)), value, a.used | b.used, depth))
        pools.append(items)
    answer = Term.general(ANSWER)
    for pool in pools:
        for item in pool:
            yield LogicalForm(answer, (item.form,)), Denotation(item.value)


def surrogate_search(
    tokens,
    entity_annotations,
    y: Denotation,
    kb: KnowledgeBase,
    limits: Optional[SearchLimits] = None,
) -> List[LogicalForm]:
    """Grounded forms built from the annotated entities whose denotation is ``y``.

    The result is sorted by canonical text.  ``tokens`` are accepted for
    interface symmetry with the parser; the search is driven by the
    annotations and the KB vocabulary only.
    """
    limits = limits or SearchLimits()
    found = [f for f, d in enumerate_forms(kb, _mention_ids(entity_annotations), limits) if d == y]
    return sorted(found, key=print_funql)
