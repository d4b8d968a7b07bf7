"""FunQL trees, their canonical text syntax, and ungrounded/grounded alignment.

A logical form is an ordered tree of :class:`Term` heads.  The same tree type
holds both *ungrounded* forms (natural-language predicates such as
``border``) and *grounded* forms (knowledge-base symbols such as
``next_to``).  Domain-general predicates (``answer``, ``exclude``, ...) are
shared by both vocabularies.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional, Sequence, Tuple, Union

ANSWER = "answer"
ALL = "all"
TYPE_PREDICATES = frozenset(
    ["stateid", "cityid", "riverid", "countryid", "placeid", "lakeid", "mountainid"]
)
AGGREGATIONS = frozenset(["count", "largest", "smallest"])
CONNECTIVES = frozenset(["intersect", "union", "exclude"])

# Domain-general predicates that open a subtree, with their fixed arity.
GENERAL_ARITY = {ANSWER: 1}
GENERAL_ARITY.update({name: 1 for name in TYPE_PREDICATES})
GENERAL_ARITY.update({name: 1 for name in AGGREGATIONS})
GENERAL_ARITY.update({name: 2 for name in CONNECTIVES})
GENERAL_PREDICATES = frozenset(GENERAL_ARITY)

IDENTIFIER = re.compile(r"[a-z_][a-z0-9_]*\Z")
_TOKEN = re.compile(r"\s*(?:([a-z_][a-z0-9_]*)|(\()|(\))|(,))")


class FunQLError(ValueError):
    """Raised for malformed FunQL text or trees."""


class TermKind(enum.Enum):
    NL_PREDICATE = "nl"
    GENERAL = "general"
    GROUNDED = "grounded"
    ENTITY = "entity"
    ALL = "all"

    @property
    def is_predicate(self) -> bool:
        return self in (TermKind.NL_PREDICATE, TermKind.GENERAL, TermKind.GROUNDED)


@dataclass(frozen=True)
class Term:
    kind: TermKind
    label: str
    # token range [start, end) in the utterance; not part of term identity
    span: Optional[Tuple[int, int]] = field(default=None, compare=False)

    def __post_init__(self):
        if not IDENTIFIER.match(self.label):
            raise FunQLError(f"invalid identifier {self.label!r}")
        if self.kind is TermKind.GENERAL and self.label not in GENERAL_PREDICATES:
            raise FunQLError(f"{self.label!r} is not a domain-general predicate")
        if self.kind is TermKind.ALL:
            if self.label != ALL:
                raise FunQLError("the all-marker must be labelled 'all'")
            if self.span is not None:
                raise FunQLError("the all-marker carries no span")
        if self.kind in (TermKind.NL_PREDICATE, TermKind.GROUNDED, TermKind.ENTITY):
            if self.label in GENERAL_PREDICATES or self.label == ALL:
                raise FunQLError(f"{self.label!r} is reserved for domain-general use")

    @classmethod
    def general(cls, label: str) -> "Term":
        return cls(TermKind.GENERAL, label)

    @classmethod
    def entity(cls, label: str, span=None) -> "Term":
        return cls(TermKind.ENTITY, label, span)

    @classmethod
    def nl(cls, label: str, span=None) -> "Term":
        return cls(TermKind.NL_PREDICATE, label, span)

    @classmethod
    def grounded(cls, label: str) -> "Term":
        return cls(TermKind.GROUNDED, label)

    @property
    def is_leaf_kind(self) -> bool:
        return self.kind in (TermKind.ENTITY, TermKind.ALL)

    def __str__(self) -> str:
        return self.label


ALL_TERM = Term(TermKind.ALL, ALL)


@dataclass(frozen=True)
class LogicalForm:
    head: Term
    children: Tuple["LogicalForm", ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if self.head.is_leaf_kind:
            if self.children:
                raise FunQLError(f"leaf term {self.head.label!r} cannot take arguments")
            return
        if not self.children:
            raise FunQLError(f"predicate {self.head.label!r} has no arguments")
        if self.head.kind is TermKind.GENERAL:
            arity = GENERAL_ARITY[self.head.label]
            if len(self.children) != arity:
                raise FunQLError(
                    f"{self.head.label!r} takes {arity} argument(s), got {len(self.children)}"
                )

    @classmethod
    def leaf(cls, term: Term) -> "LogicalForm":
        return cls(term, ())

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def walk(self, path: Tuple[int, ...] = ()) -> Iterator[Tuple[Tuple[int, ...], "LogicalForm"]]:
        """Pre-order traversal yielding ``(path, node)`` pairs."""
        yield path, self
        for i, child in enumerate(self.children):
            yield from child.walk(path + (i,))

    def terms(self) -> list:
        return [node.head for _, node in self.walk()]

    @property
    def depth(self) -> int:
        """Number of edges on the longest root-to-leaf path."""
        if not self.children:
            return 0
        return 1 + max(child.depth for child in self.children)

    @property
    def size(self) -> int:
        return sum(1 for _ in self.walk())

    @property
    def predicate_count(self) -> int:
        return sum(1 for _, node in self.walk() if node.children)

    def shape(self) -> tuple:
        return tuple(child.shape() for child in self.children)

    def __str__(self) -> str:
        return print_funql(self)


def _tokenize(text: str) -> list:
    tokens = []
    pos = 0
    stripped = text.rstrip()
    while pos < len(stripped):
        match = _TOKEN.match(stripped, pos)
        if match is None:
            raise FunQLError(f"unexpected character {stripped[pos:].lstrip()[:1]!r} at offset {pos}")
        ident, lpar, rpar, comma = match.groups()
        tokens.append(ident or lpar or rpar or comma)
        pos = match.end()
    return tokens


def parse_funql(text: str, grounded: bool = False) -> LogicalForm:
    """Parse canonical FunQL text.

    Non-general predicates become grounded predicates when ``grounded`` is
    set and natural-language predicates otherwise.  Bare identifiers are
    entities, except ``all`` which is the all-marker.
    """
    tokens = _tokenize(text)
    if not tokens:
        raise FunQLError("empty FunQL string")
    predicate_kind = TermKind.GROUNDED if grounded else TermKind.NL_PREDICATE
    pos = 0

    def parse_node() -> LogicalForm:
        nonlocal pos
        if pos >= len(tokens):
            raise FunQLError("unexpected end of input")
        name = tokens[pos]
        if name in "(),":
            raise FunQLError(f"expected identifier, found {name!r}")
        pos += 1
        if pos < len(tokens) and tokens[pos] == "(":
            pos += 1
            if pos < len(tokens) and tokens[pos] == ")":
                raise FunQLError(f"empty argument list on {name!r}")
            children = [parse_node()]
            while pos < len(tokens) and tokens[pos] == ",":
                pos += 1
                children.append(parse_node())
            if pos >= len(tokens) or tokens[pos] != ")":
                raise FunQLError(f"unbalanced parentheses after {name!r}")
            pos += 1
            if name == ALL:
                raise FunQLError("'all' takes no arguments")
            kind = TermKind.GENERAL if name in GENERAL_PREDICATES else predicate_kind
            return LogicalForm(Term(kind, name), children)
        if name == ALL:
            return LogicalForm.leaf(ALL_TERM)
        if name in GENERAL_PREDICATES:
            raise FunQLError(f"predicate {name!r} used without arguments")
        return LogicalForm.leaf(Term.entity(name))

    form = parse_node()
    if pos != len(tokens):
        raise FunQLError(f"trailing input starting at {tokens[pos]!r}")
    return form


def print_funql(form: LogicalForm) -> str:
    if not form.children:
        return form.head.label
    return f"{form.head.label}({', '.join(print_funql(c) for c in form.children)})"


def _compatible(u: Term, g: Term) -> bool:
    if u.kind is TermKind.GENERAL or g.kind is TermKind.GENERAL:
        return u.kind is g.kind and u.label == g.label
    if u.is_leaf_kind or g.is_leaf_kind:
        return u.kind is g.kind
    return True


def is_isomorphic(u: LogicalForm, g: LogicalForm) -> bool:
    """Node-for-node structural correspondence.

    Shapes must coincide, domain-general predicates must agree at every
    corresponding node, leaves must pair entity-with-entity and
    all-with-all, and any non-general predicate may pair with any other.
    """
    if len(u.children) != len(g.children) or not _compatible(u.head, g.head):
        return False
    return all(is_isomorphic(a, b) for a, b in zip(u.children, g.children))


TermAssignment = Union[Term, str]


def substitute_terms(
    u: LogicalForm, mapping: Mapping[Union[Tuple[int, ...], str], TermAssignment]
) -> LogicalForm:
    """Replace natural-language predicates (and optionally entities) in ``u``.

    ``mapping`` is keyed by node path (tuple of child indices from the root)
    or by term label; a path key wins over a label key.  String values are
    promoted to grounded predicates or entities according to the node they
    replace.  Every natural-language predicate node must be covered.
    """

    def lookup(path, term):
        if path in mapping:
            return mapping[path]
        return mapping.get(term.label)

    def rebuild(node: LogicalForm, path: Tuple[int, ...]) -> LogicalForm:
        head = node.head
        target = lookup(path, head) if head.kind is not TermKind.GENERAL else None
        if head.kind is TermKind.NL_PREDICATE and target is None:
            raise KeyError(f"no grounding given for predicate {head.label!r} at {path}")
        if target is not None and head.kind is not TermKind.ALL:
            if isinstance(target, str):
                kind = TermKind.ENTITY if head.kind is TermKind.ENTITY else TermKind.GROUNDED
                target = Term(kind, target)
            if not _compatible(head, target):
                raise FunQLError(f"cannot replace {head.label!r} with {target.label!r}")
            head = target
        children = tuple(rebuild(c, path + (i,)) for i, c in enumerate(node.children))
        return LogicalForm(head, children)

    return rebuild(u, ())


def collect(form: LogicalForm, kinds: Sequence[TermKind]) -> list:
    """Terms of the given kinds in pre-order."""
    return [t for t in form.terms() if t.kind in kinds]
