"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import itertools

from funql_parser.funql import (
    AGGREGATIONS,
    ALL_TERM,
    CONNECTIVES,
    TYPE_PREDICATES,
    LogicalForm,
    Term,
    TermKind,
)


class OracleError(Exception):
    pass


def brute_force_denotation(form: LogicalForm, kb, cache=None, attribute="size"):
    """Set semantics by per-entity membership tests over the whole universe.

    Returns a frozenset or an int; raises OracleError where evaluation is
    undefined.  ``cache`` maps ``id(subtree)`` to results for shared subtrees;
    the root itself is never cached since callers often build it transiently.
    """
    args = [_cached(c, kb, cache, attribute) for c in form.children]
    return _evaluate(form, kb, args, cache, attribute)


def _cached(form, kb, cache, attribute):
    if cache is not None and id(form) in cache:
        result = cache[id(form)]
        if isinstance(result, OracleError):
            raise result
        return result
    try:
        args = [_cached(c, kb, cache, attribute) for c in form.children]
        result = _evaluate(form, kb, args, cache, attribute)
    except OracleError as e:
        if cache is not None:
            cache[id(form)] = e
        raise
    if cache is not None:
        cache[id(form)] = result
    return result


def _members(value):
    if isinstance(value, int):
        raise OracleError("count used as a set")
    return value


def _evaluate(form, kb, args, cache, attribute):
    universe = sorted(kb.entities)
    head = form.head
    if head.kind is TermKind.ALL:
        return frozenset(e for e in universe if True)
    if head.kind is TermKind.ENTITY:
        if head.label not in universe:
            raise OracleError("unknown entity")
        return frozenset(e for e in universe if e == head.label)
    if head.kind is TermKind.GENERAL and head.label in TYPE_PREDICATES:
        child = form.children[0]
        if child.head.kind is not TermKind.ENTITY:
            raise OracleError("type predicate over a non-entity")
        return args[0]
    label = head.label
    if head.kind is TermKind.GENERAL:
        if label == "answer":
            return args[0]
        if label == "count":
            return sum(1 for e in universe if e in _members(args[0]))
        if label in ("largest", "smallest"):
            a = _members(args[0])
            better = (lambda x, y: x > y) if label == "largest" else (lambda x, y: x < y)

            def size(e):
                if (e, attribute) not in kb.magnitudes:
                    raise OracleError("missing magnitude")
                return kb.magnitudes[(e, attribute)]

            def wins(e):
                me = size(e)
                for other in a:
                    them = size(other)
                    if better(them, me) or (them == me and other < e):
                        return False
                return True

            return frozenset(e for e in universe if e in a and wins(e))
        a, b = _members(args[0]), _members(args[1])
        test = {
            "intersect": lambda e: e in a and e in b,
            "union": lambda e: e in a or e in b,
            "exclude": lambda e: e in a and e not in b,
        }[label]
        return frozenset(e for e in universe if test(e))
    if len(args) != 1:
        raise OracleError("relations take one argument")
    a = _members(args[0])
    if label in kb.unary:
        facts = kb.unary[label]
        return frozenset(e for e in universe if e in a and e in facts)
    if label in kb.binary:
        pairs = kb.binary[label]
        return frozenset(e for e in universe if any((e, b) in pairs for b in a))
    raise OracleError(f"unknown predicate {label}")


def _operators(kb):
    unary = [Term.grounded(r) for r in sorted(set(kb.unary) | set(kb.binary))]
    unary += [Term.general(a) for a in sorted(AGGREGATIONS)]
    types = [Term.general(t) for t in sorted(TYPE_PREDICATES)]
    connectives = [Term.general(c) for c in sorted(CONNECTIVES)]
    return unary, types, connectives


def _next_level(levels, kb):
    """Lazily yield every subtree exactly one edge deeper than ``levels[-1]``."""
    unary, types, connectives = _operators(kb)
    previous = levels[-1]
    shallower = [t for level in levels[:-1] for t in level]
    for child in previous:
        for op in unary:
            yield LogicalForm(op, (child,))
    if len(levels) == 1:
        for op in types:
            for leaf in previous[1:]:
                yield LogicalForm(op, (leaf,))
    # at least one argument comes from the level just below
    pairs = itertools.chain(
        itertools.product(previous, previous),
        itertools.product(previous, shallower),
        itertools.product(shallower, previous),
    )
    for a, b in pairs:
        for op in connectives:
            yield LogicalForm(op, (a, b))


def grounded_subtrees(kb, max_depth: int, entities=None):
    """All grounded subtrees over ``kb`` up to ``max_depth`` edges, grouped by exact depth.

    Subtrees are shared between parents, so callers can cache on identity.
    """
    entities = sorted(kb.entities if entities is None else entities)
    levels = [[LogicalForm.leaf(ALL_TERM)] + [LogicalForm.leaf(Term.entity(e)) for e in entities]]
    for _ in range(max_depth):
        levels.append(list(_next_level(levels, kb)))
    return levels


def answer_forms(kb, max_depth: int):
    """Stream every ``answer(...)`` form of at most ``max_depth`` edges.

    Yields ``(form, cache)``; only the deepest level is built lazily, so the
    shared ``cache`` stays valid for the children of every yielded form.
    """
    answer = Term.general("answer")
    levels = grounded_subtrees(kb, max_depth - 2)
    cache = {}
    for level in levels:
        for sub in level:
            yield LogicalForm(answer, (sub,)), cache
    for sub in _next_level(levels, kb):
        yield LogicalForm(answer, (sub,)), cache


def executor_agreement(kb, max_depth: int, execute, error_type, limit_mismatches: int = 10):
    """Compare ``execute`` with the oracle on every answer form up to ``max_depth`` edges.

    Returns ``(checked, mismatches)``; an error on both sides counts as agreement.
    """
    checked, mismatches = 0, []
    for form, cache in answer_forms(kb, max_depth):
        try:
            expected = brute_force_denotation(form.children[0], kb, cache)
        except OracleError:
            expected = None
        try:
            actual = execute(form, kb).value
        except error_type:
            actual = None
        checked += 1
        if expected != actual and len(mismatches) < limit_mismatches:
            mismatches.append((form, expected, actual))
    return checked, mismatches
