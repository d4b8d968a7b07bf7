"""The NT / TER / RED transition system that builds FunQL trees top-down.

The buffer is never consumed: every step sees the same predicate
candidates (token positions) and terminal candidates (entity mentions).
States are immutable; :func:`apply` returns a new state.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import FrozenSet, List, Optional, Sequence, Tuple, Union

from .corpus import EntityMention
from .funql import (
    ALL,
    ALL_TERM,
    GENERAL_ARITY,
    GENERAL_PREDICATES,
    IDENTIFIER,
    LogicalForm,
    Term,
    TermKind,
)

DEPTH_LIMIT = 8
STEP_LIMIT = 60
PUNCTUATION = frozenset(list(".,;:?!'\"`()[]{}-") + ["''", "``", "--", "..."])


class TransitionError(ValueError):
    pass


class ActionKind(enum.Enum):
    NT = "NT"
    TER = "TER"
    RED = "RED"


ACTION_KINDS = (ActionKind.NT, ActionKind.TER, ActionKind.RED)


class Slot(enum.Enum):
    NL_PREDICATE = "nl"
    GENERAL = "general"
    ENTITY = "entity"
    ALL = "all"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    slot: Optional[Slot] = None

    def __post_init__(self):
        if self.kind is ActionKind.RED and self.slot is not None:
            raise TransitionError("RED carries no slot")


RED = Action(ActionKind.RED)


def slot_of(term: Term) -> Slot:
    if term.kind is TermKind.GENERAL:
        return Slot.GENERAL
    if term.kind is TermKind.ENTITY:
        return Slot.ENTITY
    if term.kind is TermKind.ALL:
        return Slot.ALL
    return Slot.NL_PREDICATE


@dataclass(frozen=True)
class OpenNonterminal:
    term: Term


@dataclass(frozen=True)
class CompletedSubtree:
    form: LogicalForm


StackItem = Union[OpenNonterminal, CompletedSubtree]


@dataclass(frozen=True)
class ParserState:
    stack: Tuple[StackItem, ...] = ()
    nonterminal_candidates: Tuple[int, ...] = ()
    terminal_candidates: Tuple[EntityMention, ...] = ()
    open_count: int = 0
    step: int = 0
    finished: bool = False
    depth_limit: int = DEPTH_LIMIT
    step_limit: int = STEP_LIMIT

    @property
    def result(self) -> LogicalForm:
        if not self.finished:
            raise TransitionError("derivation has not finished")
        return self.stack[0].form


def predicate_candidates(tokens: Sequence[str], mentions: Sequence[EntityMention] = ()) -> Tuple[int, ...]:
    """Token positions usable as natural-language predicates."""
    covered = set()
    for m in mentions:
        covered.update(range(*m.span))
    return tuple(
        i
        for i, tok in enumerate(tokens)
        if i not in covered
        and tok not in PUNCTUATION
        and IDENTIFIER.match(tok)
        and tok not in GENERAL_PREDICATES
        and tok != ALL
    )


def initial_state(
    tokens: Sequence[str] = (),
    mentions: Sequence[EntityMention] = (),
    depth_limit: int = DEPTH_LIMIT,
    step_limit: int = STEP_LIMIT,
) -> ParserState:
    return ParserState(
        nonterminal_candidates=predicate_candidates(tokens, mentions),
        terminal_candidates=tuple(mentions),
        depth_limit=depth_limit,
        step_limit=step_limit,
    )


def _required_children(term: Term) -> Tuple[int, Optional[int]]:
    """(minimum, maximum) child count; maximum None means unbounded."""
    if term.kind is TermKind.GENERAL:
        n = GENERAL_ARITY[term.label]
        return n, n
    return 1, None


def _open_frames(stack: Sequence[StackItem]) -> List[Tuple[Term, int]]:
    """Open nonterminals bottom-to-top with their completed-child counts."""
    frames: List[List] = []
    for item in stack:
        if isinstance(item, OpenNonterminal):
            frames.append([item.term, 0])
        elif frames:
            frames[-1][1] += 1
    return [(t, n) for t, n in frames]


def min_steps_to_finish(stack: Sequence[StackItem]) -> int:
    """Fewest further actions that can close every open nonterminal."""
    frames = _open_frames(stack)
    total = 0
    for i, (term, done) in enumerate(frames):
        # every frame but the innermost gains the subtree being built above it
        have = done + (0 if i == len(frames) - 1 else 1)
        total += max(0, _required_children(term)[0] - have) + 1
    return total


def _room_for_child(stack) -> bool:
    frames = _open_frames(stack)
    if not frames:
        return False
    term, done = frames[-1]
    upper = _required_children(term)[1]
    return upper is None or done < upper


def _can_reduce(stack) -> bool:
    frames = _open_frames(stack)
    if not frames or not isinstance(stack[-1], CompletedSubtree):
        return False
    term, done = frames[-1]
    low, high = _required_children(term)
    return done >= low and (high is None or done <= high)


def term_fits(state: ParserState, action: Action, term: Optional[Term] = None) -> bool:
    """Whether the action (with ``term`` for NT/TER) keeps the derivation completable."""
    if action.kind is ActionKind.RED:
        return _can_reduce(state.stack)
    if state.stack and not _room_for_child(state.stack):
        return False
    if action.kind is ActionKind.NT:
        if not state.stack and state.step > 0:
            return False
        if state.open_count + 1 > state.depth_limit:
            return False
        probe = term if term is not None else Term.nl("p")
        item = OpenNonterminal(probe)
    else:
        if not state.stack:
            return False
        probe = term if term is not None else Term.entity("e")
        item = CompletedSubtree(LogicalForm.leaf(probe))
    stack = state.stack + (item,)
    return state.step + 1 + min_steps_to_finish(stack) <= state.step_limit


def legal_actions(state: ParserState) -> FrozenSet[ActionKind]:
    if state.finished:
        raise TransitionError("no actions are legal in a finished state")
    return frozenset(k for k in ACTION_KINDS if term_fits(state, Action(k)))


def apply(state: ParserState, action: Action, term: Optional[Term] = None) -> ParserState:
    if state.finished:
        raise TransitionError("cannot apply an action to a finished state")
    kind = action.kind
    if kind is ActionKind.RED:
        if term is not None:
            raise TransitionError("RED takes no term")
    elif term is None:
        raise TransitionError(f"{kind.value} requires a term")
    if kind is ActionKind.NT and not term.kind.is_predicate:
        raise TransitionError(f"NT cannot introduce {term.kind.value} term {term.label!r}")
    if kind is ActionKind.TER and not term.is_leaf_kind:
        raise TransitionError(f"TER cannot introduce {term.kind.value} term {term.label!r}")
    if action.slot is not None and term is not None and action.slot is not slot_of(term):
        raise TransitionError(f"term {term.label!r} does not fill slot {action.slot.value}")
    if not term_fits(state, action, term):
        raise TransitionError(f"illegal action {kind.value} {term.label if term else ''}".rstrip())

    if kind is ActionKind.NT:
        return replace(
            state,
            stack=state.stack + (OpenNonterminal(term),),
            open_count=state.open_count + 1,
            step=state.step + 1,
        )
    if kind is ActionKind.TER:
        return replace(
            state, stack=state.stack + (CompletedSubtree(LogicalForm.leaf(term)),), step=state.step + 1
        )
    stack = list(state.stack)
    children = []
    while isinstance(stack[-1], CompletedSubtree):
        children.append(stack.pop().form)
    head = stack.pop().term
    stack.append(CompletedSubtree(LogicalForm(head, tuple(reversed(children)))))
    open_count = state.open_count - 1
    return replace(
        state, stack=tuple(stack), open_count=open_count, step=state.step + 1, finished=open_count == 0
    )


@dataclass(frozen=True)
class Derivation:
    actions: Tuple[Action, ...]
    terms: Tuple[Term, ...]

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "terms", tuple(self.terms))
        expected = sum(1 for a in self.actions if a.kind is not ActionKind.RED)
        if expected != len(self.terms):
            raise TransitionError(f"{expected} NT/TER actions but {len(self.terms)} terms")

    def steps(self):
        """Yield ``(action, term_or_None)`` pairs."""
        terms = iter(self.terms)
        for action in self.actions:
            yield action, (None if action.kind is ActionKind.RED else next(terms))

    def __len__(self) -> int:
        return len(self.actions)


def _locate_predicate(term: Term, tokens, candidates) -> Term:
    if term.span is not None:
        start, end = term.span
        if end - start == 1 and start in candidates and tokens[start] == term.label:
            return term
        raise TransitionError(f"span {term.span} does not hold predicate {term.label!r}")
    for i in candidates:
        if tokens[i] == term.label:
            return Term.nl(term.label, (i, i + 1))
    raise TransitionError(f"predicate {term.label!r} not found among buffer tokens")


def _locate_entity(term: Term, mentions: Sequence[EntityMention]) -> Term:
    for m in mentions:
        if m.entity == term.label and (term.span is None or tuple(term.span) == tuple(m.span)):
            return Term.entity(term.label, tuple(m.span))
    raise TransitionError(f"entity {term.label!r} is not among the annotated mentions")


def oracle(
    form: LogicalForm,
    tokens: Optional[Sequence[str]] = None,
    mentions: Sequence[EntityMention] = (),
) -> Derivation:
    """Pre-order derivation of ``form``.

    With ``tokens`` given, natural-language predicates and entities are
    located in the buffer and the returned terms carry their spans.
    Grounded predicates are never located.
    """
    candidates = predicate_candidates(tokens, mentions) if tokens is not None else ()
    actions: List[Action] = []
    terms: List[Term] = []

    def visit(node: LogicalForm):
        term = node.head
        if tokens is not None:
            if term.kind is TermKind.NL_PREDICATE:
                term = _locate_predicate(term, tokens, candidates)
            elif term.kind is TermKind.ENTITY:
                term = _locate_entity(term, mentions)
        slot = slot_of(term)
        if node.children:
            actions.append(Action(ActionKind.NT, slot))
            terms.append(term)
            for child in node.children:
                visit(child)
            actions.append(RED)
        else:
            actions.append(Action(ActionKind.TER, slot))
            terms.append(term)

    visit(form)
    return Derivation(tuple(actions), tuple(terms))


def replay(derivation: Derivation, state: Optional[ParserState] = None) -> ParserState:
    state = state or ParserState(depth_limit=10**9, step_limit=10**9)
    for action, term in derivation.steps():
        state = apply(state, action, term)
    return state


def reconstruct(derivation: Derivation, state: Optional[ParserState] = None) -> LogicalForm:
    final = replay(derivation, state)
    if not final.finished:
        raise TransitionError("derivation never finishes")
    if len(final.stack) != 1:
        raise TransitionError("derivation leaves more than one item on the stack")
    return final.result


def format_derivation(derivation: Derivation) -> str:
    lines = []
    for action, term in derivation.steps():
        lines.append(action.kind.value if term is None else f"{action.kind.value} {term.label}")
    return "\n".join(lines) + "\n"


def parse_derivation(text: str, grounded: bool = False) -> Derivation:
    actions, terms = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        try:
            kind = ActionKind(fields[0])
        except ValueError:
            raise TransitionError(f"line {lineno}: unknown action {fields[0]!r}") from None
        if kind is ActionKind.RED:
            if len(fields) != 1:
                raise TransitionError(f"line {lineno}: RED takes no term")
            actions.append(RED)
            continue
        if len(fields) != 2:
            raise TransitionError(f"line {lineno}: {kind.value} needs exactly one term")
        label = fields[1]
        if kind is ActionKind.NT:
            if label in GENERAL_PREDICATES:
                term = Term.general(label)
            else:
                term = Term.grounded(label) if grounded else Term.nl(label)
        else:
            term = ALL_TERM if label == ALL else Term.entity(label)
        actions.append(Action(kind, slot_of(term)))
        terms.append(term)
    return Derivation(tuple(actions), tuple(terms))
