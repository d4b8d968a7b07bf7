import random

import pytest
from hypothesis import given, settings, strategies as st

from funql_parser.corpus import EntityMention
from funql_parser.funql import ALL_TERM, Term, parse_funql, print_funql
from funql_parser.transitions import (
    RED,
    Action,
    ActionKind,
    Derivation,
    ParserState,
    Slot,
    TransitionError,
    apply,
    format_derivation,
    initial_state,
    legal_actions,
    oracle,
    parse_derivation,
    predicate_candidates,
    reconstruct,
    replay,
    term_fits,
)

from conftest import forms, random_form

NT, TER = ActionKind.NT, ActionKind.TER
TOKENS = "which states do not border texas".split()
MENTIONS = [EntityMention((5, 6), "texas")]
FORM = "answer(exclude(states(all), border(texas)))"


def table_derivation():
    return oracle(parse_funql(FORM), TOKENS, MENTIONS)


def test_oracle_reproduces_worked_example():
    d = table_derivation()
    assert [a.kind.value for a in d.actions] == ["NT", "NT", "NT", "TER", "RED", "NT", "TER", "RED", "RED", "RED"]
    assert [t.label for t in d.terms] == ["answer", "exclude", "states", "all", "border", "texas"]
    assert [t.span for t in d.terms] == [None, None, (1, 2), None, (4, 5), (5, 6)]
    assert [a.slot for a in d.actions if a.kind is not ActionKind.RED] == [
        Slot.GENERAL, Slot.GENERAL, Slot.NL_PREDICATE, Slot.ALL, Slot.NL_PREDICATE, Slot.ENTITY,
    ]


def test_replaying_worked_example_finishes():
    state = initial_state(TOKENS, MENTIONS)
    for action, term in table_derivation().steps():
        state = apply(state, action, term)
    assert state.finished and len(state.stack) == 1
    assert print_funql(state.result) == FORM


def _prefix(n):
    state = initial_state(TOKENS, MENTIONS)
    for action, term in list(table_derivation().steps())[:n]:
        state = apply(state, action, term)
    return state


def test_legal_actions_along_worked_example():
    assert legal_actions(initial_state(TOKENS, MENTIONS)) == {NT}
    # answer( exclude( states(   : childless predicate cannot reduce
    assert legal_actions(_prefix(3)) == {NT, TER}
    # answer( exclude( states(all), border(texas
    assert legal_actions(_prefix(7)) == {NT, TER, RED.kind}
    with pytest.raises(TransitionError):
        legal_actions(_prefix(10))


def test_buffer_is_never_consumed():
    first = _prefix(0)
    for n in range(1, 11):
        s = _prefix(n)
        assert s.nonterminal_candidates == first.nonterminal_candidates
        assert s.terminal_candidates == first.terminal_candidates


def test_candidates_partition_buffer():
    assert predicate_candidates(TOKENS, MENTIONS) == (0, 1, 2, 3, 4)
    assert predicate_candidates(["what", "?", "count", "all"], []) == (0,)


def test_smallest_closed_subtree():
    s = apply(ParserState(), Action(NT), Term.nl("p"))
    s = apply(s, Action(TER), Term.entity("e"))
    s = apply(s, RED)
    assert s.finished and print_funql(s.result) == "p(e)"


def test_red_on_open_nonterminal_rejected():
    s = apply(ParserState(), Action(NT), Term.nl("p"))
    s = apply(s, Action(NT), Term.nl("q"))
    assert RED.kind not in legal_actions(s)
    with pytest.raises(TransitionError):
        apply(s, RED)


@pytest.mark.parametrize(
    "action,term",
    [
        (Action(NT), None),
        (RED, Term.nl("p")),
        (Action(NT), Term.entity("e")),
        (Action(TER), Term.nl("p")),
        (Action(NT, Slot.ENTITY), Term.nl("p")),
    ],
)
def test_apply_rejects_malformed_steps(action, term):
    with pytest.raises(TransitionError):
        apply(ParserState(), action, term)


def test_ter_needs_open_nonterminal():
    with pytest.raises(TransitionError):
        apply(ParserState(), Action(TER), Term.entity("e"))


def test_arity_of_general_predicates_is_enforced():
    s = apply(ParserState(), Action(NT), Term.general("count"))
    s = apply(s, Action(TER), ALL_TERM)
    assert legal_actions(s) == {RED.kind}
    s = apply(ParserState(), Action(NT), Term.general("union"))
    s = apply(s, Action(TER), ALL_TERM)
    assert RED.kind not in legal_actions(s)


def test_no_second_root():
    s = replay(oracle(parse_funql("answer(texas)")), ParserState())
    assert s.finished
    with pytest.raises(TransitionError):
        apply(s, Action(NT), Term.nl("p"))


def test_small_oracle_examples():
    d = oracle(parse_funql("answer(texas)"))
    assert [a.kind for a in d.actions] == [NT, TER, RED.kind]
    assert reconstruct(d) == parse_funql("answer(texas)")


def test_untraceable_terms_rejected():
    with pytest.raises(TransitionError):
        oracle(parse_funql("answer(rivers(texas))"), TOKENS, MENTIONS)
    with pytest.raises(TransitionError):
        oracle(parse_funql("answer(states(utah))"), TOKENS, MENTIONS)


def test_derivation_term_alignment():
    with pytest.raises(TransitionError):
        Derivation((Action(NT), RED), ())


def test_reconstruct_errors():
    unfinished = Derivation((Action(NT),), (Term.nl("p"),))
    with pytest.raises(TransitionError):
        reconstruct(unfinished)


def test_random_round_trips():
    rng = random.Random(0)
    for _ in range(100):
        form = random_form(rng, depth=rng.randint(0, 5))
        assert reconstruct(oracle(form)) == form


@settings(max_examples=200, deadline=None)
@given(forms())
def test_round_trip_property(form):
    d = oracle(form)
    assert reconstruct(d) == form
    assert sum(a.kind is NT for a in d.actions) == sum(a.kind is RED.kind for a in d.actions)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(4, 60))
def test_random_legal_walks_never_deadlock(seed, depth_limit, step_limit):
    rng = random.Random(seed)
    state = initial_state(TOKENS, MENTIONS, depth_limit=depth_limit, step_limit=step_limit)
    terms = {
        NT: [Term.nl("states", (1, 2)), Term.general("count"), Term.general("exclude"), Term.general("answer")],
        TER: [ALL_TERM, Term.entity("texas", (5, 6))],
    }
    nts = reds = 0
    while not state.finished:
        legal = legal_actions(state)
        assert legal, "deadlock"
        kind = rng.choice(sorted(legal, key=lambda k: k.value))
        if kind is RED.kind:
            state = apply(state, RED)
            reds += 1
            continue
        options = [t for t in terms[kind] if term_fits(state, Action(kind), t)]
        assert options
        state = apply(state, Action(kind), rng.choice(options))
        nts += kind is NT
        assert state.open_count <= depth_limit and state.step <= step_limit
    assert nts == reds
    assert state.step <= step_limit


def test_derivation_text_round_trip():
    d = table_derivation()
    text = format_derivation(d)
    assert text.splitlines() == [
        "NT answer", "NT exclude", "NT states", "TER all", "RED",
        "NT border", "TER texas", "RED", "RED", "RED",
    ]
    back = parse_derivation(text)
    assert reconstruct(back) == parse_funql(FORM)
    grounded = parse_derivation("NT answer\nNT next_to\nTER texas\nRED\nRED\n", grounded=True)
    assert reconstruct(grounded) == parse_funql("answer(next_to(texas))", grounded=True)


@pytest.mark.parametrize("text", ["JUMP x", "RED x", "NT", "TER a b"])
def test_derivation_text_errors(text):
    with pytest.raises(TransitionError):
        parse_derivation(text)
