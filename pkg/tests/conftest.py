import random

import numpy as np
import pytest
from hypothesis import strategies as st

from funql_parser.corpus import data_path
from funql_parser.funql import (
    AGGREGATIONS,
    ALL_TERM,
    CONNECTIVES,
    LogicalForm,
    Term,
)
from funql_parser.kb import KnowledgeBase, load_kb
from funql_parser.neural import ModelConfig, ModelParams

NL_WORDS = ["states", "border", "rivers", "run", "cities", "in", "capital", "largest_one"]
ENTITIES = ["texas", "utah", "new_mexico", "ohio"]


@pytest.fixture(scope="session")
def geo_kb():
    return load_kb(data_path("geo_toy.kb"))


@pytest.fixture
def four_state_kb():
    # next_to(texas) = {oklahoma}; four states in total
    return KnowledgeBase.build(
        unary={"state": ["texas", "oklahoma", "utah", "maine"]},
        binary={"next_to": [("oklahoma", "texas"), ("texas", "oklahoma")]},
        magnitudes={
            ("texas", "size"): 268,
            ("oklahoma", "size"): 70,
            ("utah", "size"): 85,
            ("maine", "size"): 35,
        },
    )


def random_tree(rng: random.Random, depth: int = 4, grounded: bool = False) -> LogicalForm:
    """A random well-formed subtree (not rooted in ``answer``)."""
    kind = Term.grounded if grounded else Term.nl
    if depth <= 0 or rng.random() < 0.25:
        return LogicalForm.leaf(ALL_TERM if rng.random() < 0.3 else Term.entity(rng.choice(ENTITIES)))
    r = rng.random()
    if r < 0.2:
        return LogicalForm(Term.general(rng.choice(sorted(CONNECTIVES))), (random_tree(rng, depth - 1, grounded), random_tree(rng, depth - 1, grounded)))
    if r < 0.35:
        return LogicalForm(Term.general(rng.choice(sorted(AGGREGATIONS))), (random_tree(rng, depth - 1, grounded),))
    n = 1 if rng.random() < 0.8 else 2
    return LogicalForm(kind(rng.choice(NL_WORDS)), tuple(random_tree(rng, depth - 1, grounded) for _ in range(n)))


def random_form(rng: random.Random, depth: int = 4, grounded: bool = False) -> LogicalForm:
    return LogicalForm(Term.general("answer"), (random_tree(rng, depth, grounded),))


@st.composite
def forms(draw, grounded=False):
    seed = draw(st.integers(0, 2**32 - 1))
    depth = draw(st.integers(0, 5))
    return random_form(random.Random(seed), depth, grounded)


def tiny_config(dim: int = 6) -> ModelConfig:
    return ModelConfig(word_dim=dim, hidden_dim=dim, entity_dim=dim, relation_dim=dim)


def tiny_params(words, entities, grounded, dim: int = 6, seed: int = 0, scale: float = 0.0) -> ModelParams:
    """Small model; ``scale`` > 0 redraws every tensor for livelier gradients."""
    params = ModelParams.initialize(tiny_config(dim), words, entities, grounded, seed)
    if scale:
        rng = np.random.default_rng(seed + 1)
        for t in params.tensors.values():
            t.data[...] = rng.uniform(-scale, scale, size=t.shape)
    return params


GROUNDED = ["state", "next_to", "loc", "river", "traverse"]


def head_probe(seed: int) -> dict:
    """Every head's distribution at a random reachable state under random params."""
    from funql_parser.corpus import EntityMention
    from funql_parser.neural import (
        Scorer,
        Utterance,
        action_distribution,
        general_term_distribution,
        ground_distribution,
        head_entries,
        model_legal_kinds,
        nl_term_distribution,
    )
    from funql_parser.transitions import ActionKind

    rng = random.Random(seed)
    n = rng.randint(1, 7)
    tokens = [rng.choice(NL_WORDS) for _ in range(n)]
    mentions = []
    if rng.random() < 0.7:
        i = rng.randrange(n)
        tokens[i] = rng.choice(ENTITIES)
        mentions = [EntityMention((i, i + 1), tokens[i])]
    params = tiny_params(NL_WORDS, ENTITIES, GROUNDED, dim=rng.randint(2, 8), seed=seed, scale=rng.uniform(0.05, 2.0))
    scorer = Scorer(params, Utterance(params, tokens, mentions))
    hyp = scorer.start()
    for _ in range(rng.randint(0, 12)):
        options = scorer.expansions(hyp)
        _, action, term = options[rng.randrange(len(options))]
        nxt = scorer.advance(hyp, action, term)
        if nxt.state.finished:
            break
        hyp = nxt
    e, s, weights = scorer.features(hyp)
    out = {"attention": weights.data}
    kinds = model_legal_kinds(hyp.state, scorer.utt)
    out["action"] = action_distribution(e, params, set(kinds))
    for kind in kinds:
        if kind is not ActionKind.RED:
            out[f"general_{kind.value}"] = general_term_distribution(e, params, head_entries(hyp.state, kind, scorer.utt))
    if scorer.utt.positions:
        out["nl"] = nl_term_distribution(s, scorer.utt.predicate_matrix, params)
        out["ground"] = ground_distribution(scorer.utt.token_vector(rng.choice(scorer.utt.positions)), params)
    return out
