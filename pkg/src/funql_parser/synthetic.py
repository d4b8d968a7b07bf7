"""Deterministic GeoQuery-style utterances over the bundled toy KB.

Each template pairs an utterance pattern with an ungrounded and a grounded
FunQL pattern.  ``{E}``/``{F}`` are filled with state names; multiword
names become multi-token entity mentions (``new mexico`` -> ``new_mexico``).
"""

from __future__ import annotations

import itertools
import random
from pathlib import Path
from typing import List, Sequence, Tuple

from .corpus import EntityMention, Example, write_examples
from .funql import parse_funql, print_funql
from .kb import KnowledgeBase, execute, load_kb, surrogate_search

STATES = (
    "texas",
    "oklahoma",
    "new_mexico",
    "louisiana",
    "arkansas",
    "colorado",
    "kansas",
    "utah",
    "arizona",
    "nevada",
)

# (utterance, ungrounded, grounded)
TEMPLATES: Tuple[Tuple[str, str, str], ...] = (
    ("which states border {E}", "answer(states(border({E})))", "answer(state(next_to({E})))"),
    ("what states border {E}", "answer(states(border({E})))", "answer(state(next_to({E})))"),
    ("which states neighbor {E}", "answer(states(neighbor({E})))", "answer(state(next_to({E})))"),
    (
        "which states do not border {E}",
        "answer(exclude(states(all), border({E})))",
        "answer(exclude(state(all), next_to({E})))",
    ),
    (
        "how many states border {E}",
        "answer(count(states(border({E}))))",
        "answer(count(state(next_to({E}))))",
    ),
    (
        "what is the largest state bordering {E}",
        "answer(largest(state(bordering({E}))))",
        "answer(largest(state(next_to({E}))))",
    ),
    (
        "what is the smallest state bordering {E}",
        "answer(smallest(state(bordering({E}))))",
        "answer(smallest(state(next_to({E}))))",
    ),
    ("which rivers run through {E}", "answer(rivers(run({E})))", "answer(river(traverse({E})))"),
    ("which rivers cross {E}", "answer(rivers(cross({E})))", "answer(river(traverse({E})))"),
    (
        "which rivers do not run through {E}",
        "answer(exclude(rivers(all), run({E})))",
        "answer(exclude(river(all), traverse({E})))",
    ),
    (
        "how many rivers run through {E}",
        "answer(count(rivers(run({E}))))",
        "answer(count(river(traverse({E}))))",
    ),
    (
        "what is the longest river in {E}",
        "answer(largest(river(in({E}))))",
        "answer(largest(river(traverse({E}))))",
    ),
    ("what cities are in {E}", "answer(cities(in({E})))", "answer(city(loc({E})))"),
    (
        "what is the largest city in {E}",
        "answer(largest(city(in({E}))))",
        "answer(largest(city(loc({E}))))",
    ),
    ("what is the capital of {E}", "answer(capital(of({E})))", "answer(capital(loc({E})))"),
    (
        "which states border states bordering {E}",
        "answer(states(border(states(bordering({E})))))",
        "answer(state(next_to(state(next_to({E})))))",
    ),
    (
        "which rivers run through states bordering {E}",
        "answer(rivers(run(states(bordering({E})))))",
        "answer(river(traverse(state(next_to({E})))))",
    ),
    (
        "what rivers run through the state of {E}",
        "answer(rivers(run(stateid({E}))))",
        "answer(river(traverse(stateid({E}))))",
    ),
    (
        "which states border {E} and {F}",
        "answer(intersect(border({E}), border({F})))",
        "answer(intersect(next_to({E}), next_to({F})))",
    ),
    (
        "which states border {E} or {F}",
        "answer(union(border({E}), border({F})))",
        "answer(union(next_to({E}), next_to({F})))",
    ),
    ("list all the states", "answer(states(all))", "answer(state(all))"),
    ("how many states are there", "answer(count(states(all)))", "answer(count(state(all)))"),
    ("how many rivers are there", "answer(count(rivers(all)))", "answer(count(river(all)))"),
    ("what is the largest state", "answer(largest(state(all)))", "answer(largest(state(all)))"),
    ("what is the longest river", "answer(largest(river(all)))", "answer(largest(river(all)))"),
    (
        "which cities are capitals",
        "answer(intersect(cities(all), capitals(all)))",
        "answer(intersect(city(all), capital(all)))",
    ),
)


def _slots(template: str) -> int:
    return ("{E}" in template) + ("{F}" in template)


def instantiate(template: Tuple[str, str, str], fillers: Sequence[str]) -> Example:
    """Fill one template with entity ids, producing an annotated example."""
    text, ungrounded, grounded = template
    tokens: List[str] = []
    mentions: List[EntityMention] = []
    names = dict(zip(("{E}", "{F}"), fillers))
    for word in text.split():
        if word in names:
            entity = names[word]
            start = len(tokens)
            tokens.extend(entity.split("_"))
            mentions.append(EntityMention((start, len(tokens)), entity))
        else:
            tokens.append(word)
    for slot, entity in names.items():
        ungrounded = ungrounded.replace(slot, entity)
        grounded = grounded.replace(slot, entity)
    return Example(
        tokens,
        mentions,
        form=parse_funql(grounded, grounded=True),
        ungrounded=parse_funql(ungrounded),
    )


def generate_corpus(pairs_per_template: int = 15, seed: int = 0) -> List[Example]:
    """Every template with every state (one-slot) or a seeded sample of pairs."""
    rng = random.Random(seed)
    pairs = list(itertools.permutations(STATES, 2))
    out = []
    for template in TEMPLATES:
        n = _slots(template[0])
        if n == 0:
            out.append(instantiate(template, ()))
        elif n == 1:
            out.extend(instantiate(template, (s,)) for s in STATES)
        else:
            out.extend(instantiate(template, p) for p in rng.sample(pairs, pairs_per_template))
    return out


def sample(examples: Sequence[Example], n: int, seed: int = 0) -> List[Example]:
    """Seeded subset preserving corpus order."""
    rng = random.Random(seed)
    keep = sorted(rng.sample(range(len(examples)), n))
    return [examples[i] for i in keep]


def denotation_examples(examples: Sequence[Example], kb: KnowledgeBase) -> List[Example]:
    """Replace each logical form with its denotation on ``kb``."""
    return [
        Example(list(ex.tokens), list(ex.entities), denotation=execute(ex.form, kb))
        for ex in examples
    ]


def recoverable(examples: Sequence[Example], kb: KnowledgeBase, limits=None) -> List[Example]:
    """Examples whose gold form is among the surrogates of its own denotation."""
    out = []
    for ex in examples:
        y = execute(ex.form, kb)
        if ex.form in surrogate_search(ex.tokens, ex.entities, y, kb, limits):
            out.append(ex)
    return out


def write_bundled_data(directory) -> None:
    """Regenerate the bundled JSON-lines corpora in ``directory``."""
    directory = Path(directory)
    kb = load_kb(directory / "geo_toy.kb")
    corpus = generate_corpus()
    write_examples(directory / "geo_synthetic.jsonl", corpus)
    write_examples(directory / "geo_train50.jsonl", sample(corpus, 50, seed=0))
    write_examples(directory / "geo_fixture10.jsonl", sample(corpus, 10, seed=7))
    good = recoverable(corpus, kb)
    write_examples(directory / "geo_denotation30.jsonl", denotation_examples(sample(good, 30, seed=1), kb))
    lines = []
    for ex in corpus:
        lines += [print_funql(ex.ungrounded), print_funql(ex.form)]
    (directory / "funql_forms.txt").write_text("\n".join(dict.fromkeys(lines)) + "\n", encoding="utf-8")


if __name__ == "__main__":
    import sys

    write_bundled_data(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent / "data")
