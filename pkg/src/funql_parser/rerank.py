"""Grounded candidate generation and a maximum-entropy reranker.

An ungrounded form is grounded by choosing, for each natural-language
predicate, one of its ``k`` most probable knowledge-base symbols.  The
resulting candidates are scored with a log-linear model over a small set
of sentence-level features and trained to put mass on candidates that
execute to the gold answer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .corpus import EntityMention
from .funql import LogicalForm, Term, TermKind, collect, parse_funql, print_funql, substitute_terms
from .kb import Denotation, ExecutionError, KnowledgeBase, execute

log = logging.getLogger(__name__)

QUESTION_WORDS = frozenset({"who", "what", "where", "when", "which", "how", "why"})
FEATURE_NAMES = (
    "entity_linker_score",
    "aggregated_likelihood",
    "rel_utterance_similarity",
    "rel_questionword_similarity",
    "answer_type_match",
)
# last relation-name segment -> words signalling that answer type
DEFAULT_ANSWER_TYPES: Dict[str, Tuple[str, ...]] = {
    "state": ("state", "states"),
    "city": ("city", "cities", "town", "towns"),
    "river": ("river", "rivers"),
    "capital": ("capital", "capitals"),
    "lake": ("lake", "lakes"),
    "mountain": ("mountain", "mountains", "peak"),
    "place_of_birth": ("where",),
    "location": ("where",),
    "date_of_birth": ("when",),
    "date": ("when",),
    "person": ("who",),
}

Lexicon = Callable[[Term], Sequence[Tuple[str, float]]]


class RerankError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    entity_linker_score: float = 0.0
    aggregated_likelihood: float = 0.0
    rel_utterance_similarity: float = 0.0
    rel_questionword_similarity: float = 0.0
    answer_type_match: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in FEATURE_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "FeatureVector":
        return cls(*(float(v) for v in values))


@dataclass
class GroundedCandidate:
    form: LogicalForm
    log_likelihood: float
    features: Optional[FeatureVector] = None
    denotation: Optional[Denotation] = None

    @property
    def text(self) -> str:
        return print_funql(self.form)


@dataclass
class RerankerWeights:
    weights: np.ndarray = field(default_factory=lambda: np.zeros(len(FEATURE_NAMES)))
    bias: float = 0.0
    # examples without a correct candidate during training
    skipped: int = 0

    def score(self, features: FeatureVector) -> float:
        return float(features.as_array() @ self.weights + self.bias)

    def to_dict(self) -> dict:
        return {
            "weights": dict(zip(FEATURE_NAMES, map(float, self.weights))),
            "bias": self.bias,
            "skipped": self.skipped,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RerankerWeights":
        w = np.array([float(d["weights"][n]) for n in FEATURE_NAMES])
        return cls(w, float(d.get("bias", 0.0)), int(d.get("skipped", 0)))


# ---------------------------------------------------------------- candidates


def enumerate_groundings(
    u: LogicalForm,
    lexicon: Lexicon,
    k_per_term: int = 3,
    beam: int = 32,
    base_log_likelihood: float = 0.0,
) -> List[GroundedCandidate]:
    """Beam over natural-language predicates in pre-order, best first.

    ``lexicon(term)`` returns ``(symbol, probability)`` pairs; the top
    ``k_per_term`` are kept per predicate.  A candidate's log-likelihood is
    ``base_log_likelihood`` plus the summed log-probabilities of its choices.
    """
    if k_per_term < 1 or beam < 1:
        raise ValueError("k_per_term and beam must be positive")
    paths = [path for path, node in u.walk() if node.head.kind is TermKind.NL_PREDICATE]
    nodes = dict(u.walk())
    partial: List[Tuple[float, Tuple[str, ...]]] = [(0.0, ())]
    for path in paths:
        options = sorted(lexicon(nodes[path].head), key=lambda x: (-x[1], x[0]))[:k_per_term]
        options = [(s, p) for s, p in options if p > 0]
        if not options:
            raise RerankError(f"no grounded symbol for predicate {nodes[path].head.label!r}")
        grown = [
            (score + math.log(p), choice + (symbol,))
            for score, choice in partial
            for symbol, p in options
        ]
        grown.sort(key=lambda x: (-x[0], x[1]))
        partial = grown[:beam]
    out = []
    for score, choice in partial:
        mapping = {path: Term.grounded(sym) for path, sym in zip(paths, choice)}
        out.append(GroundedCandidate(substitute_terms(u, mapping), base_log_likelihood + score))
    out.sort(key=lambda c: (-c.log_likelihood, c.text))
    return out


def model_lexicon(scorer) -> Lexicon:
    """Lexicon backed by a neural scorer's bilinear grounding head."""
    items = scorer.params.grounded.items

    def lexicon(term: Term):
        probs = scorer.ground_term_distribution(term)
        return list(zip(items, map(float, probs)))

    return lexicon


# ---------------------------------------------------------------- features


def relation_words(label: str) -> List[str]:
    return [w for w in label.replace(".", "_").split("_") if w]


def _mean_vector(words: Iterable[str], embeddings: Mapping[str, np.ndarray]) -> Optional[np.ndarray]:
    vecs = [embeddings[w] for w in words if w in embeddings]
    return np.mean(vecs, axis=0) if vecs else None


def cosine(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> float:
    if a is None or b is None:
        return 0.0
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def answer_relation(form: LogicalForm) -> Optional[str]:
    """The outermost grounded predicate: the one producing the answer."""
    for _, node in form.walk():
        if node.head.kind is TermKind.GROUNDED:
            return node.head.label
    return None


def featurize(
    candidate: GroundedCandidate,
    tokens: Sequence[str],
    annotations: Sequence[EntityMention],
    embeddings: Mapping[str, np.ndarray],
    answer_types: Mapping[str, Sequence[str]] = DEFAULT_ANSWER_TYPES,
) -> FeatureVector:
    form = candidate.form
    used = {t.label for t in collect(form, [TermKind.ENTITY])}
    scores = [m.score for m in annotations if m.entity in used]
    linker = sum(scores) / len(scores) if scores else 0.0

    relations = [t.label for t in collect(form, [TermKind.GROUNDED])]
    rel_vec = _mean_vector([w for r in relations for w in relation_words(r)], embeddings)
    utt_vec = _mean_vector(tokens, embeddings)
    qwords = [t for t in tokens if t.lower() in QUESTION_WORDS]
    q_vec = _mean_vector(qwords, embeddings) if qwords else None

    match = 0.0
    head = answer_relation(form)
    if head is not None:
        segment = head.split(".")[-1]
        keywords = answer_types.get(segment, ())
        lowered = {t.lower() for t in tokens}
        match = float(any(k in lowered for k in keywords))
    return FeatureVector(
        entity_linker_score=linker,
        aggregated_likelihood=candidate.log_likelihood,
        rel_utterance_similarity=cosine(rel_vec, utt_vec),
        rel_questionword_similarity=cosine(rel_vec, q_vec),
        answer_type_match=match,
    )


def read_answer_types(path) -> Dict[str, Tuple[str, ...]]:
    """``segment keyword [keyword ...]`` per line; ``#`` starts a comment."""
    table = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            fields = line.split("#", 1)[0].split()
            if len(fields) >= 2:
                table[fields[0]] = tuple(fields[1:])
    return table


# ---------------------------------------------------------------- model


def probabilities(candidates: Sequence[GroundedCandidate], weights: RerankerWeights) -> np.ndarray:
    scores = np.array([weights.score(c.features) for c in candidates])
    scores -= scores.max()
    p = np.exp(scores)
    return p / p.sum()


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def reranker_objective(
    w: np.ndarray,
    features: Sequence[np.ndarray],
    correct: Sequence[np.ndarray],
    weight_decay: float = 1e-4,
) -> Tuple[float, np.ndarray]:
    """Mean correct-answer log-likelihood minus an L2 penalty, with its gradient.

    ``features[i]`` is a candidates x features matrix and ``correct[i]`` a
    boolean mask over its rows with at least one True entry.
    """
    value, grad = 0.0, np.zeros_like(w)
    for F, mask in zip(features, correct):
        s = F @ w
        z_all = _logsumexp(s)
        z_ok = _logsumexp(s[mask])
        value += z_ok - z_all
        p_all = np.exp(s - z_all)
        p_ok = np.exp(s[mask] - z_ok)
        grad += p_ok @ F[mask] - p_all @ F
    n = max(len(features), 1)
    value = value / n - 0.5 * weight_decay * float(w @ w)
    grad = grad / n - weight_decay * w
    return value, grad


def _denotation(candidate: GroundedCandidate, kb: KnowledgeBase) -> Optional[Denotation]:
    if candidate.denotation is None:
        try:
            candidate.denotation = execute(candidate.form, kb)
        except ExecutionError:
            return None
    return candidate.denotation


def train_reranker(
    candidates_per_example: Sequence[Sequence[GroundedCandidate]],
    gold_denotations: Sequence[Denotation],
    kb: KnowledgeBase,
    iterations: int = 500,
    learning_rate: float = 0.1,
    weight_decay: float = 1e-4,
) -> RerankerWeights:
    """Full-batch gradient ascent on the marginal likelihood of correct candidates."""
    features, correct, skipped = [], [], 0
    for cands, gold in zip(candidates_per_example, gold_denotations):
        if not cands:
            raise RerankError("example without candidates")
        mask = np.array([_denotation(c, kb) == gold for c in cands])
        if not mask.any():
            skipped += 1
            continue
        features.append(np.stack([c.features.as_array() for c in cands]))
        correct.append(mask)
    if not features:
        raise RerankError("no example has a correct candidate")
    w = np.zeros(len(FEATURE_NAMES))
    for _ in range(iterations):
        _, grad = reranker_objective(w, features, correct, weight_decay)
        w = w + learning_rate * grad
    if skipped:
        log.info("reranker skipped %d examples without a correct candidate", skipped)
    return RerankerWeights(w, 0.0, skipped)


def select(candidates: Sequence[GroundedCandidate], weights: RerankerWeights) -> GroundedCandidate:
    """Highest score; ties go to the higher likelihood, then the smaller text."""
    if not candidates:
        raise RerankError("no candidates to select from")
    return min(
        candidates,
        key=lambda c: (-weights.score(c.features), -c.log_likelihood, c.text),
    )


# ---------------------------------------------------------------- dump format


def format_candidates(candidates: Sequence[GroundedCandidate], weights: Optional[RerankerWeights] = None) -> str:
    """One tab-separated line per candidate: score, features, FunQL."""
    lines = []
    for c in candidates:
        score = weights.score(c.features) if weights is not None else c.log_likelihood
        feats = c.features.as_array() if c.features is not None else np.zeros(len(FEATURE_NAMES))
        cols = [f"{score:.6f}"] + [f"{n}={v:.6f}" for n, v in zip(FEATURE_NAMES, feats)] + [c.text]
        lines.append("\t".join(cols))
    return "".join(line + "\n" for line in lines)


def parse_candidates(text: str) -> List[GroundedCandidate]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != len(FEATURE_NAMES) + 2:
            raise RerankError(f"line {lineno}: expected {len(FEATURE_NAMES) + 2} columns")
        values = {}
        for col in cols[1:-1]:
            name, _, value = col.partition("=")
            values[name] = float(value)
        features = FeatureVector(**values)
        out.append(GroundedCandidate(parse_funql(cols[-1], grounded=True), features.aggregated_likelihood, features))
    return out
