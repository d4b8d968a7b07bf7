"""End-to-end training from logical forms or denotations.

Per example the objective has three parts:

* the action log-likelihood along the gold derivation,
* the log-likelihood of the term choices that the supervision fixes
  (domain-general predicates, ``all``, slot markers and entity mentions),
* the expected grounding log-likelihood ``E_u[sum_t log p(g_t|u_t)]`` with
  the ungrounded predicate tokens ``u`` latent, estimated from ``M``
  sampled token sequences with a score-function gradient.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import Example
from .funql import LogicalForm, TermKind, collect, print_funql
from .kb import ExecutionError, KnowledgeBase, SearchLimits, execute, surrogate_search
from .neural import ModelConfig, ModelParams, NoParse, Scorer, Step, Utterance, Vocab, parse
from .transitions import Derivation, TransitionError, oracle

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass
class TrainingConfig:
    learning_rate: float = 0.001
    adam_momenta: Tuple[float, float] = (0.99, 0.999)
    batch_size: int = 1
    epochs: int = 10
    latent_samples: int = 5
    seed: int = 0
    baseline_decay: float = 0.9
    search_limits: SearchLimits = field(default_factory=SearchLimits)

    def __post_init__(self):
        if self.latent_samples < 1:
            raise ValueError("latent_samples must be at least 1")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=0.001, betas=(0.99, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def gold_derivation(example: Example, form: Optional[LogicalForm] = None) -> Derivation:
    """Derivation of the grounded target with entity mentions located."""
    form = form if form is not None else example.form
    if form is None:
        raise TrainingError("example has no logical form")
    return oracle(form, example.tokens, example.entities)


def _walk(params, example, derivation, choose=None, utt=None):
    utt = utt or Utterance(params, example.tokens, example.entities)
    steps, _ = Scorer(params, utt).walk(derivation, choose)
    return steps


def _sum(tensors: List[Tensor]) -> Tensor:
    out = Tensor(0.0)
    for t in tensors:
        out = out + t
    return out


def action_loss(example: Example, params: ModelParams, derivation: Optional[Derivation] = None) -> Tensor:
    """Negative action log-likelihood along the gold derivation.

    Latent predicate tokens (grounded supervision) follow the pointer's
    argmax, which fixes the stack contents the action head conditions on.
    """
    if derivation is None:
        derivation = oracle(example.ungrounded, example.tokens, example.entities) if example.ungrounded else gold_derivation(example)
    return -_sum([s.action_logp for s in _walk(params, example, derivation)])


def _sampler(rng: np.random.Generator) -> Callable[[np.ndarray], int]:
    def choose(probs: np.ndarray) -> int:
        return int(rng.choice(len(probs), p=probs / probs.sum()))

    return choose


def _term_objective(samples: List[List[Step]], baseline: float) -> Tuple[Tensor, np.ndarray]:
    """Surrogate whose value is -mean reward and whose gradient adds the score-function term."""
    parts, rewards = [], []
    for steps in samples:
        reward = _sum([s.ground_logp for s in steps if s.latent])
        choice = _sum([s.pointer_logp for s in steps if s.latent])
        score = (reward.data - baseline) * (choice - choice.data)
        parts.append(reward + score)
        rewards.append(float(reward.data))
    return -_sum(parts) / len(parts), np.array(rewards)


def term_loss_expected(
    example: Example,
    params: ModelParams,
    samples: int = 5,
    rng: Optional[np.random.Generator] = None,
    baseline: float = 0.0,
    derivation: Optional[Derivation] = None,
) -> Tensor:
    """Monte-Carlo estimate of ``-sum_u p(u|x) sum_t log p(g_t|u_t)``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    derivation = derivation or gold_derivation(example)
    utt = Utterance(params, example.tokens, example.entities)
    choose = _sampler(rng)
    walked = [_walk(params, example, derivation, choose, utt) for _ in range(samples)]
    loss, _ = _term_objective(walked, baseline)
    return loss


def enumerate_latent(example: Example, params: ModelParams, derivation: Optional[Derivation] = None):
    """Every latent token sequence with ``(log p(u|x), sum_t log p(g_t|u_t))``."""
    derivation = derivation or gold_derivation(example)
    with ag.no_grad():
        utt = Utterance(params, example.tokens, example.entities)
        n_latent = sum(1 for t in derivation.terms if t.kind is TermKind.GROUNDED)
        out = []
        for combo in itertools.product(range(len(utt.positions)), repeat=n_latent):
            picks = iter(combo)
            steps = _walk(params, example, derivation, lambda probs: next(picks), utt)
            logpu = sum(float(s.pointer_logp.data) for s in steps if s.latent)
            reward = sum(float(s.ground_logp.data) for s in steps if s.latent)
            out.append((combo, logpu, reward))
    return out


def exact_term_bounds(example: Example, params: ModelParams, derivation: Optional[Derivation] = None) -> Tuple[float, float]:
    """``(E_u[log p(g|u)], log p(g|x))`` by enumeration; the first never exceeds the second."""
    rows = enumerate_latent(example, params, derivation)
    expected = sum(math.exp(lp) * r for _, lp, r in rows)
    log_marginal = float(np.logaddexp.reduce([lp + r for _, lp, r in rows]))
    return expected, log_marginal


def example_loss(
    example: Example,
    params: ModelParams,
    derivation: Derivation,
    samples: int,
    rng: np.random.Generator,
    baseline: float = 0.0,
) -> Tuple[Tensor, dict]:
    """Total loss for one example, sharing the buffer encoding across samples."""
    utt = Utterance(params, example.tokens, example.entities)
    choose = _sampler(rng)
    walked = [_walk(params, example, derivation, choose, utt) for _ in range(samples)]
    structural = []
    for steps in walked:
        terms = [s.slot_logp for s in steps if s.slot_logp is not None]
        terms += [s.pointer_logp for s in steps if s.pointer_logp is not None and not s.latent]
        structural.append(_sum([s.action_logp for s in steps]) + _sum(terms))
    structure_loss = -_sum(structural) / samples
    term_loss, rewards = _term_objective(walked, baseline)
    stats = {
        "structure": float(structure_loss.data),
        "term": float(term_loss.data),
        "reward": float(rewards.mean()),
    }
    return structure_loss + term_loss, stats


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    examples: int
    skipped: int


def build_vocabularies(examples: Sequence[Example], kb: Optional[KnowledgeBase], targets: Sequence[LogicalForm]):
    words = sorted({t for ex in examples for t in ex.tokens})
    entities = sorted({m.entity for ex in examples for m in ex.entities})
    grounded = set(kb.relations if kb is not None else [])
    for form in targets:
        grounded.update(t.label for t in collect(form, [TermKind.GROUNDED]))
    return Vocab(words), Vocab(entities), Vocab(sorted(grounded), unk=False)


@dataclass
class PreparedExample:
    example: Example
    forms: List[LogicalForm]
    derivations: List[Derivation]


def prepare(
    examples: Sequence[Example], kb: Optional[KnowledgeBase], limits: SearchLimits
) -> Tuple[List[PreparedExample], int]:
    """Gold derivations (or surrogate derivations) per example; returns (prepared, skipped)."""
    prepared, skipped = [], 0
    for ex in examples:
        if ex.form is not None:
            forms = [ex.form]
        elif ex.denotation is not None:
            if kb is None:
                raise TrainingError("denotation supervision requires a knowledge base")
            forms = surrogate_search(ex.tokens, ex.entities, ex.denotation, kb, limits)
        else:
            forms = []
        kept, derivations = [], []
        for form in forms:
            try:
                derivations.append(gold_derivation(ex, form))
                kept.append(form)
            except TransitionError:
                continue
        if derivations:
            prepared.append(PreparedExample(ex, kept, derivations))
        else:
            skipped += 1
    return prepared, skipped


def _scorable(params: ModelParams, item: PreparedExample) -> PreparedExample:
    forms, derivations = [], []
    with ag.no_grad():
        utt = Utterance(params, item.example.tokens, item.example.entities)
        for form, d in zip(item.forms, item.derivations):
            try:
                _walk(params, item.example, d, utt=utt)
            except (ValueError, NoParse):
                continue
            forms.append(form)
            derivations.append(d)
    return PreparedExample(item.example, forms, derivations)


def train(
    dataset: Sequence[Example],
    kb: Optional[KnowledgeBase] = None,
    config: Optional[TrainingConfig] = None,
    model_config: Optional[ModelConfig] = None,
    params: Optional[ModelParams] = None,
    pretrained: Optional[Dict[str, np.ndarray]] = None,
    callback: Optional[Callable[[EpochMetrics, ModelParams], bool]] = None,
) -> Tuple[ModelParams, List[EpochMetrics]]:
    """Optimise the parser; ``callback`` may return True to stop early."""
    config = config or TrainingConfig()
    if not dataset:
        raise TrainingError("empty training set")
    prepared, skipped = prepare(dataset, kb, config.search_limits)
    if params is None:
        targets = [form for item in prepared for form in item.forms]
        words, entities, grounded = build_vocabularies(dataset, kb, targets)
        params = ModelParams.initialize(model_config or ModelConfig(), words, entities, grounded, config.seed)
        if pretrained:
            params.use_pretrained(pretrained)
    scorable = []
    for item in prepared:
        item = _scorable(params, item)
        if item.derivations:
            scorable.append(item)
        else:
            skipped += 1
    if not scorable:
        raise TrainingError(f"all {len(dataset)} examples were skipped")
    log.info("training on %d examples (%d skipped)", len(scorable), skipped)

    rng = np.random.default_rng(config.seed)
    optimizer = Adam(params.parameters(), config.learning_rate, config.adam_momenta)
    baselines: Dict[int, float] = {}
    history: List[EpochMetrics] = []
    for epoch in range(1, config.epochs + 1):
        chosen = [item.derivations[int(rng.integers(len(item.derivations)))] for item in scorable]
        total = 0.0
        for i in rng.permutation(len(scorable)):
            item = scorable[i]
            optimizer.zero_grad()
            loss, stats = example_loss(
                item.example, params, chosen[i], config.latent_samples, rng, baselines.get(i, 0.0)
            )
            loss.backward()
            optimizer.step()
            total += float(loss.data)
            prev = baselines.get(i)
            reward = stats["reward"]
            baselines[i] = reward if prev is None else config.baseline_decay * prev + (1 - config.baseline_decay) * reward
        metrics = EpochMetrics(epoch, total / len(scorable), len(scorable), skipped)
        history.append(metrics)
        log.info("epoch %d loss %.4f", epoch, metrics.loss)
        if callback is not None and callback(metrics, params):
            break
    return params, history


def training_accuracy(params: ModelParams, examples: Sequence[Example], kb=None, beam: int = 1) -> Dict[str, float]:
    """Exact-match accuracy of grounded forms and average denotation F1."""
    from .metrics import denotation_f1

    exact, f1, n_form, n_den = 0, 0.0, 0, 0
    for ex in examples:
        try:
            result = parse(params, ex.tokens, ex.entities, beam)
        except NoParse:
            result = None
        if ex.form is not None:
            n_form += 1
            exact += int(result is not None and print_funql(result.grounded) == print_funql(ex.form))
        if kb is not None:
            gold = ex.denotation if ex.denotation is not None else execute(ex.form, kb)
            n_den += 1
            if result is not None:
                try:
                    f1 += denotation_f1(execute(result.grounded, kb), gold)
                except ExecutionError:
                    pass
    return {
        "exact_match": exact / n_form if n_form else 0.0,
        "denotation_f1": f1 / n_den if n_den else 0.0,
    }
