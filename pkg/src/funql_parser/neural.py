"""Neural scoring of transition actions, term choices and groundings.

The utterance is encoded once with a bidirectional LSTM.  A stack LSTM
summarises the partial tree; its top state attends over the buffer and the
concatenation ``[buffer summary; stack state]`` feeds the action head and
the domain-general term head.  Natural-language predicates and entity
mentions are chosen by pointing at buffer positions, and ungrounded
predicates are mapped to knowledge-base symbols with a bilinear head.

Term choice at an NT/TER step is factored: the general head picks among
domain-general predicates, ``all`` and two slot markers, ``<nl>`` (point at
a predicate token) and ``<entity>`` (point at an entity mention).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import EntityMention
from .funql import (
    AGGREGATIONS,
    ALL,
    ALL_TERM,
    ANSWER,
    CONNECTIVES,
    GENERAL_ARITY,
    TYPE_PREDICATES,
    LogicalForm,
    Term,
    TermKind,
)
from .transitions import (
    ACTION_KINDS,
    RED,
    Action,
    ActionKind,
    CompletedSubtree,
    Derivation,
    ParserState,
    Slot,
    apply,
    initial_state,
    legal_actions,
    term_fits,
    _open_frames,
)

CHECKPOINT_VERSION = 1
UNK = "<unk>"
NL_SLOT = "<nl>"
ENTITY_SLOT = "<entity>"
GENERAL_HEAD = (
    [ANSWER]
    + sorted(AGGREGATIONS)
    + sorted(CONNECTIVES)
    + sorted(TYPE_PREDICATES)
    + [ALL, NL_SLOT, ENTITY_SLOT]
)
GENERAL_INDEX = {label: i for i, label in enumerate(GENERAL_HEAD)}


class NoParse(Exception):
    """Decoding could not produce a complete logical form."""


@dataclass
class ModelConfig:
    word_dim: int = 50
    hidden_dim: int = 100
    entity_dim: int = 100
    relation_dim: int = 100
    depth_limit: int = 8
    step_limit: int = 60


class Vocab:
    def __init__(self, items: Sequence[str], unk: bool = True):
        items = list(dict.fromkeys(items))
        if unk and UNK not in items:
            items = [UNK] + items
        self.items = items
        self.index = {w: i for i, w in enumerate(items)}

    def __len__(self) -> int:
        return len(self.items)

    def __contains__(self, w) -> bool:
        return w in self.index

    def __getitem__(self, w: str) -> int:
        if w in self.index:
            return self.index[w]
        if UNK in self.index:
            return self.index[UNK]
        raise KeyError(w)


def _uniform(rng, shape, scale):
    return rng.uniform(-scale, scale, size=shape)


@dataclass
class ModelParams:
    config: ModelConfig
    words: Vocab
    entities: Vocab
    grounded: Vocab
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: ModelConfig, words, entities, grounded, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        H, Dw, De, Dr = config.hidden_dim, config.word_dim, config.entity_dim, config.relation_dim
        words = words if isinstance(words, Vocab) else Vocab(words)
        entities = entities if isinstance(entities, Vocab) else Vocab(entities)
        grounded = grounded if isinstance(grounded, Vocab) else Vocab(grounded, unk=False)
        if not len(grounded):
            raise ValueError("empty grounded vocabulary")
        emb, w = 0.1, 0.08
        arrays = {
            "word_emb": _uniform(rng, (len(words), Dw), emb),
            "buf_fwd_W": _uniform(rng, (4 * H, Dw + H), w),
            "buf_fwd_b": np.zeros(4 * H),
            "buf_bwd_W": _uniform(rng, (4 * H, Dw + H), w),
            "buf_bwd_b": np.zeros(4 * H),
            "stack_W": _uniform(rng, (4 * H, De + H), w),
            "stack_b": np.zeros(4 * H),
            "stack_h0": _uniform(rng, (H,), w),
            "stack_c0": _uniform(rng, (H,), w),
            "general_emb": _uniform(rng, (len(GENERAL_HEAD), De), emb),
            "entity_emb": _uniform(rng, (len(entities), De), emb),
            "grounded_emb": _uniform(rng, (len(grounded), Dr), emb),
            "nl_proj": _uniform(rng, (De, 2 * H), w),
            "att_Wx": _uniform(rng, (H, 2 * H), w),
            "att_Ws": _uniform(rng, (H, H), w),
            "att_v": _uniform(rng, (H,), w),
            "W_a": _uniform(rng, (len(ACTION_KINDS), 3 * H), w),
            "W_p": _uniform(rng, (len(GENERAL_HEAD), 3 * H), w),
            "W_s": _uniform(rng, (2 * H, H), w),
            "W_ug": _uniform(rng, (2 * H, Dr), w),
            "comp_W": _uniform(rng, (De, 2 * De), w),
            "comp_b": np.zeros(De),
        }
        tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(config, words, entities, grounded, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> List[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def use_pretrained(self, vectors: Dict[str, np.ndarray]) -> int:
        """Copy pretrained word vectors into the word embedding table."""
        table = self.tensors["word_emb"].data
        hits = 0
        for word, i in self.words.index.items():
            vec = vectors.get(word)
            if vec is not None and vec.shape == table[i].shape:
                table[i] = vec
                hits += 1
        return hits

    def save(self, path, extra: Optional[dict] = None) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "words": self.words.items,
            "entities": self.entities.items,
            "grounded": self.grounded.items,
            "shapes": {k: list(t.shape) for k, t in sorted(self.tensors.items())},
            "extra": extra or {},
        }
        arrays = {f"param/{k}": t.data for k, t in self.tensors.items()}
        with open(path, "wb") as f:
            np.savez(f, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> Tuple["ModelParams", dict]:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
            tensors = {
                k[len("param/"):]: Tensor(archive[k].copy(), requires_grad=True)
                for k in archive.files
                if k.startswith("param/")
            }
        for name, shape in meta["shapes"].items():
            if list(tensors[name].shape) != shape:
                raise ValueError(f"shape mismatch for {name}")
        params = cls(
            ModelConfig(**meta["config"]),
            Vocab(meta["words"]),
            Vocab(meta["entities"]),
            Vocab(meta["grounded"], unk=False),
            tensors,
        )
        return params, meta.get("extra", {})


def load_embeddings(path, dim: Optional[int] = None) -> Dict[str, np.ndarray]:
    """Whitespace-separated text vectors, one ``token v1 v2 ...`` per line."""
    vectors = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            fields = line.rstrip().split()
            if not fields:
                continue
            values = np.array([float(x) for x in fields[1:]])
            if dim is not None and len(values) != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} numbers, got {len(values)}")
            vectors[fields[0]] = values
    return vectors


# ---------------------------------------------------------------- encoders


def lstm_step(W: Tensor, b: Tensor, x: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
    H = h.shape[0]
    z = W @ ag.concat([x, h]) + b
    gates = ag.sigmoid(z[: 3 * H])
    i, f, o = gates[:H], gates[H : 2 * H], gates[2 * H :]
    g = ag.tanh(z[3 * H :])
    c2 = f * c + i * g
    return o * ag.tanh(c2), c2


def encode_buffer(tokens: Sequence[str], params: ModelParams) -> Tensor:
    """Contextual vectors ``[forward; backward]`` for every token (n x 2H)."""
    if not tokens:
        raise ValueError("cannot encode an empty utterance")
    H = params.config.hidden_dim
    emb = params["word_emb"]
    xs = [emb[params.words[t]] for t in tokens]

    def run(W, b, seq):
        h = c = Tensor(np.zeros(H))
        out = []
        for x in seq:
            h, c = lstm_step(W, b, x, h, c)
            out.append(h)
        return out

    fwd = run(params["buf_fwd_W"], params["buf_fwd_b"], xs)
    bwd = run(params["buf_bwd_W"], params["buf_bwd_b"], xs[::-1])[::-1]
    return ag.stack([ag.concat([f, b]) for f, b in zip(fwd, bwd)])


class StackNode:
    """Persistent stack-LSTM node; popping is returning to ``tail``."""

    __slots__ = ("vector", "h", "c", "tail", "size")

    def __init__(self, vector, h, c, tail, size):
        self.vector, self.h, self.c, self.tail, self.size = vector, h, c, tail, size

    @classmethod
    def empty(cls, params: ModelParams) -> "StackNode":
        return cls(None, params["stack_h0"], params["stack_c0"], None, 0)

    def push(self, vector: Tensor, params: ModelParams) -> "StackNode":
        h, c = lstm_step(params["stack_W"], params["stack_b"], vector, self.h, self.c)
        return StackNode(vector, h, c, self, self.size + 1)

    def pop(self) -> "StackNode":
        if self.tail is None:
            raise IndexError("pop from an empty stack")
        return self.tail

    @property
    def summary(self) -> Tensor:
        return self.h


def encode_stack(vectors: Sequence[Tensor], params: ModelParams) -> Tensor:
    """Stack summary after pushing ``vectors`` in order onto an empty stack."""
    node = StackNode.empty(params)
    for v in vectors:
        node = node.push(v, params)
    return node.summary


def compose(predicate: Tensor, children: Sequence[Tensor], params: ModelParams) -> Tensor:
    """Single-layer tanh composition of a predicate with the mean of its children."""
    return ag.tanh(params["comp_W"] @ ag.concat([predicate, ag.mean(children)]) + params["comp_b"])


def attend(context: Tensor, stack_summary: Tensor, params: ModelParams, projected: Optional[Tensor] = None):
    """Additive attention over buffer vectors; returns ``(summary, weights)``."""
    if projected is None:
        projected = context @ _transpose(params["att_Wx"])
    scores = ag.tanh(projected + params["att_Ws"] @ stack_summary) @ params["att_v"]
    weights = ag.softmax(scores)
    return weights @ context, weights


def _transpose(t: Tensor) -> Tensor:
    return ag._result(t.data.T, (t,), lambda g: (g.T,))


# ---------------------------------------------------------------- heads


def masked_log_probs(logits: Tensor, allowed: Sequence[int]) -> Tensor:
    """Log-softmax restricted to ``allowed`` indices (in that order)."""
    return ag.log_softmax(logits[list(allowed)])


def action_distribution(e: Tensor, params: ModelParams, legal=None) -> np.ndarray:
    """Probabilities over (NT, TER, RED) with illegal kinds masked to zero."""
    allowed = [i for i, k in enumerate(ACTION_KINDS) if legal is None or k in legal]
    probs = np.zeros(len(ACTION_KINDS))
    probs[allowed] = np.exp(masked_log_probs(params["W_a"] @ e, allowed).data)
    return probs


def general_term_distribution(e: Tensor, params: ModelParams, candidates: Sequence[str]) -> np.ndarray:
    idx = [GENERAL_INDEX[c] for c in candidates]
    return np.exp(masked_log_probs(params["W_p"] @ e, idx).data)


def pointer_scores(candidates: Tensor, stack_summary: Tensor, params: ModelParams) -> Tensor:
    return candidates @ (params["W_s"] @ stack_summary)


def nl_term_distribution(stack_summary: Tensor, candidates: Tensor, params: ModelParams) -> np.ndarray:
    """Softmax over candidate buffer vectors (rows of ``candidates``)."""
    return np.exp(ag.log_softmax(pointer_scores(candidates, stack_summary, params)).data)


def ground_logits(u_context: Tensor, params: ModelParams, candidates: Optional[Sequence[int]] = None) -> Tensor:
    table = params["grounded_emb"]
    if candidates is not None:
        table = table[list(candidates)]
    return table @ (u_context @ params["W_ug"])


def ground_distribution(u_context: Tensor, params: ModelParams, candidates: Optional[Sequence[int]] = None) -> np.ndarray:
    return np.exp(ag.log_softmax(ground_logits(u_context, params, candidates)).data)


# ---------------------------------------------------------------- per-utterance context


class Utterance:
    """Encoded buffer plus the candidate sets shared by every step."""

    def __init__(self, params: ModelParams, tokens: Sequence[str], mentions: Sequence[EntityMention] = ()):
        self.params = params
        self.tokens = list(tokens)
        self.mentions = list(mentions)
        self.context = encode_buffer(self.tokens, params)
        self.projected = self.context @ _transpose(params["att_Wx"])
        start = initial_state(self.tokens, self.mentions, params.config.depth_limit, params.config.step_limit)
        self.start = start
        self.positions = list(start.nonterminal_candidates)
        self.position_index = {p: i for i, p in enumerate(self.positions)}
        self.predicate_matrix = self.context[self.positions] if self.positions else None
        if self.mentions:
            self.mention_matrix = ag.stack([self.mention_vector(m) for m in self.mentions])
        else:
            self.mention_matrix = None

    def mention_vector(self, mention: EntityMention) -> Tensor:
        start, end = mention.span
        return ag.mean([self.context[i] for i in range(start, end)])

    def token_vector(self, position: int) -> Tensor:
        return self.context[position]

    def mention_of(self, term: Term) -> int:
        for i, m in enumerate(self.mentions):
            if m.entity == term.label and (term.span is None or tuple(term.span) == tuple(m.span)):
                return i
        raise ValueError(f"entity {term.label!r} is not annotated")


@dataclass
class Step:
    """Scores of one transition.  ``term_logp`` is None on RED."""

    action_logp: Tensor
    term_logp: Optional[Tensor] = None
    slot_logp: Optional[Tensor] = None
    pointer_logp: Optional[Tensor] = None
    ground_logp: Optional[Tensor] = None
    latent: bool = False


@dataclass
class Hypothesis:
    state: ParserState
    node: StackNode
    actions: Tuple[Action, ...] = ()
    terms: Tuple[Term, ...] = ()
    logp: float = 0.0

    @property
    def derivation(self) -> Derivation:
        return Derivation(self.actions, self.terms)


def head_entries(state: ParserState, kind: ActionKind, utt: Utterance) -> List[str]:
    """General-head labels permitted for an NT/TER step in ``state``."""
    frames = _open_frames(state.stack)
    inside_type = bool(frames) and frames[-1][0].label in TYPE_PREDICATES
    if kind is ActionKind.NT:
        if not state.stack:
            return [ANSWER]
        if inside_type:
            return []
        out = []
        # legality depends only on arity, so probe once per arity
        fits = {
            n: term_fits(state, Action(kind), Term.general(label))
            for n, label in ((1, "count"), (2, "union"))
        }
        for label in GENERAL_HEAD:
            if label in (ANSWER, ALL, NL_SLOT, ENTITY_SLOT):
                continue
            if label in TYPE_PREDICATES and not utt.mentions:
                continue
            if fits[GENERAL_ARITY[label]]:
                out.append(label)
        if utt.positions and term_fits(state, Action(kind), Term.nl("p")):
            out.append(NL_SLOT)
        return out
    if inside_type:
        return [ENTITY_SLOT] if utt.mentions else []
    return [ALL] + ([ENTITY_SLOT] if utt.mentions else [])


def model_legal_kinds(state: ParserState, utt: Utterance) -> List[ActionKind]:
    legal = legal_actions(state)
    out = []
    for kind in ACTION_KINDS:
        if kind not in legal:
            continue
        if kind is not ActionKind.RED and not head_entries(state, kind, utt):
            continue
        out.append(kind)
    return out


class Scorer:
    """Step-level scoring and decoding for one utterance."""

    def __init__(self, params: ModelParams, utt: Utterance):
        self.params = params
        self.utt = utt

    def start(self) -> Hypothesis:
        return Hypothesis(self.utt.start, StackNode.empty(self.params))

    def features(self, hyp: Hypothesis):
        s = hyp.node.summary
        b, weights = attend(self.utt.context, s, self.params, self.utt.projected)
        return ag.concat([b, s]), s, weights

    def item_vector(self, term: Term) -> Tensor:
        p = self.params
        if term.kind is TermKind.GENERAL or term.kind is TermKind.ALL:
            return p["general_emb"][GENERAL_INDEX[term.label]]
        if term.kind is TermKind.ENTITY:
            return p["entity_emb"][p.entities[term.label]]
        if term.kind is TermKind.NL_PREDICATE:
            return p["nl_proj"] @ self.utt.token_vector(term.span[0])
        raise ValueError(f"no stack vector for {term.kind.value} term {term.label!r}")

    def advance(self, hyp: Hypothesis, action: Action, term: Optional[Term], logp: float = 0.0) -> Hypothesis:
        state = apply(hyp.state, action, term)
        if action.kind is ActionKind.RED:
            node = hyp.node
            children = []
            while isinstance(hyp.state.stack[len(hyp.state.stack) - 1 - len(children)], CompletedSubtree):
                children.append(node.vector)
                node = node.pop()
            head = node.vector
            node = node.pop().push(compose(head, children[::-1], self.params), self.params)
            terms = hyp.terms
        else:
            node = hyp.node.push(self.item_vector(term), self.params)
            terms = hyp.terms + (term,)
        return Hypothesis(state, node, hyp.actions + (action,), terms, hyp.logp + logp)

    # -- teacher forcing

    def action_logps(self, e: Tensor, hyp: Hypothesis):
        kinds = model_legal_kinds(hyp.state, self.utt)
        if not kinds:
            raise NoParse("no permitted action")
        return kinds, masked_log_probs(self.params["W_a"] @ e, [ACTION_KINDS.index(k) for k in kinds])

    def slot_logps(self, e: Tensor, hyp: Hypothesis, kind: ActionKind):
        entries = head_entries(hyp.state, kind, self.utt)
        return entries, masked_log_probs(self.params["W_p"] @ e, [GENERAL_INDEX[x] for x in entries])

    def pointer_logps(self, s: Tensor, over_mentions: bool) -> Tensor:
        matrix = self.utt.mention_matrix if over_mentions else self.utt.predicate_matrix
        return ag.log_softmax(pointer_scores(matrix, s, self.params))

    def walk(
        self,
        derivation: Derivation,
        choose: Optional[Callable[[np.ndarray], int]] = None,
    ) -> Tuple[List[Step], Hypothesis]:
        """Score ``derivation`` step by step.

        Grounded predicates in the derivation are *latent*: the ungrounded
        token is picked by ``choose`` (argmax when None) from the pointer
        distribution, and the grounding log-probability is recorded.
        """
        hyp = self.start()
        steps: List[Step] = []
        for action, term in derivation.steps():
            e, s, _ = self.features(hyp)
            kinds, alogp = self.action_logps(e, hyp)
            if action.kind not in kinds:
                raise ValueError(f"action {action.kind.value} is not permitted at step {len(steps)}")
            step = Step(alogp[kinds.index(action.kind)])
            if term is not None:
                entries, slogp = self.slot_logps(e, hyp, action.kind)
                entry = _entry_for(term)
                if entry not in entries:
                    raise ValueError(f"term {term.label!r} is not permitted at step {len(steps)}")
                step.slot_logp = slogp[entries.index(entry)]
                if entry == ENTITY_SLOT:
                    plogp = self.pointer_logps(s, over_mentions=True)
                    step.pointer_logp = plogp[self.utt.mention_of(term)]
                    term = Term.entity(term.label, tuple(self.utt.mentions[self.utt.mention_of(term)].span))
                elif entry == NL_SLOT:
                    plogp = self.pointer_logps(s, over_mentions=False)
                    if term.kind is TermKind.GROUNDED:
                        step.latent = True
                        probs = np.exp(plogp.data)
                        k = choose(probs) if choose is not None else int(np.argmax(probs))
                        step.pointer_logp = plogp[k]
                        position = self.utt.positions[k]
                        g_index = self.params.grounded.index.get(term.label)
                        if g_index is None:
                            raise ValueError(f"grounded predicate {term.label!r} is not in the vocabulary")
                        glogp = ag.log_softmax(ground_logits(self.utt.token_vector(position), self.params))
                        step.ground_logp = glogp[g_index]
                        term = Term.nl(self.utt.tokens[position], (position, position + 1))
                    else:
                        if term.span is None or term.span[0] not in self.utt.position_index:
                            raise ValueError(f"predicate {term.label!r} has no buffer position")
                        step.pointer_logp = plogp[self.utt.position_index[term.span[0]]]
                if step.pointer_logp is None:
                    step.term_logp = step.slot_logp
                else:
                    step.term_logp = step.slot_logp + step.pointer_logp
            steps.append(step)
            hyp = self.advance(hyp, action, term)
        return steps, hyp

    # -- decoding

    def expansions(self, hyp: Hypothesis):
        """All one-step continuations as ``(logp, action, term)`` triples."""
        e, s, _ = self.features(hyp)
        kinds, alogp = self.action_logps(e, hyp)
        out = []
        for ki, kind in enumerate(kinds):
            a = float(alogp.data[ki])
            if kind is ActionKind.RED:
                out.append((a, RED, None))
                continue
            entries, slogp = self.slot_logps(e, hyp, kind)
            for ei, entry in enumerate(entries):
                base = a + float(slogp.data[ei])
                if entry == NL_SLOT:
                    plogp = self.pointer_logps(s, over_mentions=False).data
                    for k, pos in enumerate(self.utt.positions):
                        term = Term.nl(self.utt.tokens[pos], (pos, pos + 1))
                        out.append((base + float(plogp[k]), Action(kind, Slot.NL_PREDICATE), term))
                elif entry == ENTITY_SLOT:
                    plogp = self.pointer_logps(s, over_mentions=True).data
                    for k, m in enumerate(self.utt.mentions):
                        term = Term.entity(m.entity, tuple(m.span))
                        out.append((base + float(plogp[k]), Action(kind, Slot.ENTITY), term))
                else:
                    term = ALL_TERM if entry == ALL else Term.general(entry)
                    out.append((base, Action(kind, Slot.ALL if entry == ALL else Slot.GENERAL), term))
        return out

    def greedy(self) -> Hypothesis:
        """Factored argmax decoding: action, then slot entry, then pointer."""
        hyp = self.start()
        while not hyp.state.finished:
            e, s, _ = self.features(hyp)
            kinds, alogp = self.action_logps(e, hyp)
            ki = int(np.argmax(alogp.data))
            kind, logp = kinds[ki], float(alogp.data[ki])
            if kind is ActionKind.RED:
                hyp = self.advance(hyp, RED, None, logp)
                continue
            entries, slogp = self.slot_logps(e, hyp, kind)
            ei = int(np.argmax(slogp.data))
            entry = entries[ei]
            logp += float(slogp.data[ei])
            if entry == NL_SLOT:
                plogp = self.pointer_logps(s, over_mentions=False).data
                k = int(np.argmax(plogp))
                pos = self.utt.positions[k]
                action, term = Action(kind, Slot.NL_PREDICATE), Term.nl(self.utt.tokens[pos], (pos, pos + 1))
                logp += float(plogp[k])
            elif entry == ENTITY_SLOT:
                plogp = self.pointer_logps(s, over_mentions=True).data
                k = int(np.argmax(plogp))
                m = self.utt.mentions[k]
                action, term = Action(kind, Slot.ENTITY), Term.entity(m.entity, tuple(m.span))
                logp += float(plogp[k])
            elif entry == ALL:
                action, term = Action(kind, Slot.ALL), ALL_TERM
            else:
                action, term = Action(kind, Slot.GENERAL), Term.general(entry)
            hyp = self.advance(hyp, action, term, logp)
        return hyp

    def beam(self, width: int) -> List[Hypothesis]:
        """Finished hypotheses, best first."""
        live = [self.start()]
        done: List[Hypothesis] = []
        while live and len(done) < width:
            pool = []
            for h_i, hyp in enumerate(live):
                for c_i, (logp, action, term) in enumerate(self.expansions(hyp)):
                    pool.append((-(hyp.logp + logp), h_i, c_i, hyp, action, term, logp))
            pool.sort(key=lambda x: (x[0], x[1], x[2]))
            live = []
            for _, _, _, hyp, action, term, logp in pool[:width]:
                nxt = self.advance(hyp, action, term, logp)
                (done if nxt.state.finished else live).append(nxt)
        if not done:
            raise NoParse("beam search found no complete derivation")
        done.sort(key=lambda h: -h.logp)
        return done

    def ground_term_distribution(self, term: Term) -> np.ndarray:
        return ground_distribution(self.utt.token_vector(term.span[0]), self.params)


def _entry_for(term: Term) -> str:
    if term.kind is TermKind.GENERAL:
        return term.label
    if term.kind is TermKind.ALL:
        return ALL
    if term.kind is TermKind.ENTITY:
        return ENTITY_SLOT
    return NL_SLOT


def sequence_probability(params: ModelParams, tokens, derivation: Derivation, mentions=()) -> float:
    """log p(U|x): action log-probs plus term log-probs at NT/TER steps."""
    with ag.no_grad():
        steps, _ = Scorer(params, Utterance(params, tokens, mentions)).walk(derivation)
    return float(sum(s.action_logp.data + (0.0 if s.term_logp is None else s.term_logp.data) for s in steps))


@dataclass
class Parse:
    ungrounded: LogicalForm
    grounded: LogicalForm
    derivation: Derivation
    logp: float
    ground_logp: float


def ground(scorer: Scorer, form: LogicalForm) -> Tuple[LogicalForm, float]:
    """Replace each natural-language predicate with its most probable KB symbol."""
    total = 0.0

    def rebuild(node: LogicalForm) -> LogicalForm:
        nonlocal total
        head = node.head
        if head.kind is TermKind.NL_PREDICATE:
            probs = scorer.ground_term_distribution(head)
            k = int(np.argmax(probs))
            total += math.log(probs[k])
            head = Term.grounded(scorer.params.grounded.items[k])
        return LogicalForm(head, tuple(rebuild(c) for c in node.children))

    return rebuild(form), total


def parse(params: ModelParams, tokens, mentions=(), beam: int = 1) -> Parse:
    with ag.no_grad():
        scorer = Scorer(params, Utterance(params, tokens, mentions))
        hyp = scorer.greedy() if beam <= 1 else scorer.beam(beam)[0]
        u = hyp.state.result
        g, glogp = ground(scorer, u)
    return Parse(u, g, hyp.derivation, hyp.logp, glogp)
