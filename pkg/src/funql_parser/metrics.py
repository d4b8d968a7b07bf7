"""Evaluation of logical forms, denotations and intermediate representations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Set

from .funql import LogicalForm, TermKind, collect, is_isomorphic, print_funql
from .kb import Denotation


@dataclass(frozen=True)
class FormMatch:
    exact: bool
    structure: bool
    # fraction of aligned terms that agree; None when structures differ
    token: Optional[float]


def logical_form_accuracy(pred: Optional[LogicalForm], gold: LogicalForm) -> FormMatch:
    if pred is None:
        return FormMatch(False, False, None)
    exact = print_funql(pred) == print_funql(gold)
    if not is_isomorphic(pred, gold):
        return FormMatch(exact, False, None)
    pairs = list(zip(pred.terms(), gold.terms()))
    agree = sum(1 for p, g in pairs if p.label == g.label)
    return FormMatch(exact, True, agree / len(pairs))


def denotation_f1(pred: Optional[Denotation], gold: Denotation) -> float:
    """Set-overlap F1; counts score 1 when equal and 0 otherwise."""
    if pred is None:
        return 0.0
    if pred.is_count or gold.is_count:
        return float(pred == gold)
    if not pred.value and not gold.value:
        return 1.0
    overlap = len(pred.value & gold.value)
    if not overlap:
        return 0.0
    precision = overlap / len(pred.value)
    recall = overlap / len(gold.value)
    return 2 * precision * recall / (precision + recall)


def predicate_agreement_f1(pred_predicates: Sequence[Set[str]], reference_predicates: Sequence[Set[str]]) -> float:
    """Micro-averaged F1 over per-utterance predicate sets."""
    if len(pred_predicates) != len(reference_predicates):
        raise ValueError("prediction and reference lists differ in length")
    tp = sum(len(set(p) & set(r)) for p, r in zip(pred_predicates, reference_predicates))
    n_pred = sum(len(p) for p in pred_predicates)
    n_ref = sum(len(r) for r in reference_predicates)
    if tp == 0:
        return 0.0
    precision, recall = tp / n_pred, tp / n_ref
    return 2 * precision * recall / (precision + recall)


def nl_predicates(form: LogicalForm) -> Set[str]:
    return {t.label for t in collect(form, [TermKind.NL_PREDICATE])}


def read_reference_predicates(path) -> List[Set[str]]:
    """One line per utterance, whitespace-separated predicate words."""
    with open(path, encoding="utf-8") as f:
        return [set(line.split()) for line in f]


@dataclass
class EvalReport:
    accuracy: float = 0.0
    exact_match: float = 0.0
    structure_match: float = 0.0
    token_match: float = 0.0
    denotation_f1: float = 0.0
    predicate_f1: Optional[float] = None
    counts: Dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"accuracy         {self.accuracy:.4f}",
            f"exact_match      {self.exact_match:.4f}",
            f"structure_match  {self.structure_match:.4f}",
            f"token_match      {self.token_match:.4f}",
            f"denotation_f1    {self.denotation_f1:.4f}",
        ]
        if self.predicate_f1 is not None:
            lines.append(f"predicate_f1     {self.predicate_f1:.4f}")
        for key in sorted(self.counts):
            lines.append(f"count.{key:<12}{self.counts[key]}")
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        out = []
        for key, value in sorted(self.as_dict().items()):
            if key == "counts":
                out += [f"counts.{k}={v}" for k, v in sorted(value.items())]
            elif value is not None:
                out.append(f"{key}={value:.6f}")
        return "\n".join(out) + "\n"


def _fraction(num: float, den: int) -> float:
    return num / den if den else 0.0


def evaluate(
    pred_forms: Sequence[Optional[LogicalForm]],
    gold_forms: Sequence[Optional[LogicalForm]],
    pred_grounded: Sequence[Optional[LogicalForm]] = (),
    gold_grounded: Sequence[Optional[LogicalForm]] = (),
    pred_denotations: Sequence[Optional[Denotation]] = (),
    gold_denotations: Sequence[Optional[Denotation]] = (),
    pred_predicates: Optional[Sequence[Set[str]]] = None,
    reference_predicates: Optional[Sequence[Set[str]]] = None,
) -> EvalReport:
    """Aggregate metrics.

    ``pred_forms``/``gold_forms`` drive the exact/structure/token triple
    (intermediate or grounded forms, whichever the caller compares);
    ``pred_grounded``/``gold_grounded`` drive accuracy.  Token match is the
    per-utterance average over structurally correct predictions.
    """
    report = EvalReport()
    n = 0
    exact = structure = 0
    token_total = 0.0
    for pred, gold in zip(pred_forms, gold_forms):
        if gold is None:
            continue
        n += 1
        match = logical_form_accuracy(pred, gold)
        exact += match.exact
        structure += match.structure
        if match.structure:
            token_total += match.token
    report.exact_match = _fraction(exact, n)
    report.structure_match = _fraction(structure, n)
    report.token_match = _fraction(token_total, structure)

    n_acc = correct = 0
    for pred, gold in zip(pred_grounded, gold_grounded):
        if gold is None:
            continue
        n_acc += 1
        correct += pred is not None and print_funql(pred) == print_funql(gold)
    report.accuracy = _fraction(correct, n_acc)

    n_den = 0
    f1 = 0.0
    for pred, gold in zip(pred_denotations, gold_denotations):
        if gold is None:
            continue
        n_den += 1
        f1 += denotation_f1(pred, gold)
    report.denotation_f1 = _fraction(f1, n_den)

    if pred_predicates is not None and reference_predicates is not None:
        report.predicate_f1 = predicate_agreement_f1(pred_predicates, reference_predicates)
    report.counts = {
        "forms": n,
        "exact": exact,
        "structure": structure,
        "grounded": n_acc,
        "correct": correct,
        "denotations": n_den,
    }
    return report
