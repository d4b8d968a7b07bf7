"""Command-line entry point: ``funql-parser <command> [options]``.

Options may also come from a ``key = value`` config file given with
``--config``; flags on the command line win.  Exit status is 0 on success,
2 on bad input data and 3 when the parser produces no parse.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .corpus import DataError, EntityMention, Example, example_from_json, read_examples
from .funql import FunQLError, parse_funql, print_funql
from .kb import Denotation, ExecutionError, KBFormatError, SearchLimits, execute, load_kb, surrogate_search
from .metrics import evaluate, nl_predicates, read_reference_predicates
from .neural import ModelConfig, ModelParams, NoParse, Scorer, Utterance, load_embeddings, parse
from .rerank import enumerate_groundings, featurize, format_candidates, model_lexicon
from .training import TrainingConfig, TrainingError, train
from .transitions import TransitionError, format_derivation, oracle, reconstruct

EXIT_OK, EXIT_DATA, EXIT_NO_PARSE = 0, 2, 3

DEFAULTS = {
    "seed": 0,
    "beam": 1,
    "epochs": 10,
    "learning_rate": 0.001,
    "latent_samples": 5,
    "word_dim": 50,
    "hidden_dim": 100,
    "entity_dim": 100,
    "relation_dim": 100,
    "max_depth": 4,
    "max_predicates": 4,
    "type_predicates": False,
    "format": "text",
}
CASTS = {
    "seed": int,
    "beam": int,
    "epochs": int,
    "learning_rate": float,
    "latent_samples": int,
    "word_dim": int,
    "hidden_dim": int,
    "entity_dim": int,
    "relation_dim": int,
    "max_depth": int,
    "max_predicates": int,
}

def read_config(path) -> dict:
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as f:
        parser.read_string("[run]\n" + f.read())
    return {k.replace("-", "_"): v for k, v in parser["run"].items()}


def _truthy(value) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from the config file, then from built-in defaults."""
    file_values = read_config(args.config) if getattr(args, "config", None) else {}
    for key, value in file_values.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    for key, value in DEFAULTS.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    for key, cast in CASTS.items():
        setattr(args, key, cast(getattr(args, key)))
    args.type_predicates = _truthy(args.type_predicates)
    return args


def _require(path, what: str) -> Path:
    if path is None:
        raise DataError(f"missing {what} path")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} file not found: {p}")
    return p


def parse_entity(spec: str) -> EntityMention:
    """``START:END:ID[:SCORE]`` with END exclusive."""
    fields = spec.split(":")
    if len(fields) not in (3, 4):
        raise DataError(f"bad entity annotation {spec!r}; expected START:END:ID[:SCORE]")
    try:
        score = float(fields[3]) if len(fields) == 4 else 1.0
        return EntityMention((int(fields[0]), int(fields[1])), fields[2], score)
    except ValueError:
        raise DataError(f"bad entity annotation {spec!r}") from None


def _limits(args) -> SearchLimits:
    return SearchLimits(args.max_depth, args.max_predicates, args.type_predicates)


def _out(args):
    return open(args.output, "w", encoding="utf-8") if getattr(args, "output", None) else sys.stdout


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    data = read_examples(_require(args.data, "dataset"))
    kb = load_kb(_require(args.kb, "knowledge base")) if args.kb else None
    if kb is None and any(ex.form is None for ex in data):
        raise DataError("denotation-supervised examples need --kb")
    pretrained = load_embeddings(_require(args.embeddings, "embeddings"), args.word_dim) if args.embeddings else None
    model_config = ModelConfig(args.word_dim, args.hidden_dim, args.entity_dim, args.relation_dim)
    config = TrainingConfig(
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        latent_samples=args.latent_samples,
        seed=args.seed,
        search_limits=_limits(args),
    )
    lines: List[str] = []

    def record(metrics, params):
        line = f"epoch={metrics.epoch} loss={metrics.loss:.6f} examples={metrics.examples} skipped={metrics.skipped}"
        lines.append(line)
        print(line, flush=True)
        return False

    params, history = train(data, kb, config, model_config, pretrained=pretrained, callback=record)
    if args.metrics:
        Path(args.metrics).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.model:
        extra = {
            "requires_entity": all(ex.entities for ex in data),
            "seed": args.seed,
            "epochs": args.epochs,
        }
        params.save(args.model, extra)
    print(f"skipped={history[-1].skipped if history else 0}")
    return EXIT_OK


def grounding_candidates(params, tokens, mentions, result, embeddings) -> str:
    """Candidate dump for one parse: a ``#`` header line, then one line per candidate."""
    scorer = Scorer(params, Utterance(params, tokens, mentions))
    cands = enumerate_groundings(result.ungrounded, model_lexicon(scorer), base_log_likelihood=result.logp)
    for c in cands:
        c.features = featurize(c, tokens, mentions, embeddings)
    return "# " + " ".join(tokens) + "\n" + format_candidates(cands)


def _parse_one(params, extra, tokens, mentions, beam, kb) -> dict:
    if extra.get("requires_entity") and not mentions:
        raise NoParse("no entity is annotated but every training form contains one")
    result = parse(params, tokens, mentions, beam)
    out = {
        "result": result,
        "tokens": list(tokens),
        "derivation": format_derivation(result.derivation),
        "ungrounded": print_funql(result.ungrounded),
        "funql": print_funql(result.grounded),
    }
    if kb is not None:
        try:
            out["denotation"] = execute(result.grounded, kb).to_json()
        except ExecutionError as e:
            out["execution_error"] = str(e)
    return out


def _render_parse(record: dict) -> str:
    lines = ["utterance: " + " ".join(record["tokens"])]
    if "no_parse" in record:
        lines.append("no-parse: " + record["no_parse"])
        return "\n".join(lines) + "\n"
    lines.append("derivation:")
    lines += ["  " + line for line in record["derivation"].splitlines()]
    lines.append("ungrounded: " + record["ungrounded"])
    lines.append("grounded: " + record["funql"])
    if "denotation" in record:
        lines.append("denotation: " + str(Denotation.from_json(record["denotation"])))
    if "execution_error" in record:
        lines.append("execution-error: " + record["execution_error"])
    return "\n".join(lines) + "\n"


def cmd_parse(args) -> int:
    params, extra = ModelParams.load(_require(args.model, "model"))
    kb = load_kb(_require(args.kb, "knowledge base")) if args.kb else None
    if args.data:
        items = [(ex.tokens, ex.entities) for ex in read_examples(_require(args.data, "dataset"))]
    elif args.utterance:
        tokens = args.utterance.split()
        items = [(tokens, [parse_entity(s) for s in args.entity or []])]
        Example(tokens, items[0][1])  # validates spans
    else:
        raise DataError("give an utterance or --data")
    embeddings = load_embeddings(_require(args.embeddings, "embeddings")) if args.embeddings else {}
    records, dumps, failed = [], [], 0
    for tokens, mentions in items:
        try:
            record = _parse_one(params, extra, tokens, mentions, args.beam, kb)
        except NoParse as e:
            failed += 1
            records.append({"tokens": list(tokens), "no_parse": str(e)})
            continue
        result = record.pop("result")
        if args.candidates:
            dumps.append(grounding_candidates(params, tokens, mentions, result, embeddings))
        records.append(record)
    if args.candidates:
        Path(args.candidates).write_text("\n".join(dumps), encoding="utf-8")
    out = _out(args)
    try:
        for i, record in enumerate(records):
            if args.format == "json":
                out.write(json.dumps(record, sort_keys=True) + "\n")
            else:
                out.write(("\n" if i else "") + _render_parse(record))
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_NO_PARSE if failed else EXIT_OK


def cmd_execute(args) -> int:
    kb = load_kb(_require(args.kb, "knowledge base"))
    if args.funql:
        forms = [args.funql]
    else:
        forms = [line.strip() for line in Path(_require(args.data, "forms")).read_text(encoding="utf-8").splitlines()]
        forms = [f for f in forms if f]
    status = EXIT_OK
    for text in forms:
        try:
            print(f"{text}\t{execute(parse_funql(text, grounded=True), kb)}")
        except (FunQLError, ExecutionError) as e:
            print(f"{text}\terror: {e}")
            status = EXIT_DATA
    return status


def read_predictions(path) -> List[Optional[dict]]:
    """JSON-lines records or bare FunQL lines; blank or ``NO_PARSE`` lines mean no prediction."""
    out: List[Optional[dict]] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line == "NO_PARSE":
            out.append(None)
        elif line.startswith("{"):
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            out.append(None if "no_parse" in record else record)
        else:
            out.append({"funql": line})
    return out


def _maybe_form(record: Optional[dict], key: str, grounded: bool):
    if record is None or not record.get(key):
        return None
    return parse_funql(record[key], grounded=grounded)


def cmd_eval(args) -> int:
    gold = read_examples(_require(args.data, "gold dataset"))
    preds = read_predictions(_require(args.predictions, "predictions"))
    preds += [None] * (len(gold) - len(preds))
    kb = load_kb(_require(args.kb, "knowledge base")) if args.kb else None

    pred_forms, gold_forms, pred_g, gold_g, pred_d, gold_d = [], [], [], [], [], []
    for ex, record in zip(gold, preds):
        g_form = ex.form
        p_form = _maybe_form(record, "funql", True)
        if ex.ungrounded is not None:
            gold_forms.append(ex.ungrounded)
            pred_forms.append(_maybe_form(record, "ungrounded", False))
        else:
            gold_forms.append(g_form)
            pred_forms.append(p_form)
        gold_g.append(g_form)
        pred_g.append(p_form)
        if kb is not None:
            gold_d.append(ex.denotation if ex.denotation is not None else execute(g_form, kb) if g_form else None)
            try:
                pred_d.append(execute(p_form, kb) if p_form is not None else None)
            except ExecutionError:
                pred_d.append(None)

    pred_preds = ref_preds = None
    if args.reference_predicates:
        ref_preds = read_reference_predicates(_require(args.reference_predicates, "reference predicates"))
        pred_preds = [nl_predicates(f) if f is not None else set() for f in pred_forms]
        if len(ref_preds) != len(pred_preds):
            raise DataError("reference predicate file and dataset differ in length")
    report = evaluate(pred_forms, gold_forms, pred_g, gold_g, pred_d, gold_d, pred_preds, ref_preds)
    report.counts["predictions"] = sum(p is not None for p in preds[: len(gold)])
    text = {"text": report.to_text, "kv": report.to_kv, "json": lambda: report.to_json() + "\n"}[args.format]()
    out = _out(args)
    try:
        out.write(text)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _oracle_items(path: Path):
    """Yield ``(lineno, example_or_None, funql_text_or_None, error)`` for each non-blank line."""
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("{"):
            try:
                yield lineno, example_from_json(json.loads(stripped)), None, None
            except (json.JSONDecodeError, DataError, FunQLError) as e:
                yield lineno, None, None, str(e)
        else:
            yield lineno, None, stripped, None


def cmd_oracle_check(args) -> int:
    path = _require(args.data, "dataset")
    total = ok = 0
    errors = []
    for lineno, ex, text, error in _oracle_items(path):
        total += 1
        if error is None:
            try:
                if ex is not None:
                    forms = [f for f in (ex.ungrounded, ex.form) if f is not None]
                    for form in forms:
                        if reconstruct(oracle(form, ex.tokens, ex.entities)) != form:
                            raise TransitionError("round trip changed the form")
                else:
                    form = parse_funql(text)
                    if reconstruct(oracle(form)) != form:
                        raise TransitionError("round trip changed the form")
            except (FunQLError, TransitionError) as e:
                error = str(e)
        if error is None:
            ok += 1
        else:
            errors.append(f"line {lineno}: {error}")
    print(f"total={total}")
    print(f"round_trip={ok}")
    print(f"errors={len(errors)}")
    for e in errors:
        print(e)
    return EXIT_DATA if errors else EXIT_OK


def cmd_surrogate_search(args) -> int:
    kb = load_kb(_require(args.kb, "knowledge base"))
    limits = _limits(args)
    if args.data:
        examples = read_examples(_require(args.data, "dataset"))
    elif args.utterance and args.denotation is not None:
        tokens = args.utterance.split()
        examples = [
            Example(tokens, [parse_entity(s) for s in args.entity or []], denotation=Denotation.from_json(json.loads(args.denotation)))
        ]
    else:
        raise DataError("give --data, or an utterance with --denotation")
    for i, ex in enumerate(examples):
        y = ex.denotation if ex.denotation is not None else execute(ex.form, kb)
        forms = surrogate_search(ex.tokens, ex.entities, y, kb, limits)
        if i:
            print()
        print(f"utterance: {ex.text}")
        print(f"denotation: {y}")
        print(f"surrogates={len(forms)}")
        for f in forms:
            print("  " + print_funql(f))
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="funql-parser", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, kb=True):
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--seed", type=int)
        if kb:
            p.add_argument("--kb", help="knowledge-base file")
        p.add_argument("--output", "-o", help="write the report here instead of stdout")

    def limits(p):
        p.add_argument("--max-depth", type=int, dest="max_depth")
        p.add_argument("--max-predicates", type=int, dest="max_predicates")
        p.add_argument("--type-predicates", action="store_const", const=True, dest="type_predicates")

    p = sub.add_parser("train", help="train a parser")
    common(p)
    limits(p)
    p.add_argument("--data", help="training set (JSON lines)")
    p.add_argument("--model", help="checkpoint to write")
    p.add_argument("--metrics", help="per-epoch metrics log to write")
    p.add_argument("--embeddings", help="pretrained word vectors")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--latent-samples", type=int, dest="latent_samples")
    for name in ("word", "hidden", "entity", "relation"):
        p.add_argument(f"--{name}-dim", type=int, dest=f"{name}_dim")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("parse", help="parse utterances with a trained model")
    common(p)
    p.add_argument("utterance", nargs="?", help="whitespace-tokenized utterance")
    p.add_argument("--entity", action="append", help="START:END:ID[:SCORE], repeatable")
    p.add_argument("--data", help="parse every utterance in a dataset")
    p.add_argument("--model", help="checkpoint")
    p.add_argument("--beam", type=int)
    p.add_argument("--format", choices=("text", "json"))
    p.add_argument("--candidates", help="write scored grounding candidates here")
    p.add_argument("--embeddings", help="word vectors for the candidate similarity features")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("execute", help="execute grounded forms")
    common(p)
    p.add_argument("funql", nargs="?")
    p.add_argument("--data", help="file with one grounded form per line")
    p.set_defaults(func=cmd_execute)

    p = sub.add_parser("eval", help="score predictions against gold data")
    common(p)
    p.add_argument("--data", help="gold dataset (JSON lines)")
    p.add_argument("--predictions", help="predictions: JSON lines or one FunQL per line")
    p.add_argument("--reference-predicates", dest="reference_predicates")
    p.add_argument("--format", choices=("text", "kv", "json"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle-check", help="oracle/reconstruct round trip over a corpus")
    common(p, kb=False)
    p.add_argument("data", nargs="?")
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("surrogate-search", help="grounded forms reaching a denotation")
    common(p)
    limits(p)
    p.add_argument("utterance", nargs="?")
    p.add_argument("--entity", action="append")
    p.add_argument("--denotation", help='JSON: a list of entity ids or an integer')
    p.add_argument("--data")
    p.set_defaults(func=cmd_surrogate_search)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        resolve(args)
        return args.func(args)
    except NoParse as e:
        print(f"no-parse: {e}", file=sys.stderr)
        return EXIT_NO_PARSE
    except (DataError, FunQLError, KBFormatError, ExecutionError, TransitionError, TrainingError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
