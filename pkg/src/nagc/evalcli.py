"""Evaluation metrics, ablation comparison and the command-line interface."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass

from . import model as mo
from . import pipeline as pl
from .grammar import TypeEnv, TypeCheckError, builtin_grammar, serialize_grammar, type_check
from .syntax import deserialize_decisions, serialize_decisions
from .lang import render_tree_tokens
from .attrgraph import augment_full_tree, export_dot


class DataError(Exception):
    pass


@dataclass
class EvalReport:
    ppl_decision: float
    ppl_token: float
    well_typed: float
    well_typed_no_unk: float
    acc1: float
    acc5: float
    n: int
    config: str
    seed: int


# ---------------------------------------------------------------------------
# Metrics

def perplexity(model: mo.Model, fold) -> tuple:
    """(per-decision, per-token) perplexity under teacher forcing."""
    if not fold:
        raise DataError("empty fold")
    nll = 0.0
    decisions = 0
    tokens = 0
    for s in fold:
        loss, steps = mo.sample_loss(model, s)
        nll += loss
        decisions += len(steps)
        pr = mo.prep_sample(model, s)
        tokens += pr.n_tokens
    return math.exp(nll / decisions), math.exp(nll / tokens)


def _decode_fold(model: mo.Model, fold, width: int):
    """Beam results per sample; every hypothesis is asserted to round-trip
    through the grammar before any metric may count it."""
    results = []
    for s in fold:
        res = mo.decode_beam(model, s.before, s.after, s.scope, width=width)
        for tree, _ in res.hypotheses:
            seq = serialize_decisions(tree)
            deserialize_decisions(seq, model.grammar)  # syntactic validity
        results.append(res)
    return results


def well_typed_rate(model: mo.Model, fold, width: int = 5, decoded=None) -> tuple:
    """(rate, UNK-filtered rate) of the top-1 decodes.

    The filtered rate drops samples whose only type failure is an UNK
    literal from the denominator.
    """
    if not fold:
        raise DataError("empty fold")
    decoded = decoded or _decode_fold(model, fold, width)
    ok = 0
    unk_only = 0
    for s, res in zip(fold, decoded):
        if not res.hypotheses:
            continue
        tree = res.hypotheses[0][0]
        env = TypeEnv(s.scope)
        try:
            if type_check(tree, env) == s.hole_type:
                ok += 1
                continue
        except TypeCheckError:
            pass
        try:
            if type_check(tree, env, allow_unk=True) == s.hole_type:
                unk_only += 1
        except TypeCheckError:
            pass
    n = len(fold)
    rate = ok / n
    filtered = ok / (n - unk_only) if n > unk_only else 1.0
    return rate, filtered


def accuracy_at_k(model: mo.Model, fold, k: int, width: int = 5, decoded=None) -> float:
    """Exact production-sequence match within the top-k hypotheses."""
    if k > width:
        raise DataError(f"k={k} exceeds beam width {width}")
    decoded = decoded or _decode_fold(model, fold, width)
    hits = 0
    for s, res in zip(fold, decoded):
        top = [serialize_decisions(t) for t, _ in res.hypotheses[:k]]
        if s.target in top:
            hits += 1
    return hits / len(fold)


def evaluate(model: mo.Model, fold, width: int = 5, seed: int = 0) -> EvalReport:
    ppl_d, ppl_t = perplexity(model, fold)
    decoded = _decode_fold(model, fold, width)
    wt, wt_no_unk = well_typed_rate(model, fold, width, decoded=decoded)
    return EvalReport(
        ppl_decision=ppl_d,
        ppl_token=ppl_t,
        well_typed=wt,
        well_typed_no_unk=wt_no_unk,
        acc1=accuracy_at_k(model, fold, 1, width, decoded=decoded),
        acc5=accuracy_at_k(model, fold, min(5, width), width, decoded=decoded),
        n=len(fold),
        config=model.config.name,
        seed=seed,
    )


def ablation_comparison(train_fold, test_fold, encoder="graph", seeds=(0, 1, 2),
                        epochs=50, log=print):
    """Train all four decoder configs per seed and report held-out
    per-decision perplexity, one row per config."""
    g = pl.literal_vocab_from_samples(train_fold, builtin_grammar())
    vocab = mo.token_vocab_from_samples(train_fold)
    table = {}
    for name in ("Tree", "ASN", "Syn", "NAG"):
        row = []
        for seed in seeds:
            m = mo.Model(g, config=name, encoder=encoder, seed=seed, token_vocab=vocab)
            mo.train(m, train_fold, epochs=epochs, seed=seed)
            ppl, _ = perplexity(m, test_fold)
            row.append(ppl)
        table[name] = row
        log(f"{name:5s} " + "  ".join(f"{v:.3f}" for v in row))
    return table


# ---------------------------------------------------------------------------
# CLI

class _Parser(argparse.ArgumentParser):
    # usage problems must exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _build_parser():
    p = _Parser(prog="nagc")
    sub = p.add_subparsers(dest="cmd", required=True)

    c = sub.add_parser("gen-corpus")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--files", type=int, default=200)
    c.add_argument("--stmts", type=int, default=8)
    c.add_argument("--out", required=True)

    c = sub.add_parser("extract")
    c.add_argument("--in", dest="indir", required=True)
    c.add_argument("--out", required=True)

    c = sub.add_parser("split")
    c.add_argument("--in", dest="infile", required=True)
    c.add_argument("--ratio", default="3:1:1")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out-dir", required=True)

    c = sub.add_parser("train")
    c.add_argument("--data", required=True)
    c.add_argument("--config", choices=["tree", "asn", "syn", "nag"], default="nag")
    c.add_argument("--encoder", choices=["seq", "graph"], default="graph")
    c.add_argument("--epochs", type=int, default=50)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--batch-size", type=int, default=20)
    c.add_argument("--lr", type=float, default=1e-3)
    c.add_argument("--ckpt", required=True)

    c = sub.add_parser("evaluate")
    c.add_argument("--data", required=True)
    c.add_argument("--ckpt", required=True)
    c.add_argument("--beam", type=int, default=5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--report")

    c = sub.add_parser("complete")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--sample", required=True)
    c.add_argument("--beam", type=int, default=5)

    c = sub.add_parser("graph-dot")
    c.add_argument("--sample", required=True)
    c.add_argument("--out", required=True)

    c = sub.add_parser("grammar")
    c.add_argument("--dump", action="store_true")
    return p


_CONFIG_NAMES = {"tree": "Tree", "asn": "ASN", "syn": "Syn", "nag": "NAG"}


def run_cli(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except _UsageError as e:
        print(f"nagc: {e}", file=sys.stderr)
        return 1
    try:
        return _dispatch(args)
    except (pl.PipelineError, mo.ModelError, DataError, OSError) as e:
        print(f"nagc: {e}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    g = builtin_grammar()

    if args.cmd == "gen-corpus":
        files = pl.generate_corpus(args.seed, args.files, args.stmts)
        pl.write_corpus(files, args.out)
        print(f"wrote {len(files)} files to {args.out}")
        return 0

    if args.cmd == "extract":
        files = pl.read_corpus(args.indir)
        if not files:
            raise DataError(f"no .mexp files in {args.indir}")
        samples = pl.dedup(pl.extract_samples(files, g))
        pl.write_jsonl(samples, args.out)
        print(f"extracted {len(samples)} samples to {args.out}")
        return 0

    if args.cmd == "split":
        samples = pl.read_jsonl(args.infile, g)
        parts = args.ratio.split(":")
        if len(parts) != 3 or not all(x.isdigit() for x in parts):
            raise DataError(f"bad ratio {args.ratio!r}")
        folds = pl.split(samples, tuple(int(x) for x in parts), args.seed)
        os.makedirs(args.out_dir, exist_ok=True)
        for name, part in folds.items():
            pl.write_jsonl(part, os.path.join(args.out_dir, name + ".jsonl"))
            print(f"{name}: {len(part)}")
        return 0

    if args.cmd == "train":
        train_path = os.path.join(args.data, "train.jsonl")
        samples = pl.read_jsonl(train_path, g)
        gv = pl.literal_vocab_from_samples(samples, g)
        vocab = mo.token_vocab_from_samples(samples)
        m = mo.Model(gv, config=_CONFIG_NAMES[args.config], encoder=args.encoder,
                     seed=args.seed, token_vocab=vocab)
        valid_path = os.path.join(args.data, "valid.jsonl")
        valid = pl.read_jsonl(valid_path, gv) if os.path.exists(valid_path) else None
        mo.train(m, samples, epochs=args.epochs, batch_size=args.batch_size,
                 seed=args.seed, lr=args.lr, valid=valid,
                 log=lambda rec: print(json.dumps(rec)))
        mo.save_model(m, args.ckpt)
        print(f"saved checkpoint to {args.ckpt}")
        return 0

    if args.cmd == "evaluate":
        m = mo.load_model(args.ckpt)
        fold = pl.read_jsonl(args.data, m.grammar)
        report = evaluate(m, fold, width=args.beam, seed=args.seed)
        text = json.dumps(asdict(report))
        print(text)
        if args.report:
            with open(args.report, "w", encoding="utf-8") as f:
                f.write(text + "\n")
        return 0

    if args.cmd == "complete":
        m = mo.load_model(args.ckpt)
        fold = pl.read_jsonl(args.sample, m.grammar)
        for s in fold:
            print(f"hole in {s.file or '<sample>'} ({s.hole_type}):")
            res = mo.decode_beam(m, s.before, s.after, s.scope, width=args.beam)
            for tree, lp in res.hypotheses:
                pct = 100.0 * math.exp(lp)
                print(f"  {pct:5.1f}%  {' '.join(render_tree_tokens(tree))}")
        return 0

    if args.cmd == "graph-dot":
        samples = pl.read_jsonl(args.sample, g)
        if not samples:
            raise DataError("no samples in file")
        s = samples[0]
        tree = s.target_tree(g)
        gr = augment_full_tree(tree, sorted(s.scope))
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(export_dot(gr))
        print(f"wrote {args.out}")
        return 0

    if args.cmd == "grammar":
        print(serialize_grammar(g), end="")
        return 0

    raise DataError(f"unknown command {args.cmd!r}")


def main() -> None:
    sys.exit(run_cli())
