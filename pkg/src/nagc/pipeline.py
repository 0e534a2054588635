"""Synthetic MiniExpr corpus: generation, sample extraction, deduplication,
file-respecting splits and JSONL persistence."""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field

import numpy as np

from . import lang
from .grammar import Grammar, TypeEnv, type_check
from .syntax import deserialize_decisions, serialize_decisions, serialize_tokens


class PipelineError(Exception):
    pass


@dataclass
class Sample:
    file: str
    before: list[str]
    after: list[str]
    hole_type: str
    scope: dict  # name -> type
    usages: dict  # name -> list of (side, window tokens)
    target: str  # decision sequence

    _tree: object = field(default=None, repr=False, compare=False)

    def target_tree(self, g: Grammar):
        if self._tree is None or self._tree.grammar is not g:
            self._tree = deserialize_decisions(self.target, g)
        return self._tree

    def context_tokens(self):
        return self.before + self.after


@dataclass
class CorpusStats:
    n_samples: int
    token_mean: float
    token_sd: float
    step_mean: float
    step_sd: float
    fold_counts: dict


def corpus_stats(samples, g: Grammar, folds=None) -> CorpusStats:
    toks = [len(serialize_tokens(s.target_tree(g))) for s in samples]
    steps = [len(s.target.split()) for s in samples]
    return CorpusStats(
        n_samples=len(samples),
        token_mean=statistics.fmean(toks) if toks else 0.0,
        token_sd=statistics.pstdev(toks) if toks else 0.0,
        step_mean=statistics.fmean(steps) if steps else 0.0,
        step_sd=statistics.pstdev(steps) if steps else 0.0,
        fold_counts={k: len(v) for k, v in (folds or {}).items()},
    )


# ---------------------------------------------------------------------------
# Corpus generation

_NAME_POOL = {
    "int": ["i", "j", "k", "n", "cnt", "idx", "off", "len0"],
    "string": ["s", "t", "u", "name", "text", "uri"],
    "bool": ["b", "flag", "ok", "done"],
    "int[]": ["arr", "xs", "data", "buf"],
}
_INT_LITS = [str(v) for v in (0, 1, 2, 3, 5, 7, 10, 42, 100)]
_STR_LITS = ['"a"', '"b"', '"c"', '"foo"', '"bar"', '"file:"', '""']
_BOOL_LITS = ["true", "false"]


class _ExprSampler:
    """Type-directed random expression generator; type-correct by construction.

    Leaf probability is tuned so target expressions average about four tokens.
    """

    def __init__(self, rng, scope: dict):
        self.rng = rng
        self.by_type: dict[str, list[str]] = {}
        for name, ty in scope.items():
            self.by_type.setdefault(ty, []).append(name)

    def vars_of(self, ty):
        return self.by_type.get(ty, [])

    def gen(self, ty: str, depth: int = 2):
        rng = self.rng
        if ty == "int[]":
            names = self.vars_of("int[]")
            if not names:
                raise PipelineError("no int[] variable in scope")
            return lang.EVar(names[rng.integers(len(names))])
        if depth <= 0 or rng.random() < 0.52:
            return self._leaf(ty)
        return self._compound(ty, depth)

    def _leaf(self, ty):
        rng = self.rng
        names = self.vars_of(ty)
        if names and rng.random() < 0.7:
            return lang.EVar(names[rng.integers(len(names))])
        pool = {"int": _INT_LITS, "string": _STR_LITS, "bool": _BOOL_LITS}[ty]
        return lang.ELit(ty, pool[rng.integers(len(pool))])

    def _compound(self, ty, depth):
        rng = self.rng
        opts = []
        if ty == "int":
            opts += [("bin", op, "int") for op in ("+", "-", "*", "%")]
            if self.vars_of("int[]"):
                opts.append(("index",))
                opts.append(("length", "int[]"))
            if self.vars_of("string"):
                opts.append(("length", "string"))
                opts.append(("indexof",))
        elif ty == "bool":
            opts += [("bin", op, "int") for op in ("<", ">", "<=", ">=")]
            opts += [("eq", op) for op in ("==", "!=")]
            if self.vars_of("bool"):
                opts += [("bin", op, "bool") for op in ("&&", "||")]
                opts.append(("not",))
            if self.vars_of("string"):
                opts.append(("method", "StartsWith"))
                opts.append(("method", "Contains"))
        elif ty == "string":
            opts.append(("bin", "+", "string"))
            if self.vars_of("string"):
                opts.append(("substring",))
        if not opts:
            return self._leaf(ty)
        choice = opts[rng.integers(len(opts))]
        kind = choice[0]
        if kind == "bin":
            _, op, operand_ty = choice
            return lang.EBin(op, self.gen(operand_ty, depth - 1), self.gen(operand_ty, depth - 1))
        if kind == "eq":
            candidates = [t for t in ("int", "string", "bool") if self.vars_of(t)] or ["int"]
            operand_ty = candidates[rng.integers(len(candidates))]
            return lang.EBin(choice[1], self.gen(operand_ty, depth - 1), self.gen(operand_ty, depth - 1))
        if kind == "not":
            return lang.EUn("!", self.gen("bool", depth - 1))
        if kind == "index":
            return lang.EIndex(self.gen("int[]", depth - 1), self.gen("int", depth - 1))
        if kind == "length":
            return lang.ELength(self.gen(choice[1], depth - 1))
        if kind == "indexof":
            return lang.ECall(self.gen("string", depth - 1), "IndexOf", [self.gen("string", depth - 1)])
        if kind == "method":
            return lang.ECall(self.gen("string", depth - 1), choice[1], [self.gen("string", depth - 1)])
        if kind == "substring":
            return lang.ECall(
                self.gen("string", depth - 1),
                "Substring",
                [self.gen("int", depth - 1), self.gen("int", depth - 1)],
            )
        raise PipelineError(f"unknown option {choice!r}")


def _gen_file(rng, stmts_per_file: int) -> str:
    scope: dict[str, str] = {}
    used_names = set()
    lines: list[str] = []

    def fresh_name(ty):
        pool = _NAME_POOL[ty]
        for name in pool:
            if name not in used_names:
                return name
        k = 2
        while f"{pool[0]}{k}" in used_names:
            k += 1
        return f"{pool[0]}{k}"

    def declare(ty, with_init):
        name = fresh_name(ty)
        used_names.add(name)
        stmt_toks = ["var", name, ":"]
        stmt_toks += ["int", "[", "]"] if ty == "int[]" else [ty]
        if with_init and ty != "int[]":
            sampler = _ExprSampler(rng, scope)
            stmt_toks += ["="] + lang.render_expr(sampler.gen(ty, depth=2))
        stmt_toks.append(";")
        scope[name] = ty
        return stmt_toks

    # seed declarations so every type is reachable
    lines.append(declare("int", with_init=False))
    lines.append(declare("string", with_init=False))
    if rng.random() < 0.6:
        lines.append(declare("int[]", with_init=False))
    if rng.random() < 0.5:
        lines.append(declare("bool", with_init=True))

    def gen_stmts(count, depth):
        out = []
        for _ in range(count):
            roll = rng.random()
            sampler = _ExprSampler(rng, scope)
            if roll < 0.3:
                ty = ("int", "string", "bool")[rng.integers(3)]
                out.append(declare(ty, with_init=True))
            elif roll < 0.65 and scope:
                assignable = [n for n, t in scope.items() if t != "int[]"]
                if not assignable:
                    continue
                name = assignable[rng.integers(len(assignable))]
                out.append([name, "="] + lang.render_expr(sampler.gen(scope[name], 2)) + [";"])
            elif depth > 0:
                kw = "if" if roll < 0.85 else "while"
                cond = lang.render_expr(sampler.gen("bool", 2))
                # declarations inside a block are block-scoped; restore
                outer = dict(scope)
                body = gen_stmts(int(rng.integers(1, 3)), depth - 1)
                scope.clear()
                scope.update(outer)
                block = [kw, "("] + cond + [")", "{"]
                for b in body:
                    block += b
                block.append("}")
                out.append(block)
            else:
                continue
        return out

    lines.extend(gen_stmts(stmts_per_file, depth=1))
    return "\n".join(" ".join(toks) for toks in lines) + "\n"


def generate_corpus(seed: int, n_files: int, stmts_per_file: int = 8):
    """Deterministic list of (filename, text) MiniExpr programs."""
    if n_files < 1:
        raise PipelineError("n_files must be >= 1")
    files = []
    for i in range(n_files):
        rng = np.random.default_rng([seed, i])
        files.append((f"{i:04d}.mexp", _gen_file(rng, stmts_per_file)))
    return files


def write_corpus(files, outdir):
    import os

    os.makedirs(outdir, exist_ok=True)
    for name, text in files:
        with open(os.path.join(outdir, name), "w", encoding="utf-8") as f:
            f.write(text)


def read_corpus(dirpath):
    import os

    files = []
    for name in sorted(os.listdir(dirpath)):
        if name.endswith(".mexp"):
            with open(os.path.join(dirpath, name), encoding="utf-8") as f:
                files.append((name, f.read()))
    return files


# ---------------------------------------------------------------------------
# Extraction

_WINDOW = 5


def _usages_for(name, before, after):
    out = []
    for side, toks in (("before", before), ("after", after)):
        for i, t in enumerate(toks):
            if t == name:
                out.append((side, toks[max(0, i - _WINDOW) : i + _WINDOW + 1]))
    return out


def extract_samples(files, g: Grammar) -> list[Sample]:
    """One sample per top-level expression (initializer, assignment rhs,
    if/while condition) in each parseable file."""
    samples = []
    for fname, text in files:
        try:
            tokens = lang.tokenize(text)
            _, sites = lang.parse_program(tokens)
        except lang.LangError as e:
            import sys

            print(f"nagc: skipping {fname}: {e}", file=sys.stderr)
            continue
        for site in sites:
            tree = lang.expr_to_tree(site.expr, g)
            before = tokens[: site.start]
            after = tokens[site.end :]
            scope = dict(site.scope)
            usages = {n: _usages_for(n, before, after) for n in scope}
            samples.append(
                Sample(
                    file=fname,
                    before=before,
                    after=after,
                    hole_type=site.hole_type,
                    scope=scope,
                    usages=usages,
                    target=serialize_decisions(tree),
                )
            )
    return samples


def literal_vocab_from_samples(samples, g: Grammar, top_k: int = 20) -> Grammar:
    """Grammar with per-class literal vocab = top-k training spellings + UNK."""
    from collections import Counter

    counts = {cls: Counter() for cls in ("int", "string", "bool")}
    for s in samples:
        for rec in s.target.split():
            if rec.startswith("L"):
                cls, _, spelling = rec[1:].partition(":")
                counts[cls][spelling] += 1
    vocab = {}
    for cls, ctr in counts.items():
        top = sorted(ctr.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
        vocab[cls] = tuple(sp for sp, _ in top)
    return g.with_literal_vocab(vocab)


# ---------------------------------------------------------------------------
# Deduplication

def _canonical_key(s: Sample):
    order: dict[str, str] = {}

    def canon(tok):
        if tok in s.scope:
            if tok not in order:
                order[tok] = f"v{len(order)}"
            return order[tok]
        return tok

    ctx = [canon(t) for t in s.before + s.after]
    target = []
    for rec in s.target.split():
        if rec.startswith("V"):
            target.append("V" + canon(rec[1:]))
        else:
            target.append(rec)
    return (tuple(sorted(ctx)), " ".join(target))


def dedup(samples) -> list[Sample]:
    """Drop samples that are exact duplicates after renaming variables to
    occurrence-order indices; first occurrence wins."""
    seen = set()
    out = []
    for s in samples:
        key = _canonical_key(s)
        if key not in seen:
            seen.add(key)
            out.append(s)
    return out


# ---------------------------------------------------------------------------
# Splits

def split(samples, ratio=(3, 1, 1), seed: int = 0) -> dict:
    """File-respecting split: whole files assigned to folds by seeded shuffle,
    greedily targeting the ratio by sample count."""
    by_file: dict[str, list[Sample]] = {}
    for s in samples:
        by_file.setdefault(s.file, []).append(s)
    if len(by_file) < 5:
        raise PipelineError(f"need >= 5 source files, got {len(by_file)}")
    rng = np.random.default_rng(seed)
    file_order = sorted(by_file)
    rng.shuffle(file_order)
    names = ("train", "valid", "test")
    total = sum(ratio)
    targets = [r / total for r in ratio]
    counts = [0, 0, 0]
    folds = {n: [] for n in names}
    for fname in file_order:
        placed = sum(counts)
        deficits = [
            targets[i] - (counts[i] / placed if placed else 0.0) for i in range(3)
        ]
        fold = max(range(3), key=lambda i: deficits[i])
        folds[names[fold]].extend(by_file[fname])
        counts[fold] += len(by_file[fname])
    return folds


# ---------------------------------------------------------------------------
# Persistence

def write_jsonl(samples, path):
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(
                json.dumps(
                    {
                        "file": s.file,
                        "before": s.before,
                        "after": s.after,
                        "hole_type": s.hole_type,
                        "scope": s.scope,
                        "usages": {k: [[side, toks] for side, toks in v] for k, v in s.usages.items()},
                        "target": s.target,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_jsonl(path, g: Grammar | None = None) -> list[Sample]:
    """Load samples; with a grammar, validate the Sample invariants."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                s = Sample(
                    file=obj["file"],
                    before=list(obj["before"]),
                    after=list(obj["after"]),
                    hole_type=obj["hole_type"],
                    scope=dict(obj["scope"]),
                    usages={k: [(side, list(toks)) for side, toks in v] for k, v in obj["usages"].items()},
                    target=obj["target"],
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise PipelineError(f"{path}:{lineno}: malformed sample: {e}") from None
            if g is not None:
                _validate(s, g, path, lineno)
            out.append(s)
    return out


def _validate(s: Sample, g: Grammar, path, lineno):
    try:
        tree = s.target_tree(g)
    except Exception as e:
        raise PipelineError(f"{path}:{lineno}: target does not deserialize: {e}") from None
    used = {rec[1:] for rec in s.target.split() if rec.startswith("V")}
    if not used <= set(s.scope):
        raise PipelineError(f"{path}:{lineno}: target uses out-of-scope variables {used - set(s.scope)}")
    ty = type_check(tree, TypeEnv(s.scope))
    if ty != s.hole_type:
        raise PipelineError(f"{path}:{lineno}: hole type {s.hole_type} but target has type {ty}")
