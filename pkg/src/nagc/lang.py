"""Surface syntax for MiniExpr program files.

Covers tokenizing, parsing the small statement language (declarations,
assignments, if/while), converting parsed expressions to grammar derivation
trees and back, precedence-aware rendering, and building the program graph
used by the graph context encoder.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .grammar import Grammar, Kind
from .syntax import PartialAst, apply_production, bind_terminal, new_partial_ast

HOLE_TOKEN = "?HOLE?"

_TOKEN_RE = re.compile(
    r'"[^"\n]*"'
    r"|\?HOLE\?"
    r"|<=|>=|==|!=|&&|\|\|"
    r"|\d+"
    r"|[A-Za-z_]\w*"
    r"|[-+*%<>!=(){}\[\];:,.]"
)


class LangError(Exception):
    pass


def tokenize(text: str) -> list[str]:
    tokens = []
    pos = 0
    for m in _TOKEN_RE.finditer(text):
        gap = text[pos : m.start()]
        if gap.strip():
            raise LangError(f"cannot tokenize {gap.strip()!r}")
        tokens.append(m.group(0))
        pos = m.end()
    if text[pos:].strip():
        raise LangError(f"cannot tokenize {text[pos:].strip()!r}")
    return tokens


# ---------------------------------------------------------------------------
# Expression structures

@dataclass
class EVar:
    name: str
    span: tuple = None


@dataclass
class ELit:
    cls: str  # int | string | bool
    spelling: str
    span: tuple = None


@dataclass
class EBin:
    op: str
    left: object
    right: object
    span: tuple = None


@dataclass
class EUn:
    op: str
    operand: object
    span: tuple = None


@dataclass
class ELength:
    obj: object
    span: tuple = None


@dataclass
class EIndex:
    arr: object
    idx: object
    span: tuple = None


@dataclass
class ECall:
    obj: object
    method: str
    args: list
    span: tuple = None


@dataclass
class EHole:
    span: tuple = None


# Statement structures

@dataclass
class SDecl:
    name: str
    ty: str
    init: object | None
    name_index: int
    span: tuple = None


@dataclass
class SAssign:
    name: str
    expr: object
    name_index: int
    span: tuple = None


@dataclass
class SIf:
    cond: object
    then: list
    els: list | None
    span: tuple = None


@dataclass
class SWhile:
    cond: object
    body: list
    span: tuple = None


@dataclass
class ExprSite:
    """A top-level expression occurrence eligible for extraction."""

    expr: object
    start: int
    end: int
    hole_type: str
    scope: dict  # name -> type, visible at the site


_PREC = {
    "||": 1, "&&": 2, "==": 3, "!=": 3,
    "<": 4, ">": 4, "<=": 4, ">=": 4,
    "+": 5, "-": 5, "*": 6, "%": 6,
}
_UNARY_PREC = 7
_POSTFIX_PREC = 8
_ATOM_PREC = 9

_METHODS = {"StartsWith": 1, "Contains": 1, "Substring": 2, "IndexOf": 1}


class Parser:
    def __init__(self, tokens: list[str]):
        self.toks = tokens
        self.pos = 0
        self.sites: list[ExprSite] = []
        self.scopes: list[dict] = [{}]

    # -- token helpers -----------------------------------------------------

    def peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def next(self):
        if self.pos >= len(self.toks):
            raise LangError("unexpected end of input")
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def expect(self, tok):
        t = self.next()
        if t != tok:
            raise LangError(f"expected {tok!r}, got {t!r} at token {self.pos - 1}")
        return t

    def scope_snapshot(self):
        out = {}
        for s in self.scopes:
            out.update(s)
        return out

    # -- statements --------------------------------------------------------

    def parse_program(self) -> list:
        stmts = []
        while self.peek() is not None:
            stmts.append(self.parse_stmt())
        return stmts

    def parse_block(self) -> list:
        self.expect("{")
        self.scopes.append({})
        stmts = []
        while self.peek() != "}":
            stmts.append(self.parse_stmt())
        self.expect("}")
        self.scopes.pop()
        return stmts

    def parse_stmt(self):
        start = self.pos
        t = self.peek()
        if t == "var":
            self.next()
            name_index = self.pos
            name = self.next()
            self.expect(":")
            ty = self.next()
            if ty not in ("int", "bool", "string"):
                raise LangError(f"unknown type {ty!r}")
            if self.peek() == "[":
                self.next()
                self.expect("]")
                if ty != "int":
                    raise LangError("only int arrays are supported")
                ty = "int[]"
            init = None
            if self.peek() == "=":
                self.next()
                init = self.record_site(ty)
            self.expect(";")
            self.scopes[-1][name] = ty
            return SDecl(name, ty, init, name_index, (start, self.pos))
        if t == "if":
            self.next()
            self.expect("(")
            cond = self.record_site("bool")
            self.expect(")")
            then = self.parse_block()
            els = None
            if self.peek() == "else":
                self.next()
                els = self.parse_block()
            return SIf(cond, then, els, (start, self.pos))
        if t == "while":
            self.next()
            self.expect("(")
            cond = self.record_site("bool")
            self.expect(")")
            body = self.parse_block()
            return SWhile(cond, body, (start, self.pos))
        # assignment
        name_index = self.pos
        name = self.next()
        ty = self.scope_snapshot().get(name)
        if ty is None:
            raise LangError(f"assignment to undeclared variable {name!r}")
        self.expect("=")
        expr = self.record_site(ty)
        self.expect(";")
        return SAssign(name, expr, name_index, (start, self.pos))

    def record_site(self, hole_type):
        scope = self.scope_snapshot()
        start = self.pos
        expr = self.parse_expr()
        if not isinstance(expr, EHole):
            self.sites.append(ExprSite(expr, start, self.pos, hole_type, scope))
        return expr

    # -- expressions (precedence climbing) ---------------------------------

    def parse_expr(self, min_prec=1):
        start = self.pos
        left = self.parse_unary()
        while True:
            op = self.peek()
            prec = _PREC.get(op)
            if prec is None or prec < min_prec:
                return left
            self.next()
            right = self.parse_expr(prec + 1)
            left = EBin(op, left, right, (start, self.pos))

    def parse_unary(self):
        start = self.pos
        if self.peek() == "!":
            self.next()
            operand = self.parse_unary()
            return EUn("!", operand, (start, self.pos))
        return self.parse_postfix()

    def parse_postfix(self):
        start = self.pos
        e = self.parse_primary()
        while True:
            t = self.peek()
            if t == ".":
                self.next()
                name = self.next()
                if name == "Length":
                    e = ELength(e, (start, self.pos))
                elif name in _METHODS:
                    self.expect("(")
                    args = [self.parse_expr()]
                    for _ in range(_METHODS[name] - 1):
                        self.expect(",")
                        args.append(self.parse_expr())
                    self.expect(")")
                    e = ECall(e, name, args, (start, self.pos))
                else:
                    raise LangError(f"unknown method {name!r}")
            elif t == "[":
                self.next()
                idx = self.parse_expr()
                self.expect("]")
                e = EIndex(e, idx, (start, self.pos))
            else:
                return e

    def parse_primary(self):
        start = self.pos
        t = self.next()
        if t == "(":
            e = self.parse_expr()
            self.expect(")")
            return e
        if t == HOLE_TOKEN:
            return EHole((start, self.pos))
        if t in ("true", "false"):
            return ELit("bool", t, (start, self.pos))
        if t.isdigit():
            return ELit("int", t, (start, self.pos))
        if t.startswith('"'):
            return ELit("string", t, (start, self.pos))
        if re.fullmatch(r"[A-Za-z_]\w*", t):
            return EVar(t, (start, self.pos))
        raise LangError(f"unexpected token {t!r} at {self.pos - 1}")


def parse_program(tokens: list[str]):
    """Returns (statements, expression sites)."""
    p = Parser(tokens)
    stmts = p.parse_program()
    return stmts, p.sites


def parse_expression(tokens: list[str]):
    p = Parser(tokens)
    e = p.parse_expr()
    if p.peek() is not None:
        raise LangError(f"trailing tokens after expression: {p.peek()!r}")
    return e


# ---------------------------------------------------------------------------
# Expression structs <-> derivation trees

def _prod_table(g: Grammar):
    """Maps structural signatures to builtin-shaped production ids."""
    table = {}
    for p in g.productions:
        fixed = tuple(s for s in p.rhs if g.symbols[s].kind is Kind.FIXED)
        if len(p.rhs) == 1:
            sym = g.symbols[p.rhs[0]]
            if sym.kind is Kind.VARIABLE:
                table["var"] = p
            elif sym.kind is Kind.LITERAL:
                table["lit:" + sym.lit_class] = p
        elif fixed == (".", "Length"):
            table["length"] = p
        elif fixed == ("[", "]"):
            table["index"] = p
        elif len(fixed) == 1:
            table["op:" + fixed[0]] = p
        elif len(fixed) >= 4 and fixed[0] == ".":
            table["call:" + fixed[1]] = p
    return table


def expr_to_tree(e, g: Grammar) -> PartialAst:
    """Derivation tree of an expression struct, built in frontier order."""
    table = _prod_table(g)
    tree = new_partial_ast(g)
    _expand(tree, tree.root, e, g, table)
    return tree


def _expand(tree, site, e, g, table):
    def prod(key):
        try:
            return table[key]
        except KeyError:
            raise LangError(f"grammar has no production for {key!r}") from None

    if isinstance(e, EVar):
        p = prod("var")
        apply_production(tree, site, p)
        bind_terminal(tree, tree.nodes[site].children[0], e.name)
    elif isinstance(e, ELit):
        p = prod("lit:" + e.cls)
        apply_production(tree, site, p)
        bind_terminal(tree, tree.nodes[site].children[0], e.spelling)
    elif isinstance(e, EBin):
        p = prod("op:" + e.op)
        apply_production(tree, site, p)
        kids = _nonterm_children(tree, site, g)
        _expand(tree, kids[0], e.left, g, table)
        _expand(tree, kids[1], e.right, g, table)
    elif isinstance(e, EUn):
        p = prod("op:" + e.op)
        apply_production(tree, site, p)
        _expand(tree, _nonterm_children(tree, site, g)[0], e.operand, g, table)
    elif isinstance(e, ELength):
        apply_production(tree, site, prod("length"))
        _expand(tree, _nonterm_children(tree, site, g)[0], e.obj, g, table)
    elif isinstance(e, EIndex):
        apply_production(tree, site, prod("index"))
        kids = _nonterm_children(tree, site, g)
        _expand(tree, kids[0], e.arr, g, table)
        _expand(tree, kids[1], e.idx, g, table)
    elif isinstance(e, ECall):
        apply_production(tree, site, prod("call:" + e.method))
        kids = _nonterm_children(tree, site, g)
        _expand(tree, kids[0], e.obj, g, table)
        for k, a in zip(kids[1:], e.args):
            _expand(tree, k, a, g, table)
    else:
        raise LangError(f"cannot expand {type(e).__name__}")


def _nonterm_children(tree, site, g):
    return [
        c
        for c in tree.nodes[site].children
        if g.symbols[tree.nodes[c].label].kind is Kind.NONTERMINAL
    ]


def tree_to_expr(tree: PartialAst, nid=None):
    g = tree.grammar
    nid = tree.root if nid is None else nid
    node = tree.nodes[nid]
    sym = g.symbols[node.label]
    if sym.kind is Kind.VARIABLE:
        return EVar(node.binding)
    if sym.kind is Kind.LITERAL:
        return ELit(sym.lit_class, node.binding)
    prod = g.productions[node.prod_id]
    fixed = tuple(s for s in prod.rhs if g.symbols[s].kind is Kind.FIXED)
    sub = [
        tree_to_expr(tree, c)
        for c in node.children
        if g.symbols[tree.nodes[c].label].kind is not Kind.FIXED
    ]
    if len(prod.rhs) == 1:
        return sub[0]
    if fixed == (".", "Length"):
        return ELength(sub[0])
    if fixed == ("[", "]"):
        return EIndex(sub[0], sub[1])
    if len(fixed) == 1 and fixed[0] == "!":
        return EUn("!", sub[0])
    if len(fixed) == 1:
        return EBin(fixed[0], sub[0], sub[1])
    if len(fixed) >= 4 and fixed[0] == ".":
        return ECall(sub[0], fixed[1], sub[1:])
    raise LangError(f"cannot reconstruct production {prod.pid}")


# ---------------------------------------------------------------------------
# Rendering

def render_expr(e) -> list[str]:
    toks, _ = _render(e)
    return toks


def _render(e):
    if isinstance(e, EVar):
        return [e.name], _ATOM_PREC
    if isinstance(e, ELit):
        return [e.spelling], _ATOM_PREC
    if isinstance(e, EHole):
        return [HOLE_TOKEN], _ATOM_PREC
    if isinstance(e, EUn):
        toks, prec = _render(e.operand)
        if prec < _UNARY_PREC:
            toks = ["("] + toks + [")"]
        return ["!"] + toks, _UNARY_PREC
    if isinstance(e, EBin):
        op_prec = _PREC[e.op]
        lt, lp = _render(e.left)
        rt, rp = _render(e.right)
        if lp < op_prec:
            lt = ["("] + lt + [")"]
        if rp <= op_prec:
            rt = ["("] + rt + [")"]
        return lt + [e.op] + rt, op_prec
    if isinstance(e, (ELength, EIndex, ECall)):
        obj = e.obj if not isinstance(e, EIndex) else e.arr
        ot, op = _render(obj)
        if op < _POSTFIX_PREC:
            ot = ["("] + ot + [")"]
        if isinstance(e, ELength):
            return ot + [".", "Length"], _POSTFIX_PREC
        if isinstance(e, EIndex):
            it, _ = _render(e.idx)
            return ot + ["["] + it + ["]"], _POSTFIX_PREC
        toks = ot + [".", e.method, "("]
        for i, a in enumerate(e.args):
            if i:
                toks.append(",")
            at, _ = _render(a)
            toks.extend(at)
        toks.append(")")
        return toks, _POSTFIX_PREC
    raise LangError(f"cannot render {type(e).__name__}")


def render_tree_tokens(tree: PartialAst) -> list[str]:
    """Surface tokens (with disambiguating parentheses) of a complete tree."""
    return render_expr(tree_to_expr(tree))


def render_stmt(s) -> list[str]:
    if isinstance(s, SDecl):
        toks = ["var", s.name, ":"]
        toks += ["int", "[", "]"] if s.ty == "int[]" else [s.ty]
        if s.init is not None:
            toks += ["="] + render_expr(s.init)
        return toks + [";"]
    if isinstance(s, SAssign):
        return [s.name, "="] + render_expr(s.expr) + [";"]
    if isinstance(s, SIf):
        toks = ["if", "("] + render_expr(s.cond) + [")", "{"]
        for t in s.then:
            toks += render_stmt(t)
        toks.append("}")
        if s.els is not None:
            toks += ["else", "{"]
            for t in s.els:
                toks += render_stmt(t)
            toks.append("}")
        return toks
    if isinstance(s, SWhile):
        toks = ["while", "("] + render_expr(s.cond) + [")", "{"]
        for t in s.body:
            toks += render_stmt(t)
        toks.append("}")
        return toks
    raise LangError(f"cannot render statement {type(s).__name__}")


# ---------------------------------------------------------------------------
# Program graphs for the context encoder

@dataclass
class ProgramGraph:
    labels: list[str]  # per node
    child_edges: list[tuple[int, int]]
    next_token_edges: list[tuple[int, int]]
    last_use_edges: list[tuple[int, int]]
    terminals: list[int]  # node ids of surface tokens, in order (hole included)
    hole_node: int | None
    decl_nodes: dict[str, int]  # variable name -> declaration name terminal
    var_terminals: dict[str, list[int]]  # name -> occurrence terminals in order


def program_graph(tokens: list[str]) -> ProgramGraph:
    """Graph over the program text: one terminal per token, internal nodes per
    statement/expression, Child + NextToken + LastUse edges."""
    stmts, _ = parse_program(tokens)
    labels: list[str] = []
    child: list[tuple[int, int]] = []

    term_nodes = []
    for tok in tokens:
        labels.append(tok)
        term_nodes.append(len(labels) - 1)

    def internal(label):
        labels.append(label)
        return len(labels) - 1

    def attach(parent, lo, hi, subs):
        """Wire parent to sub-structures and loose tokens in span order."""
        subs = sorted(subs, key=lambda s: s[0].span[0])
        pos = lo
        for struct, node in subs:
            s0, s1 = struct.span
            for i in range(pos, s0):
                child.append((parent, term_nodes[i]))
            child.append((parent, node))
            pos = s1
        for i in range(pos, hi):
            child.append((parent, term_nodes[i]))

    def build_expr(e):
        if isinstance(e, (EVar, ELit, EHole)):
            # single-token structures map straight to their terminal
            return e, term_nodes[e.span[0]]
        node = internal(_expr_label(e))
        subs = [(s, build_expr(s)[1]) for s in _expr_children(e)]
        attach(node, e.span[0], e.span[1], subs)
        return e, node

    def build_stmt(s):
        node = internal(type(s).__name__[1:].lower())
        subs = []
        if isinstance(s, SDecl) and s.init is not None:
            subs.append((s.init, build_expr(s.init)[1]))
        elif isinstance(s, SAssign):
            subs.append((s.expr, build_expr(s.expr)[1]))
        elif isinstance(s, SIf):
            subs.append((s.cond, build_expr(s.cond)[1]))
            for t in s.then + (s.els or []):
                subs.append((t, build_stmt(t)))
        elif isinstance(s, SWhile):
            subs.append((s.cond, build_expr(s.cond)[1]))
            for t in s.body:
                subs.append((t, build_stmt(t)))
        attach(node, s.span[0], s.span[1], subs)
        return node

    root = internal("program")
    for s in stmts:
        child.append((root, build_stmt(s)))

    next_tok = [(term_nodes[i], term_nodes[i + 1]) for i in range(len(tokens) - 1)]

    decl_nodes: dict[str, int] = {}
    var_names = set()
    _collect_decls(stmts, term_nodes, decl_nodes, var_names)
    var_terms: dict[str, list[int]] = {name: [] for name in var_names}
    for i, tok in enumerate(tokens):
        if tok in var_names:
            var_terms[tok].append(term_nodes[i])
    last_use = []
    for name, occ in sorted(var_terms.items()):
        for a, b in zip(occ, occ[1:]):
            last_use.append((a, b))

    hole = None
    for i, tok in enumerate(tokens):
        if tok == HOLE_TOKEN:
            hole = term_nodes[i]
            break

    return ProgramGraph(
        labels=labels,
        child_edges=child,
        next_token_edges=next_tok,
        last_use_edges=last_use,
        terminals=term_nodes,
        hole_node=hole,
        decl_nodes=decl_nodes,
        var_terminals=var_terms,
    )


def _expr_label(e):
    if isinstance(e, EBin):
        return e.op
    if isinstance(e, EUn):
        return "!"
    if isinstance(e, ELength):
        return ".Length"
    if isinstance(e, EIndex):
        return "[]"
    if isinstance(e, ECall):
        return "." + e.method
    raise LangError(f"no label for {type(e).__name__}")


def _expr_children(e):
    if isinstance(e, EBin):
        return [e.left, e.right]
    if isinstance(e, EUn):
        return [e.operand]
    if isinstance(e, ELength):
        return [e.obj]
    if isinstance(e, EIndex):
        return [e.arr, e.idx]
    if isinstance(e, ECall):
        return [e.obj] + list(e.args)
    return []


def _collect_decls(stmts, term_nodes, decl_nodes, var_names):
    for s in stmts:
        if isinstance(s, SDecl):
            var_names.add(s.name)
            decl_nodes.setdefault(s.name, term_nodes[s.name_index])
        elif isinstance(s, SIf):
            _collect_decls(s.then, term_nodes, decl_nodes, var_names)
            if s.els:
                _collect_decls(s.els, term_nodes, decl_nodes, var_names)
        elif isinstance(s, SWhile):
            _collect_decls(s.body, term_nodes, decl_nodes, var_names)
