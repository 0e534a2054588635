import numpy as np
import pytest

from conftest import random_tree
from nagc import lang as L
from nagc import syntax as S
from nagc.grammar import Kind
from nagc.syntax import (
    MalformedSequenceError,
    SyntaxError_,
    apply_production,
    bind_terminal,
    deserialize_decisions,
    last_sibling,
    last_token,
    last_use,
    new_partial_ast,
    next_expansion_site,
    replay,
    serialize_decisions,
    serialize_tokens,
    trees_equal,
)


def _tree(g, text):
    return L.expr_to_tree(L.parse_expression(L.tokenize(text)), g)


def test_frontier_order_is_leftmost(g):
    t = new_partial_ast(g)
    assert next_expansion_site(t) == 0
    apply_production(t, 0, g.productions[5])  # Expr - Expr
    # left Expr child first, not the right one
    site = next_expansion_site(t)
    assert t.nodes[site].label == "Expr"
    assert site == t.nodes[0].children[0]


def test_apply_production_errors(g):
    t = new_partial_ast(g)
    apply_production(t, 0, g.productions[0])
    with pytest.raises(SyntaxError_):
        apply_production(t, 0, g.productions[0])  # already expanded
    var_leaf = t.nodes[0].children[0]
    with pytest.raises(SyntaxError_):
        apply_production(t, var_leaf, g.productions[0])  # not a nonterminal


def test_bind_terminal_errors(g):
    t = new_partial_ast(g)
    apply_production(t, 0, g.productions[0])
    leaf = t.nodes[0].children[0]
    bind_terminal(t, leaf, "i")
    with pytest.raises(SyntaxError_):
        bind_terminal(t, leaf, "j")
    with pytest.raises(SyntaxError_):
        bind_terminal(t, 0, "i")


def test_replay_reproduces_tree(g):
    rng = np.random.default_rng(4)
    for _ in range(50):
        t = random_tree(g, rng, ["i", "j"])
        assert trees_equal(t, replay(g, t.history))


def test_decision_round_trip(g):
    rng = np.random.default_rng(5)
    for _ in range(50):
        t = random_tree(g, rng, ["x"])
        seq = serialize_decisions(t)
        assert trees_equal(t, deserialize_decisions(seq, g))


def test_decision_record_format(g):
    t = _tree(g, "i - j")
    assert serialize_decisions(t) == "P5 P0 Vi P0 Vj"


def test_serialize_tokens(g):
    assert serialize_tokens(_tree(g, "i - j")) == ["i", "-", "j"]
    assert serialize_tokens(_tree(g, 's . Substring ( 0 , i )')) == [
        "s", ".", "Substring", "(", "0", ",", "i", ")"
    ]


@pytest.mark.parametrize(
    "seq",
    [
        "",
        "P99",
        "Pnope",
        "Vx",  # site is a nonterminal, not a variable slot
        "P5 P0 Vi P0",  # incomplete
        "P0 Vi P0 Vj",  # continues past completion
        "P0 Lint:3",  # literal record at a variable slot
        "Q1",
    ],
)
def test_deserialize_rejects_malformed(g, seq):
    with pytest.raises(MalformedSequenceError):
        deserialize_decisions(seq, g)


def _brute_last_token(t, v):
    # linear scan over leaves, independent of the production-path logic
    prev = None
    for nid in t.leaves():
        if nid == v:
            return prev
        node = t.nodes[nid]
        sym = t.grammar.symbols[node.label]
        if sym.kind is Kind.FIXED or node.binding is not None:
            prev = nid
    return prev


def test_last_token_matches_brute_force(g):
    rng = np.random.default_rng(6)
    for _ in range(30):
        t = random_tree(g, rng, ["i", "j", "k"])
        for nid in t.leaves():
            assert last_token(t, nid) == _brute_last_token(t, nid)


def test_last_use_chain(g):
    t = _tree(g, "i - i")
    leaves = [n for n in t.leaves() if t.nodes[n].binding == "i"]
    first, second = leaves
    assert last_use(t, first, ["i"]) == ("ctx", "i")
    assert last_use(t, second, ["i"]) == ("ast", first)
    assert last_use(t, first, []) is None


def test_last_use_requires_bound_variable(g):
    t = _tree(g, "1 + 2")
    lit = t.leaves()[0]
    with pytest.raises(SyntaxError_):
        last_use(t, lit, [])


def test_last_sibling(g):
    t = _tree(g, "i - j")
    kids = t.nodes[0].children
    assert last_sibling(t, kids[0]) is None
    assert last_sibling(t, kids[1]) == kids[0]
    assert last_sibling(t, 0) is None


def test_copy_isolates_mutation(g):
    t = new_partial_ast(g)
    apply_production(t, 0, g.productions[5])
    c = t.copy()
    apply_production(c, next_expansion_site(c), g.productions[0])
    assert len(c.nodes) == len(t.nodes) + 1
    assert len(c.history) == len(t.history) + 1
