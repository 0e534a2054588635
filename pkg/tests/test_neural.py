import os
import tempfile

import numpy as np
import pytest

from nagc import neural as nn
from nagc.neural import (
    DegenerateMaskError,
    NeuralError,
    OptState,
    ParamStore,
    ShapeError,
    Tensor,
    adam_step,
    attention,
    backward,
    gru_cell,
    gru_param_shapes,
    init_params,
    linear,
    load_checkpoint,
    masked_softmax,
    save_checkpoint,
)

EPS = 1e-5
TOL = 1e-4


def _fd_check(params, loss_fn, samples_per_tensor=None, eps=EPS):
    """Central finite differences against the analytic gradients."""
    loss = loss_fn()
    backward(loss)
    worst = 0.0
    for name, t in params.items():
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idxs = range(flat.size)
        if samples_per_tensor is not None and flat.size > samples_per_tensor:
            idxs = np.random.default_rng(0).choice(flat.size, samples_per_tensor, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(loss_fn().data)
            flat[i] = orig - eps
            lm = float(loss_fn().data)
            flat[i] = orig
            num = (lp - lm) / (2 * eps)
            an = grad.reshape(-1)[i]
            denom = max(abs(num), abs(an), 1e-8)
            worst = max(worst, abs(num - an) / denom)
    assert worst < TOL, worst
    return worst


def test_linear_gradients():
    p = init_params({"l_W": (4, 3), "l_b": (3,)}, seed=0, dtype=np.float64)
    x = np.random.default_rng(1).normal(size=(5, 4))
    _fd_check(p, lambda: nn.tsum(nn.mul(linear(Tensor(x), p, "l"), linear(Tensor(x), p, "l"))))


def test_gru_gradients():
    p = init_params(gru_param_shapes("g", 4, 3), seed=0, dtype=np.float64)
    rng = np.random.default_rng(2)
    x, h = rng.normal(size=(2, 4)), rng.normal(size=(2, 3))
    _fd_check(p, lambda: nn.tsum(nn.tanh(gru_cell(Tensor(x), Tensor(h), p, "g"))))


def test_embedding_gradients():
    p = init_params({"emb": (6, 4)}, seed=0, dtype=np.float64)
    idx = [0, 3, 3, 5]  # repeated row exercises gradient accumulation
    _fd_check(p, lambda: nn.tsum(nn.mul(nn.rows(p["emb"], idx), nn.rows(p["emb"], idx))))


def test_attention_gradients():
    shapes = {"att_Wm": (4, 4), "att_Wk": (4, 4), "att_w": (4,), "key": (1, 4), "mem": (3, 4)}
    p = init_params(shapes, seed=3, dtype=np.float64)
    p["att_w"].data[:] = np.random.default_rng(4).normal(size=4)
    p["key"].data[:] = np.random.default_rng(5).normal(size=(1, 4))
    p["mem"].data[:] = np.random.default_rng(6).normal(size=(3, 4))

    def loss():
        out = attention(nn.rows(p["key"], 0), p["mem"], p, "att")
        return nn.tsum(nn.mul(out, out))

    _fd_check(p, loss)


def test_masked_softmax_gradients():
    p = init_params({"x": (2, 5)}, seed=7, dtype=np.float64)
    p["x"].data[:] = np.random.default_rng(8).normal(size=(2, 5))
    mask = np.array([[0, 0, -np.inf, 0, 0], [0, -np.inf, -np.inf, 0, 0]])

    def loss():
        sm = masked_softmax(p["x"], mask)
        return nn.tsum(nn.mul(sm, sm))

    _fd_check(p, loss)


def test_pooling_gradients():
    p = init_params({"x": (4, 3)}, seed=9, dtype=np.float64)
    p["x"].data[:] = np.random.default_rng(10).normal(size=(4, 3))
    _fd_check(p, lambda: nn.tsum(nn.mul(nn.max_pool_rows(p["x"]), nn.max_pool_rows(p["x"]))))
    p2 = init_params({"x": (4, 3)}, seed=9, dtype=np.float64)
    p2["x"].data[:] = np.random.default_rng(10).normal(size=(4, 3))
    _fd_check(p2, lambda: nn.tsum(nn.mean_rows(nn.mul(p2["x"], p2["x"]))))


def test_masked_log_softmax_gradients():
    p = init_params({"x": (5,)}, seed=11, dtype=np.float64)
    p["x"].data[:] = np.random.default_rng(12).normal(size=5)
    mask = np.array([0, 0, -np.inf, 0, 0])

    def loss():
        lp = nn.masked_log_softmax(p["x"], mask)
        return nn.tsum(nn.gather_elems(lp, [0, 1, 3, 4]))

    _fd_check(p, loss)


def test_logsumexp_gradients_and_stability():
    p = init_params({"x": (6,)}, seed=13, dtype=np.float64)
    p["x"].data[:] = np.random.default_rng(14).normal(size=6)
    _fd_check(p, lambda: nn.logsumexp(p["x"]))
    # extreme spread must not overflow
    big = nn.logsumexp(Tensor(np.array([1000.0, -1000.0, 999.0])))
    assert np.isfinite(big.data)
    assert abs(float(big.data) - (1000.0 + np.log(1 + np.exp(-1.0)))) < 1e-9


def test_log_softmax_matches_log_of_softmax():
    x = np.random.default_rng(15).normal(size=7)
    a = nn.log_softmax(Tensor(x.copy())).data
    b = np.log(nn.softmax(Tensor(x.copy())).data)
    assert np.max(np.abs(a - b)) < 1e-12
    # spread logits: log-domain stays finite where plain log underflows
    wide = np.array([0.0, -200.0, 50.0], dtype=np.float32)
    lp = nn.log_softmax(Tensor(wide)).data
    assert np.all(np.isfinite(lp))


def test_masked_entries_are_exact_zero():
    logits = Tensor(np.random.default_rng(0).normal(size=7))
    mask = np.zeros(7)
    mask[[1, 4]] = -np.inf
    out = masked_softmax(logits, mask)
    assert out.data[1] == 0.0 and out.data[4] == 0.0
    assert abs(out.data.sum() - 1.0) < 1e-6


def test_masking_invariance():
    # shifting masked-out logits must not change the distribution
    rng = np.random.default_rng(3)
    raw = rng.normal(size=6)
    mask = np.zeros(6)
    mask[[0, 5]] = -np.inf
    a = masked_softmax(Tensor(raw.copy()), mask).data
    shifted = raw.copy()
    shifted[[0, 5]] += 1000.0
    b = masked_softmax(Tensor(shifted), mask).data
    assert np.array_equal(a, b)


def test_degenerate_mask_raises():
    with pytest.raises(DegenerateMaskError):
        masked_softmax(Tensor(np.zeros(3)), np.full(3, -np.inf))


def test_adam_minimizes_quadratic():
    p = ParamStore()
    p.register("w", np.array([5.0, -3.0], dtype=np.float32))
    st = OptState(lr=0.1)
    for _ in range(300):
        p.zero_grad()
        w = p["w"]
        loss = nn.tsum(nn.mul(w, w))
        backward(loss)
        adam_step(p, st)
    assert np.all(np.abs(p["w"].data) < 1e-2)


def test_init_params_deterministic_and_shaped():
    a = init_params({"m_W": (8, 4), "m_b": (4,), "emb": (3, 4)}, seed=42)
    b = init_params({"m_W": (8, 4), "m_b": (4,), "emb": (3, 4)}, seed=42)
    for (n1, t1), (n2, t2) in zip(a.items(), b.items()):
        assert n1 == n2 and np.array_equal(t1.data, t2.data)
    assert np.all(a["m_b"].data == 0)
    assert np.max(np.abs(a["emb"].data)) <= 0.05
    bound = np.sqrt(6.0 / 12)
    assert np.max(np.abs(a["m_W"].data)) <= bound


def test_checkpoint_round_trip():
    p = init_params({"a_W": (3, 2), "a_b": (2,), "emb": (4, 2)}, seed=1)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        save_checkpoint(p, path)
        q = load_checkpoint(path)
        assert p.names() == q.names()
        for (_, t1), (_, t2) in zip(p.items(), q.items()):
            assert np.array_equal(t1.data, t2.data)
        with open(path, "rb") as f:
            assert f.read(4) == b"NAGC"


def test_checkpoint_rejects_bad_magic():
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "bad.ckpt")
        with open(path, "wb") as f:
            f.write(b"XXXX")
        with pytest.raises(NeuralError):
            load_checkpoint(path)


def test_shape_errors():
    with pytest.raises(ShapeError):
        nn.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        nn.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_no_grad_blocks_graph_building():
    p = init_params({"w_W": (2, 2), "w_b": (2,)}, seed=0)
    with nn.no_grad():
        out = linear(Tensor(np.ones(2)), p, "w")
    assert out._parents == ()


def test_backward_requires_scalar():
    with pytest.raises(NeuralError):
        backward(Tensor(np.zeros(3)))
