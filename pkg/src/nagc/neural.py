"""Dense tensor core with reverse-mode autodiff, plus the layers the model
needs: linear maps, GRU cell, additive attention, masked softmax, pooling,
embeddings, an Adam optimizer and a binary checkpoint format.

Compute is 32-bit by default; gradient checks build 64-bit parameters and the
engine follows the dtype of its inputs.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np


class NeuralError(Exception):
    pass


class ShapeError(NeuralError):
    pass


class DegenerateMaskError(NeuralError):
    pass


_grad_enabled = [True]


@contextmanager
def no_grad():
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def grad_enabled() -> bool:
    return _grad_enabled[-1]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad=False, parents=(), bw=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._bw = bw

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _track(*args):
    return grad_enabled() and any(
        isinstance(a, Tensor) and (a.requires_grad or a._parents) for a in args
    )


def _make(data, parents, bw):
    if _track(*parents):
        return Tensor(data, parents=tuple(parents), bw=bw)
    return Tensor(data)


def _accum(t: Tensor, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# Primitive operations

def _check_same_shape(a, b, what):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{what}: shapes {a.data.shape} vs {b.data.shape}")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape and a.data.ndim == 2 and b.data.ndim == 1:
        # row-broadcast bias
        if a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(f"add: shapes {a.data.shape} vs {b.data.shape}")
        def bw(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0))
        return _make(a.data + b.data, (a, b), bw)
    _check_same_shape(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mul")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def scale(a, s: float):
    a = as_tensor(a)

    def bw(g):
        _accum(a, g * s)

    return _make(a.data * s, (a,), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} vs {b.data.shape}")

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 2:
            _accum(a, g @ bd.T)
            _accum(b, np.outer(ad, g))
        elif ad.ndim == 2 and bd.ndim == 2:
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)
        elif ad.ndim == 2 and bd.ndim == 1:
            _accum(a, np.outer(g, bd))
            _accum(b, ad.T @ g)
        else:
            _accum(a, g * bd)
            _accum(b, g * ad)

    return _make(a.data @ b.data, (a, b), bw)


def transpose(a):
    a = as_tensor(a)

    def bw(g):
        _accum(a, g.T)

    return _make(a.data.T, (a,), bw)


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    sizes = [p.data.shape[axis] for p in parts]

    def bw(g):
        off = 0
        for p, s in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(off, off + s)
            _accum(p, g[tuple(sl)])
            off += s

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def sigmoid(a):
    a = as_tensor(a)
    # exp overflow on large negatives saturates to exactly 0, which is fine
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bw)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), bw)


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0)

    def bw(g):
        _accum(a, g * (a.data > 0))

    return _make(out, (a,), bw)


def log(a):
    a = as_tensor(a)

    def bw(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def tsum(a):
    a = as_tensor(a)

    def bw(g):
        _accum(a, np.full_like(a.data, g))

    return _make(a.data.sum(), (a,), bw)


def max_pool_rows(a):
    """Elementwise max over the rows of a 2D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.data.shape[0] == 0:
        raise ShapeError(f"max_pool_rows needs a nonempty 2D input, got {a.data.shape}")
    idx = np.argmax(a.data, axis=0)

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[idx, np.arange(a.data.shape[1])] = g
        _accum(a, ga)

    return _make(a.data[idx, np.arange(a.data.shape[1])], (a,), bw)


def mean_rows(a):
    a = as_tensor(a)
    n = a.data.shape[0]

    def bw(g):
        _accum(a, np.repeat(g[None, :], n, axis=0) / n)

    return _make(a.data.mean(axis=0), (a,), bw)


def rows(a, idx):
    """Gather rows of a 2D tensor (embedding lookup / graph gather)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _make(a.data[idx], (a,), bw)


def scatter_rows(n, idx, src):
    """(n, d) tensor with src rows summed into positions idx."""
    src = as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n, src.data.shape[1]), dtype=src.data.dtype)
    np.add.at(out, idx, src.data)

    def bw(g):
        _accum(src, g[idx])

    return _make(out, (src,), bw)


def stack_rows(parts):
    """Stack 1D tensors into a (k, d) matrix."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("stack_rows of zero tensors")

    def bw(g):
        for i, p in enumerate(parts):
            _accum(p, g[i])

    return _make(np.stack([p.data for p in parts]), parts, bw)


def gather_elems(a, idx):
    """Gather elements of a 1D tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _make(a.data[idx], (a,), bw)


def softmax(a):
    return masked_softmax(a, np.zeros(as_tensor(a).data.shape))


def masked_softmax(logits, mask):
    """softmax(logits + mask); mask entries are 0 or -inf. Masked entries are
    exactly zero in the output and receive zero gradient."""
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=logits.data.dtype)
    if mask.shape != logits.data.shape:
        raise ShapeError(f"mask shape {mask.shape} vs logits {logits.data.shape}")
    x = logits.data + mask
    hi = np.max(x, axis=-1, keepdims=True)
    if not np.all(np.isfinite(hi)):
        raise DegenerateMaskError("all entries masked")
    e = np.exp(x - hi)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        _accum(logits, p * (g - dot))

    return _make(p, (logits,), bw)


def masked_log_softmax(logits, mask):
    """Log-domain masked softmax; stable for widely spread logits. Masked
    entries come out as -inf and receive zero gradient."""
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=logits.data.dtype)
    if mask.shape != logits.data.shape:
        raise ShapeError(f"mask shape {mask.shape} vs logits {logits.data.shape}")
    x = logits.data + mask
    hi = np.max(x, axis=-1, keepdims=True)
    if not np.all(np.isfinite(hi)):
        raise DegenerateMaskError("all entries masked")
    lse = hi + np.log(np.sum(np.exp(x - hi), axis=-1, keepdims=True))
    out = x - lse
    support = np.isfinite(mask)
    p = np.where(support, np.exp(out), 0.0)

    def bw(g):
        g = np.where(support, g, 0.0)
        gsum = np.sum(g, axis=-1, keepdims=True)
        _accum(logits, g - p * gsum)

    return _make(out, (logits,), bw)


def log_softmax(a):
    return masked_log_softmax(a, np.zeros(as_tensor(a).data.shape))


def logsumexp(a):
    """Stable scalar log-sum-exp of a 1D tensor; tolerates -inf entries."""
    a = as_tensor(a)
    hi = float(np.max(a.data))
    if not np.isfinite(hi):
        out = hi  # all -inf
        w = np.zeros_like(a.data)
    else:
        out = hi + np.log(np.sum(np.exp(a.data - hi)))
        w = np.exp(a.data - out)

    def bw(g):
        _accum(a, g * w)

    return _make(np.asarray(out, dtype=a.data.dtype), (a,), bw)


_OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": concat,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "sum": tsum,
    "max_pool_rows": max_pool_rows,
    "softmax": softmax,
}


def tensor_eval(op: str, *args):
    """Uniform entry point over the primitive op set."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise NeuralError(f"unknown op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# Backward pass

def backward(loss: Tensor):
    if loss.data.size != 1:
        raise NeuralError(f"loss must be scalar, got shape {loss.data.shape}")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, done = stack.pop()
        if done:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for t in reversed(topo):
        if t._bw is not None and t.grad is not None:
            t._bw(t.grad)


# ---------------------------------------------------------------------------
# Parameters

class ParamStore:
    """Named parameter map with deterministic (sorted) iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, data) -> Tensor:
        if name in self._params:
            raise NeuralError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(data), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise NeuralError(f"unregistered parameter {name!r}") from None

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def zero_grad(self):
        for _, t in self.items():
            t.grad = None

    def astype(self, dtype):
        out = ParamStore()
        for n, t in self.items():
            out.register(n, t.data.astype(dtype))
        return out

    def clone(self):
        out = ParamStore()
        for n, t in self.items():
            out.register(n, t.data.copy())
        return out


def init_params(shapes: dict[str, tuple], seed: int, dtype=np.float32) -> ParamStore:
    """Glorot-uniform matrices, zero biases (rank-1), uniform(+-0.05)
    embeddings (names containing 'emb'). Deterministic per seed."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name in sorted(shapes):
        shape = tuple(shapes[name])
        if len(shape) == 1:
            data = np.zeros(shape, dtype=dtype)
        elif "emb" in name:
            data = rng.uniform(-0.05, 0.05, size=shape).astype(dtype)
        else:
            fan_in, fan_out = shape[-2], shape[-1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        store.register(name, data)
    return store


# ---------------------------------------------------------------------------
# Layers

def linear(x, p: ParamStore, prefix: str):
    return add(matmul(x, p[prefix + "_W"]), p[prefix + "_b"])


def gru_cell(x, h, p: ParamStore, prefix: str = "g"):
    """Standard GRU: works on vectors or on (N, d) batches row-wise."""
    x, h = as_tensor(x), as_tensor(h)
    z = sigmoid(add(add(matmul(x, p[prefix + "_Wz"]), matmul(h, p[prefix + "_Uz"])), p[prefix + "_bz"]))
    r = sigmoid(add(add(matmul(x, p[prefix + "_Wr"]), matmul(h, p[prefix + "_Ur"])), p[prefix + "_br"]))
    hh = tanh(add(add(matmul(x, p[prefix + "_Wh"]), matmul(mul(r, h), p[prefix + "_Uh"])), p[prefix + "_bh"]))
    ones = Tensor(np.ones_like(z.data))
    return add(mul(sub(ones, z), h), mul(z, hh))


def gru_param_shapes(prefix: str, x_dim: int, h_dim: int) -> dict:
    shapes = {}
    for gate in ("z", "r", "h"):
        shapes[f"{prefix}_W{gate}"] = (x_dim, h_dim)
        shapes[f"{prefix}_U{gate}"] = (h_dim, h_dim)
        shapes[f"{prefix}_b{gate}"] = (h_dim,)
    return shapes


def attention(key, memories, p: ParamStore, prefix: str = "att"):
    """Additive attention: score_i = w . tanh(Wk key + Wm mem_i)."""
    memories = as_tensor(memories)
    if memories.data.ndim != 2 or memories.data.shape[0] == 0:
        raise NeuralError("attention requires at least one memory row")
    proj = tanh(add(matmul(memories, p[prefix + "_Wm"]), matmul(as_tensor(key), p[prefix + "_Wk"])))
    scores = matmul(proj, p[prefix + "_w"])
    weights = softmax(scores)
    return matmul(weights, memories)


# ---------------------------------------------------------------------------
# Optimizer

class OptState:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: ParamStore, st: OptState):
    """One adaptive-moment update from the gradients stored on params."""
    st.step += 1
    t = st.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape drift on {name!r}")
        m = st.m.setdefault(name, np.zeros_like(p.data))
        v = st.v.setdefault(name, np.zeros_like(p.data))
        m[...] = st.beta1 * m + (1 - st.beta1) * g
        v[...] = st.beta2 * v + (1 - st.beta2) * g * g
        mhat = m / (1 - st.beta1**t)
        vhat = v / (1 - st.beta2**t)
        p.data = p.data - (st.lr * mhat / (np.sqrt(vhat) + st.eps)).astype(p.data.dtype)
    return params


# ---------------------------------------------------------------------------
# Checkpoints

_MAGIC = b"NAGC"
_VERSION = 1


def save_checkpoint(params: ParamStore, path: str):
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(params)))
        for name, t in params.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            data = t.data.astype("<f4")
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path: str) -> ParamStore:
    store = ParamStore()
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise NeuralError("bad checkpoint magic")
        version, count = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise NeuralError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            store.register(name, data.copy())
    return store
