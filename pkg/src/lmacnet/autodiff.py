"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Tensors wrap real-valued numpy arrays (float32 by default, float64 for
reference-precision runs). Operations executed while a Graph is active
append backward closures to it; Tensor.backward() replays those closures
in reverse append order, accumulating gradients additively into every
tensor with requires_grad set.

The op set is deliberately small: exactly what the encoder, losses and
scoring head need. Broadcasting is restricted to scalar-with-tensor;
anything richer raises.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "RngState",
    "use_graph",
    "no_grad",
    "active_graph",
    "set_default_dtype",
    "get_default_dtype",
    "precision",
    "set_checked",
    "checked",
    "constant",
    "zeros",
    "matmul",
    "transpose",
    "add",
    "add_bias",
    "mean_axis0",
    "sub",
    "mul",
    "relu",
    "abs_",
    "square",
    "mean",
    "sum_",
    "concat",
    "slice_axis0",
    "softmax",
    "dropout",
    "layer_norm",
    "attention_core",
    "MhaParams",
    "multi_head_attention",
    "check_gradients",
]

_DTYPE = np.float32
_CHECKED = False
_GRAPH: "Graph | None" = None


def set_default_dtype(dtype) -> None:
    """Set the storage dtype for tensors created afterwards (float32/float64)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (e.g. float64 for oracle runs)."""
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_checked(flag: bool) -> None:
    """Enable finite-value checking of every op output (slower, for tests)."""
    global _CHECKED
    _CHECKED = bool(flag)


def checked() -> bool:
    return _CHECKED


class Graph:
    """Append-only record of backward closures for one forward pass."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list = []

    def __len__(self):
        return len(self.nodes)

    def backward_from(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not np.all(np.isfinite(loss.data)):
            raise FloatingPointError("backward from non-finite loss")
        loss.grad = np.ones_like(loss.data)
        # reverse append order == reverse topological order for define-by-run
        for fn in reversed(self.nodes):
            fn()


@contextlib.contextmanager
def use_graph(graph: "Graph | None"):
    global _GRAPH
    prev = _GRAPH
    _GRAPH = graph
    try:
        yield graph
    finally:
        _GRAPH = prev


def no_grad():
    """Context in which ops run without recording backward closures."""
    return use_graph(None)


def active_graph() -> "Graph | None":
    return _GRAPH


class Tensor:
    """Dense real tensor with optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Run reverse-mode accumulation through the active graph."""
        g = _GRAPH
        if g is None:
            raise RuntimeError("backward() outside an active Graph")
        g.backward_from(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; python scalars stay constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Tensor:
    """Wrap a value as a non-trainable tensor."""
    return Tensor(value, requires_grad=False)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE))


def _result(data, *parents) -> Tensor:
    if _CHECKED and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values in op output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    rg = False
    for p in parents:
        if p.requires_grad:
            rg = True
            break
    out.requires_grad = rg
    return out


def _record(out: Tensor, fn) -> None:
    if _GRAPH is not None and out.requires_grad:
        _GRAPH.nodes.append(fn)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    # scalar-with-tensor is the only permitted broadcast
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not match")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with dA = dC @ B^T, dB = A^T @ dC."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner extents disagree: {a.data.shape} @ {b.data.shape}")
    out = _result(a.data @ b.data, a, b)

    if out.requires_grad:
        def _backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)
        _record(out, _backward)
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got {x.data.shape}")
    out = _result(x.data.T, x)
    if out.requires_grad:
        def _backward():
            if out.grad is not None and x.requires_grad:
                _accum(x, out.grad.T)
        _record(out, _backward)
    return out


def _scalar_reduce(g: np.ndarray, shape) -> np.ndarray:
    return np.sum(g).reshape(shape) if g.shape != shape else g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "add")
    out = _result(a.data + b.data, a, b)
    if out.requires_grad:
        def _backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, _scalar_reduce(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _scalar_reduce(g, b.data.shape))
        _record(out, _backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "sub")
    out = _result(a.data - b.data, a, b)
    if out.requires_grad:
        def _backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, _scalar_reduce(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _scalar_reduce(-g, b.data.shape))
        _record(out, _backward)
    return out


def mul(a, b) -> Tensor:
    """Elementwise (or scalar) product."""
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        # constant scale: no gradient to the scalar
        a = _as_tensor(a)
        c = float(b)
        out = _result(a.data * c, a)
        if out.requires_grad:
            def _backward():
                if out.grad is not None and a.requires_grad:
                    _accum(a, out.grad * c)
            _record(out, _backward)
        return out
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "mul")
    out = _result(a.data * b.data, a, b)
    if out.requires_grad:
        def _backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, _scalar_reduce(g * b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _scalar_reduce(g * a.data, b.data.shape))
        _record(out, _backward)
    return out


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0.0), x)
    if out.requires_grad:
        def _backward():
            if out.grad is not None and x.requires_grad:
                _accum(x, out.grad * (x.data > 0))
        _record(out, _backward)
    return out


def abs_(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at x == 0 (np.sign convention)."""
    out = _result(np.abs(x.data), x)
    if out.requires_grad:
        def _backward():
            if out.grad is not None and x.requires_grad:
                _accum(x, out.grad * np.sign(x.data))
        _record(out, _backward)
    return out


def square(x: Tensor) -> Tensor:
    out = _result(x.data * x.data, x)
    if out.requires_grad:
        def _backward():
            if out.grad is not None and x.requires_grad:
                _accum(x, out.grad * (2.0 * x.data))
        _record(out, _backward)
    return out


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = _result(np.mean(x.data).reshape(()), x)
    if out.requires_grad:
        def _backward():
            if out.grad is not None and x.requires_grad:
                _accum(x, np.full_like(x.data, float(out.grad) / n))
        _record(out, _backward)
    return out


def sum_(x: Tensor) -> Tensor:
    out = _result(np.sum(x.data).reshape(()), x)
    if out.requires_grad:
        def _backward():
            if out.grad is not None and x.requires_grad:
                _accum(x, np.full_like(x.data, float(out.grad)))
        _record(out, _backward)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d bias vector to every row of x[..., d]."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"add_bias: bias {b.data.shape} does not fit input {x.data.shape}")
    out = _result(x.data + b.data, x, b)
    if out.requires_grad:
        def _backward():
            g = out.grad
            if g is None:
                return
            if x.requires_grad:
                _accum(x, g)
            if b.requires_grad:
                _accum(b, np.sum(g, axis=tuple(range(g.ndim - 1))))
        _record(out, _backward)
    return out


def mean_axis0(x: Tensor) -> Tensor:
    """Mean over the leading axis (e.g. attention heads or decoder layers)."""
    n = x.data.shape[0]
    if n == 1:
        out = _result(x.data.reshape(x.data.shape[1:]), x)
        if out.requires_grad:
            def _backward_squeeze():
                g = out.grad
                if g is not None and x.requires_grad:
                    _accum(x, g.reshape(x.data.shape))
            _record(out, _backward_squeeze)
        return out
    out = _result(x.data.mean(axis=0), x)
    if out.requires_grad:
        def _backward():
            g = out.grad
            if g is not None and x.requires_grad:
                _accum(x, np.broadcast_to(g / n, x.data.shape))
        _record(out, _backward)
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate along the last axis; backward splits the gradient exactly."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of empty list")
    nd = tensors[0].data.ndim
    if axis not in (-1, nd - 1):
        raise ValueError("concat supports the last axis only")
    out = _result(np.concatenate([t.data for t in tensors], axis=-1), *tensors)
    if out.requires_grad:
        extents = [t.data.shape[-1] for t in tensors]
        def _backward():
            g = out.grad
            if g is None:
                return
            offset = 0
            for t, w in zip(tensors, extents):
                if t.requires_grad:
                    _accum(t, g[..., offset:offset + w])
                offset += w
        _record(out, _backward)
    return out


def slice_axis0(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 0; gradient scatters back into place."""
    out = _result(x.data[start:stop], x)
    if out.requires_grad:
        def _backward():
            if out.grad is None or not x.requires_grad:
                return
            g = np.zeros_like(x.data)
            g[start:stop] = out.grad
            _accum(x, g)
        _record(out, _backward)
    return out


def _temperature_value(temperature) -> float:
    value = float(temperature.data.reshape(())) if isinstance(temperature, Tensor) else float(temperature)
    if value <= 0.0:
        raise ValueError(f"temperature must be positive, got {value}")
    return value


def softmax(x: Tensor, temperature=1.0) -> Tensor:
    """Softmax along the last axis of x/temperature, stabilised by max-subtraction.

    `temperature` may be a learnable scalar tensor; its gradient is
    dL/dtau = -(1/tau) * sum(dL/dz * z) where z are the scaled logits.
    """
    tau = _temperature_value(temperature)
    tau_t = temperature if isinstance(temperature, Tensor) else None
    scaled = x.data / tau
    z = scaled - np.max(scaled, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)
    parents = (x, tau_t) if tau_t is not None else (x,)
    out = _result(y, *parents)
    if out.requires_grad:
        def _backward():
            g = out.grad
            if g is None:
                return
            gy_y = g * y
            gz = gy_y - y * np.sum(gy_y, axis=-1, keepdims=True)
            if x.requires_grad:
                _accum(x, gz / tau)
            if tau_t is not None and tau_t.requires_grad:
                _accum(tau_t, np.asarray(-np.sum(gz * scaled) / tau).reshape(tau_t.data.shape))
        _record(out, _backward)
    return out


def dropout(x: Tensor, p: float, rng: "RngState", training: bool) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p) in training, identity in eval."""
    if not (0.0 <= p < 1.0):
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.uniform(x.data.shape) >= p).astype(x.data.dtype)
    scale = 1.0 / (1.0 - p)
    out = _result(x.data * keep * scale, x)
    if out.requires_grad:
        def _backward():
            if out.grad is not None and x.requires_grad:
                _accum(x, out.grad * keep * scale)
        _record(out, _backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise normalisation over the last axis with learnable gain/bias."""
    d = x.data.shape[-1]
    if d != gain.data.shape[-1] or d != bias.data.shape[-1]:
        raise ValueError("layer_norm parameter width does not match input")
    inv_d = 1.0 / d
    mu = x.data.sum(axis=-1, keepdims=True) * inv_d
    xc = x.data - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _result(xhat * gain.data + bias.data, x, gain, bias)
    if out.requires_grad:
        def _backward():
            g = out.grad
            if g is None:
                return
            if gain.requires_grad:
                _accum(gain, (g * xhat).sum(axis=tuple(range(g.ndim - 1))).reshape(gain.data.shape))
            if bias.requires_grad:
                _accum(bias, g.sum(axis=tuple(range(g.ndim - 1))).reshape(bias.data.shape))
            if x.requires_grad:
                gh = g * gain.data
                term = gh - gh.sum(axis=-1, keepdims=True) * inv_d \
                    - xhat * ((gh * xhat).sum(axis=-1, keepdims=True) * inv_d)
                _accum(x, term * inv)
        _record(out, _backward)
    return out


def attention_core(q: Tensor, k: Tensor, v: Tensor, heads: int, temperature=None):
    """Scaled dot-product attention over `heads` column blocks.

    q: [K, d], k/v: [T, d] (already projected). Logits of head h are
    q_h @ k_h^T divided by `temperature` (default sqrt(d/heads)), softmaxed
    per row. Returns (context [K, d], attention [heads, K, T]); both carry
    gradients, so losses may be driven through the weights themselves.
    """
    K, d = q.data.shape
    T, dk = k.data.shape
    if d != dk or v.data.shape != (T, d):
        raise ValueError(f"attention operands disagree: q {q.data.shape}, k {k.data.shape}, v {v.data.shape}")
    if d % heads != 0:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads
    if temperature is None:
        temperature = math.sqrt(dh)
    tau = _temperature_value(temperature)
    tau_t = temperature if isinstance(temperature, Tensor) else None

    qh = q.data.reshape(K, heads, dh).transpose(1, 0, 2)   # [h, K, dh]
    kh = k.data.reshape(T, heads, dh).transpose(1, 0, 2)   # [h, T, dh]
    vh = v.data.reshape(T, heads, dh).transpose(1, 0, 2)
    raw = (qh @ kh.transpose(0, 2, 1)) / tau               # [h, K, T]
    shifted = raw - np.max(raw, axis=-1, keepdims=True)
    e = np.exp(shifted)
    attn = e / np.sum(e, axis=-1, keepdims=True)
    ctx = (attn @ vh).transpose(1, 0, 2).reshape(K, d)

    parents = [q, k, v] + ([tau_t] if tau_t is not None else [])
    out = _result(ctx, *parents)
    attn_out = _result(attn, *parents)

    if out.requires_grad:
        def _backward():
            g_out, g_attn = out.grad, attn_out.grad
            if g_out is None and g_attn is None:
                return
            ga = np.zeros_like(attn) if g_attn is None else g_attn.copy()
            if g_out is not None:
                go_h = g_out.reshape(K, heads, dh).transpose(1, 0, 2)
                ga += go_h @ vh.transpose(0, 2, 1)
                if v.requires_grad:
                    gv = (attn.transpose(0, 2, 1) @ go_h).transpose(1, 0, 2).reshape(T, d)
                    _accum(v, gv)
            # softmax jacobian per row
            gs = attn * (ga - np.sum(ga * attn, axis=-1, keepdims=True))
            if q.requires_grad:
                gq = ((gs @ kh) / tau).transpose(1, 0, 2).reshape(K, d)
                _accum(q, gq)
            if k.requires_grad:
                gk = ((gs.transpose(0, 2, 1) @ qh) / tau).transpose(1, 0, 2).reshape(T, d)
                _accum(k, gk)
            if tau_t is not None and tau_t.requires_grad:
                _accum(tau_t, np.asarray(-np.sum(gs * raw) / tau).reshape(tau_t.data.shape))
        _record(out, _backward)
    return out, attn_out


class MhaParams:
    """Projection weights for multi-head attention; w_o may be None."""

    __slots__ = ("w_q", "w_k", "w_v", "w_o")

    def __init__(self, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: "Tensor | None" = None):
        self.w_q = w_q
        self.w_k = w_k
        self.w_v = w_v
        self.w_o = w_o


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         params: MhaParams, temperature=None):
    """Full multi-head attention: project, attend per head, optionally re-project.

    Projection weights use [d_in, d_out] layout (applied as x @ w). With
    `temperature` set (a learnable scalar), the usual 1/sqrt(d_head)
    scaling is replaced by 1/temperature. Returns (output [K, d],
    attention [heads, K, T]).
    """
    qp = matmul(q, params.w_q)
    kp = matmul(k, params.w_k)
    vp = matmul(v, params.w_v)
    ctx, attn = attention_core(qp, kp, vp, heads, temperature=temperature)
    if params.w_o is not None:
        ctx = matmul(ctx, params.w_o)
    return ctx, attn


def check_gradients(f, params, eps: float = 1e-2, oracle_dtype=None) -> float:
    """Worst relative error of analytic vs central-difference gradients.

    `f` must be a deterministic zero-argument callable returning a scalar
    tensor (disable dropout first). Relative error per coordinate uses the
    denominator max(|analytic|, |numeric|, 1e-8).

    The analytic gradient is taken at the params' stored precision. With
    `oracle_dtype=np.float64`, the difference quotients are evaluated with
    the parameters cast to float64, so the numeric side is not drowned by
    float32 forward noise; pass None to difference at the stored precision.
    """
    with use_graph(Graph()):
        y = f()
        if not np.all(np.isfinite(y.data)):
            raise FloatingPointError("objective evaluated to a non-finite value")
        for p in params:
            p.grad = None
        y.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    saved = None
    if oracle_dtype is not None:
        saved = [p.data for p in params]
        for p in params:
            p.data = p.data.astype(oracle_dtype)
    ctx = precision(oracle_dtype) if oracle_dtype is not None else contextlib.nullcontext()
    worst = 0.0
    try:
        with ctx, no_grad():
            for p, a in zip(params, analytic):
                flat = p.data.reshape(-1)
                aflat = a.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    hi = float(flat[i])
                    f_hi = float(f().data.reshape(()))
                    flat[i] = orig - eps
                    lo = float(flat[i])
                    f_lo = float(f().data.reshape(()))
                    flat[i] = orig
                    numeric = (f_hi - f_lo) / (hi - lo)
                    denom = max(abs(float(aflat[i])), abs(numeric), 1e-8)
                    worst = max(worst, abs(float(aflat[i]) - numeric) / denom)
    finally:
        if saved is not None:
            for p, d in zip(params, saved):
                p.data = d
    return worst


class RngState:
    """Deterministic keyed random source (counter-based Philox underneath).

    The same (seed, stream) pair yields a bit-identical draw sequence on
    every platform. spawn(i) derives an independent stream, used for
    per-sample dataset generation.
    """

    __slots__ = ("seed", "stream", "_gen")

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, index: int) -> "RngState":
        return RngState(self.seed, index)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(_DTYPE)

    def normal(self, shape=None, scale: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * scale).astype(_DTYPE)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_sorted(self, n: int, k: int) -> np.ndarray:
        """k distinct values from range(n), ascending."""
        return np.sort(self._gen.choice(n, size=k, replace=False))
