"""Differentiable numeric kernels for the communication-policy networks.

A small fixed set of operations (dense layers, a gated recurrent cell,
prototype quantization, loss kernels) recorded on a tape so that a single
reverse sweep produces gradients, plus RMSProp and a finite-difference
checker. This is deliberately not a general autodiff system: every op has
a hand-written backward and the test suite checks each one against central
finite differences.

Scalars are shape-() tensors. Vectors are 1-D, weight matrices 2-D with
layout (fan_in, fan_out).
"""

from __future__ import annotations

import numpy as np


class ConfigurationError(ValueError):
    """Fatal setup problem: shape mismatch, bad enum value, missing table."""


class NonFiniteError(FloatingPointError):
    """A forward value or gradient went NaN/Inf; the step must be aborted."""


# 64-bit is the default so gradient checks have headroom; training runs may
# switch to 32-bit via set_default_dtype.
_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    global _DTYPE
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


def default_dtype():
    return _DTYPE


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape recording (evaluation rollouts)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Array node on the tape. Leaves (parameters, constants) have no parents."""

    __slots__ = ("data", "grad", "_parents", "_bwd")

    def __init__(self, data, parents=(), bwd=None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        if _GRAD_ENABLED:
            self._parents = parents
            self._bwd = bwd
        else:
            self._parents = ()
            self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def constant(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=_DTYPE))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE))


def backward(root: Tensor) -> None:
    """Reverse sweep from a scalar root, accumulating into .grad fields."""
    if root.data.shape != ():
        raise ConfigurationError("backward requires a scalar root")
    # Iterative post-order: episodes unroll into graphs far deeper than the
    # recursion limit.
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._bwd is not None:
            node._bwd(node.grad)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ConfigurationError(f"{op}: shape {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data, (a, b))
    out._bwd = lambda g: (a._accum(g), b._accum(g))
    return out


def add_n(tensors) -> Tensor:
    """N-ary sum of same-shape tensors; keeps episode-loss graphs shallow."""
    tensors = list(tensors)
    if not tensors:
        raise ConfigurationError("add_n of empty list")
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        _check_same_shape(tensors[0], t, "add_n")
        acc += t.data
    out = Tensor(acc, tuple(tensors))

    def bwd(g):
        for t in tensors:
            t._accum(g)

    out._bwd = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data, (a, b))
    out._bwd = lambda g: (a._accum(g), b._accum(-g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data, (a, b))
    out._bwd = lambda g: (a._accum(g * b.data), b._accum(g * a.data))
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s, (a,))
    out._bwd = lambda g: a._accum(g * s)
    return out


def shift(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data + float(s), (a,))
    out._bwd = lambda g: a._accum(g)
    return out


def matvec(x: Tensor, w: Tensor) -> Tensor:
    """(n,) @ (n, m) -> (m,)."""
    if x.data.ndim != 1 or w.data.ndim != 2 or x.data.shape[0] != w.data.shape[0]:
        raise ConfigurationError(
            f"matvec: input {x.data.shape} incompatible with weight {w.data.shape}"
        )
    out = Tensor(x.data @ w.data, (x, w))

    def bwd(g):
        x._accum(w.data @ g)
        w._accum(np.outer(x.data, g))

    out._bwd = bwd
    return out


def concat(tensors) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[0] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors]), tuple(tensors))

    def bwd(g):
        off = 0
        for t, n in zip(tensors, sizes):
            t._accum(g[off : off + n])
            off += n

    out._bwd = bwd
    return out


def mean_n(tensors) -> Tensor:
    return scale(add_n(tensors), 1.0 / len(list(tensors)))


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(), (x,))
    out._bwd = lambda g: x._accum(np.full_like(x.data, g))
    return out


def pick(x: Tensor, index: int) -> Tensor:
    out = Tensor(x.data[index], (x,))

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        x._accum(gx)

    out._bwd = bwd
    return out


def stop_grad(x: Tensor) -> Tensor:
    return Tensor(x.data.copy())


# ---------------------------------------------------------------------------
# activations


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y, (x,))
    out._bwd = lambda g: x._accum(g * (1.0 - y * y))
    return out


def sigmoid(x: Tensor) -> Tensor:
    # exp arranged to avoid overflow on either tail
    y = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-x.data)),
                 np.exp(x.data) / (1.0 + np.exp(x.data)))
    out = Tensor(y, (x,))
    out._bwd = lambda g: x._accum(g * y * (1.0 - y))
    return out


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    out = Tensor(y, (x,))
    out._bwd = lambda g: x._accum(g * (x.data > 0))
    return out


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max()
    e = np.exp(z)
    s = e / e.sum()
    out = Tensor(s, (x,))
    out._bwd = lambda g: x._accum(s * (g - np.dot(g, s)))
    return out


# ---------------------------------------------------------------------------
# fused loss kernels (scalar outputs keep the tape small)


def l2_loss(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences; gradient 2(a-b) w.r.t. a."""
    _check_same_shape(a, b, "l2_loss")
    d = a.data - b.data
    out = Tensor(np.dot(d.ravel(), d.ravel()), (a, b))

    def bwd(g):
        a._accum(2.0 * g * d)
        b._accum(-2.0 * g * d)

    out._bwd = bwd
    return out


def log_softmax_pick(logits: Tensor, index: int) -> Tensor:
    """log softmax(logits)[index], the log-likelihood of a chosen action."""
    z = logits.data - logits.data.max()
    lse = np.log(np.exp(z).sum())
    out = Tensor(z[index] - lse, (logits,))
    p = np.exp(z - lse)

    def bwd(g):
        gx = -g * p
        gx[index] += g
        logits._accum(gx)

    out._bwd = bwd
    return out


def softmax_entropy(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max()
    lse = np.log(np.exp(z).sum())
    logp = z - lse
    p = np.exp(logp)
    h = -np.dot(p, logp)
    out = Tensor(h, (logits,))
    out._bwd = lambda g: logits._accum(-g * p * (logp + h))
    return out


def bernoulli_logprob(logits: Tensor, bits, mask=None) -> Tensor:
    """Sum over independent Bernoulli(sigmoid(logit)) log-likelihoods.

    An optional 0/1 mask drops slots (e.g. gate slots whose recipient is
    absent) from both the value and the gradient.
    """
    bits = np.asarray(bits, dtype=_DTYPE)
    if bits.shape != logits.data.shape:
        raise ConfigurationError("bernoulli_logprob: bits/logits shape mismatch")
    w = np.ones_like(bits) if mask is None else np.asarray(mask, dtype=_DTYPE)
    x = logits.data
    # log sigmoid(x) = -softplus(-x); log(1-sigmoid(x)) = -softplus(x)
    logp = -(np.logaddexp(0.0, -x) * bits + np.logaddexp(0.0, x) * (1.0 - bits))
    out = Tensor((logp * w).sum(), (logits,))
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
    out._bwd = lambda g: logits._accum(g * w * (bits - s))
    return out


def weighted_sum(x: Tensor, weights) -> Tensor:
    """dot(x, w) with constant weights."""
    w = np.asarray(weights, dtype=_DTYPE)
    if w.shape != x.data.shape:
        raise ConfigurationError("weighted_sum: weight shape mismatch")
    out = Tensor(np.dot(x.data, w), (x,))
    out._bwd = lambda g: x._accum(g * w)
    return out


# ---------------------------------------------------------------------------
# layers


_ACTIVATIONS = ("tanh", "relu", "identity", "softmax")


def dense_forward(x: Tensor, w: Tensor, b: Tensor | None, activation: str) -> Tensor:
    """activation(x @ w + b) as one fused tape node."""
    if activation not in _ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}")
    if x.data.ndim != 1 or w.data.ndim != 2 or x.data.shape[0] != w.data.shape[0]:
        raise ConfigurationError(
            f"dense: input {x.data.shape} incompatible with weight {w.data.shape}"
        )
    pre = x.data @ w.data
    if b is not None:
        if b.data.shape != pre.shape:
            raise ConfigurationError(
                f"dense: bias {b.data.shape} vs output {pre.shape}")
        pre = pre + b.data
    if activation == "tanh":
        y = np.tanh(pre)
    elif activation == "relu":
        y = np.maximum(pre, 0.0)
    elif activation == "softmax":
        e = np.exp(pre - pre.max())
        y = e / e.sum()
    else:
        y = pre
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(y, parents)

    def bwd(g):
        if activation == "tanh":
            da = g * (1.0 - y * y)
        elif activation == "relu":
            da = g * (pre > 0)
        elif activation == "softmax":
            da = y * (g - np.dot(g, y))
        else:
            da = g
        x._accum(w.data @ da)
        w._accum(np.outer(x.data, da))
        if b is not None:
            b._accum(da)

    out._bwd = bwd
    return out


def gru_cell_forward(x: Tensor, h_prev: Tensor, params: "ParamSet", prefix: str) -> Tensor:
    """Standard update/reset/candidate gated recurrent step as one fused node.

    h' = z*h_prev + (1-z)*tanh(Wc x + r*(Uc h_prev) + bc)
    with z, r sigmoid gates over (x, h_prev). The hand-written backward is
    audited against finite differences in the tests.
    """
    wz, uz, bz = params[f"{prefix}.Wz"], params[f"{prefix}.Uz"], params[f"{prefix}.bz"]
    wr, ur, br = params[f"{prefix}.Wr"], params[f"{prefix}.Ur"], params[f"{prefix}.br"]
    wc, uc, bc = params[f"{prefix}.Wc"], params[f"{prefix}.Uc"], params[f"{prefix}.bc"]
    if h_prev.data.shape[0] != uz.data.shape[0]:
        raise ConfigurationError(
            f"gru {prefix}: hidden {h_prev.data.shape} vs state size {uz.data.shape[0]}"
        )
    xv, hv = x.data, h_prev.data

    def sig(a):
        return np.where(a >= 0, 1.0 / (1.0 + np.exp(-a)),
                        np.exp(a) / (1.0 + np.exp(a)))

    z = sig(xv @ wz.data + hv @ uz.data + bz.data)
    r = sig(xv @ wr.data + hv @ ur.data + br.data)
    uc_h = hv @ uc.data
    c = np.tanh(xv @ wc.data + r * uc_h + bc.data)
    h_new = z * hv + (1.0 - z) * c
    out = Tensor(h_new, (x, h_prev, wz, uz, bz, wr, ur, br, wc, uc, bc))

    def bwd(g):
        dc = g * (1.0 - z)
        dz = g * (hv - c)
        da_c = dc * (1.0 - c * c)
        dr = da_c * uc_h
        da_r = dr * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        x._accum(wc.data @ da_c + wr.data @ da_r + wz.data @ da_z)
        h_prev._accum(g * z + uc.data @ (da_c * r) + ur.data @ da_r
                      + uz.data @ da_z)
        wz._accum(np.outer(xv, da_z))
        uz._accum(np.outer(hv, da_z))
        bz._accum(da_z)
        wr._accum(np.outer(xv, da_r))
        ur._accum(np.outer(hv, da_r))
        br._accum(da_r)
        wc._accum(np.outer(xv, da_c))
        uc._accum(np.outer(hv, da_c * r))
        bc._accum(da_c)

    out._bwd = bwd
    return out


def prototype_quantize(h: Tensor, bank: Tensor) -> tuple[int, Tensor]:
    """Snap h to its nearest prototype (Euclidean, ties to lowest id).

    Backward is straight-through: the incoming message gradient flows to h
    as if quantization were identity, and to the selected bank row, which
    is how the bank trains jointly with the rest of the network. (Adding a
    commitment/codebook pair on top measurably breaks symmetry-breaking on
    the tiny tasks, so the estimator is used bare.)
    """
    if bank.data.ndim != 2 or bank.data.shape[0] == 0:
        raise ConfigurationError("prototype bank must be a non-empty (K, d_m) matrix")
    if h.data.shape != (bank.data.shape[1],):
        raise ConfigurationError(
            f"quantize: input {h.data.shape} vs prototype dim {bank.data.shape[1]}"
        )
    d = bank.data - h.data
    token = int(np.argmin(np.einsum("kd,kd->k", d, d)))
    out = Tensor(bank.data[token].copy(), (h, bank))

    def bwd(g):
        h._accum(g)
        gb = np.zeros_like(bank.data)
        gb[token] = g
        bank._accum(gb)

    out._bwd = bwd
    return token, out


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamSet:
    """Named parameter tensors with gradient and RMSProp state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._rms: dict[str, np.ndarray] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(values, dtype=_DTYPE))
        self._params[name] = t
        self._rms[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def rms_state(self, name: str) -> np.ndarray:
        return self._rms[name]

    def set_rms_state(self, name: str, values) -> None:
        v = np.asarray(values, dtype=_DTYPE)
        if v.shape != self._params[name].data.shape:
            raise ConfigurationError(f"optimizer state shape mismatch for {name!r}")
        self._rms[name] = v

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy(self) -> "ParamSet":
        other = ParamSet()
        for name, t in self._params.items():
            other.add(name, t.data.copy())
            other._rms[name] = self._rms[name].copy()
        return other

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())


def rmsprop_step(params: ParamSet, lr: float, decay: float = 0.99, eps: float = 1e-8) -> None:
    """p -= lr * g / sqrt(v + eps) with v <- decay*v + (1-decay)*g^2.

    Aborts (raising NonFiniteError, parameters untouched) if any gradient is
    non-finite; gradients are cleared afterward on success.
    """
    bad = [
        name
        for name, t in params.items()
        if t.grad is not None and not np.isfinite(t.grad).all()
    ]
    if bad:
        raise NonFiniteError(f"non-finite gradient in parameters: {', '.join(bad)}")
    for name, t in params.items():
        g = t.grad
        if g is None:
            continue
        v = params._rms[name]
        v *= decay
        v += (1.0 - decay) * g * g
        t.data -= lr * g / np.sqrt(v + eps)
    params.zero_grad()


def finite_diff_check(f, params: ParamSet, h: float = 1e-5, names=None) -> float:
    """Max relative error between analytic gradients of f and central differences.

    f takes the ParamSet and returns a scalar Tensor; it must be deterministic.
    The relative-error denominator is floored at 1e-6 * max(1, |f|) so that
    round-off noise on near-zero gradients (central differences bottom out
    around eps * |f| / h) is not mistaken for a gradient defect, while a
    genuinely wrong formula still shows up at full size.
    """
    params.zero_grad()
    out = f(params)
    backward(out)
    floor = 1e-6 * max(1.0, abs(float(out.data)))
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }
    params.zero_grad()

    worst = 0.0
    for name, t in params.items():
        if names is not None and name not in names:
            continue
        flat = t.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f(params).data)
            flat[i] = orig - h
            f_minus = float(f(params).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(numeric - ga[i]) / max(abs(numeric), abs(ga[i]), floor)
            worst = max(worst, err)
    return worst
