"""A small reverse-mode autodiff engine over numpy arrays.

Only the primitives the encoder, the contrastive loss and the direct
baseline head need are provided. Storage is float32 by default; float64
tensors are supported so that finite-difference oracles can run at higher
precision than the path they check. Reductions accumulate in float64.

ReLU uses subgradient 0 at 0, and so does ``abs``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, ShapeError, TrainingDiverged

DEFAULT_DTYPE = np.float32

# When a list, relu/abs/max append the branch each element took. The
# finite-difference oracle uses this to spot steps that cross a kink.
_branch_log: list | None = None


def _record_branch(pattern: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(np.packbits(pattern.ravel()).tobytes() if pattern.dtype == bool
                           else pattern.tobytes())


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, np.ndarray) and (dtype is None or value.dtype == dtype):
        return value
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind != "f":
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64).astype(grad.dtype)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64).astype(grad.dtype)
    return grad.reshape(shape)


class Tensor:
    """An array node in a computation graph."""

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward: Callable | None = None, _op: str = ""):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data, _op=op)
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, _op=op)

    # -- elementwise arithmetic -------------------------------------------
    def __add__(self, other):
        other = self._wrap(other)
        out_data = self.data + other.data

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)
        return Tensor._make(out_data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-self._wrap(other))

    def __rsub__(self, other):
        return self._wrap(other) + (-self)

    def __mul__(self, other):
        other = self._wrap(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)
        return Tensor._make(a * b, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other)
        a, b = self.data, other.data

        def backward(g):
            return (_unbroadcast(g / b, self.shape),
                    _unbroadcast(-g * a / (b * b), other.shape))
        return Tensor._make(a / b, (self, other), backward, "div")

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def __pow__(self, exponent: float):
        a = self.data

        def backward(g):
            return (g * exponent * a ** (exponent - 1),)
        return Tensor._make(a ** exponent, (self,), backward, "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    # -- unary functions ---------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def relu(self):
        mask = self.data > 0
        _record_branch(mask)
        return Tensor._make(np.maximum(self.data, 0), (self,),
                            lambda g: (np.where(mask, g, 0),), "relu")

    def abs(self):
        sign = np.sign(self.data)
        _record_branch(sign > 0)
        return Tensor._make(np.abs(self.data), (self,), lambda g: (g * sign,), "abs")

    def sigmoid(self):
        out = _stable_sigmoid(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1 - out),), "sigmoid")

    def softplus(self):
        """log(1 + e^x), evaluated without overflow."""
        a = self.data
        out = np.logaddexp(0, a).astype(self.dtype)
        sig = _stable_sigmoid(a)
        return Tensor._make(out, (self,), lambda g: (g * sig,), "softplus")

    # -- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        out = np.sum(self.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(self.dtype)
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)
        return Tensor._make(out, (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int, keepdims: bool = False):
        """Maximum along ``axis``; ties route the gradient to the first maximiser."""
        idx = np.argmax(self.data, axis=axis)
        _record_branch(idx)
        idx_k = np.expand_dims(idx, axis)
        out = np.take_along_axis(self.data, idx_k, axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis=axis)
        shape = self.shape

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros(shape, dtype=g.dtype)
            np.put_along_axis(full, idx_k, g, axis=axis)
            return (full,)
        return Tensor._make(out, (self,), backward, "max")

    # -- shape manipulation ------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),), "reshape")

    def __getitem__(self, index):
        src_shape = self.shape
        out = self.data[index]

        def backward(g):
            full = np.zeros(src_shape, dtype=g.dtype)
            np.add.at(full, index, g)
            return (full,)
        return Tensor._make(out, (self,), backward, "getitem")

    # -- differentiation ---------------------------------------------------
    def backward(self) -> None:
        backward(self)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Calling it twice without resetting gradients adds the two results.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            pg = pg.astype(parent.dtype, copy=False)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- composite primitives ---------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``b`` is 2-D and ``a`` has any number of leading dims."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b, dtype=a.dtype)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    A, B = a.data, b.data

    def backward(g):
        ga = g @ B.T
        flat_a = A.reshape(-1, A.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        return ga, flat_a.T @ flat_g
    return Tensor._make(A @ B, (a, b), backward, "matmul")


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


def relu(x: Tensor) -> Tensor:
    return x.relu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def exp(x: Tensor) -> Tensor:
    return x.exp()


def log(x: Tensor) -> Tensor:
    return x.log()


def mean(x: Tensor, axis=None) -> Tensor:
    return x.mean(axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction; the shift is a constant for the gradient."""
    a = x.data
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(x.dtype)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True, dtype=np.float64).astype(out.dtype)
        return (out * (g - dot),)
    return Tensor._make(out, (x,), backward, "softmax")


def conv1d_causal(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Causal dilated convolution over time.

    ``x`` is ``[..., T, C_in]`` and ``w`` is ``[k, C_in, C_out]``. The input
    is left-padded with ``(k - 1) * dilation`` zeros so the output keeps
    length T, and tap ``i`` reads ``x[t - (k - 1 - i) * dilation]``.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    w = w if isinstance(w, Tensor) else Tensor(w, dtype=x.dtype)
    if dilation < 1:
        raise ShapeError(f"dilation must be >= 1, got {dilation}")
    if w.ndim != 3 or x.ndim < 2:
        raise ShapeError(f"conv1d_causal expects x [..., T, C] and w [k, C_in, C_out], got {x.shape}, {w.shape}")
    k, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"input has {x.shape[-1]} channels but kernel expects {c_in}")
    T = x.shape[-2]
    pad = (k - 1) * dilation
    X, W = x.data, w.data
    lead = X.shape[:-2]
    dtype = np.result_type(X, W)
    xp = np.zeros(lead + (T + pad, c_in), dtype=X.dtype)
    xp[..., pad:, :] = X
    # one contiguous GEMM per tap over the padded sequence, then shift
    flat_xp = xp.reshape(-1, c_in)
    out = np.zeros(lead + (T, c_out), dtype=dtype)
    for i in range(k):
        tap = (flat_xp @ W[i]).reshape(lead + (T + pad, c_out))
        out += tap[..., i * dilation:i * dilation + T, :]

    def backward(g):
        g = np.ascontiguousarray(g)
        flat_g = g.reshape(-1, c_out)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gw = np.empty(W.shape, dtype=g.dtype)
        for i in range(k):
            window = np.ascontiguousarray(xp[..., i * dilation:i * dilation + T, :]).reshape(-1, c_in)
            gw[i] = window.T @ flat_g
            gxp[..., i * dilation:i * dilation + T, :] += (flat_g @ W[i].T).reshape(lead + (T, c_in))
        return gxp[..., pad:, :], gw
    return Tensor._make(out, (x, w), backward, "conv1d_causal")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise normalised inner product along the last axis.

    Rows where either norm is below ``eps`` give 0 (and zero gradient).
    """
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_similarity dimension mismatch: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    dot = np.sum(A * B, axis=-1, dtype=np.float64)
    na = np.sqrt(np.sum(A * A, axis=-1, dtype=np.float64))
    nb = np.sqrt(np.sum(B * B, axis=-1, dtype=np.float64))
    ok = (na >= eps) & (nb >= eps)
    sa = np.where(ok, na, 1.0)
    sb = np.where(ok, nb, 1.0)
    d = np.where(ok, dot / (sa * sb), 0.0)
    dtype = np.result_type(A, B)

    def backward(g):
        g = np.where(ok, g, 0.0)[..., None]
        ga = g * (B / (sa * sb)[..., None] - d[..., None] * A / (sa * sa)[..., None])
        gb = g * (A / (sa * sb)[..., None] - d[..., None] * B / (sb * sb)[..., None])
        return (_unbroadcast(ga.astype(dtype), a.shape), _unbroadcast(gb.astype(dtype), b.shape))
    return Tensor._make(d.astype(dtype), (a, b), backward, "cosine")


def mse(pred: Tensor, target) -> Tensor:
    diff = pred - target
    return (diff * diff).mean()


def binary_cross_entropy_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of softplus(z) - y z, the numerically stable BCE form."""
    y = np.asarray(labels, dtype=logits.dtype).reshape(logits.shape)
    return (logits.softplus() - logits * y).mean()


# -- optimiser ----------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Iterable[Tensor], **hyper) -> "AdamState":
        params = list(params)
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **hyper)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> AdamState:
    """Apply one bias-corrected Adam update in place.

    ``None`` gradients count as zero. Raises ``TrainingDiverged`` before
    touching anything if a gradient is non-finite.
    """
    if len(params) != len(state.m):
        raise ShapeError(f"{len(params)} parameters but optimiser tracks {len(state.m)}")
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged("non-finite gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data = (p.data - update).astype(p.dtype)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter relative errors.

    ``kinks`` counts coordinates whose +-h evaluations took a different
    relu/abs/max branch than the unperturbed point. Central differences
    there straddle a non-differentiable point and are not a valid oracle,
    so those coordinates are excluded from the error and reported instead.
    """

    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    h: float = 1e-3
    kinks: int = 0
    checked: int = 0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance and self.checked > 0)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        worst = max(self.per_param, key=self.per_param.get) if self.per_param else "-"
        return (f"{status} max_rel_error={self.max_rel_error:.3e} (worst: {worst}, tol={self.tolerance:g}, "
                f"checked={self.checked}, kinks={self.kinks})")


def _traced_loss(loss_fn, params: dict[str, np.ndarray]) -> tuple[float, list]:
    global _branch_log
    _branch_log = []
    try:
        value = float(loss_fn({k: Tensor(v) for k, v in params.items()}).data)
        return value, _branch_log
    finally:
        _branch_log = None


def numerical_gradient(loss_fn: Callable[[dict], Tensor], params: dict[str, np.ndarray],
                       name: str, h: float = 1e-3, return_kinks: bool = False):
    """Central differences of ``loss_fn`` w.r.t. one parameter, in float64.

    With ``return_kinks`` also returns a boolean mask of coordinates where
    either step changed a relu/abs/max branch.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, branches = _traced_loss(loss_fn, base)
    target = base[name]
    grad = np.zeros_like(target)
    kinks = np.zeros(target.shape, dtype=bool)
    flat, gflat, kflat = target.reshape(-1), grad.reshape(-1), kinks.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up, b_up = _traced_loss(loss_fn, base)
        flat[i] = orig - h
        down, b_down = _traced_loss(loss_fn, base)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
        kflat[i] = b_up != branches or b_down != branches
    return (grad, kinks) if return_kinks else grad


def grad_check(build: Callable[[np.random.Generator], tuple[dict, Callable]], tolerance: float = 1e-4,
               h: float = 1e-3, seed: int = 0, dtype=np.float32) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``build(rng)`` returns ``(params, loss_fn)`` where ``params`` maps names
    to arrays and ``loss_fn`` maps a dict of Tensors to a scalar Tensor.
    Analytic gradients are taken at ``dtype``; the finite-difference oracle
    always evaluates the forward pass in float64. The error for one
    parameter is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
    over the coordinates whose differences did not cross a kink.
    """
    rng = np.random.default_rng(seed)
    params, loss_fn = build(rng)
    tensors = {k: Tensor(np.asarray(v), requires_grad=True, dtype=dtype) for k, v in params.items()}
    loss = loss_fn(tensors)
    backward(loss)
    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance, h=h)
    for name, value in params.items():
        analytic = tensors[name].grad
        analytic = np.zeros(np.shape(value)) if analytic is None else analytic.astype(np.float64)
        numeric, kinks = numerical_gradient(loss_fn, params, name, h, return_kinks=True)
        ok = ~kinks
        report.kinks += int(kinks.sum())
        report.checked += int(ok.sum())
        a, n = analytic[ok], numeric[ok]
        scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
        diff = np.max(np.abs(a - n), initial=0.0)
        err = 0.0 if diff == 0.0 else diff / max(scale, 1e-12)
        report.per_param[name] = float(err)
        report.max_rel_error = max(report.max_rel_error, float(err))
    return report
