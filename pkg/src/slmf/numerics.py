"""Dense tensors with tape-based reverse-mode autodiff and an Adam optimizer.

Float32 semantics by default; tests may construct float64 tensors for
finite-difference oracles. The tape is rebuilt on every forward pass, so
there is no global graph state to reset between steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Module-level switch: when False, ops skip recording backward closures.
_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling tape recording (inference mode)."""

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
    """A dense array plus optional gradient and tape linkage."""

    __slots__ = (
        "data",
        "requires_grad",
        "grad",
        "_parents",
        "_backward",
        "adam_m",
        "adam_v",
        "adam_t",
    )

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.adam_m = None
        self.adam_v = None
        self.adam_t = 0

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward) -> Tensor:
    """Wrap an op result; record the closure only if some parent needs grad."""
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, dtype=data.dtype)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, (a,), backward)


def sub(a, b) -> Tensor:
    return add(a, neg(_as_tensor(b, like=_as_tensor(a))))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _make(a.data * np.asarray(s, dtype=a.data.dtype), (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(
            f"matmul requires 2-D or batched operands, got {a.data.shape} x {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul dimension mismatch: {a.data.shape} x {b.data.shape}"
        )
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out, tuple(tensors), backward)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather along axis 0: output shape = indices.shape + a.shape[1:].

    Serves as embedding lookup, frame selection, and row slicing.
    """
    idx = np.asarray(indices)
    out = a.data[idx]

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            flat_idx = idx.reshape(-1)
            flat_g = g.reshape((flat_idx.size,) + a.data.shape[1:])
            np.add.at(a.grad, flat_idx, flat_g)

    return _make(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(a.data * mask, (a,), backward)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape).astype(a.data.dtype))

    return _make(np.asarray(out, dtype=a.data.dtype), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a: Tensor, axis=-1) -> Tensor:
    """Stable softmax along `axis` (max-subtracted)."""
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out).sum(axis=axis, keepdims=True)
            a._accumulate(out * (g - dot))

    return _make(out, (a,), backward)


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"log_softmax axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g - probs * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    gain = _as_tensor(gain, like=x)
    bias = _as_tensor(bias, like=x)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(
            f"layer_norm gain/bias shape {gain.data.shape}/{bias.data.shape} "
            f"does not match last dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(term * inv)

    return _make(out, (x, gain, bias), backward)


def l2_normalize(x: Tensor, axis=-1, eps: float = 1e-12) -> Tensor:
    """Scale vectors along `axis` to unit L2 norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    out = x.data / norm

    def backward(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=axis, keepdims=True)
            x._accumulate((g - out * dot) / norm)

    return _make(out, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * keep)

    return _make(x.data * keep, (x,), backward)


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood over non-ignored positions.

    logits: [..., V]; targets: integer array broadcastable to logits.shape[:-1].
    """
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    v = logits.data.shape[-1]
    flat = logits.data.reshape(-1, v)
    if flat.shape[0] != tgt.shape[0]:
        raise ValueError(
            f"cross_entropy: {flat.shape[0]} logit rows vs {tgt.shape[0]} targets"
        )
    valid = np.ones_like(tgt, dtype=bool) if ignore_index is None else tgt != ignore_index
    check = tgt[valid]
    if check.size and (check.min() < 0 or check.max() >= v):
        raise ValueError(f"cross_entropy: target id out of vocab (V={v})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: no non-ignored targets")

    shifted = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(flat.shape[0])
    safe_tgt = np.where(valid, tgt, 0)
    nll = -logp[rows, safe_tgt] * valid
    out = np.asarray(nll.sum() / n_valid, dtype=logits.data.dtype)

    def backward(g):
        if logits.requires_grad:
            probs = np.exp(logp)
            grad = probs
            grad[rows, safe_tgt] -= 1.0
            grad *= (valid / n_valid)[:, None]
            logits._accumulate(np.asarray(g) * grad.reshape(logits.data.shape))

    return _make(out, (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate .grad on every reachable requires_grad tensor."""
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# parameter groups and Adam
# ---------------------------------------------------------------------------

GROUP_NAMES = (
    "speech_encoder",
    "adapter",
    "lm_embedding",
    "lm_encoder",
    "lm_decoder",
    "retriever_query",
    "retriever_candidate",
)


@dataclass
class ParamGroup:
    """Named collection of learned tensors with a shared freeze flag."""

    name: str
    tensors: dict[str, Tensor] = field(default_factory=dict)
    frozen: bool = False

    def __post_init__(self):
        self.set_frozen(self.frozen)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.tensors:
            raise ValueError(f"duplicate tensor name {name!r} in group {self.name!r}")
        tensor.requires_grad = not self.frozen
        self.tensors[name] = tensor
        return tensor

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = bool(frozen)
        for t in self.tensors.values():
            t.requires_grad = not self.frozen
            if self.frozen:
                t.grad = None

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def zero_grad(groups) -> None:
    for g in groups:
        g.zero_grad()


def adam_step(groups, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Standard Adam with bias correction; frozen groups are untouched.

    First/second moments live on the tensors themselves and persist
    across steps (and through checkpoints).
    """
    for group in groups:
        if group.frozen:
            continue
        for t in group.tensors.values():
            if t.grad is None:
                continue
            if t.adam_m is None:
                t.adam_m = np.zeros_like(t.data)
                t.adam_v = np.zeros_like(t.data)
            t.adam_t += 1
            g = t.grad
            t.adam_m *= beta1
            t.adam_m += (1.0 - beta1) * g
            t.adam_v *= beta2
            t.adam_v += (1.0 - beta2) * (g * g)
            bc1 = 1.0 - beta1 ** t.adam_t
            bc2 = 1.0 - beta2 ** t.adam_t
            denom = np.sqrt(t.adam_v * (1.0 / bc2))
            denom += eps
            t.data = t.data - (lr / bc1) * (t.adam_m / denom)


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(16):
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    np.clip(out, -2.0 * std, 2.0 * std, out=out)
    return out.astype(dtype)


def init_param(rng: np.random.Generator, shape, fan_in: int | None = None) -> Tensor:
    """Truncated-normal init with std = 1/sqrt(fan_in)."""
    if fan_in is None:
        fan_in = shape[0] if len(shape) > 1 else shape[-1]
    std = 1.0 / np.sqrt(max(1, fan_in))
    return Tensor(truncated_normal(rng, shape, std), requires_grad=True)
