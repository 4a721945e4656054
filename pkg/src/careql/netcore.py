"""Reverse-mode autodiff core for small dense networks.

Everything runs in float64 numpy. A ``Tensor`` records the operation that
produced it; ``backward()`` on a scalar loss walks the tape and accumulates
gradients into every reachable parameter. The op set is deliberately small:
exactly what dense trunks, a dueling Q-head, gated fusion and single-token
cross-attention need. Analytic gradients are verified against central finite
differences (see ``gradient_check``), which is the independent oracle for this
module.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

Array = np.ndarray

CHECKPOINT_FORMAT_VERSION = 1


class NonFiniteGradientError(RuntimeError):
    """Raised by the optimizer when a parameter gradient is NaN or inf."""


def _f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the tape entry that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    # keep ndarray operators from intercepting mixed expressions; the
    # reflected Tensor ops run instead
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _f64(data)
        self.grad: Array | None = np.zeros_like(self.data) if requires_grad else None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def item(self) -> float:
        return float(self.data)

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _node(data: Array, parents: tuple["Tensor", ...],
              backward: Callable[[Array], None]) -> "Tensor":
        out = Tensor(data)
        out._parents = parents
        out._backward = backward
        return out

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        a, b = self, other

        def backward(g: Array) -> None:
            a._accumulate(_unbroadcast(g, a.data.shape))
            b._accumulate(_unbroadcast(g, b.data.shape))

        return Tensor._node(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        a, b = self, other

        def backward(g: Array) -> None:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._node(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self * (-1.0)

    def __sub__(self, other) -> "Tensor":
        return self + (-Tensor._lift(other))

    def __rsub__(self, other) -> "Tensor":
        return Tensor._lift(other) + (-self)

    def __truediv__(self, scalar: float) -> "Tensor":
        return self * (1.0 / float(scalar))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        a, b = self, Tensor._lift(other)
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ValueError(
                f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}"
            )
        if a.data.shape[1] != b.data.shape[0]:
            raise ValueError(
                f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}"
            )

        def backward(g: Array) -> None:
            a._accumulate(g @ b.data.T)
            b._accumulate(a.data.T @ g)

        return Tensor._node(a.data @ b.data, (a, b), backward)

    def __rmatmul__(self, other) -> "Tensor":
        return Tensor._lift(other) @ self

    def transpose(self) -> "Tensor":
        a = self

        def backward(g: Array) -> None:
            a._accumulate(g.T)

        return Tensor._node(a.data.T, (a,), backward)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    # -- nonlinearities -----------------------------------------------------

    def relu(self) -> "Tensor":
        a = self
        mask = (a.data > 0.0).astype(np.float64)

        def backward(g: Array) -> None:
            a._accumulate(g * mask)

        return Tensor._node(a.data * mask, (a,), backward)

    def sigmoid(self) -> "Tensor":
        a = self
        out_data = np.empty_like(a.data)
        pos = a.data >= 0
        out_data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        ez = np.exp(a.data[~pos])
        out_data[~pos] = ez / (1.0 + ez)

        def backward(g: Array) -> None:
            a._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._node(out_data, (a,), backward)

    def square(self) -> "Tensor":
        a = self

        def backward(g: Array) -> None:
            a._accumulate(g * 2.0 * a.data)

        return Tensor._node(a.data * a.data, (a,), backward)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g: Array) -> None:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(ge, a.data.shape).copy())

        return Tensor._node(out_data, (a,), backward)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def logsumexp(self, axis: int = 1, keepdims: bool = False) -> "Tensor":
        a = self
        m = a.data.max(axis=axis, keepdims=True)
        exps = np.exp(a.data - m)
        total = exps.sum(axis=axis, keepdims=True)
        soft = exps / total
        out_data = m + np.log(total)
        if not keepdims:
            out_data = np.squeeze(out_data, axis=axis)

        def backward(g: Array) -> None:
            ge = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(ge * soft)

        return Tensor._node(out_data, (a,), backward)

    def softmax(self, axis: int = 1) -> "Tensor":
        a = self
        m = a.data.max(axis=axis, keepdims=True)
        exps = np.exp(a.data - m)
        out_data = exps / exps.sum(axis=axis, keepdims=True)

        def backward(g: Array) -> None:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - inner))

        return Tensor._node(out_data, (a,), backward)

    # -- indexing ------------------------------------------------------------

    def pick(self, indices: Array) -> "Tensor":
        """Select one column per row of a 2-d tensor; returns shape (B,)."""
        a = self
        idx = np.asarray(indices, dtype=np.intp)
        if a.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.data.shape[0]:
            raise ValueError(
                f"pick expects (B, m) tensor and (B,) indices, got "
                f"{a.data.shape} and {idx.shape}"
            )
        rows = np.arange(a.data.shape[0])

        def backward(g: Array) -> None:
            full = np.zeros_like(a.data)
            np.add.at(full, (rows, idx), g)
            a._accumulate(full)

        return Tensor._node(a.data[rows, idx], (a,), backward)

    # -- backprop ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into every reachable node's grad."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [Tensor._lift(t) for t in tensors]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            part._accumulate(g[tuple(sl)])

    return Tensor._node(np.concatenate([p.data for p in parts], axis=axis),
                        tuple(parts), backward)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def init_param(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator,
               name: str) -> Tensor:
    """Fan-in-scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    limit = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True,
                  name=name)


class Dense:
    """Affine layer y = x @ W.T + b with W stored as (n_out, n_in)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 name: str, bias: bool = True):
        self.n_in = n_in
        self.n_out = n_out
        self.W = init_param((n_out, n_in), n_in, rng, f"{name}.W")
        self.b = init_param((n_out,), n_in, rng, f"{name}.b") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.n_in:
            raise ValueError(
                f"{self.W.name}: expected input width {self.n_in}, "
                f"got {x.data.shape}"
            )
        out = x @ self.W.T
        if self.b is not None:
            out = out + self.b
        return out

    def params(self) -> dict[str, Tensor]:
        out = {self.W.name: self.W}
        if self.b is not None:
            out[self.b.name] = self.b
        return out


class DuelingQNetwork:
    """Dense trunk with separate state-value and advantage heads.

    Q(s, a) = V(s) + A(s, a) - mean_a A(s, a), so the advantage stream is
    mean-centered and V carries the common level.
    """

    def __init__(self, input_dim: int, rng: np.random.Generator,
                 width: int = 512, depth: int = 3, n_actions: int = 25,
                 name: str = "q"):
        self.input_dim = input_dim
        self.n_actions = n_actions
        self.trunk: list[Dense] = []
        d_in = input_dim
        for i in range(depth):
            self.trunk.append(Dense(d_in, width, rng, f"{name}.trunk{i}"))
            d_in = width
        self.value_head = Dense(d_in, 1, rng, f"{name}.value")
        self.advantage_head = Dense(d_in, n_actions, rng, f"{name}.advantage")

    def __call__(self, state: Tensor) -> Tensor:
        h = state
        for layer in self.trunk:
            h = layer(h).relu()
        v = self.value_head(h)
        a = self.advantage_head(h)
        return v + a - a.mean(axis=1, keepdims=True)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.trunk:
            out.update(layer.params())
        out.update(self.value_head.params())
        out.update(self.advantage_head.params())
        return out


def forward_q(net: DuelingQNetwork, state: Array | Tensor) -> Array:
    """Convenience single/batch forward returning plain ndarray Q-values."""
    x = state if isinstance(state, Tensor) else Tensor(np.atleast_2d(_f64(state)))
    q = net(x)
    return q.data[0] if (not isinstance(state, Tensor) and _f64(state).ndim == 1) \
        else q.data


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction; clears grads after each step."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 grad_clip: float | None = None):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.grad_clip = grad_clip
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for key, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NonFiniteGradientError(f"non-finite gradient in {key!r}")
            if self.grad_clip is not None:
                norm = float(np.sqrt((g * g).sum()))
                if norm > self.grad_clip:
                    g = g * (self.grad_clip / norm)
            m = self._m[key]
            v = self._v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        zero_grads(self.params)


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad[...] = 0.0


def clone_param_values(params: Mapping[str, Tensor]) -> dict[str, Array]:
    return {k: p.data.copy() for k, p in params.items()}


def load_param_values(params: Mapping[str, Tensor],
                      values: Mapping[str, Array]) -> None:
    for key, p in params.items():
        v = _f64(values[key])
        if v.shape != p.data.shape:
            raise ValueError(
                f"shape mismatch for {key!r}: have {p.data.shape}, "
                f"loading {v.shape}"
            )
        p.data = v.copy()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor],
                    metadata: dict | None = None) -> None:
    """Write parameters as versioned JSON; floats round-trip bit-exactly."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "metadata": metadata or {},
        "tensors": {
            key: {"shape": list(p.data.shape), "values": p.data.ravel().tolist()}
            for key, p in sorted(params.items())
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[dict[str, Array], dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version: {version!r}")
    tensors = {
        key: _f64(entry["values"]).reshape(entry["shape"])
        for key, entry in payload["tensors"].items()
    }
    return tensors, payload.get("metadata", {})


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def gradient_check(loss_fn: Callable[[], Tensor],
                   params: Mapping[str, Tensor],
                   h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call. Relative error uses max(|analytic|, |numeric|, 1e-3) in the
    denominator so exactly-zero gradients compare cleanly.
    """
    zero_grads(params)
    loss_fn().backward()
    analytic = {k: p.grad.copy() for k, p in params.items()}

    worst = 0.0
    for key, p in params.items():
        flat = p.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[key].ravel()[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            worst = max(worst, rel)
    zero_grads(params)
    return worst


def collect_params(*components) -> dict[str, Tensor]:
    """Merge the params() dicts of several layers/modules, rejecting clashes."""
    merged: dict[str, Tensor] = {}
    for comp in components:
        for key, p in comp.params().items():
            if key in merged:
                raise ValueError(f"duplicate parameter name {key!r}")
            merged[key] = p
    return merged
