"""Dense float64 arrays, small MLPs, and reverse-mode gradients.

Everything downstream (particle updates, hypernetwork matching, latent
perturbation, attack losses) differentiates through the graphs built here.
A central finite-difference oracle is provided so analytic gradients can be
checked against an independent numeric route.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HIDDEN_ACTS = ("tanh", "relu")
OUTPUT_ACTS = ("linear", "softmax")


class ConfigError(ValueError):
    """Structural problem: bad shapes, mismatched dimensions, unknown names."""


class NumericError(ArithmeticError):
    """A non-finite value was produced or supplied."""


def tensor(data, shape=None):
    """Validated float64 row-major array.

    Parameters
    ----------
    data : array-like
        Numeric data, any nesting.
    shape : tuple of int, optional
        Target shape. Element count must match ``data``.

    Returns
    -------
    np.ndarray, C-contiguous float64. Raises ConfigError on a shape/length
    mismatch and NumericError if any value is not finite.
    """
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        want = 1
        for s in shape:
            if s < 0:
                raise ConfigError(f"negative dimension in shape {shape}")
            want *= s
        if arr.size != want:
            raise ConfigError(
                f"shape {shape} wants {want} values, got {arr.size}"
            )
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value in tensor data")
    return arr


# ---------------------------------------------------------------------------
# MLP parameters


@dataclass
class MlpParams:
    """Weights of a fully connected net, stored per layer as (out, in)."""

    weights: list
    biases: list
    hidden_act: str = "tanh"
    output_act: str = "linear"

    def __post_init__(self):
        if self.hidden_act not in HIDDEN_ACTS:
            raise ConfigError(f"unknown hidden activation {self.hidden_act!r}")
        if self.output_act not in OUTPUT_ACTS:
            raise ConfigError(f"unknown output activation {self.output_act!r}")
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise ConfigError("weights and biases must pair up, one per layer")
        self.weights = [tensor(w) for w in self.weights]
        self.biases = [tensor(b) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1:
                raise ConfigError(f"layer {i}: weight must be 2-D, bias 1-D")
            if b.shape[0] != w.shape[0]:
                raise ConfigError(
                    f"layer {i}: bias length {b.shape[0]} != fan-out {w.shape[0]}"
                )
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ConfigError(
                    f"layer {i}: fan-in {w.shape[1]} does not chain with "
                    f"previous fan-out {self.weights[i - 1].shape[0]}"
                )

    @property
    def layer_dims(self):
        dims = [self.weights[0].shape[1]]
        dims.extend(w.shape[0] for w in self.weights)
        return dims

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self):
        """Concatenate W0, b0, W1, b1, ... row-major into one vector."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, vec, layer_dims, hidden_act="tanh", output_act="linear"):
        vec = np.asarray(vec, dtype=np.float64).ravel()
        want = n_mlp_params(layer_dims)
        if vec.size != want:
            raise ConfigError(
                f"flat vector has {vec.size} values, dims {layer_dims} want {want}"
            )
        weights, biases, off = [], [], 0
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            weights.append(vec[off:off + fan_in * fan_out].reshape(fan_out, fan_in))
            off += fan_in * fan_out
            biases.append(vec[off:off + fan_out])
            off += fan_out
        return cls(weights, biases, hidden_act, output_act)

    @classmethod
    def random(cls, layer_dims, rng, scale=1.0, hidden_act="tanh",
               output_act="linear", last_layer_scale=1.0):
        """Xavier-style init; last_layer_scale shrinks only the output layer."""
        weights, biases = [], []
        n_layers = len(layer_dims) - 1
        for i, (fan_in, fan_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            s = scale * np.sqrt(1.0 / fan_in)
            if i == n_layers - 1:
                s *= last_layer_scale
            weights.append(rng.normal(0.0, s, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, hidden_act, output_act)

    def copy(self):
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases],
                         self.hidden_act, self.output_act)


def n_mlp_params(layer_dims):
    return sum((i + 1) * o for i, o in zip(layer_dims[:-1], layer_dims[1:]))


def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def mlp_forward(params: MlpParams, x):
    """Plain forward pass. x is one row (1-D) or a batch (2-D)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != params.weights[0].shape[1]:
        raise ConfigError(
            f"input width {h.shape[1]} != fan-in {params.weights[0].shape[1]}"
        )
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        # einsum keeps each output cell's reduction order independent of the
        # batch size, so batch rows match single-row evaluation bit-exactly
        h = np.einsum("bi,oi->bo", h, w) + b
        if i < last:
            h = np.tanh(h) if params.hidden_act == "tanh" else np.maximum(h, 0.0)
    if params.output_act == "softmax":
        h = _softmax(h)
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite value in mlp_forward output")
    return h[0] if single else h


# ---------------------------------------------------------------------------
# Reverse-mode tape
#
# The graph is rebuilt on every evaluation: nodes hold values, parents, and a
# closure that maps the node's output adjoint to parent adjoints.


class Var:
    __slots__ = ("value", "grad", "parents", "vjp", "op")

    def __init__(self, value, parents=(), vjp=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.op = op

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"


def _as_var(x):
    return x if isinstance(x, Var) else Var(x, op="const")


def _unbroadcast(g, shape):
    # Sum the adjoint back down to the operand's original shape.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = _as_var(a), _as_var(b)
    return Var(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.value.shape),
                          _unbroadcast(g, b.value.shape)),
               op="add")


def sub(a, b):
    a, b = _as_var(a), _as_var(b)
    return Var(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, a.value.shape),
                          _unbroadcast(-g, b.value.shape)),
               op="sub")


def mul(a, b):
    a, b = _as_var(a), _as_var(b)
    return Var(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.value.shape),
                          _unbroadcast(g * a.value, b.value.shape)),
               op="mul")


def neg(a):
    a = _as_var(a)
    return Var(-a.value, (a,), lambda g: (-g,), op="neg")


def matmul(a, b):
    a, b = _as_var(a), _as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ConfigError("matmul expects 2-D operands")
    # forward via einsum so graph evaluations agree with mlp_forward bit-exactly
    return Var(np.einsum("ij,jk->ik", a.value, b.value), (a, b),
               lambda g: (g @ b.value.T, a.value.T @ g),
               op="matmul")


def transpose(a):
    a = _as_var(a)
    return Var(a.value.T, (a,), lambda g: (g.T,), op="transpose")


def reshape(a, shape):
    a = _as_var(a)
    old = a.value.shape
    return Var(a.value.reshape(shape), (a,),
               lambda g: (g.reshape(old),), op="reshape")


def tanh(a):
    a = _as_var(a)
    t = np.tanh(a.value)
    return Var(t, (a,), lambda g: (g * (1.0 - t * t),), op="tanh")


def relu(a):
    a = _as_var(a)
    mask = a.value > 0.0
    return Var(a.value * mask, (a,), lambda g: (g * mask,), op="relu")


def exp(a):
    a = _as_var(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.value)
    return Var(e, (a,), lambda g: (g * e,), op="exp")


def log(a):
    a = _as_var(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        v = np.log(a.value)
    return Var(v, (a,), lambda g: (g / a.value,), op="log")


def sqrt(a):
    a = _as_var(a)
    with np.errstate(invalid="ignore"):
        r = np.sqrt(a.value)
    return Var(r, (a,), lambda g: (g * 0.5 / r,), op="sqrt")


def vsum(a):
    a = _as_var(a)
    return Var(a.value.sum(), (a,),
               lambda g: (np.broadcast_to(g, a.value.shape).copy(),),
               op="vsum")


def vmean(a):
    a = _as_var(a)
    n = a.value.size
    return Var(a.value.mean(), (a,),
               lambda g: (np.broadcast_to(g / n, a.value.shape).copy(),),
               op="vmean")


def slice1d(a, start, stop):
    a = _as_var(a)
    if a.value.ndim != 1:
        raise ConfigError("slice1d expects a 1-D operand")

    def vjp(g):
        out = np.zeros_like(a.value)
        out[start:stop] = g
        return (out,)

    return Var(a.value[start:stop], (a,), vjp, op="slice1d")


def row(a, index):
    a = _as_var(a)
    if a.value.ndim != 2:
        raise ConfigError("row expects a 2-D operand")

    def vjp(g):
        out = np.zeros_like(a.value)
        out[index] = g
        return (out,)

    return Var(a.value[index], (a,), vjp, op="row")


def l2norm(a, eps=0.0):
    """Euclidean norm over all elements; zero vector gets zero gradient."""
    a = _as_var(a)
    n = float(np.sqrt((a.value * a.value).sum()))

    def vjp(g):
        if n == 0.0:
            return (np.zeros_like(a.value),)
        return (g * a.value / n,)

    return Var(n, (a,), vjp, op="l2norm")


def row_norms(a):
    """Per-row Euclidean norms of a 2-D array; zero rows get zero gradient."""
    a = _as_var(a)
    if a.value.ndim != 2:
        raise ConfigError("row_norms expects a 2-D operand")
    n = np.sqrt((a.value * a.value).sum(axis=1))

    def vjp(g):
        safe = np.where(n > 0.0, n, 1.0)
        scale = np.where(n > 0.0, g / safe, 0.0)
        return (a.value * scale[:, None],)

    return Var(n, (a,), vjp, op="row_norms")


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels under softmax(logits), fused."""
    logits = _as_var(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.value.ndim != 2 or labels.ndim != 1:
        raise ConfigError("softmax_cross_entropy expects (B, K) logits and (B,) labels")
    b = logits.value.shape[0]
    if labels.shape[0] != b:
        raise ConfigError("label count does not match batch size")
    probs = _softmax(logits.value)
    picked = probs[np.arange(b), labels]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())

    def vjp(g):
        dl = probs.copy()
        dl[np.arange(b), labels] -= 1.0
        return (g * dl / b,)

    return Var(loss, (logits,), vjp, op="softmax_cross_entropy")


def true_class_prob(logits, labels):
    """Softmax probability assigned to each row's true class, as a (B,) Var."""
    logits = _as_var(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.value.ndim != 2 or labels.ndim != 1:
        raise ConfigError("true_class_prob expects (B, K) logits and (B,) labels")
    b = logits.value.shape[0]
    probs = _softmax(logits.value)
    p = probs[np.arange(b), labels]

    def vjp(g):
        # d p_y / d logit_k = p_y (1[k == y] - p_k)
        dl = -probs * (g * p)[:, None]
        dl[np.arange(b), labels] += g * p
        return (dl,)

    return Var(p, (logits,), vjp, op="true_class_prob")


def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order  # parents before children


def backward(root):
    """Accumulate adjoints of every node reachable from root into .grad."""
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None or node.vjp is None:
            continue
        parent_grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, parent_grads):
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad = parent.grad + g


def _first_bad_op(root):
    for node in _topo_order(root):
        if not np.all(np.isfinite(node.value)):
            return node.op
    return root.op


def grad(scalar_loss, at):
    """Gradient of a scalar-valued function at a point.

    Parameters
    ----------
    scalar_loss : callable
        Maps a Var holding the parameter vector to a scalar Var. The graph is
        rebuilt on every call.
    at : array-like
        Point of evaluation.

    Returns
    -------
    np.ndarray with ``at``'s shape. Raises NumericError naming the offending
    operation if the loss comes out non-finite.
    """
    point = Var(np.asarray(at, dtype=np.float64), op="param")
    out = scalar_loss(point)
    if not isinstance(out, Var):
        raise ConfigError("scalar_loss must return a Var")
    if out.value.size != 1:
        raise ConfigError(f"loss must be scalar, got shape {out.value.shape}")
    if not np.all(np.isfinite(out.value)):
        raise NumericError(
            f"non-finite loss; first bad op: {_first_bad_op(out)!r}"
        )
    backward(out)
    if point.grad is None:
        return np.zeros_like(point.value)
    return point.grad


def value_and_grad(scalar_loss, at):
    point = Var(np.asarray(at, dtype=np.float64), op="param")
    out = scalar_loss(point)
    if out.value.size != 1:
        raise ConfigError(f"loss must be scalar, got shape {out.value.shape}")
    if not np.all(np.isfinite(out.value)):
        raise NumericError(
            f"non-finite loss; first bad op: {_first_bad_op(out)!r}"
        )
    backward(out)
    g = point.grad if point.grad is not None else np.zeros_like(point.value)
    return float(out.value), g


def finite_diff_grad(scalar_loss, at, step=1e-5):
    """Central-difference gradient, the numeric oracle for grad().

    Only forward values are used, so this stays independent of the tape.
    """
    at = np.asarray(at, dtype=np.float64)
    flat = at.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        hi = np.asarray(scalar_loss(Var(bumped.reshape(at.shape))).value).item()
        bumped[i] = flat[i] - step
        lo = np.asarray(scalar_loss(Var(bumped.reshape(at.shape))).value).item()
        out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(at.shape)


# ---------------------------------------------------------------------------
# Differentiable MLP forward over a flat parameter vector


def mlp_forward_var(flat, layer_dims, x, hidden_act="tanh", output_act="linear"):
    """Forward pass where the flattened parameters are part of the graph.

    flat : Var or array, 1-D, layed out like MlpParams.flatten().
    x    : input batch (B, in) or single row; may itself be a Var so nets
           can be chained inside one graph.
    Returns the pre-softmax output Var (softmax handling is left to the
    fused loss ops so probabilities never lose precision here).
    """
    flat = _as_var(flat)
    if isinstance(x, Var):
        if x.value.ndim != 2:
            raise ConfigError("Var input must be a 2-D batch")
    else:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        x = Var(x, op="input")
    if flat.value.size != n_mlp_params(layer_dims):
        raise ConfigError(
            f"flat vector has {flat.value.size} values, dims {layer_dims} "
            f"want {n_mlp_params(layer_dims)}"
        )
    if hidden_act not in HIDDEN_ACTS or output_act not in OUTPUT_ACTS:
        raise ConfigError("unknown activation")
    h = x
    off = 0
    last = len(layer_dims) - 2
    for i, (fan_in, fan_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
        w = reshape(slice1d(flat, off, off + fan_in * fan_out), (fan_out, fan_in))
        off += fan_in * fan_out
        b = slice1d(flat, off, off + fan_out)
        off += fan_out
        h = add(matmul(h, transpose(w)), b)
        if i < last:
            h = tanh(h) if hidden_act == "tanh" else relu(h)
    return h
