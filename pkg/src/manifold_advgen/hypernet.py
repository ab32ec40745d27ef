"""Hypernetworks that emit particle vectors from fixed input codes.

One net per particle family: a clean set tracking the posterior transport
and a perturbing set tracking the aligned perturbed particles. Matching a
net to a target particle set means gradient descent on the summed rowwise
Euclidean distance between emitted and target vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .svgd import ParticleSet

ROLES = ("clean", "perturb")


@dataclass
class CodeSet:
    """Per-particle input codes, drawn once per run and then frozen."""

    codes: np.ndarray
    seed: int

    def __post_init__(self):
        self.codes = dc.tensor(self.codes)
        if self.codes.ndim != 2:
            raise dc.ConfigError("codes must be (n_particles, code_dim)")

    @property
    def n_particles(self):
        return self.codes.shape[0]


def sample_codes(n_particles, code_dim, seed):
    rng = np.random.default_rng(seed)
    return CodeSet(rng.normal(0.0, 1.0, size=(n_particles, code_dim)), seed)


@dataclass
class HyperNet:
    """MLP from code space to flattened particle vectors."""

    params: dc.MlpParams
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise dc.ConfigError(f"unknown hypernet role {self.role!r}")
        if self.params.output_act != "linear":
            raise dc.ConfigError("hypernet output must be linear")

    @property
    def particle_len(self):
        return self.params.weights[-1].shape[0]

    @property
    def layer_dims(self):
        return self.params.layer_dims

    def copy(self):
        return HyperNet(self.params.copy(), self.role)


def make_hypernet(code_dim, hidden, particle_len, rng, role,
                  last_layer_scale=0.05, rho_obs_init=math.log(10.0),
                  rho_prior_init=0.0):
    """Build a hypernet whose emitted particles start small.

    The output layer is scaled down so early particles are near-zero
    functions, except the two precision slots, whose output biases start at
    the precision priors' means (obs precision 10, prior precision 1).
    """
    dims = [code_dim, *hidden, particle_len]
    params = dc.MlpParams.random(dims, rng, last_layer_scale=last_layer_scale)
    params.biases[-1][-2] = rho_obs_init
    params.biases[-1][-1] = rho_prior_init
    return HyperNet(params, role)


def sample_particles(net: HyperNet, codes: CodeSet, with_precisions=True):
    """Emit one particle per code row. Deterministic given net and codes."""
    out = dc.mlp_forward(net.params, codes.codes)
    return ParticleSet(out, with_precisions=with_precisions)


def matching_loss(flat, layer_dims, codes: CodeSet, targets, hidden_act="tanh"):
    """Summed rowwise L2 distance between emitted and target particles, as a Var."""
    targets = np.asarray(targets, dtype=np.float64)
    out = dc.mlp_forward_var(flat, layer_dims, codes.codes, hidden_act=hidden_act)
    return dc.vsum(dc.row_norms(dc.sub(out, targets)))


def _matching_forward(flat, layer_dims, x, hidden_act):
    """Forward pass on a flat parameter vector, keeping each layer's input.

    Returns (output, layer_inputs, weight_views). Uses the same einsum
    contraction as the graph-based path so values agree bit for bit.
    """
    weights, biases, off = [], [], 0
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        weights.append(flat[off:off + fan_in * fan_out].reshape(fan_out, fan_in))
        off += fan_in * fan_out
        biases.append(flat[off:off + fan_out])
        off += fan_out
    h = x
    inputs = []
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        inputs.append(h)
        h = np.einsum("bi,oi->bo", h, w) + b
        if i < last:
            h = np.tanh(h) if hidden_act == "tanh" else np.maximum(h, 0.0)
    return h, inputs, weights


def matching_value(flat, layer_dims, codes: CodeSet, targets, hidden_act="tanh"):
    """Matching loss as a plain float, with no autodiff bookkeeping."""
    out, _, _ = _matching_forward(flat, layer_dims, codes.codes, hidden_act)
    return float(np.sqrt(((out - targets) ** 2).sum(axis=1)).sum())


def matching_value_grad(flat, layer_dims, codes: CodeSet, targets,
                        hidden_act="tanh"):
    """Matching loss and its gradient via handwritten backprop.

    Same math as differentiating `matching_loss`, but the inner training
    loop calls this thousands of times per epoch and the explicit form
    skips the graph construction that dominates that cost. Zero-distance
    rows get zero gradient, matching the graph path's convention.
    """
    out, inputs, weights = _matching_forward(
        flat, layer_dims, codes.codes, hidden_act)
    resid = out - targets
    norms = np.sqrt((resid * resid).sum(axis=1))
    safe = np.where(norms > 0.0, norms, 1.0)
    delta = resid * np.where(norms > 0.0, 1.0 / safe, 0.0)[:, None]
    grads = [None] * (2 * len(weights))
    for i in range(len(weights) - 1, -1, -1):
        grads[2 * i] = np.einsum("bo,bi->oi", delta, inputs[i]).ravel()
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = np.einsum("bo,oi->bi", delta, weights[i])
            post = inputs[i]
            delta = delta * (1.0 - post * post) if hidden_act == "tanh" \
                else delta * (post > 0.0)
    return float(norms.sum()), np.concatenate(grads)


def trajectory_match(net: HyperNet, codes: CodeSet, targets: ParticleSet,
                     lr, steps=1, max_halvings=30):
    """Descend the matching loss for `steps` backtracked gradient updates.

    The rowwise distance has unit-magnitude gradients however close the
    targets are, so a fixed rate overshoots badly whenever the targets sit
    one small transport step away. Each update starts from the previous
    update's accepted step (doubled, capped at `lr`; the first starts at
    `lr`) and halves until the loss stops increasing; if no such step
    exists the net is left alone for that update.

    Returns (updated net, entry loss): the loss measured before this round's
    first update, i.e. the gap the round set out to close. Targets equal to
    the emitted particles yield zero gradient and leave the net untouched.
    """
    if steps < 1:
        raise dc.ConfigError("steps must be >= 1")
    if targets.vectors.shape != (codes.n_particles, net.particle_len):
        raise dc.ConfigError(
            f"targets {targets.vectors.shape} do not match "
            f"{codes.n_particles} codes x particle length {net.particle_len}"
        )
    dims = net.layer_dims
    act = net.params.hidden_act
    flat = net.params.flatten()
    target_rows = targets.vectors
    entry = None
    step = lr
    for _ in range(steps):
        val, g = matching_value_grad(flat, dims, codes, target_rows, act)
        if entry is None:
            entry = val
        step = min(lr, 2.0 * step)
        for _ in range(max_halvings):
            cand = flat - step * g
            cand_loss = matching_value(cand, dims, codes, target_rows, act)
            if cand_loss <= val:
                flat = cand
                break
            step *= 0.5
    params = dc.MlpParams.from_flat(flat, dims, net.params.hidden_act,
                                    net.params.output_act)
    return HyperNet(params, net.role), entry
