"""Gram-Schmidt basis sign method: structured latent perturbations.

For each perturbed particle, the current batch's latent codes are
orthogonalized; the basis rows hand out sign patterns; a per-dimension
perturbation solves a least-squares fit between perturbed and signed clean
codes in closed form; finally the particle takes one gradient step pulling
its codes toward the signed targets. Alignment then nudges the perturbed
particles along the leader set's transport and re-matches their hypernet.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .hypernet import CodeSet, HyperNet, trajectory_match
from .manifold import EncoderSpec, encode_mean
from .svgd import ParticleSet, median_bandwidth, svgd_pi

log = logging.getLogger(__name__)


@dataclass
class OrthoBasis:
    """Orthonormal rows spanning the non-degenerate directions of the input."""

    rows: np.ndarray
    drop_tolerance: float

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)

    @property
    def rank(self):
        return self.rows.shape[0]

    @property
    def degenerate(self):
        return self.rank == 0


def gram_schmidt(vectors, drop_tolerance=1e-10):
    """Modified Gram-Schmidt over input rows, in order.

    Rows whose residual norm falls at or below drop_tolerance times the
    largest input row norm are dropped. All-zero input yields an empty
    (degenerate) basis.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise dc.ConfigError("gram_schmidt expects a 2-D array of row vectors")
    norms = np.sqrt((vectors ** 2).sum(axis=1))
    scale = float(norms.max()) if norms.size else 0.0
    if scale == 0.0:
        return OrthoBasis(np.empty((0, vectors.shape[1])), drop_tolerance)
    cutoff = drop_tolerance * scale
    basis = []
    for row in vectors:
        v = row.astype(np.float64, copy=True)
        for u in basis:  # sequential projections: modified, not classical
            v -= (v @ u) * u
        residual = float(np.sqrt((v * v).sum()))
        if residual > cutoff:
            basis.append(v / residual)
        if len(basis) == vectors.shape[1]:
            break
    return OrthoBasis(np.asarray(basis).reshape(len(basis), vectors.shape[1]),
                      drop_tolerance)


def assign_signs(basis: OrthoBasis, count):
    """Sign matrix S with row i = sign of basis row (i mod rank); sign(0) = +1."""
    if basis.degenerate:
        raise dc.ConfigError("cannot assign signs from a degenerate basis")
    if count < 1:
        raise dc.ConfigError("count must be positive")
    signs = np.where(basis.rows >= 0.0, 1.0, -1.0)
    idx = np.arange(count) % basis.rank
    return signs[idx]


def solve_delta(z_clean, z_pert, signs):
    """Closed-form per-dimension perturbation.

    Minimizes sum_i ||z_pert_i - (z_clean_i + delta * s_i)||^2 over delta;
    with s_ij in {-1, +1} the optimum is the signed mean of the code gaps:
    delta_j = (1/B) sum_i s_ij (z_pert_ij - z_clean_ij).
    """
    z_clean = np.asarray(z_clean, dtype=np.float64)
    z_pert = np.asarray(z_pert, dtype=np.float64)
    signs = np.asarray(signs, dtype=np.float64)
    if z_clean.shape != z_pert.shape or z_clean.shape != signs.shape:
        raise dc.ConfigError("solve_delta inputs must share one (B, d) shape")
    return (signs * (z_pert - z_clean)).mean(axis=0)


def perturb_objective(flat_particle, spec: EncoderSpec, x, z_targets):
    """Squared distance between a particle's codes and fixed latent targets."""
    w = dc.slice1d(flat_particle, 0, spec.n_weights)
    z = dc.mlp_forward_var(w, spec.layer_dims, x)
    diff = dc.sub(z, np.asarray(z_targets, dtype=np.float64))
    return dc.vsum(dc.mul(diff, diff))


def gbsm_update(perturbed: ParticleSet, clean: ParticleSet, x,
                spec: EncoderSpec, lr, drop_tolerance=1e-10,
                prev_deltas=None):
    """One basis-sign update of every perturbed particle.

    Per particle: orthogonalize the clean codes, assign sign patterns, solve
    the perturbation in closed form from the current codes, then take one
    gradient step pulling the perturbed codes toward the signed targets with
    the perturbation frozen. The step backtracks (halving from lr) until the
    squared objective stops increasing; the quadratic's curvature grows with
    the batch, so a fixed rate would oscillate and feed its own residual. A
    degenerate basis skips that particle (warned) and leaves its previous
    perturbation row in place.

    Returns (updated particle set, perturbation matrix (M, d)).
    """
    x = np.asarray(x, dtype=np.float64)
    if perturbed.n_particles != clean.n_particles:
        raise dc.ConfigError("particle sets must pair up")
    m = perturbed.n_particles
    new_vectors = perturbed.vectors.copy()
    if prev_deltas is None:
        deltas = np.zeros((m, spec.latent_dim))
    else:
        deltas = np.asarray(prev_deltas, dtype=np.float64).copy()
        if deltas.shape != (m, spec.latent_dim):
            raise dc.ConfigError("previous perturbations have the wrong shape")
    for i in range(m):
        z_clean = encode_mean(clean.vectors[i], spec, x)
        z_pert = encode_mean(perturbed.vectors[i], spec, x)
        basis = gram_schmidt(z_clean, drop_tolerance)
        if basis.degenerate:
            log.warning("degenerate latent basis; skipping particle %d", i)
            continue
        signs = assign_signs(basis, x.shape[0])
        delta = solve_delta(z_clean, z_pert, signs)
        deltas[i] = delta
        targets = z_clean + delta * signs
        if lr != 0.0:
            before, g = dc.value_and_grad(
                lambda p: perturb_objective(p, spec, x, targets),
                perturbed.vectors[i],
            )
            step = lr
            for _ in range(30):
                cand = perturbed.vectors[i] - step * g
                after = float(perturb_objective(
                    dc.Var(cand), spec, x, targets).value)
                if after <= before:
                    new_vectors[i] = cand
                    break
                step *= 0.5
    return perturbed.replace(new_vectors), deltas


def align(perturbed: ParticleSet, clean: ParticleSet, clean_grads,
          perturb_hyper: HyperNet, codes: CodeSet, svgd_step_size, match_lr,
          match_steps=1, scale_fn=None):
    """Pull perturbed particles along the leaders' transport, re-match their net.

    clean_grads: per-leader posterior gradients, (M, P) or callable.
    scale_fn, when given, transforms the raw transport before the step is
    applied (adaptive step scaling lives with the caller).
    Returns (aligned particle set, updated hypernet, reported match loss).
    """
    bandwidth = median_bandwidth(clean.vectors)
    moves = svgd_pi(perturbed.vectors, clean, clean_grads, bandwidth)
    if scale_fn is not None:
        moves = scale_fn(moves)
    aligned = perturbed.replace(perturbed.vectors + svgd_step_size * moves)
    net, loss = trajectory_match(perturb_hyper, codes, aligned, match_lr,
                                 match_steps)
    return aligned, net, loss
