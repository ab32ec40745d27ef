"""Orthogonalization, sign assignment, closed-form perturbations, and the
particle update / alignment built on them."""

import numpy as np
import pytest

from manifold_advgen import diffcore as dc
from manifold_advgen.gbsm import (
    align,
    assign_signs,
    gbsm_update,
    gram_schmidt,
    perturb_objective,
    solve_delta,
)
from manifold_advgen.hypernet import CodeSet, HyperNet, make_hypernet, \
    sample_particles
from manifold_advgen.manifold import EncoderSpec, encode_mean
from manifold_advgen.svgd import ParticleSet

SPEC = EncoderSpec(input_dim=2, hidden=(4,), latent_dim=2)


def numeric_delta(z_clean, z_pert, signs, steps=8000, lr=None):
    # independent oracle: plain gradient descent on the squared objective
    b, d = z_clean.shape
    if lr is None:
        lr = 0.25 / b
    delta = np.zeros(d)
    for _ in range(steps):
        residual = z_pert - z_clean - delta * signs
        delta = delta + lr * 2.0 * (signs * residual).sum(axis=0)
    return delta


def objective_value(z_clean, z_pert, signs, delta):
    return float(((z_pert - z_clean - delta * signs) ** 2).sum())


# ---------------------------------------------------------------------------
# gram_schmidt


def test_identity_rows_pass_through():
    basis = gram_schmidt(np.eye(3))
    assert basis.rank == 3
    assert np.allclose(basis.rows, np.eye(3), atol=1e-15)


def test_collinear_rows_dropped():
    vecs = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 3.0]])
    basis = gram_schmidt(vecs)
    assert basis.rank == 2
    assert np.allclose(basis.rows, np.eye(2), atol=1e-15)


def test_all_zero_input_is_degenerate():
    basis = gram_schmidt(np.zeros((4, 3)))
    assert basis.rank == 0
    assert basis.degenerate


def independent_rank(vectors, tol=1e-8):
    # rank oracle via pairwise projection residuals, no linalg helpers
    kept = []
    for v in vectors:
        r = v.copy()
        for u in kept:
            r = r - (r @ u) * u
        n = np.linalg.norm(r)
        if n > tol * max(1.0, np.linalg.norm(v)):
            kept.append(r / n)
    return len(kept)


def test_random_2d_full_rank():
    rng = np.random.default_rng(0)
    for _ in range(20):
        vecs = rng.normal(size=(20, 2))
        basis = gram_schmidt(vecs)
        assert basis.rank == independent_rank(vecs) == 2
        gram = basis.rows @ basis.rows.T
        assert np.max(np.abs(gram - np.eye(2))) < 1e-10


def test_orthonormality_and_span_random():
    rng = np.random.default_rng(1)
    for _ in range(100):
        b = int(rng.integers(1, 33))
        d = int(rng.integers(1, 9))
        vecs = rng.normal(size=(b, d))
        basis = gram_schmidt(vecs)
        assert basis.rank == independent_rank(vecs)
        if basis.rank:
            gram = basis.rows @ basis.rows.T
            assert np.max(np.abs(gram - np.eye(basis.rank))) < 1e-8
            recon = vecs @ basis.rows.T @ basis.rows
            assert np.max(np.abs(recon - vecs)) < 1e-8


# ---------------------------------------------------------------------------
# assign_signs / solve_delta


def test_signs_single_basis_row():
    basis = gram_schmidt(np.array([[0.6, -0.8]]))
    signs = assign_signs(basis, 4)
    assert np.array_equal(signs, np.tile([1.0, -1.0], (4, 1)))


def test_signs_cycle_modularly():
    basis = gram_schmidt(np.array([[1.0, 0.0], [0.0, -1.0]]))
    signs = assign_signs(basis, 3)
    assert np.array_equal(signs[0], signs[2])
    assert np.array_equal(signs[0], [1.0, 1.0])  # sign(0) -> +1
    assert np.array_equal(signs[1], [1.0, -1.0])


def test_signs_zero_is_positive():
    basis = gram_schmidt(np.array([[0.0, 1.0]]))
    assert np.array_equal(assign_signs(basis, 1), [[1.0, 1.0]])


def test_signs_degenerate_basis_rejected():
    with pytest.raises(dc.ConfigError):
        assign_signs(gram_schmidt(np.zeros((2, 2))), 2)


def test_delta_zero_when_sets_match():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(5, 2))
    s = np.ones((5, 2))
    assert np.array_equal(solve_delta(z, z, s), np.zeros(2))


def test_delta_single_row_exact():
    z = np.array([[0.5, -1.0]])
    zp = np.array([[1.0, 1.5]])
    assert np.allclose(solve_delta(z, zp, np.ones((1, 2))),
                       [0.5, 2.5], atol=1e-15)


def test_delta_matches_numeric_minimizer():
    rng = np.random.default_rng(3)
    for _ in range(20):
        z = rng.normal(size=(16, 2))
        zp = rng.normal(size=(16, 2))
        signs = np.where(rng.normal(size=(16, 2)) >= 0, 1.0, -1.0)
        closed = solve_delta(z, zp, signs)
        assert np.max(np.abs(closed - numeric_delta(z, zp, signs))) < 1e-4


def test_delta_is_exact_minimizer():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(8, 3))
    zp = rng.normal(size=(8, 3))
    signs = np.where(rng.normal(size=(8, 3)) >= 0, 1.0, -1.0)
    delta = solve_delta(z, zp, signs)
    base = objective_value(z, zp, signs, delta)
    for j in range(3):
        for bump in (1e-3, -1e-3):
            shifted = delta.copy()
            shifted[j] += bump
            assert objective_value(z, zp, signs, shifted) >= base


# ---------------------------------------------------------------------------
# gbsm_update


def random_particles(rng, m=3):
    vecs = np.stack([
        np.concatenate([rng.normal(size=SPEC.n_weights) * 0.5, [1.0, 0.0]])
        for _ in range(m)
    ])
    return ParticleSet(vecs)


def test_update_fixed_point_when_sets_equal():
    rng = np.random.default_rng(5)
    particles = random_particles(rng)
    x = rng.normal(size=(6, 2))
    out, deltas = gbsm_update(particles, particles, x, SPEC, lr=0.05)
    assert np.array_equal(deltas, np.zeros((3, 2)))
    assert np.array_equal(out.vectors, particles.vectors)


def test_update_lr_zero_refreshes_deltas_only():
    rng = np.random.default_rng(6)
    clean = random_particles(rng)
    pert = random_particles(rng)
    x = rng.normal(size=(6, 2))
    stale = np.full((3, 2), 9.0)
    out, deltas = gbsm_update(pert, clean, x, SPEC, lr=0.0,
                              prev_deltas=stale)
    assert np.array_equal(out.vectors, pert.vectors)
    assert not np.array_equal(deltas, stale)
    assert np.all(np.isfinite(deltas))


def test_update_degenerate_basis_keeps_old_delta():
    rng = np.random.default_rng(7)
    pert = random_particles(rng, m=1)
    # zero-weight zero-bias clean particle: all latent means are 0
    zero_clean = ParticleSet(
        np.concatenate([np.zeros(SPEC.n_weights), [1.0, 0.0]])[None, :])
    x = rng.normal(size=(4, 2))
    prev = np.array([[0.25, -0.5]])
    out, deltas = gbsm_update(pert, zero_clean, x, SPEC, lr=0.05,
                              prev_deltas=prev)
    assert np.array_equal(deltas, prev)
    assert np.array_equal(out.vectors, pert.vectors)


def test_update_objective_descends():
    rng = np.random.default_rng(8)
    clean = random_particles(rng)
    pert = random_particles(rng)
    x = rng.normal(size=(6, 2))

    lr = 0.2
    for _ in range(25):  # backtrack on the squared surrogate
        out, deltas = gbsm_update(pert, clean, x, SPEC, lr=lr)
        descended = True
        for i in range(3):
            z_c = encode_mean(clean.vectors[i], SPEC, x)
            signs = assign_signs(gram_schmidt(z_c), len(x))
            target = z_c + deltas[i] * signs
            before = float(((encode_mean(pert.vectors[i], SPEC, x)
                             - target) ** 2).sum())
            after = float(((encode_mean(out.vectors[i], SPEC, x)
                            - target) ** 2).sum())
            descended &= after <= before + 1e-12
        if descended:
            break
        lr *= 0.5
    assert descended


def test_update_gradient_matches_fd():
    rng = np.random.default_rng(9)
    for _ in range(5):
        vec = np.concatenate([rng.normal(size=SPEC.n_weights) * 0.5,
                              [1.0, 0.0]])
        x = rng.normal(size=(4, 2))
        targets = rng.normal(size=(4, 2))

        def loss(flat):
            return perturb_objective(flat, SPEC, x, targets)

        analytic = dc.grad(loss, vec)
        fd = dc.finite_diff_grad(loss, vec)
        rel = np.max(np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic)))
        assert rel < 1e-5


# ---------------------------------------------------------------------------
# align


def make_tiny_hyper(rng):
    return make_hypernet(3, (4,), SPEC.particle_len, rng, "perturb")


def test_align_identity_at_fixed_point():
    rng = np.random.default_rng(10)
    vec = np.concatenate([rng.normal(size=SPEC.n_weights) * 0.5, [1.0, 0.0]])
    particles = ParticleSet(vec[None, :])
    net = make_tiny_hyper(rng)
    codes = CodeSet(rng.normal(size=(1, 3)), seed=0)
    zero_grads = np.zeros((1, SPEC.particle_len))
    aligned, _, _ = align(particles, particles, zero_grads, net, codes,
                          svgd_step_size=0.1, match_lr=0.0)
    assert np.allclose(aligned.vectors, particles.vectors, atol=1e-14)


def test_align_zero_rates_is_identity():
    rng = np.random.default_rng(11)
    clean = random_particles(rng)
    pert = random_particles(rng)
    net = make_tiny_hyper(rng)
    codes = CodeSet(rng.normal(size=(3, 3)), seed=1)
    grads = rng.normal(size=(3, SPEC.particle_len))
    aligned, out_net, _ = align(pert, clean, grads, net, codes,
                                svgd_step_size=0.0, match_lr=0.0)
    assert np.array_equal(aligned.vectors, pert.vectors)
    assert np.array_equal(out_net.params.flatten(), net.params.flatten())


def test_align_pulls_followers_toward_leaders():
    # quadratic posterior with spread leaders; followers offset well outside
    rng = np.random.default_rng(12)
    p = SPEC.particle_len
    center = rng.normal(size=p)
    offsets = np.linspace(-1.5, 1.5, 5)
    leaders = ParticleSet(center + offsets[:, None] * np.ones(p) / np.sqrt(p))
    c = 4.0
    grads = -c * (leaders.vectors - center)
    follower = ParticleSet(center[None, :] + 2.5 * np.ones(p) / np.sqrt(p))
    net = make_tiny_hyper(rng)
    codes = CodeSet(rng.normal(size=(1, 3)), seed=2)

    dist = np.linalg.norm(follower.vectors[0] - center)
    for _ in range(50):
        follower, net, _ = align(follower, leaders, grads, net, codes,
                                 svgd_step_size=0.05, match_lr=0.0)
        now = np.linalg.norm(follower.vectors[0] - center)
        assert now < dist
        dist = now
