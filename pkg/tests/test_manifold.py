"""Encoding, posterior sampling, decoding, and the inversion chain."""

import numpy as np
import pytest

from manifold_advgen import attack as atk
from manifold_advgen import diffcore as dc
from manifold_advgen import pipeline as pl
from manifold_advgen.manifold import (
    EncoderSpec,
    LatentBatch,
    decode,
    encode,
    encode_mean,
    encode_posterior,
    inversion,
    split_particle,
)
from manifold_advgen.svgd import ParticleSet

SPEC = EncoderSpec(input_dim=2, hidden=(4,), latent_dim=2)


def random_particle(rng, spec=SPEC, rho_obs=0.0, rho_prior=0.0):
    w = rng.normal(size=spec.n_weights) * 0.5
    return np.concatenate([w, [rho_obs, rho_prior]])


def particle_set(vectors):
    return ParticleSet(np.asarray(vectors, dtype=np.float64))


def test_spec_validation():
    with pytest.raises(dc.ConfigError):
        EncoderSpec(input_dim=3, hidden=(4,), latent_dim=1)
    assert EncoderSpec(3, (40, 40), 2).particle_len == 1884


def test_split_particle_blocks():
    rng = np.random.default_rng(0)
    vec = random_particle(rng, rho_obs=0.7, rho_prior=-0.2)
    w, rho_obs, rho_prior = split_particle(vec, SPEC)
    assert w.size == SPEC.n_weights
    assert (rho_obs, rho_prior) == (0.7, -0.2)
    with pytest.raises(dc.ConfigError):
        split_particle(vec[:-1], SPEC)


def test_latent_batch_validation():
    with pytest.raises(dc.ConfigError):
        LatentBatch(np.zeros((0, 2)), None, "clean")
    with pytest.raises(dc.ConfigError):
        LatentBatch(np.zeros((2, 2)), None, "weird")


def test_encode_same_seed_identical():
    rng = np.random.default_rng(1)
    vec = random_particle(rng)
    x = rng.normal(size=(3, 2))
    a = encode(vec, SPEC, x, noise_seed=42)
    b = encode(vec, SPEC, x, noise_seed=42)
    assert np.array_equal(a.z, b.z)
    assert not np.array_equal(a.z, encode(vec, SPEC, x, noise_seed=43).z)


def test_encode_high_precision_is_noiseless():
    # zero-weight encoder with bias b and huge precision collapses to b
    spec = EncoderSpec(input_dim=3, hidden=(), latent_dim=2)
    bias = np.array([0.5, -1.5])
    vec = np.concatenate([np.zeros(6), bias, [np.log(1e12), 0.0]])
    z = encode(vec, spec, np.ones((4, 3)), noise_seed=0).z
    assert np.allclose(z, bias, atol=1e-4)
    assert np.allclose(encode_mean(vec, spec, np.ones((4, 3))), bias,
                       atol=1e-14)


def test_encode_variance_tracks_precision():
    # empirical variance of the noise matches 1/gamma within 20%
    rng = np.random.default_rng(2)
    x = np.tile(rng.normal(size=(1, 2)), (10000, 1))
    for gamma in (1.0, 10.0, 100.0):
        vec = random_particle(rng, rho_obs=np.log(gamma))
        z = encode(vec, SPEC, x, noise_seed=3).z
        spread = z - encode_mean(vec, SPEC, x)
        assert abs(spread.var() * gamma - 1.0) < 0.2


def test_posterior_single_particle_modes_agree():
    rng = np.random.default_rng(4)
    vec = random_particle(rng, rho_obs=np.log(1e12))
    x = rng.normal(size=(3, 2))
    sampled = encode_posterior(particle_set([vec]), SPEC, x, "sample", seed=5)
    mean = encode_posterior(particle_set([vec]), SPEC, x, "mean")
    assert sampled.particle_index == 0
    assert np.allclose(sampled.z, mean.z, atol=1e-4)


def test_posterior_mean_equals_explicit_average():
    rng = np.random.default_rng(5)
    vecs = [random_particle(rng) for _ in range(5)]
    x = rng.normal(size=(6, 2))
    got = encode_posterior(particle_set(vecs), SPEC, x, "mean").z
    want = np.mean([encode_mean(v, SPEC, x) for v in vecs], axis=0)
    assert np.allclose(got, want, atol=1e-12)


def test_posterior_mean_permutation_invariant():
    rng = np.random.default_rng(6)
    vecs = np.array([random_particle(rng) for _ in range(4)])
    x = rng.normal(size=(3, 2))
    a = encode_posterior(particle_set(vecs), SPEC, x, "mean").z
    b = encode_posterior(particle_set(vecs[::-1].copy()), SPEC, x, "mean").z
    assert np.allclose(a, b, atol=1e-12)


def test_posterior_sample_needs_seed():
    rng = np.random.default_rng(7)
    vec = random_particle(rng)
    with pytest.raises(dc.ConfigError):
        encode_posterior(particle_set([vec]), SPEC, np.zeros((1, 2)),
                         "sample")
    with pytest.raises(dc.ConfigError):
        encode_posterior(particle_set([vec]), SPEC, np.zeros((1, 2)),
                         "median")


def test_decode_zero_weights_gives_bias():
    dec = dc.MlpParams([np.zeros((3, 2))], [np.array([1.0, 2.0, 3.0])])
    out = decode(dec, np.random.default_rng(8).normal(size=(5, 2)))
    assert np.array_equal(out, np.tile([1.0, 2.0, 3.0], (5, 1)))


def test_inversion_identity_autoencoder_fixed_point():
    # exact linear identity encoder/decoder, huge precision: z_tilde == z
    spec = EncoderSpec(input_dim=2, hidden=(), latent_dim=2)
    w = np.eye(2).ravel()
    vec = np.concatenate([w, np.zeros(2), [np.log(1e18), 0.0]])
    dec = dc.MlpParams([np.eye(2)], [np.zeros(2)])
    x = np.random.default_rng(9).normal(size=(4, 2))
    z_t, recon = inversion(x, vec, spec, dec, seed=10)
    assert np.allclose(recon, x, atol=1e-8)
    first = encode(vec, spec, x, pl.subseed(10, "fwd"))
    assert np.allclose(z_t.z, first.z, atol=1e-8)
    assert z_t.source == "inverted"


def test_inversion_constant_decoder():
    rng = np.random.default_rng(10)
    vec = random_particle(rng)
    const = np.array([0.3, -0.7])
    dec = dc.MlpParams([np.zeros((2, 2))], [const])
    x = rng.normal(size=(3, 2))
    z_t, recon = inversion(x, vec, SPEC, dec, seed=11)
    assert np.array_equal(recon, np.tile(const, (3, 1)))
    want = encode(vec, SPEC, np.tile(const, (3, 1)), pl.subseed(11, "back"),
                  source="inverted")
    assert np.array_equal(z_t.z, want.z)


def test_inversion_pure_and_seeded():
    rng = np.random.default_rng(11)
    vec = random_particle(rng)
    dec = dc.MlpParams.random([2, 4, 2], rng)
    x = rng.normal(size=(3, 2))
    x_copy = x.copy()
    a1, r1 = inversion(x, vec, SPEC, dec, seed=12)
    a2, r2 = inversion(x, vec, SPEC, dec, seed=12)
    assert np.array_equal(a1.z, a2.z)
    assert np.array_equal(r1, r2)
    assert np.array_equal(x, x_copy)


def spearman(a, b):
    ra = np.argsort(np.argsort(a)).astype(np.float64)
    rb = np.argsort(np.argsort(b)).astype(np.float64)
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra * rb).sum() / np.sqrt((ra * ra).sum() * (rb * rb).sum()))


def test_inversion_error_association_on_smoke_model():
    # reconstruction error and re-encoding drift should associate positively
    # once the autoencoder has learned even a rough chart
    ds = pl.gen_swiss_roll(400, 4, 0.4, seed=1)
    cfg = pl.build_config(n_points=400, epochs=20, n_particles=3)
    state = atk.train(cfg, ds, classifier=None)
    from manifold_advgen.hypernet import sample_particles
    particles = sample_particles(state.clean_hyper, state.codes)
    vec = particles.vectors[0]
    x = ds.x[ds.test_idx][:200] if len(ds.test_idx) >= 200 else ds.x[:200]
    rec_err, drift = [], []
    for i in range(len(x)):
        row = x[i:i + 1]
        first = encode(vec, state.spec, row, pl.subseed(13, "fwd", i))
        z_t, recon = inversion(row, vec, state.spec, state.decoder,
                               seed=pl.subseed(13, "inv", i))
        rec_err.append(float(np.linalg.norm(row - recon)))
        drift.append(float(np.linalg.norm(z_t.z - first.z)))
    assert spearman(np.array(rec_err), np.array(drift)) > 0.0
