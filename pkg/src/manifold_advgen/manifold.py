"""Latent manifold access: stochastic encoding, decoding, and inversion.

An encoder particle is [flattened MLP weights, rho_obs, rho_prior]; its
latent for x is the MLP mean plus Gaussian noise with precision
exp(rho_obs). The decoder is a plain deterministic MLP. Inversion chains
encode -> decode -> encode to produce the re-encoded latents used as
likelihood targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .pipeline import subseed
from .svgd import ParticleSet

LATENT_SOURCES = ("clean", "perturbed", "inverted")


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture of the encoder family all particles share."""

    input_dim: int = 3
    hidden: tuple = (40, 40)
    latent_dim: int = 2

    def __post_init__(self):
        if self.latent_dim < 2:
            raise dc.ConfigError("latent_dim must be at least 2")
        if self.input_dim < 1:
            raise dc.ConfigError("input_dim must be positive")

    @property
    def layer_dims(self):
        return [self.input_dim, *self.hidden, self.latent_dim]

    @property
    def n_weights(self):
        return dc.n_mlp_params(self.layer_dims)

    @property
    def particle_len(self):
        return self.n_weights + 2


@dataclass
class LatentBatch:
    """Latent codes plus where they came from."""

    z: np.ndarray
    particle_index: int | None
    source: str

    def __post_init__(self):
        self.z = dc.tensor(self.z)
        if self.z.ndim != 2 or self.z.shape[0] < 1:
            raise dc.ConfigError("latents must be a non-empty (B, d) array")
        if self.source not in LATENT_SOURCES:
            raise dc.ConfigError(f"unknown latent source {self.source!r}")


def split_particle(particle_vec, spec: EncoderSpec):
    """(weight block, rho_obs, rho_prior) view of one particle vector."""
    vec = np.asarray(particle_vec, dtype=np.float64).ravel()
    if vec.size != spec.particle_len:
        raise dc.ConfigError(
            f"particle length {vec.size} != expected {spec.particle_len}"
        )
    return vec[:spec.n_weights], float(vec[-2]), float(vec[-1])


def encoder_params(particle_vec, spec: EncoderSpec):
    w, _, _ = split_particle(particle_vec, spec)
    return dc.MlpParams.from_flat(w, spec.layer_dims)


def encode_mean(particle_vec, spec: EncoderSpec, x):
    """Noise-free latent means f_w(x), shape (B, latent_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    return dc.mlp_forward(encoder_params(particle_vec, spec), x)


def encode(particle_vec, spec: EncoderSpec, x, noise_seed,
           particle_index=None, source="clean"):
    """Stochastic latents z = f_w(x) + eps, eps ~ N(0, 1/exp(rho_obs) I).

    Deterministic given the seed; the same seed always draws the same noise.
    """
    mean = encode_mean(particle_vec, spec, x)
    _, rho_obs, _ = split_particle(particle_vec, spec)
    sd = float(np.exp(-0.5 * rho_obs))
    rng = np.random.default_rng(noise_seed)
    z = mean + rng.normal(0.0, 1.0, size=mean.shape) * sd
    return LatentBatch(z, particle_index, source)


def encode_posterior(particles: ParticleSet, spec: EncoderSpec, x, mode,
                     seed=None, source="clean"):
    """Latents under the particle-averaged posterior.

    mode "sample": pick one particle uniformly (seeded) and encode with noise.
    mode "mean":   average the noise-free means over all particles.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if mode == "sample":
        if seed is None:
            raise dc.ConfigError("sample mode needs a seed")
        rng = np.random.default_rng(subseed(seed, "pick"))
        m = int(rng.integers(particles.n_particles))
        return encode(particles.vectors[m], spec, x, subseed(seed, "noise"),
                      particle_index=m, source=source)
    if mode == "mean":
        total = np.zeros((x.shape[0], spec.latent_dim))
        for vec in particles.vectors:
            total += encode_mean(vec, spec, x)
        return LatentBatch(total / particles.n_particles, None, source)
    raise dc.ConfigError(f"unknown encode mode {mode!r}")


def decode(decoder: dc.MlpParams, z):
    """Deterministic decoding back to feature space."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    return dc.mlp_forward(decoder, z)


def inversion(x, particle_vec, spec: EncoderSpec, decoder: dc.MlpParams, seed):
    """Encode, decode, and re-encode one batch under one particle.

    Returns (re-encoded latents, reconstruction). The re-encoded latents pair
    with the original x rows as likelihood targets.
    """
    first = encode(particle_vec, spec, x, subseed(seed, "fwd"), source="clean")
    recon = decode(decoder, first.z)
    again = encode(particle_vec, spec, recon, subseed(seed, "back"),
                   source="inverted")
    return again, recon
