"""Training and evaluating the manifold-preserving attack.

The trainer alternates particle-level inner updates (posterior transport for
the clean family, basis-sign perturbation plus alignment for the perturbed
family) with outer Adam updates of both hypernets and the decoder on the
reconstruction and gated adversarial losses. Generation samples the
perturbed posterior and keeps the first decoded point that both stays inside
the attack ball and flips the frozen classifier.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import pipeline as pl
from .gbsm import align, gbsm_update
from .hypernet import CodeSet, HyperNet, make_hypernet, sample_codes, \
    sample_particles, trajectory_match
from .manifold import EncoderSpec, decode, encode, encode_mean, \
    encode_posterior, inversion
from .pipeline import LabeledDataset, RunConfig, subseed
from .svgd import GammaHypers, ParticleSet, log_posterior_grad, \
    median_bandwidth, svgd_tau

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# Frozen classifier


@dataclass
class Classifier:
    """Softmax MLP used as the white-box attack target. Frozen after training."""

    params: dc.MlpParams
    test_accuracy: float | None = None

    def __post_init__(self):
        if self.params.output_act != "softmax":
            raise dc.ConfigError("classifier output must be softmax")

    @property
    def n_classes(self):
        return self.params.weights[-1].shape[0]


def classifier_probs(clf: Classifier, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = dc.mlp_forward(clf.params, x[None, :] if single else x)
    return out[0] if single else out


def classifier_predict(clf: Classifier, x):
    probs = classifier_probs(clf, x)
    return int(np.argmax(probs)) if probs.ndim == 1 else np.argmax(probs, axis=1)


def train_classifier(dataset: LabeledDataset, seed=0, hidden=(32, 32),
                     epochs=200, lr=1e-2, batch_size=64):
    """Fit the attack target with Adam on cross-entropy; reports test accuracy."""
    x_train, y_train = dataset.train()
    x_test, y_test = dataset.test()
    dims = [x_train.shape[1], *hidden, dataset.n_classes]
    rng = np.random.default_rng(subseed(seed, "classifier-init"))
    params = dc.MlpParams.random(dims, rng, output_act="softmax")
    flat = params.flatten()
    adam = AdamState.like(flat)
    order_rng = np.random.default_rng(subseed(seed, "classifier-order"))
    for _ in range(epochs):
        order = order_rng.permutation(len(x_train))
        for start in range(0, len(order), batch_size):
            rows = order[start:start + batch_size]
            xb, yb = x_train[rows], y_train[rows]
            _, g = dc.value_and_grad(
                lambda p: dc.softmax_cross_entropy(
                    dc.mlp_forward_var(p, dims, xb), yb), flat)
            flat = flat + adam.step(g, lr)
    params = dc.MlpParams.from_flat(flat, dims, output_act="softmax")
    clf = Classifier(params)
    preds = classifier_predict(clf, x_test)
    clf.test_accuracy = float((preds == y_test).mean())
    return clf


def save_classifier(clf: Classifier, path):
    dims = np.asarray(clf.params.layer_dims, dtype=np.float64)
    pl.save_arrays(path, {
        "layer_dims": dims,
        "flat": clf.params.flatten(),
        "test_accuracy": np.asarray([clf.test_accuracy
                                     if clf.test_accuracy is not None else -1.0]),
    })


def load_classifier(path):
    arrays = pl.load_arrays(path)
    dims = [int(v) for v in arrays["layer_dims"]]
    params = dc.MlpParams.from_flat(arrays["flat"], dims, output_act="softmax")
    acc = float(arrays["test_accuracy"][0])
    return Classifier(params, None if acc < 0 else acc)


# ---------------------------------------------------------------------------
# Losses


def adversarial_term(x_adv, y_true, clf: Classifier, literal_sign=False):
    """Pressure away from the true class: -log(1 - P(y|x') + 1e-12).

    The term shrinks toward zero as the classifier loses confidence in the
    true class on x'. literal_sign flips the sign of the log (kept only for
    comparison; it rewards confidence instead).
    """
    p = float(classifier_probs(clf, np.asarray(x_adv, dtype=np.float64))[int(y_true)])
    value = math.log(1.0 - p + 1e-12)
    return value if literal_sign else -value


def total_loss(x, x_rec, x_adv, y_true, clf: Classifier, eps_attack,
               literal_sign=False):
    """Per-example losses (reconstruction side, adversarial side).

    The adversarial side is gated: while the perturbed reconstruction sits
    outside the attack ball, only its distance is penalized; once inside,
    the classifier pressure switches on.
    """
    x = np.asarray(x, dtype=np.float64)
    loss_rec = float(np.linalg.norm(x - np.asarray(x_rec, dtype=np.float64)))
    dist_adv = float(np.linalg.norm(x - np.asarray(x_adv, dtype=np.float64)))
    if dist_adv > eps_attack:
        return loss_rec, dist_adv
    return loss_rec, dist_adv + adversarial_term(x_adv, y_true, clf,
                                                 literal_sign)


# ---------------------------------------------------------------------------
# Baseline attack and report metrics


def pgd_attack(x, y, clf: Classifier, eps, steps=40, step_size=None):
    """Iterated normalized gradient ascent on the classifier loss, projected
    back to the L2 ball of radius eps around each clean point."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if step_size is None:
        step_size = eps / 4.0
    dims = clf.params.layer_dims
    flat = clf.params.flatten()
    x_adv = x.copy()
    for _ in range(steps):
        xv = dc.Var(x_adv, op="param")
        loss = dc.softmax_cross_entropy(
            dc.mlp_forward_var(flat, dims, xv), y)
        dc.backward(loss)
        g = xv.grad
        norms = np.sqrt((g * g).sum(axis=1, keepdims=True))
        x_adv = x_adv + step_size * g / np.maximum(norms, 1e-12)
        shift = x_adv - x
        dist = np.sqrt((shift * shift).sum(axis=1, keepdims=True))
        factor = np.minimum(1.0, eps / np.maximum(dist, 1e-12))
        x_adv = x + shift * factor
    return x_adv


def spectral_norm(mat, tol=1e-10, max_iter=1000):
    """Largest singular value by power iteration on mat^T mat.

    Returns (value, converged). The start vector is the largest column of
    mat^T mat, which already solves the rank-1 case exactly.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise dc.ConfigError("spectral_norm expects a matrix")
    a = mat.T @ mat
    col_norms = np.sqrt((a * a).sum(axis=0))
    if col_norms.max() == 0.0:
        return 0.0, True
    v = a[:, int(np.argmax(col_norms))]
    v = v / np.linalg.norm(v)
    value = 0.0
    for _ in range(max_iter):
        w = a @ v
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return 0.0, True
        v_next = w / norm_w
        value_next = math.sqrt(norm_w)
        if abs(value_next - value) <= tol * max(1.0, value_next) \
                and np.abs(v_next - v).max() <= tol:
            return value_next, True
        v, value = v_next, value_next
    log.warning("power iteration hit %d iterations without converging", max_iter)
    return value, False


def noise_level(clean, adv):
    """Largest singular value of the displacement matrix (adv - clean)."""
    clean = np.asarray(clean, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    if clean.shape != adv.shape:
        raise dc.ConfigError("clean and adv batches must share a shape")
    value, _ = spectral_norm(adv - clean)
    return value


def marginal_overlap(clean, perturbed, seed=0):
    """Per-dimension 1-Wasserstein distance between sample marginals.

    Computed from sorted samples; the larger set is subsampled (seeded) to
    match the smaller one first.
    """
    clean = np.asarray(clean, dtype=np.float64)
    perturbed = np.asarray(perturbed, dtype=np.float64)
    if clean.ndim != 2 or perturbed.ndim != 2 \
            or clean.shape[1] != perturbed.shape[1]:
        raise dc.ConfigError("marginal_overlap expects (n, d) and (m, d)")
    n = min(len(clean), len(perturbed))
    rng = np.random.default_rng(subseed(seed, "overlap"))
    if len(clean) > n:
        clean = clean[rng.choice(len(clean), n, replace=False)]
    if len(perturbed) > n:
        perturbed = perturbed[rng.choice(len(perturbed), n, replace=False)]
    a = np.sort(clean, axis=0)
    b = np.sort(perturbed, axis=0)
    return np.abs(a - b).mean(axis=0)


def mean_nn_distance(points, reference=None):
    """Mean nearest-neighbour distance; with no reference, within the set."""
    points = np.asarray(points, dtype=np.float64)
    if reference is None:
        d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
    else:
        reference = np.asarray(reference, dtype=np.float64)
        d2 = ((points[:, None, :] - reference[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1)).mean())


# ---------------------------------------------------------------------------
# Optimizer and train state


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, vec):
        return cls(np.zeros_like(vec), np.zeros_like(vec), 0)

    def step(self, g, lr):
        """Advance the moments and return the parameter update to add."""
        self.t += 1
        self.m = ADAM_BETA1 * self.m + (1.0 - ADAM_BETA1) * g
        self.v = ADAM_BETA2 * self.v + (1.0 - ADAM_BETA2) * g * g
        m_hat = self.m / (1.0 - ADAM_BETA1 ** self.t)
        v_hat = self.v / (1.0 - ADAM_BETA2 ** self.t)
        return -lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class TrainState:
    """Everything training evolves; checkpoints round-trip all of it."""

    config: RunConfig
    spec: EncoderSpec
    clean_hyper: HyperNet
    perturb_hyper: HyperNet
    decoder: dc.MlpParams
    codes: CodeSet
    perturbation: np.ndarray
    adam: dict
    tau_hist_clean: np.ndarray = None
    epoch: int = 0
    descent_batches: int = 0
    total_batches: int = 0

    @property
    def hypers(self):
        return GammaHypers(self.config.gamma_a, self.config.gamma_b,
                           self.config.lambda_a, self.config.lambda_b)

    @property
    def descent_fraction(self):
        if self.total_batches == 0:
            return 0.0
        return self.descent_batches / self.total_batches

    def decoder_dims(self):
        return self.decoder.layer_dims


def init_state(config: RunConfig, input_dim):
    spec = EncoderSpec(input_dim, config.encoder_hidden, config.latent_dim)
    clean = make_hypernet(
        config.hyper_input_dim, config.hyper_hidden, spec.particle_len,
        np.random.default_rng(subseed(config.init_seed, "hyper")), "clean")
    perturb = HyperNet(clean.params.copy(), "perturb")
    # relu decoder: latent codes grow large during training and saturate a
    # tanh first layer, freezing its gradients and capping reconstruction
    decoder = dc.MlpParams.random(
        [config.latent_dim, *config.decoder_hidden, input_dim],
        np.random.default_rng(subseed(config.init_seed, "decoder")),
        hidden_act="relu")
    codes = sample_codes(config.n_particles, config.hyper_input_dim,
                         subseed(config.init_seed, "codes"))
    adam = {
        "clean": AdamState.like(clean.params.flatten()),
        "perturb": AdamState.like(clean.params.flatten()),
        "decoder": AdamState.like(decoder.flatten()),
    }
    t_shape = (config.n_particles, spec.particle_len)
    return TrainState(config, spec, clean, perturb, decoder, codes,
                      np.zeros((config.n_particles, config.latent_dim)), adam,
                      np.zeros(t_shape))


def save_state(state: TrainState, path):
    arrays = {
        "meta": np.asarray([
            float(state.epoch),
            float(state.descent_batches),
            float(state.total_batches),
            float(state.codes.seed),
        ]),
        "clean_hyper": state.clean_hyper.params.flatten(),
        "perturb_hyper": state.perturb_hyper.params.flatten(),
        "decoder": state.decoder.flatten(),
        "codes": state.codes.codes,
        "perturbation": state.perturbation,
        "tau_hist_clean": state.tau_hist_clean,
    }
    for name, adam in state.adam.items():
        arrays[f"adam_{name}_m"] = adam.m
        arrays[f"adam_{name}_v"] = adam.v
        arrays[f"adam_{name}_t"] = np.asarray([float(adam.t)])
    pl.save_arrays(path, arrays)


def load_state(path, config: RunConfig, input_dim):
    arrays = pl.load_arrays(path)
    state = init_state(config, input_dim)
    meta = arrays["meta"]
    hyper_dims = state.clean_hyper.layer_dims
    state.clean_hyper = HyperNet(
        dc.MlpParams.from_flat(arrays["clean_hyper"], hyper_dims), "clean")
    state.perturb_hyper = HyperNet(
        dc.MlpParams.from_flat(arrays["perturb_hyper"], hyper_dims), "perturb")
    state.decoder = dc.MlpParams.from_flat(arrays["decoder"],
                                           state.decoder.layer_dims,
                                           hidden_act=state.decoder.hidden_act)
    if arrays["codes"].shape != state.codes.codes.shape:
        raise dc.ConfigError("checkpoint code shape does not match config")
    state.codes = CodeSet(arrays["codes"], int(meta[3]))
    state.perturbation = arrays["perturbation"].copy()
    state.tau_hist_clean = arrays["tau_hist_clean"].copy()
    for name in state.adam:
        state.adam[name] = AdamState(arrays[f"adam_{name}_m"].copy(),
                                     arrays[f"adam_{name}_v"].copy(),
                                     int(arrays[f"adam_{name}_t"][0]))
    state.epoch = int(meta[0])
    state.descent_batches = int(meta[1])
    state.total_batches = int(meta[2])
    return state


# ---------------------------------------------------------------------------
# Inner training


def _particle_map(fn, count, threads):
    if threads <= 1 or count <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(count)))  # merged in index order


def batch_targets(state: TrainState, x, seed):
    """Latent draw, reconstruction, and shared inversion targets.

    One sampled particle carries the whole chain (encode with noise, decode,
    re-encode with noise) and the resulting (x, z_tilde) pairs are the
    batch's data: every particle's posterior gradient is evaluated against
    these same pairs, which is what makes the ensemble converge on one
    latent chart the decoder can invert. The targets are computed once per
    batch and held fixed across the batch's inner calls: with moving targets
    the likelihood residual can never shrink (the target is rebuilt the same
    noise-width away from wherever the particle moved), so the transport
    would never relax within a batch.
    """
    clean_set = sample_particles(state.clean_hyper, state.codes)
    lat = encode_posterior(clean_set, state.spec, x, "sample",
                           seed=subseed(seed, "latent"))
    x_rec = decode(state.decoder, lat.z)
    m = lat.particle_index
    z_tilde = encode(clean_set.vectors[m], state.spec, x_rec,
                     subseed(seed, "reenc", m), particle_index=m,
                     source="inverted").z
    return x_rec, z_tilde


def posterior_grads(state: TrainState, particles: ParticleSet, x, z_tilde,
                    threads=1):
    """Per-particle posterior gradients against the shared inversion targets.

    Each particle's own emitted weight block is the prior mean.
    """
    spec = state.spec
    dims = spec.layer_dims
    hypers = state.hypers

    def one(i):
        vec = particles.vectors[i]
        return log_posterior_grad(vec, x, z_tilde, dims,
                                  vec[:spec.n_weights], hypers)

    return np.stack(_particle_map(one, particles.n_particles, threads))


def _rms_scale(transport, hist, update=True, decay=0.9, fudge=1e-6):
    """Per-coordinate adaptive scaling of a particle transport.

    The raw transport grows with the learned precisions, so a fixed step
    turns into an unstable Euler iteration late in training. Dividing by a
    running RMS (seeded with the first transport, as in reference SVGD
    implementations) keeps the applied displacement bounded while preserving
    direction. Mutates hist in place when update is set; repeated calls in
    one batch keep it frozen so the scale stays fixed across the batch.
    """
    if update:
        if hist.any():
            hist *= decay
            hist += (1.0 - decay) * transport * transport
        else:
            hist += transport * transport
    return transport / (fudge + np.sqrt(hist))


def _norm_clip(moves, cap=1.0):
    """Clip each row of a transport matrix to at most cap in L2 norm.

    Unlike the running-scale normalization, clipping keeps small transports
    small: a follower far outside the leaders' kernel range receives a
    vanishing pull and must stay put rather than drift at constant speed.
    """
    norms = np.sqrt((moves * moves).sum(axis=1, keepdims=True))
    return moves * np.minimum(1.0, cap / np.maximum(norms, 1e-12))


def inner_training(state: TrainState, x, seed, classifier=None,
                   update_hist=True, match_steps=6, targets=None):
    """One inner pass: posterior tracking, basis-sign update, alignment.

    Both hypernets take a few matching steps; the perturbation matrix is
    refreshed. Returns the diagnostics used for epoch metrics. For repeated
    calls on one batch, pass the same precomputed `targets` (batch_targets)
    and set update_hist only on the first call, so the calls relax the
    particles on one fixed objective at one fixed transport scale.
    """
    cfg = state.config
    if targets is None:
        targets = batch_targets(state, x, seed)
    _, z_tilde = targets
    clean_set = sample_particles(state.clean_hyper, state.codes)
    pert_set = sample_particles(state.perturb_hyper, state.codes)

    grads = posterior_grads(state, clean_set, x, z_tilde,
                            threads=cfg.threads)
    bandwidth = median_bandwidth(clean_set.vectors)
    tau = svgd_tau(clean_set, grads, bandwidth)
    scaled = _rms_scale(tau, state.tau_hist_clean, update=update_hist)
    track = clean_set.replace(clean_set.vectors + cfg.svgd_step * scaled)
    state.clean_hyper, match_clean = trajectory_match(
        state.clean_hyper, state.codes, track, cfg.lr_inner_clean,
        steps=match_steps)

    pert_set, deltas = gbsm_update(pert_set, clean_set, x, state.spec,
                                   cfg.gbsm_step,
                                   prev_deltas=state.perturbation)
    _, state.perturb_hyper, match_pert = align(
        pert_set, clean_set, grads, state.perturb_hyper, state.codes,
        cfg.svgd_step, cfg.lr_inner_perturb, match_steps=match_steps,
        scale_fn=_norm_clip)
    state.perturbation = deltas

    return {
        "match_loss_eta": match_clean,
        "match_loss_eta_prime": match_pert,
        "bandwidth": bandwidth,
        "delta_norms": np.sqrt((deltas * deltas).sum(axis=1)),
    }


# ---------------------------------------------------------------------------
# Outer update


def outer_update(state: TrainState, x, y, classifier, seed):
    """Adam updates of both hypernets and the decoder on the outer losses.

    Clean side: mean distance between x and its decoded posterior sample.
    Perturbed side: same distance plus the gated adversarial term. The
    decoder accumulates both sides. Returns batch metrics.
    """
    cfg = state.config
    spec = state.spec
    hyper_dims = state.clean_hyper.layer_dims
    dec_dims = state.decoder.layer_dims
    n_w = spec.n_weights
    b = x.shape[0]

    eta = dc.Var(state.clean_hyper.params.flatten(), op="param")
    eta_p = dc.Var(state.perturb_hyper.params.flatten(), op="param")
    phi = dc.Var(state.decoder.flatten(), op="param")

    def branch(hyper_var, role_tag):
        pick_seed = subseed(seed, role_tag, "pick")
        noise_seed = subseed(seed, role_tag, "noise")
        m = int(np.random.default_rng(pick_seed).integers(cfg.n_particles))
        eps = np.random.default_rng(noise_seed).normal(
            0.0, 1.0, size=(b, spec.latent_dim))
        particles = dc.mlp_forward_var(hyper_var, hyper_dims,
                                       state.codes.codes)
        vec = dc.row(particles, m)
        w = dc.slice1d(vec, 0, n_w)
        rho_obs = dc.slice1d(vec, n_w, n_w + 1)
        mean = dc.mlp_forward_var(w, spec.layer_dims, x)
        sd = dc.exp(dc.mul(rho_obs, -0.5))
        z = dc.add(mean, dc.mul(eps, sd))
        decoded = dc.mlp_forward_var(phi, dec_dims, z,
                                     hidden_act=state.decoder.hidden_act)
        return decoded

    x_rec = branch(eta, "clean")
    x_adv = branch(eta_p, "perturb")

    loss_clean = dc.vmean(dc.row_norms(dc.sub(x_rec, x)))
    adv_norms = dc.row_norms(dc.sub(x_adv, x))
    loss_adv = dc.vmean(adv_norms)

    gate = adv_norms.value <= cfg.eps_attack
    metrics = {
        "L_rec_clean": float(loss_clean.value),
        "L_rec_adv": float(loss_adv.value),
        "adv_term": 0.0,
        "asr_train_batch": 0.0,
    }
    total_adv = loss_adv
    if classifier is not None and gate.any():
        clf_flat = classifier.params.flatten()
        logits = dc.mlp_forward_var(clf_flat, classifier.params.layer_dims,
                                    x_adv)
        p_true = dc.true_class_prob(logits, y)
        inverted = dc.add(dc.sub(1.0, p_true), 1e-12)
        per_example = dc.neg(dc.log(inverted))
        if cfg.literal_adv_sign:
            per_example = dc.log(inverted)
        gated = dc.mul(per_example, gate.astype(np.float64))
        total_adv = dc.add(loss_adv, dc.vmean(gated))
        metrics["adv_term"] = float(per_example.value[gate].mean())

        preds_adv = np.argmax(logits.value, axis=1)
        preds_clean = classifier_predict(classifier, x)
        candidates = gate & (preds_clean == y)
        if candidates.any():
            metrics["asr_train_batch"] = float(
                (preds_adv[candidates] != y[candidates]).mean())

    total = dc.add(loss_clean, total_adv)
    dc.backward(total)

    flat_clean = state.clean_hyper.params.flatten() \
        + state.adam["clean"].step(eta.grad, cfg.lr_clean_hyper)
    flat_pert = state.perturb_hyper.params.flatten() \
        + state.adam["perturb"].step(eta_p.grad, cfg.lr_perturb_hyper)
    flat_dec = state.decoder.flatten() \
        + state.adam["decoder"].step(phi.grad, cfg.lr_decoder)

    state.clean_hyper = HyperNet(
        dc.MlpParams.from_flat(flat_clean, hyper_dims), "clean")
    state.perturb_hyper = HyperNet(
        dc.MlpParams.from_flat(flat_pert, hyper_dims), "perturb")
    state.decoder = dc.MlpParams.from_flat(flat_dec, dec_dims,
                                           hidden_act=state.decoder.hidden_act)
    return metrics


# ---------------------------------------------------------------------------
# Training loop


def _batches(indices, batch_size):
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def train(config: RunConfig, dataset: LabeledDataset, classifier=None,
          resume_path=None, metrics_path=None, checkpoint_dir=None):
    """Run the full training loop, appending one metrics line per epoch.

    With a classifier the perturbed side feels the gated adversarial
    pressure; without one, both sides train on reconstruction alone.
    Resuming from a checkpoint replays the exact same per-epoch randomness,
    so an interrupted run and an uninterrupted one emit identical metrics.
    """
    x_all = dataset.x
    y_all = dataset.y
    if resume_path is not None:
        state = load_state(resume_path, config, x_all.shape[1])
    else:
        state = init_state(config, x_all.shape[1])

    metrics_fh = None
    if metrics_path is not None:
        mode = "a" if (resume_path is not None and os.path.exists(metrics_path)) \
            else "w"
        metrics_fh = open(metrics_path, mode, encoding="utf-8")
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)

    train_idx = dataset.train_idx
    try:
        for epoch in range(state.epoch + 1, config.epochs + 1):
            order_rng = np.random.default_rng(
                subseed(config.train_seed, "order", epoch))
            order = train_idx[order_rng.permutation(len(train_idx))]
            last = {}
            for b_idx, rows in enumerate(_batches(order, config.batch_size)):
                xb, yb = x_all[rows], y_all[rows]
                try:
                    # one noise realization per batch: the repeated calls
                    # then relax the particles on a fixed objective instead
                    # of chasing fresh draws
                    inner_seed = subseed(config.train_seed, "inner", epoch,
                                         b_idx)
                    frozen = batch_targets(state, xb, inner_seed)
                    first_diag, diag = None, None
                    for t_inner in range(config.inner_updates):
                        diag = inner_training(state, xb, inner_seed,
                                              classifier,
                                              update_hist=(t_inner == 0),
                                              targets=frozen)
                        if first_diag is None:
                            first_diag = diag
                    state.total_batches += 1
                    if diag["match_loss_eta"] < first_diag["match_loss_eta"] and \
                            diag["match_loss_eta_prime"] < first_diag["match_loss_eta_prime"]:
                        state.descent_batches += 1
                    outer = outer_update(
                        state, xb, yb, classifier,
                        subseed(config.train_seed, "outer", epoch, b_idx))
                except dc.NumericError as exc:
                    raise dc.NumericError(
                        f"epoch {epoch} batch {b_idx}: {exc}") from exc
                last = {**outer, **diag}
            state.epoch = epoch
            if metrics_fh is not None:
                line = pl.metrics_line({
                    "epoch": epoch,
                    "L_rec_clean": last["L_rec_clean"],
                    "L_rec_adv": last["L_rec_adv"],
                    "adv_term": last["adv_term"],
                    "asr_train_batch": last["asr_train_batch"],
                    "delta_norms": last["delta_norms"],
                    "bandwidth": last["bandwidth"],
                    "match_loss_eta": last["match_loss_eta"],
                    "match_loss_eta_prime": last["match_loss_eta_prime"],
                })
                metrics_fh.write(line + "\n")
                metrics_fh.flush()
            if checkpoint_dir is not None and \
                    epoch % config.checkpoint_every == 0:
                save_state(state, os.path.join(
                    checkpoint_dir, f"checkpoint_ep{epoch:05d}.bin"))
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if checkpoint_dir is not None:
        save_state(state, os.path.join(checkpoint_dir, "state_final.bin"))
    return state


# ---------------------------------------------------------------------------
# Generation and evaluation


@dataclass
class GenerateResult:
    x_adv: np.ndarray
    is_adversarial: bool
    z_adv: np.ndarray
    tries: int
    rec_dist: float
    p_true: float


def generate(state: TrainState, x, y_true, classifier: Classifier,
             eps_attack=None, max_tries=None, seed=0):
    """Sample candidate perturbed points for one example.

    Draws up to max_tries posterior samples from the perturbed family and
    returns the first decoded candidate that stays within eps of x while
    flipping the classifier. Otherwise a best-effort candidate comes back
    with is_adversarial False: the in-ball candidate with the lowest
    true-class probability if any try landed in the ball, else the closest
    candidate.
    """
    cfg = state.config
    eps_attack = cfg.eps_attack if eps_attack is None else eps_attack
    max_tries = cfg.max_tries if max_tries is None else max_tries
    x = np.asarray(x, dtype=np.float64).ravel()
    pert_set = sample_particles(state.perturb_hyper, state.codes)
    best_ball = None   # (p_true, try_index, payload)
    best_near = None   # (rec_dist, try_index, payload)
    for t in range(max_tries):
        lat = encode_posterior(pert_set, state.spec, x, "sample",
                               seed=subseed(seed, "try", t),
                               source="perturbed")
        x_adv = decode(state.decoder, lat.z)[0]
        rec = float(np.linalg.norm(x - x_adv))
        probs = classifier_probs(classifier, x_adv)
        pred = int(np.argmax(probs))
        p_true = float(probs[int(y_true)])
        payload = (x_adv, lat.z[0], rec, p_true)
        if rec <= eps_attack:
            if pred != int(y_true):
                return GenerateResult(x_adv, True, lat.z[0], t + 1, rec,
                                      p_true)
            if best_ball is None or p_true < best_ball[0]:
                best_ball = (p_true, t, payload)
        if best_near is None or rec < best_near[0]:
            best_near = (rec, t, payload)
    chosen = best_ball if best_ball is not None else best_near
    x_adv, z_adv, rec, p_true = chosen[2]
    return GenerateResult(x_adv, False, z_adv, max_tries, rec, p_true)


@dataclass
class AttackReport:
    """Per-example outcomes plus aggregate metrics for one evaluation run."""

    examples: list
    aggregates: dict

    def to_csv(self, path):
        if not self.examples:
            cols = []
        else:
            first = self.examples[0]
            d = len(first["x"])
            dl = len(first["z_adv"])
            cols = (["index", "y", "y_pred_clean", "y_pred_adv", "rec_dist",
                     "constraint_satisfied", "is_adversarial", "tries"]
                    + [f"x{i + 1}" for i in range(d)]
                    + [f"adv{i + 1}" for i in range(d)]
                    + [f"z{i + 1}" for i in range(dl)])
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for ex in self.examples:
                cells = [str(ex["index"]), str(ex["y"]),
                         str(ex["y_pred_clean"]), str(ex["y_pred_adv"]),
                         format(ex["rec_dist"], ".17g"),
                         str(int(ex["constraint_satisfied"])),
                         str(int(ex["is_adversarial"])),
                         str(ex["tries"])]
                cells += [format(v, ".17g") for v in ex["x"]]
                cells += [format(v, ".17g") for v in ex["x_adv"]]
                cells += [format(v, ".17g") for v in ex["z_adv"]]
                fh.write(",".join(cells) + "\n")

    def save_aggregates(self, path):
        import json
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.aggregates, fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate(state: TrainState, dataset: LabeledDataset,
             classifier: Classifier, eps_attack=None, max_tries=None,
             seed=None, batch_size=64):
    """Attack every test example and aggregate the outcome.

    Returns (report, latents) where latents maps stage name to arrays for
    plotting: clean posterior-mean latents, chosen perturbed latents, labels.
    """
    cfg = state.config
    eps_attack = cfg.eps_attack if eps_attack is None else eps_attack
    max_tries = cfg.max_tries if max_tries is None else max_tries
    seed = subseed(cfg.train_seed, "eval") if seed is None else seed
    x_test, y_test = dataset.test()

    clean_set = sample_particles(state.clean_hyper, state.codes)
    clean_lat = encode_posterior(clean_set, state.spec, x_test, "mean").z
    preds_clean = classifier_predict(classifier, x_test)

    examples = []
    adv_points = np.empty_like(x_test)
    adv_lat = np.empty_like(clean_lat)
    for i in range(len(x_test)):
        res = generate(state, x_test[i], y_test[i], classifier, eps_attack,
                       max_tries, subseed(seed, "example", i))
        pred_adv = classifier_predict(classifier, res.x_adv)
        adv_points[i] = res.x_adv
        adv_lat[i] = res.z_adv
        examples.append({
            "index": int(i),
            "y": int(y_test[i]),
            "y_pred_clean": int(preds_clean[i]),
            "y_pred_adv": int(pred_adv),
            "rec_dist": res.rec_dist,
            "constraint_satisfied": res.rec_dist <= eps_attack,
            "is_adversarial": res.is_adversarial,
            "tries": res.tries,
            "x": x_test[i].copy(),
            "x_adv": res.x_adv,
            "z_adv": res.z_adv,
        })

    constraint = np.array([e["constraint_satisfied"] for e in examples])
    clean_ok = preds_clean == y_test
    flipped = np.array([e["y_pred_adv"] != e["y"] for e in examples])
    denom = constraint & clean_ok
    asr = float(flipped[denom].mean()) if denom.any() else 0.0

    reported = np.array([e["is_adversarial"] for e in examples])
    verified = float((flipped & constraint)[reported].mean()) \
        if reported.any() else 1.0

    levels = []
    for start in range(0, len(x_test), batch_size):
        stop = start + batch_size
        levels.append(noise_level(clean_lat[start:stop], adv_lat[start:stop]))
    overlap = marginal_overlap(clean_lat, adv_lat, seed=seed)

    aggregates = {
        "n_examples": len(examples),
        "n_clean_correct": int(clean_ok.sum()),
        "n_constraint_satisfied": int(constraint.sum()),
        "n_flipped": int(flipped.sum()),
        "asr": asr,
        "verified_flip_fraction": verified,
        "mean_rec_dist": float(np.mean([e["rec_dist"] for e in examples])),
        "mean_tries": float(np.mean([e["tries"] for e in examples])),
        "noise_level": float(np.mean(levels)),
        "marginal_overlap": [float(v) for v in overlap],
        "nn_perturbed_to_clean": mean_nn_distance(adv_lat, clean_lat),
        "nn_clean_self": mean_nn_distance(clean_lat),
        "eps_attack": float(eps_attack),
        "max_tries": int(max_tries),
    }
    latents = {
        "clean": clean_lat,
        "perturbed": adv_lat,
        "labels": y_test.copy(),
        "x_adv": adv_points,
    }
    return AttackReport(examples, aggregates), latents
