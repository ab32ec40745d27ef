"""Acceptance gate: eight end-to-end checks over the full pipeline.

Each test prints one verdict line (see conftest) and fails loudly if its bar
is missed. The Swiss Roll attack run is trained once per session and shared
by the criteria that inspect it.
"""

import dataclasses
import hashlib
import time
from types import SimpleNamespace

import numpy as np
import pytest

from manifold_advgen import attack as atk
from manifold_advgen import diffcore as dc
from manifold_advgen import pipeline as pl
from manifold_advgen.gbsm import (
    assign_signs,
    gram_schmidt,
    perturb_objective,
    solve_delta,
)
from manifold_advgen.hypernet import CodeSet, matching_loss
from manifold_advgen.manifold import EncoderSpec, decode, encode_posterior
from manifold_advgen.hypernet import sample_particles
from manifold_advgen.svgd import GammaHypers, log_posterior, run_svgd_demo

GRAD_TOL = 1e-5
GRAD_INSTANCES = 20
E2E_EPOCHS = 220
E2E_BUDGET_S = 900.0


def rel_err(analytic, fd):
    return float(np.max(np.abs(analytic - fd)
                        / np.maximum(1.0, np.abs(analytic))))


# ---------------------------------------------------------------------------
# criterion 1: analytic gradients against central differences


def test_gradient_suite(verdict):
    start = time.monotonic()
    rng = np.random.default_rng(101)
    worst = {}

    # posterior over one encoder particle
    dims = [2, 3, 2]
    n_w = dc.n_mlp_params(dims)
    errs = []
    for _ in range(GRAD_INSTANCES):
        vec = np.concatenate([rng.normal(size=n_w) * 0.5,
                              rng.normal(size=2) * 0.3])
        x = rng.normal(size=(4, 2))
        z = rng.normal(size=(4, 2))
        mean = rng.normal(size=n_w) * 0.5

        def loss(p):
            return log_posterior(p, x, z, dims, mean, GammaHypers())

        errs.append(rel_err(dc.grad(loss, vec), dc.finite_diff_grad(loss, vec)))
    worst["posterior"] = max(errs)

    # hypernet matching loss
    hdims = [4, 5, 6]
    errs = []
    for _ in range(GRAD_INSTANCES):
        flat = dc.MlpParams.random(hdims, rng).flatten()
        codes = CodeSet(rng.normal(size=(3, 4)), seed=0)
        targets = rng.normal(size=(3, 6))

        def loss(p):
            return matching_loss(p, hdims, codes, targets)

        errs.append(rel_err(dc.grad(loss, flat), dc.finite_diff_grad(loss, flat)))
    worst["matching"] = max(errs)

    # basis-sign perturbation objective
    spec = EncoderSpec(input_dim=2, hidden=(4,), latent_dim=2)
    errs = []
    for _ in range(GRAD_INSTANCES):
        vec = np.concatenate([rng.normal(size=spec.n_weights) * 0.5,
                              rng.normal(size=2) * 0.3])
        x = rng.normal(size=(4, 2))
        targets = rng.normal(size=(4, 2))

        def loss(p):
            return perturb_objective(p, spec, x, targets)

        errs.append(rel_err(dc.grad(loss, vec), dc.finite_diff_grad(loss, vec)))
    worst["perturb-objective"] = max(errs)

    # adversarial pressure through decoder and classifier
    dec_dims = [2, 6, 3]
    clf_dims = [3, 5, 4]
    errs = []
    for _ in range(GRAD_INSTANCES):
        flat_dec = dc.MlpParams.random(dec_dims, rng, hidden_act="relu").flatten()
        clf_flat = dc.MlpParams.random(clf_dims, rng).flatten()
        z = rng.normal(size=(5, 2))
        labels = rng.integers(0, 4, size=5)

        def loss(p):
            out = dc.mlp_forward_var(p, dec_dims, z, hidden_act="relu")
            logits = dc.mlp_forward_var(clf_flat, clf_dims, out)
            p_true = dc.true_class_prob(logits, labels)
            return dc.vmean(dc.neg(dc.log(dc.add(dc.sub(1.0, p_true), 1e-12))))

        errs.append(rel_err(dc.grad(loss, flat_dec),
                            dc.finite_diff_grad(loss, flat_dec)))
    worst["adversarial"] = max(errs)

    elapsed = time.monotonic() - start
    ok = all(v < GRAD_TOL for v in worst.values()) and elapsed < 120.0
    details = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    assert verdict(1, "gradient suite vs central differences", ok,
                   f"{details}; {GRAD_INSTANCES} instances each, "
                   f"{elapsed:.1f}s"), worst


# ---------------------------------------------------------------------------
# criterion 2: particle sampler on known 1-D targets


def test_sampler_demo(verdict):
    start = time.monotonic()
    normal = run_svgd_demo("normal", n_particles=50, steps=2000, seed=0)
    mixture = run_svgd_demo("mixture", n_particles=50, steps=2000, seed=0)
    elapsed = time.monotonic() - start
    mean_ok = abs(normal["mean"]) <= 0.05
    var_ok = abs(normal["variance"] - 1.0) <= 0.1
    mode_ok = (mixture["left_fraction"] >= 0.2
               and mixture["right_fraction"] >= 0.2)
    ok = mean_ok and var_ok and mode_ok and elapsed < 60.0
    assert verdict(
        2, "sampler recovers unit normal and two-mode mixture", ok,
        f"mean {normal['mean']:+.4f}, var {normal['variance']:.4f}, "
        f"modes {mixture['left_fraction']:.2f}/{mixture['right_fraction']:.2f}, "
        f"{elapsed:.1f}s"), (normal, mixture)


# ---------------------------------------------------------------------------
# criterion 3: basis algebra and the closed-form perturbation


def test_basis_and_closed_form(verdict):
    rng = np.random.default_rng(303)
    worst_orth = 0.0
    worst_span = 0.0
    for _ in range(1000):
        d = int(rng.integers(2, 9))
        b = int(rng.integers(1, 33))
        rows = rng.normal(size=(b, d))
        basis = gram_schmidt(rows)
        u = basis.rows
        gram = u @ u.T
        worst_orth = max(worst_orth,
                         float(np.abs(gram - np.eye(basis.rank)).max()))
        recon = (rows @ u.T) @ u
        worst_span = max(worst_span, float(np.abs(recon - rows).max()))

    worst_delta = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 9))
        b = int(rng.integers(2, 33))
        z_clean = rng.normal(size=(b, d))
        z_pert = rng.normal(size=(b, d))
        signs = assign_signs(gram_schmidt(z_clean), b)
        closed = solve_delta(z_clean, z_pert, signs)
        gaps = z_pert - z_clean
        numeric = np.empty(d)
        for j in range(d):
            numeric[j] = np.linalg.lstsq(signs[:, j:j + 1], gaps[:, j],
                                         rcond=None)[0][0]
        worst_delta = max(worst_delta, float(np.abs(closed - numeric).max()))

    ok = worst_orth < 1e-8 and worst_span < 1e-8 and worst_delta < 1e-4
    assert verdict(
        3, "orthonormal basis and closed-form perturbation", ok,
        f"orthonormality {worst_orth:.1e}, span {worst_span:.1e} over 1000; "
        f"delta vs least squares {worst_delta:.1e} over 100"), \
        (worst_orth, worst_span, worst_delta)


# ---------------------------------------------------------------------------
# the shared Swiss Roll attack run (criteria 4-7)


@pytest.fixture(scope="session")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    start = time.monotonic()
    ds = pl.gen_swiss_roll(1600, 4, 0.4, 1, 0.2)
    clf = atk.train_classifier(ds, seed=0)
    cfg = pl.build_config(epochs=E2E_EPOCHS, checkpoint_every=1000)
    state = atk.train(cfg, ds, classifier=clf,
                      metrics_path=str(root / "metrics.jsonl"))
    report, latents = atk.evaluate(state, ds, clf)
    elapsed = time.monotonic() - start

    x_test, y_test = ds.test()
    x_pgd = atk.pgd_attack(x_test, y_test, clf, eps=cfg.eps_attack)
    clean_set = sample_particles(state.clean_hyper, state.codes)
    z_pgd = encode_posterior(clean_set, state.spec, x_pgd, "mean").z
    nn_pgd = atk.mean_nn_distance(z_pgd, latents["clean"])

    return SimpleNamespace(ds=ds, clf=clf, cfg=cfg, state=state,
                           report=report, latents=latents, elapsed=elapsed,
                           nn_pgd=nn_pgd)


def test_end_to_end_attack(verdict, e2e):
    agg = e2e.report.aggregates
    x_test, y_test = e2e.ds.test()
    eps = e2e.cfg.eps_attack

    # independent re-check of every reported success
    reported = [ex for ex in e2e.report.examples if ex["is_adversarial"]]
    ok_reported = True
    for ex in reported:
        dist = float(np.linalg.norm(ex["x"] - ex["x_adv"]))
        pred = atk.classifier_predict(e2e.clf, ex["x_adv"])
        if dist > eps or int(pred) == ex["y"]:
            ok_reported = False
            break

    acc_ok = e2e.clf.test_accuracy >= 0.95
    asr_ok = agg["asr"] >= 0.5
    budget_ok = (e2e.elapsed <= E2E_BUDGET_S
                 and e2e.cfg.epochs <= 300 and e2e.cfg.n_particles == 5)
    ok = acc_ok and asr_ok and ok_reported and budget_ok
    assert verdict(
        4, "Swiss Roll attack end to end", ok,
        f"classifier {e2e.clf.test_accuracy:.3f}, asr {agg['asr']:.3f} on "
        f"{agg['n_constraint_satisfied']}/{agg['n_examples']} in-ball, "
        f"{len(reported)} reported all verified: {ok_reported}, "
        f"{e2e.elapsed:.0f}s/{e2e.cfg.epochs} epochs"), agg


def test_perturbed_latents_stay_near_manifold(verdict, e2e):
    agg = e2e.report.aggregates
    nn_pert = agg["nn_perturbed_to_clean"]
    nn_self = agg["nn_clean_self"]
    ok = nn_pert <= 2.0 * nn_self and nn_pert < e2e.nn_pgd
    assert verdict(
        5, "perturbed latents nearer than a feature-space attack", ok,
        f"perturbed-to-clean {nn_pert:.4f} vs 2x self {2 * nn_self:.4f} "
        f"and pgd-encoded {e2e.nn_pgd:.4f}"), agg


def test_latent_marginals_overlap(verdict, e2e):
    overlap = np.asarray(e2e.report.aggregates["marginal_overlap"])
    sd = e2e.latents["clean"].std(axis=0)
    ratios = overlap / sd
    ok = bool((ratios <= 0.25).all())
    assert verdict(
        6, "latent marginals preserved per dimension", ok,
        "W1/sd " + "/".join(f"{r:.3f}" for r in ratios) + " <= 0.25"), ratios


def test_inner_matching_descends(verdict, e2e):
    frac = e2e.state.descent_batches / e2e.state.total_batches
    ok = frac >= 0.9
    assert verdict(
        7, "matching losses fall within each batch's inner updates", ok,
        f"{frac:.3f} of {e2e.state.total_batches} batches"), frac


# ---------------------------------------------------------------------------
# criterion 8: bit-exact repeatability and resume


def file_hash(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_repeatability_and_resume(verdict, tmp_path):
    ds = pl.gen_swiss_roll(240, 4, 0.4, 5, 0.2)
    clf = atk.train_classifier(ds, seed=1, epochs=40)
    cfg = pl.build_config(n_points=240, epochs=6, checkpoint_every=3,
                          batch_size=32)

    runs = {}
    for tag in ("one", "two"):
        d = tmp_path / tag
        d.mkdir()
        atk.train(cfg, ds, classifier=clf,
                  metrics_path=str(d / "metrics.jsonl"),
                  checkpoint_dir=str(d))
        runs[tag] = d
    twice_ok = ((runs["one"] / "metrics.jsonl").read_bytes()
                == (runs["two"] / "metrics.jsonl").read_bytes()) \
        and file_hash(runs["one"] / "state_final.bin") \
        == file_hash(runs["two"] / "state_final.bin")

    part = tmp_path / "part"
    part.mkdir()
    atk.train(dataclasses.replace(cfg, epochs=3), ds, classifier=clf,
              metrics_path=str(part / "metrics.jsonl"),
              checkpoint_dir=str(part))
    atk.train(cfg, ds, classifier=clf,
              resume_path=str(part / "checkpoint_ep00003.bin"),
              metrics_path=str(part / "metrics.jsonl"),
              checkpoint_dir=str(part))
    resume_ok = ((part / "metrics.jsonl").read_bytes()
                 == (runs["one"] / "metrics.jsonl").read_bytes()) \
        and file_hash(part / "state_final.bin") \
        == file_hash(runs["one"] / "state_final.bin")

    ok = twice_ok and resume_ok
    assert verdict(
        8, "bit-identical reruns and checkpoint resume", ok,
        f"double run identical: {twice_ok}, resume identical: {resume_ok}"), \
        (twice_ok, resume_ok)
