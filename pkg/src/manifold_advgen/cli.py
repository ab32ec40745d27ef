"""Command line front end.

Subcommands cover the full workflow: synthesize data, fit the frozen
classifier, train the generator, attack single examples, evaluate the test
split, export figures, and run the sampler demo or the gradient baseline.

Exit codes: 0 on success, 1 on usage or configuration problems, 2 when a
numeric failure (non-finite loss, divergence) aborts the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import attack as atk
from . import diffcore as dc
from . import pipeline as pl
from .svgd import run_svgd_demo


def _load_data(args):
    if getattr(args, "images", None):
        return pl.load_idx_dataset(args.images, args.labels,
                                   args.test_fraction, args.seed)
    return pl.load_dataset_csv(args.data)


def _load_run_config(args):
    cfg = pl.load_config(args.config) if args.config else pl.build_config()
    return cfg


def cmd_gen_data(args):
    ds = pl.gen_swiss_roll(args.n_points, args.n_classes, args.noise_sd,
                           args.seed, args.test_fraction)
    pl.save_dataset_csv(ds, args.out)
    print(f"wrote {len(ds.x)} points ({len(ds.train_idx)} train / "
          f"{len(ds.test_idx)} test) to {args.out}")
    return 0


def cmd_train_classifier(args):
    ds = pl.load_dataset_csv(args.data)
    hidden = tuple(int(p) for p in args.hidden.split(","))
    clf = atk.train_classifier(ds, seed=args.seed, hidden=hidden,
                               epochs=args.epochs)
    atk.save_classifier(clf, args.out)
    print(f"test accuracy {clf.test_accuracy:.4f}; saved to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_run_config(args)
    if args.epochs is not None:
        from dataclasses import replace
        cfg = replace(cfg, epochs=args.epochs)
    ds = pl.load_dataset_csv(args.data)
    clf = atk.load_classifier(args.classifier) if args.classifier else None
    out_dir = args.out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    state = atk.train(
        cfg, ds, clf,
        resume_path=args.resume,
        metrics_path=os.path.join(out_dir, "metrics.jsonl"),
        checkpoint_dir=out_dir,
    )
    print(f"trained to epoch {state.epoch}; "
          f"descent fraction {state.descent_fraction:.3f}; "
          f"final state in {out_dir}")
    return 0


def cmd_attack(args):
    cfg = _load_run_config(args)
    ds = pl.load_dataset_csv(args.data)
    clf = atk.load_classifier(args.classifier)
    state = atk.load_state(args.state, cfg, ds.x.shape[1])
    idx = args.index
    if not (0 <= idx < len(ds.x)):
        raise dc.ConfigError(f"index {idx} outside dataset of {len(ds.x)}")
    res = atk.generate(state, ds.x[idx], ds.y[idx], clf,
                       eps_attack=args.eps, seed=args.seed)
    print(json.dumps({
        "index": idx,
        "label": int(ds.y[idx]),
        "prediction_clean": atk.classifier_predict(clf, ds.x[idx]),
        "prediction_adv": atk.classifier_predict(clf, res.x_adv),
        "is_adversarial": res.is_adversarial,
        "tries": res.tries,
        "rec_dist": res.rec_dist,
        "p_true": res.p_true,
        "x_adv": [float(v) for v in res.x_adv],
    }, indent=2))
    return 0


def cmd_eval(args):
    cfg = _load_run_config(args)
    ds = pl.load_dataset_csv(args.data)
    clf = atk.load_classifier(args.classifier)
    state = atk.load_state(args.state, cfg, ds.x.shape[1])
    report, latents = atk.evaluate(state, ds, clf, eps_attack=args.eps)
    os.makedirs(args.out_dir, exist_ok=True)
    report.to_csv(os.path.join(args.out_dir, "report.csv"))
    report.save_aggregates(os.path.join(args.out_dir, "aggregates.json"))
    pl.save_latents_csv(os.path.join(args.out_dir, "latents_clean.csv"),
                        latents["clean"], latents["labels"])
    pl.save_latents_csv(os.path.join(args.out_dir, "latents_perturbed.csv"),
                        latents["perturbed"], latents["labels"])
    agg = report.aggregates
    print(json.dumps(agg, indent=2, sort_keys=True))
    return 0


def cmd_export_plots(args):
    clean, clean_labels = pl.load_latents_csv(args.clean)
    ours = ours_labels = pgd = pgd_labels = None
    if args.ours:
        ours, ours_labels = pl.load_latents_csv(args.ours)
    if args.pgd:
        pgd, pgd_labels = pl.load_latents_csv(args.pgd)
    written = pl.export_plots(args.out_dir, clean, clean_labels, ours,
                              ours_labels, pgd, pgd_labels)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_svgd_demo(args):
    result = run_svgd_demo(args.target, args.particles, args.steps,
                           args.step_size, args.seed)
    printable = {k: v for k, v in result.items() if k != "particles"}
    print(json.dumps(printable, indent=2, sort_keys=True))
    return 0


def cmd_pgd_baseline(args):
    ds = pl.load_dataset_csv(args.data)
    clf = atk.load_classifier(args.classifier)
    x_test, y_test = ds.test()
    x_adv = atk.pgd_attack(x_test, y_test, clf, args.eps, args.steps,
                           args.step_size)
    preds_clean = atk.classifier_predict(clf, x_test)
    preds_adv = atk.classifier_predict(clf, x_adv)
    ok = preds_clean == y_test
    asr = float((preds_adv[ok] != y_test[ok]).mean()) if ok.any() else 0.0
    if args.out:
        adv_ds = pl.LabeledDataset(x_adv, y_test,
                                   np.arange(0), np.arange(len(x_adv)),
                                   name="pgd_adversarial")
        pl.save_dataset_csv(adv_ds, args.out)
    print(json.dumps({"asr": asr, "n_clean_correct": int(ok.sum()),
                      "eps": args.eps, "steps": args.steps}))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="manifold-advgen",
        description="On-manifold adversarial example generation.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize the swiss roll dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", dest="n_points", type=int, default=1600)
    p.add_argument("--classes", dest="n_classes", type=int, default=4)
    p.add_argument("--noise-sd", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(run=cmd_gen_data)

    p = sub.add_parser("train-classifier", help="fit the frozen attack target")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--hidden", default="32,32")
    p.set_defaults(run=cmd_train_classifier)

    p = sub.add_parser("train", help="train the generator pair")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--classifier", help="saved classifier to attack")
    p.add_argument("--out-dir")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int, help="override configured epochs")
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("attack", help="attack one example by index")
    p.add_argument("--state", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=cmd_attack)

    p = sub.add_parser("eval", help="attack the whole test split and report")
    p.add_argument("--state", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("export-plots", help="render latent figures from CSVs")
    p.add_argument("--clean", required=True)
    p.add_argument("--ours")
    p.add_argument("--pgd")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(run=cmd_export_plots)

    p = sub.add_parser("svgd-demo", help="run the sampler on a 1-D target")
    p.add_argument("--target", choices=("normal", "mixture"),
                   default="normal")
    p.add_argument("--particles", type=int, default=50)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--step-size", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=cmd_svgd_demo)

    p = sub.add_parser("pgd-baseline", help="gradient-ascent baseline attack")
    p.add_argument("--classifier", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eps", type=float, default=0.3)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--out", help="write the adversarial points as CSV")
    p.set_defaults(run=cmd_pgd_baseline)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.run(args)
    except dc.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (dc.ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
