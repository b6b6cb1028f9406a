"""Command-line entry point: ``mfrnp <verb> ...``.

Verbs::

    generate                 sample datasets to --out/data
    train                    train MFRNP (generating data unless --data is given)
    evaluate                 score a saved model on a saved test set
    reproduce PRESET         MFRNP + SF-NP over several seeds (heat2 ... poisson5)
    baseline sfnp            train and score the single-fidelity NP only

Exit status is 0 only when every requested stage succeeded.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from mfrnp import multifidelity as mf
from mfrnp.errors import MFRNPError
from mfrnp.harness import config as hconfig
from mfrnp.harness import experiment as exp
from mfrnp.harness.report import canonical_json, emit_report

log = logging.getLogger("mfrnp")


def _common(p):
    p.add_argument("--config", type=Path, help="YAML/JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=sorted(hconfig.PROFILES))
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--task", choices=["heat", "poisson"])
    p.add_argument("--K", type=int, help="number of fidelities")
    p.add_argument("--regime", choices=["full", "ood"])
    p.add_argument("--epochs", type=int, help="override max epochs")
    p.add_argument("--patience", type=int, help="override early-stopping patience")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="mfrnp", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate", help="sample datasets")
    _common(p)

    p = sub.add_parser("train", help="train an MFRNP model")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset directory written by 'generate'")

    p = sub.add_parser("evaluate", help="evaluate a saved model")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("reproduce", help="run a preset experiment over several seeds")
    p.add_argument("preset", choices=sorted(hconfig.PRESETS))
    _common(p)
    p.add_argument("--seeds", type=int, nargs="+", help="default: 0 1 2")

    p = sub.add_parser("baseline", help="single-fidelity baseline")
    p.add_argument("which", choices=["sfnp"])
    _common(p)
    p.add_argument("--data", type=Path)
    return parser


def config_from_args(args, preset=None):
    base = hconfig.load_config_file(args.config) if args.config else {}
    overrides = {
        "seed": args.seed,
        "profile": args.profile,
        "out_dir": str(args.out) if args.out else None,
        "task": args.task,
        "K": args.K,
        "regime": args.regime,
        "train.max_epochs": args.epochs,
        "train.patience": args.patience,
    }
    if getattr(args, "seeds", None):
        overrides["seeds"] = args.seeds
    return hconfig.build_config(base, overrides, preset)


def _out(config):
    if not config.out_dir:
        raise MFRNPError("--out (or out_dir in the config) is required")
    d = Path(config.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_generate(args):
    config = config_from_args(args)
    d = _out(config)
    data = exp.generate_data(config)
    exp.save_data(data, d / "data")
    print(f"wrote {config.K} training sets and a test set to {d / 'data'}")
    return 0


def cmd_train(args):
    config = config_from_args(args)
    d = _out(config)
    data = exp.load_data(args.data, config.K) if args.data else exp.generate_data(config)
    if not args.data:
        exp.save_data(data, d / "data")
    model = exp.train_mfrnp(config, data)
    mf.save_model(model, d / "model")
    summary = exp.history_summary(model.history)
    (d / "train_summary.json").write_text(canonical_json({"config": config.to_dict(), "history": summary}))
    print(f"trained {summary['epochs']} epochs; checkpoint in {d / 'model'}")
    return 0


def cmd_evaluate(args):
    config = config_from_args(args)
    d = _out(config)
    model = mf.load_model(args.model)
    data = exp.load_data(args.data, model.K)
    report = exp.RunReport(config.to_dict(), config.config_hash())
    metrics, diag, err = exp.evaluate(model, data, config)
    report.metrics["mfrnp" if model.K > 1 else "sfnp"] = metrics
    report.diagnostics["evaluate"] = diag
    report.error_fields["mfrnp"] = err
    res = tuple(data.test.spec.resolution)
    emit_report(report, d, resolution=res, max_images=config.images)
    print(json.dumps(report.metrics, sort_keys=True))
    return 0


def cmd_reproduce(args):
    config = config_from_args(args, preset=args.preset)
    if not config.seeds:
        config = dataclasses.replace(config, seeds=[0, 1, 2])
    reports, summary = exp.run_seeds(config)
    for r in reports:
        tag = "ok" if r.ok else f"FAILED in {r.stage}: {r.error}"
        print(f"seed {r.config['seed']}: {json.dumps(r.metrics, sort_keys=True)} [{tag}]")
    for model_name, metrics in summary.items():
        for metric, s in metrics.items():
            print(f"{model_name} {metric}: mean {s['mean']:.4g}  variance {s['variance']:.3g}")
    if config.out_dir:
        d = _out(config)
        (d / "summary.json").write_text(canonical_json({"config": config.to_dict(), "summary": summary}))
    return 0 if all(r.ok for r in reports) else 1


def cmd_baseline(args):
    config = config_from_args(args)
    data = exp.load_data(args.data, config.K) if args.data else exp.generate_data(config)
    report = exp.RunReport(config.to_dict(), config.config_hash())
    model = exp.train_mfrnp(config, data, K=1)
    metrics, diag, err = exp.evaluate(model, data, config)
    report.metrics["sfnp"] = metrics
    report.diagnostics["sfnp"] = diag
    report.history["sfnp"] = exp.history_summary(model.history)
    report.error_fields["sfnp"] = err
    if config.out_dir:
        d = _out(config)
        mf.save_model(model, d / "sfnp")
        emit_report(report, d, resolution=tuple(data.test.spec.resolution), max_images=config.images)
    print(json.dumps(report.metrics, sort_keys=True))
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "reproduce": cmd_reproduce,
    "baseline": cmd_baseline,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except (MFRNPError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
