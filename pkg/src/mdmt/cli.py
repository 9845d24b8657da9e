"""``mdmt`` command-line entry point.

Exit codes: 0 success, 1 validation or configuration error, 2 numerical
failure at runtime. Errors are reported on stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import KNOWN_KEYS, ConfigError, config_hash, dump_text, from_flat, load_config, parse_overrides, parse_text
from .data import DatasetError, generate_synthetic, save_cache
from .metrics import evaluate, overall_mean
from .model import EXPORT_STAGES, export_embeddings
from .trainer import (
    CheckpointError,
    TrainingError,
    fit,
    load_checkpoint,
    model_from_checkpoint,
    prepare_data,
    save_checkpoint,
    space_from_hyper,
)
from .variants import VariantKind

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class CliError(Exception):
    def __init__(self, message, code=EXIT_INVALID):
        super().__init__(message)
        self.code = code


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seeds expects N1,N2,..., got {text!r}") from None


def _config(args):
    cfg = load_config(args.config, parse_overrides(args.set))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def run_dir(out, cfg):
    d = Path(out) / f"{config_hash(cfg)}-s{cfg.seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _emit(record):
    print(json.dumps(record), flush=True)


# --------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg = _config(args)
    out = run_dir(args.out, cfg)
    train, valid, test = prepare_data(cfg)

    def on_epoch(_epoch, ckpt):
        save_checkpoint(ckpt, out / "last.ckpt")

    model, history, best = fit(cfg, (train, valid), on_epoch=on_epoch)
    if not (out / "last.ckpt").exists():
        save_checkpoint(best, out / "last.ckpt")
    save_checkpoint(best, out / "best.ckpt")
    (out / "config.txt").write_text(dump_text(cfg), encoding="utf-8")
    (out / "history.jsonl").write_text(history.to_jsonl(), encoding="utf-8")
    report = evaluate(model, test, "test")
    (out / "report.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
    _emit(
        {
            "run_dir": str(out),
            "best_epoch": history.best_epoch,
            "best_valid_auc": history.best_valid_auc,
            "test_auc": report.overall_auc,
            "test_logloss": report.overall_logloss,
        }
    )
    return EXIT_OK


def _checkpoint_model_and_data(args):
    ckpt = load_checkpoint(args.checkpoint)
    # the dataset defaults to the one the checkpoint was trained on
    flat = {k: v for k, v in ckpt.hyper.items() if k in KNOWN_KEYS}
    if args.config:
        flat.update(parse_text(Path(args.config).read_text(encoding="utf-8")))
    flat.update(parse_overrides(args.set))
    cfg = from_flat(flat)
    splits = dict(zip(("train", "valid", "test"), prepare_data(cfg)))
    ds = splits[args.split]
    expected = space_from_hyper(ckpt.hyper)
    found = ds.space
    if expected.domain_count != found.domain_count:
        raise CliError(f"domain count mismatch: checkpoint expects D={expected.domain_count}, dataset has D={found.domain_count}")
    if expected.task_count != found.task_count:
        raise CliError(f"task count mismatch: checkpoint expects T={expected.task_count}, dataset has T={found.task_count}")
    if expected.fields != found.fields:
        exp = ",".join(f"{f.name}:{f.vocab_size}" for f in expected.fields)
        got = ",".join(f"{f.name}:{f.vocab_size}" for f in found.fields)
        raise CliError(f"feature space mismatch: checkpoint expects {exp}, dataset has {got}")
    return model_from_checkpoint(ckpt), ds


def cmd_eval(args):
    model, ds = _checkpoint_model_and_data(args)
    report = evaluate(model, ds, args.split)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"eval-{args.split}.jsonl"
    path.write_text(report.to_jsonl(), encoding="utf-8")
    _emit({"report": str(path), "split": args.split, "auc": report.overall_auc, "logloss": report.overall_logloss})
    return EXIT_OK


def ablation_table(results, variants, seeds):
    """``results[(variant, seed)]`` is an AUC or an error string. Returns text."""
    lines = ["variant\t" + "\t".join(f"seed{s}" for s in seeds) + "\tmean"]
    for v in variants:
        cells, vals = [], []
        for s in seeds:
            r = results[(v, s)]
            if isinstance(r, float):
                cells.append(f"{r:.6f}")
                vals.append(r)
            else:
                cells.append("FAILED")
        mean = overall_mean(vals)
        lines.append(v + "\t" + "\t".join(cells) + "\t" + ("nan" if mean is None else f"{mean:.6f}"))
    return "\n".join(lines) + "\n"


def cmd_ablate(args):
    cfg = _config(args)
    variants = [VariantKind(v.strip()).value for v in args.variants.split(",") if v.strip()]
    seeds = args.seeds or [cfg.seed]
    train, valid, test = prepare_data(cfg)
    results, rows = {}, []
    for v in variants:
        for s in seeds:
            vcfg = replace(cfg, variant=v, seed=s)
            row = {"variant": v, "seed": s}
            try:
                model, history, _best = fit(vcfg, (train, valid))
                auc = evaluate(model, test, "test").overall_auc
                results[(v, s)] = float(auc) if auc is not None else "undefined"
                row["initial_valid_auc"] = history.initial_valid_auc
                row["best_epoch"] = history.best_epoch
            except (TrainingError, ad.AutodiffError, FloatingPointError) as e:
                results[(v, s)] = f"{type(e).__name__}: {e}"
            row["test_auc"] = results[(v, s)]
            rows.append(row)
    table = ablation_table(results, variants, seeds)
    out = Path(args.out) / f"ablate-{config_hash(cfg)}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    (out / "ablation.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_synth(args):
    cfg = _config(args)
    spec = cfg.data.synth
    ds = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"synth-{config_hash(cfg)}.mdmtds"
    save_cache(ds, path)
    counts = ds.domain_counts()
    n = len(ds)
    domains = []
    for d, c in enumerate(counts):
        mask = ds.domains == d
        rates = ds.labels[mask].mean(axis=0) if c else np.zeros(ds.space.task_count)
        domains.append(
            {
                "domain": d,
                "count": int(c),
                "proportion": round(float(c) / n, 6),
                "label_rates": [round(float(r), 6) for r in rates],
            }
        )
        print(f"domain {d}: {int(c)} samples ({100.0 * c / n:.1f}%), label rates " + " ".join(f"{r:.4f}" for r in rates))
    _emit({"cache": str(path), "n_samples": n, "domains": domains})
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_all

    results = run_all(seed=args.seed)
    failed = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.family:32s} worst_rel_err={r.worst:.3e} tol={r.tolerance:.0e} {status}")
        if not r.passed:
            failed.append(r.family)
    if failed:
        raise CliError(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def cmd_export(args):
    model, ds = _checkpoint_model_and_data(args)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"{args.stage}-{args.split}.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    n = export_embeddings(model, ds, args.stage, out, task=args.task)
    _emit({"export": str(out), "rows": n, "stage": args.stage})
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="mdmt", description="Multi-domain multi-task CTR models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="runs"):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("train", help="train one model"))
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="evaluate a checkpoint"), out_default=None)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "valid", "test"), default="test")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("ablate", help="train variants over seeds and tabulate test AUC"))
    sp.add_argument("--variants", default="full,no_automl", help="comma-separated variant names")
    sp.add_argument("--seeds", type=_seeds)
    sp.set_defaults(func=cmd_ablate)

    sp = common(sub.add_parser("synth", help="generate a synthetic dataset cache"))
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = common(sub.add_parser("export-embeddings", help="write stage outputs as TSV"), out_default=None)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "valid", "test"), default="test")
    sp.add_argument("--stage", choices=EXPORT_STAGES, default="fused")
    sp.add_argument("--task", type=int, default=0)
    sp.set_defaults(func=cmd_export)
    return p


def _fail(code, exc):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as e:
        return _fail(e.code, e)
    except (TrainingError, ad.NonFiniteError, FloatingPointError) as e:
        return _fail(EXIT_NUMERIC, e)
    except (ConfigError, DatasetError, CheckpointError, ValueError, KeyError, IndexError, OSError) as e:
        return _fail(EXIT_INVALID, e)


if __name__ == "__main__":
    sys.exit(main())
