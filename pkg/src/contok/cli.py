"""Command line entry point: ``contok <subcommand> ...``.

Subcommands: gen-synthetic, train, tokenize, eval-retrieval, report.
Exit codes: 0 success, 2 usage error, 3 data validation error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .autodiff import NonFiniteGradient
from .data import (DataError, SyntheticSpec, generate_synthetic, load_dataset, load_sequences,
                   write_dataset)
from .retrieval import evaluate, shuffled_table
from .rng import substream
from .tokens import (ChecksumWarning, TableError, assign_all, cluster_purity, export_table,
                     import_table, level_metrics)
from .trainer import (CheckpointError, TrainConfig, TrainingDiverged, checkpoint_load,
                      checkpoint_save, train)

log = logging.getLogger("contok")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_ECHO = "config.json"


class UsageError(Exception):
    pass


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _load_config(path):
    """Read a JSON config document. Sections: ``synthetic``, ``train``, ``eval``."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except ValueError as exc:
        raise UsageError(f"config file {path} is not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def _section(cfg, name):
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise UsageError(f"config section {name!r} must be an object")
    return dict(sec)


def _prepare_out(out, force, must_be_dir=True):
    out = Path(out)
    if out.exists() and not out.is_dir() and must_be_dir:
        raise UsageError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(path):
    if not Path(path).is_dir():
        raise UsageError(f"dataset directory {path} not found")
    return load_dataset(path)


def _echo(out, command, resolved):
    doc = {"command": command, "version": __version__, **resolved}
    (Path(out) / CONFIG_ECHO).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# gen-synthetic

def cmd_gen_synthetic(args):
    cfg = _load_config(args.config)
    spec_kw = _section(cfg, "synthetic")
    overrides = {"seed": args.seed if args.seed is not None else cfg.get("seed"),
                 "items_per_leaf": args.items_per_leaf, "branching": args.branching,
                 "walk": args.walk, "n_users": args.n_users}
    spec_kw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        spec = SyntheticSpec(**spec_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from None
    out = _prepare_out(args.out, args.force)
    data = generate_synthetic(spec)
    write_dataset(out, data)
    print(f"wrote {len(data.records)} items, {len(data.sequences)} users to {out}")
    return EXIT_OK


# train

def _train_config(args, cfg):
    kw = _section(cfg, "train")
    if "seed" in cfg and "seed" not in kw:
        kw["seed"] = cfg["seed"]
    flags = {
        "seed": args.seed, "epochs": args.epochs, "batch": args.batch, "tau": args.tau,
        "alpha0": args.alpha0, "alpha_floor": args.alpha_floor, "lr": args.lr,
        "codebook_size": args.codebook_size, "levels": args.levels, "dim": args.dim,
        "shared": args.shared_codebook, "negatives": args.negatives,
        "projection": args.projection, "soft": args.soft_assign,
        "gumbel_scale": args.gumbel_scale, "hidden": args.hidden,
    }
    kw.update({k: v for k, v in flags.items() if v is not None})
    try:
        return TrainConfig.from_dict(kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def cmd_train(args):
    cfg = _load_config(args.config)
    config = _train_config(args, cfg)
    ds = _dataset(args.data)
    out = _prepare_out(args.out, args.force)
    xs = ds.matrices()
    _echo(out, "train", {"data": str(args.data), "train": config.to_dict()})
    try:
        res = train(config, xs, ds.manifest.modalities)
    except TrainingDiverged as exc:
        checkpoint_save(exc.model, out / "model.last_good.ckpt", config)
        exc.report.to_csv(out / "report.csv")
        raise
    checkpoint_save(res.model, out / "model.ckpt", config)
    res.report.to_csv(out / "report.csv")
    rows = res.report.rows
    if rows:
        last = rows[-1]
        print(f"trained {len(rows)} epochs: loss {last['loss']:.4f} perplexity "
              f"{last['perplexity']:.2f} collision {last['collision_rate']:.3f}")
    else:
        print("0 epochs: wrote initialization checkpoint")
    return EXIT_OK


# tokenize

def cmd_tokenize(args):
    model, config = checkpoint_load(args.checkpoint)
    ds = _dataset(args.data)
    if list(ds.manifest.modalities.items()) != list(model.modalities.items()):
        raise DataError(f"dataset modalities {ds.manifest.modalities} do not match the "
                        f"checkpoint's {model.modalities}", args.data)
    out = Path(args.out)
    table_path = out / "tokens.jsonl"
    if table_path.exists() and not args.force:
        raise UsageError(f"{table_path} already exists (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    table = assign_all(ds.item_ids, ds.matrices(), model)
    export_table(table, table_path)
    if import_table(table_path, table.checksum).item_to_token != table.item_to_token:
        raise TableError(f"{table_path}: re-import does not match the written table")
    codes = np.array([list(t.codes) for t in table.item_to_token.values()])
    rows = level_metrics(codes)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "perplexity", "usage_entropy", "collision_rate_raw"])
        for r in rows:
            w.writerow([r["level"], repr(r["perplexity"]), repr(r["usage_entropy"]),
                        repr(r["collision_rate_raw"])])
    summary = {"n_items": len(table), "collision_rate_raw": rows[-1]["collision_rate_raw"],
               "identifier_perplexity": rows[-1]["perplexity"],
               "codebook_checksum": table.checksum}
    if ds.labels is not None:
        top = [ds.labels[i][0] for i in ds.item_ids]
        summary["level1_purity"] = cluster_purity(codes[:, 0], top)
    else:
        summary["level1_purity"] = None
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _echo(out, "tokenize", {"checkpoint": str(args.checkpoint), "data": str(args.data),
                            "train": config.to_dict() if config else None})
    purity = "n/a" if summary["level1_purity"] is None else f"{summary['level1_purity']:.3f}"
    print(f"{len(table)} items tokenized: collision_rate_raw {summary['collision_rate_raw']:.4f}, "
          f"perplexity {summary['identifier_perplexity']:.2f}, level-1 purity {purity}")
    return EXIT_OK


# eval-retrieval

def cmd_eval_retrieval(args):
    cfg = _section(_load_config(args.config), "eval")
    ks = args.k or cfg.get("k", [5, 10])
    beam = args.beam if args.beam is not None else cfg.get("beam", 50)
    order = args.order if args.order is not None else cfg.get("order", 2)
    min_item = args.min_item_count if args.min_item_count is not None else cfg.get("min_item_count", 10)
    min_user = args.min_user_count if args.min_user_count is not None else cfg.get("min_user_count", 10)
    if beam < max(ks):
        raise UsageError(f"beam width {beam} is smaller than max K {max(ks)}")

    expected = None
    if args.checkpoint:
        model, _ = checkpoint_load(args.checkpoint)
        expected = model.codebooks().checksum()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ChecksumWarning)
        table = import_table(args.table, expected, args.allow_checksum_mismatch)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)

    if args.sequences:
        seq_path = Path(args.sequences)
    elif args.data:
        seq_path = _dataset(args.data).sequences_path
        if seq_path is None:
            raise DataError("dataset has no sequences.jsonl", args.data)
    else:
        raise UsageError("give --sequences or --data")
    splits = load_sequences(seq_path, set(table.item_to_token), min_item, min_user)
    if not splits.full:
        raise DataError("no user survives the interaction filters", seq_path)

    out = _prepare_out(args.out, args.force)
    result = evaluate(table, splits, ks, beam, order, threads=args.threads)
    result["settings"] = {"table": str(args.table), "sequences": str(seq_path), "order": order,
                          "min_item_count": min_item, "min_user_count": min_user}
    if args.baseline:
        seed = args.seed if args.seed is not None else 42
        shuffled = shuffled_table(table, substream(seed, "shuffle"))
        base = evaluate(shuffled, splits, ks, beam, order, threads=args.threads)
        result["baseline_shuffled"] = {"seed": seed, "recall": base["recall"]}
    (out / "retrieval.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    _echo(out, "eval-retrieval", {"eval": {"k": ks, "beam": beam, "threads": args.threads,
                                          "baseline": args.baseline, **result["settings"]}})
    for k in ks:
        line = f"Recall@{k} {result['recall'][str(k)]:.4f}"
        if args.baseline:
            line += f" (shuffled baseline {result['baseline_shuffled']['recall'][str(k)]:.4f})"
        print(line)
    print(f"{result['n_events']} events, beam {beam}")
    return EXIT_OK


# report

def cmd_report(args):
    run = Path(args.run)
    if not run.is_dir():
        raise UsageError(f"{run} is not a directory")
    found = False
    rep = run / "report.csv"
    if rep.exists():
        found = True
        with open(rep, newline="") as fh:
            rows = list(csv.DictReader(fh))
        print(f"{rep}: {len(rows)} epochs")
        step = max(1, len(rows) // args.rows) if rows else 1
        shown = rows[::step] + ([rows[-1]] if rows and (len(rows) - 1) % step else [])
        print(f"{'epoch':>6} {'loss':>10} {'perplexity':>11} {'collision':>10} {'alpha':>9}")
        for r in shown:
            print(f"{int(r['epoch']):>6} {float(r['loss']):>10.4f} {float(r['perplexity']):>11.2f} "
                  f"{float(r['collision_rate']):>10.4f} {float(r['alpha']):>9.4g}")
    for name in ("summary.json", "retrieval.json"):
        p = run / name
        if p.exists():
            found = True
            print(f"{p}:")
            print(json.dumps(json.loads(p.read_text()), indent=2, sort_keys=True))
    if not found:
        raise UsageError(f"{run} holds no report.csv, summary.json or retrieval.json")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="contok", description="Contrastive multi-modal item tokenizer.")
    p.add_argument("--version", action="version", version=f"contok {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON config document")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", required=True, help="output directory")
            sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
        sp.add_argument("-v", "--verbose", action="store_true")

    g = sub.add_parser("gen-synthetic", help="write a seeded hierarchical synthetic dataset")
    common(g)
    g.add_argument("--items-per-leaf", type=int)
    g.add_argument("--branching", type=_int_list, help="e.g. 8,8,8")
    g.add_argument("--walk", choices=["branch", "deterministic"])
    g.add_argument("--n-users", type=int)
    g.set_defaults(func=cmd_gen_synthetic)

    t = sub.add_parser("train", help="train the tokenizer on a dataset directory")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--tau", type=float)
    t.add_argument("--alpha0", type=float)
    t.add_argument("--alpha-floor", type=float)
    t.add_argument("--codebook-size", type=int)
    t.add_argument("--levels", type=int)
    t.add_argument("--dim", type=int)
    t.add_argument("--hidden", type=_int_list)
    t.add_argument("--shared-codebook", type=_bool, metavar="BOOL")
    t.add_argument("--negatives", choices=["both", "recon", "modal"])
    t.add_argument("--projection", type=_bool, metavar="BOOL")
    t.add_argument("--soft-assign", type=_bool, metavar="BOOL",
                   help="false: hard arg-min assignment, no codebook gradient")
    t.add_argument("--gumbel-scale", type=float)
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("tokenize", help="assign identifiers with a trained checkpoint")
    common(k)
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--data", required=True)
    k.set_defaults(func=cmd_tokenize)

    e = sub.add_parser("eval-retrieval", help="Recall@K of the generative retrieval harness")
    common(e)
    e.add_argument("--table", required=True, help="token table file (tokens.jsonl)")
    e.add_argument("--data", help="dataset directory holding sequences.jsonl")
    e.add_argument("--sequences", help="sequences file (overrides --data)")
    e.add_argument("--checkpoint", help="verify the table against this checkpoint's codebooks")
    e.add_argument("--allow-checksum-mismatch", action="store_true")
    e.add_argument("--k", type=_int_list, help="e.g. 5,10")
    e.add_argument("--beam", type=int)
    e.add_argument("--order", type=int)
    e.add_argument("--min-item-count", type=int)
    e.add_argument("--min-user-count", type=int)
    e.add_argument("--baseline", action="store_true", help="also score a shuffled token table")
    e.set_defaults(func=cmd_eval_retrieval)

    r = sub.add_parser("report", help="print the reports found in an output directory")
    r.add_argument("run")
    r.add_argument("--rows", type=int, default=10)
    r.add_argument("-v", "--verbose", action="store_true")
    r.set_defaults(func=cmd_report, threads=1)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        # BLAS stays single-threaded so results never depend on --threads
        with threadpool_limits(limits=1):
            return args.func(args)
    except UsageError as exc:
        print(f"contok {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TableError, CheckpointError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"contok {args.command}: data error: {msg}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteGradient, FloatingPointError) as exc:
        print(f"contok {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"contok {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
