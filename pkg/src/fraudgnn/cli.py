"""Command line entry point: ``fraudgnn generate|train|eval|ablate|stats``.

Exit codes: 0 success, 1 user error (bad flags, config keys or data), 2
internal error.  ``FRAUDGNN_OUTPUT_DIR`` replaces the default output root;
an explicit ``--out`` still wins.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from . import synth, training
from .graph import DatasetFormatError, degree_stats, load_graph, save_graph
from .metrics import evaluate
from .model import LayeredFraudGNN

log = logging.getLogger("fraudgnn")

OUTPUT_ENV = "FRAUDGNN_OUTPUT_DIR"
GENERATOR_FILE = "generator.txt"
DENSE_BATCH = 256


class UserError(Exception):
    """Bad input from the operator; reported without a traceback."""


def output_root(default="runs") -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or default)


# ---------------------------------------------------------------------------
# generate


def _synth_values(raw: dict) -> dict:
    keys = set(synth.config_keys()) | {"preset"}
    unknown = sorted(set(raw) - keys)
    if unknown:
        raise UserError(f"unknown config key(s): {', '.join(unknown)}")
    out = {}
    for k, v in raw.items():
        if k in ("degrees", "homophily"):
            out[k] = tuple(float(t) for t in str(v).split(","))
        elif k in ("num_nodes", "num_features", "seed"):
            out[k] = int(v)
        elif k == "preset":
            out[k] = str(v)
        else:
            out[k] = float(v)
    return out


def cmd_generate(args) -> int:
    values = _synth_values(training.read_config_file(args.config)) if args.config else {}
    name = args.preset or values.pop("preset", "sparse")
    values.pop("preset", None)
    if args.nodes is not None:
        values["num_nodes"] = args.nodes
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = synth.preset(name, **values)
    out = Path(args.out) if args.out else output_root() / f"{name}-n{cfg.num_nodes}-s{cfg.seed}"
    g = synth.generate(cfg)
    save_graph(g, out)
    with open(out / GENERATOR_FILE, "w", encoding="utf-8") as f:
        f.write(f"preset = {name}\n")
        for k in synth.config_keys():
            v = getattr(cfg, k)
            f.write(f"{k} = {','.join(map(repr, v)) if isinstance(v, tuple) else v}\n")
    write_stats_csv(out / "stats.csv", g)
    print(out)
    return 0


# ---------------------------------------------------------------------------
# stats


def write_stats_csv(path, g):
    stats = degree_stats(g)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write("# fraudgnn stats v1\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["relation", "edges", "mean_degree", "max_degree"])
        for row in stats.rows():
            w.writerow([row["relation"], row["edges"], f"{row['mean_degree']:.6f}", row["max_degree"]])
    return Path(path)


def cmd_stats(args) -> int:
    g = load_graph(args.data)
    stats = degree_stats(g)
    if args.out:
        write_stats_csv(args.out, g)
    print("relation,edges,mean_degree,max_degree")
    for row in stats.rows():
        print(f"{row['relation']},{row['edges']},{row['mean_degree']:.6f},{row['max_degree']}")
    print(f"# nodes={g.num_nodes} fraud={int(g.labels.sum())} density={stats.density:.6g}")
    return 0


# ---------------------------------------------------------------------------
# train / ablate


_FLAG_KEYS = {
    "epochs": "epochs",
    "seed": "seed",
    "lr": "lr",
    "batch_size": "batch_size",
    "train_frac": "train_frac",
    "eval_every": "eval_every",
    "norm": "norm",
    "similarity": "similarity",
    "iis_start": "iis_start_layer",
    "layers": "num_layers",
    "hidden": "hidden",
    "sim_dim": "sim_dim",
    "lambda_sim": "lambda_sim",
}


def _generated_preset(data_dir):
    path = Path(data_dir) / GENERATOR_FILE
    if not path.exists():
        return None
    return training.read_config_file(path).get("preset")


def resolve_run_config(args) -> training.RunConfig:
    """Defaults < config file < output env var < flags."""
    values = training.read_config_file(args.config) if args.config else {}
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if args.data:
        values["dataset"] = args.data
    if not values.get("dataset"):
        raise UserError("no dataset given (use --data or dataset = ... in the config)")
    if "batch_size" not in values and _generated_preset(values["dataset"]) == "dense":
        values["batch_size"] = DENSE_BATCH
    if os.environ.get(OUTPUT_ENV):
        values["out_dir"] = os.environ[OUTPUT_ENV]
    if getattr(args, "out", None):
        values["out_dir"] = args.out
    try:
        return training.build_run_config(values)
    except (KeyError, ValueError) as e:
        raise UserError(str(e).strip("'\"")) from None


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    g = load_graph(cfg.dataset)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.quiet:
        res = training.train(g, cfg)
    else:
        res = training.train(g, cfg, on_epoch=lambda rec: _progress(rec, cfg.epochs))
    res.model.save(out / "checkpoint.npz", extra={"seed": cfg.seed, "train_frac": cfg.train_frac, "dataset": str(cfg.dataset)})
    training.write_config(out / "config.txt", cfg)
    training.write_loss_csv(out / "loss_per_layer.csv", res.history)
    training.write_thresholds_csv(out / "thresholds.csv", res.history)
    training.write_eval_csv(out / "eval.csv", res.history)
    report = res.final_report or evaluate(g.labels[res.test_idx], res.model.predict(g, res.test_idx))
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return 0


def _progress(rec, total):
    line = f"epoch {rec.epoch}/{total} loss={rec.total:.4f}"
    if rec.report is not None:
        line += f" recall={rec.report.recall:.4f} auc={rec.report.auc:.4f} macro_f1={rec.report.macro_f1:.4f}"
    print(line, file=sys.stderr)


def cmd_ablate(args) -> int:
    base = resolve_run_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    g = load_graph(base.dataset)
    out = Path(args.csv) if args.csv else Path(base.out_dir) / "ablation.csv"
    out.parent.mkdir(parents=True, exist_ok=True)

    def note(row):
        print(f"{row['stage']} seed={row['seed']} recall={row['recall']:.4f} auc={row['auc']:.4f} macro_f1={row['macro_f1']:.4f}", file=sys.stderr)

    rows = training.run_ablation(g, base, seeds, norm=args.ladder_norm, on_run=None if args.quiet else note)
    training.write_ablation_csv(out, rows)
    print(out)
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    try:
        model = LayeredFraudGNN.load(args.checkpoint)
    except (OSError, KeyError, ValueError) as e:
        raise UserError(f"cannot read checkpoint {args.checkpoint}: {e}") from None
    extra = getattr(model, "meta_extra", {})
    data = args.data or extra.get("dataset")
    if not data:
        raise UserError("no dataset given (use --data)")
    g = load_graph(data)
    if g.num_features != model.in_dim or g.num_relations != model.num_relations:
        raise UserError(
            f"checkpoint expects {model.in_dim} features and {model.num_relations} relations; "
            f"dataset has {g.num_features} and {g.num_relations}"
        )
    cfg = training.RunConfig(seed=int(extra.get("seed", 0)), train_frac=float(extra.get("train_frac", 0.4)))
    nodes = training.split_nodes(g, cfg, args.split)
    prob = model.predict(g, nodes)
    report = evaluate(g.labels[nodes], prob)
    if args.out:
        Path(args.out).write_text(report.to_text(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return 0


# ---------------------------------------------------------------------------


def _add_run_flags(p):
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--config", help="flat key = value run config")
    p.add_argument("--out", help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--train-frac", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--norm", choices=("none", "node", "batch"))
    p.add_argument("--similarity", choices=("l1", "cosine"))
    p.add_argument("--iis-start", type=int, help="first layer using 2-hop candidates (layers+1 disables)")
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--sim-dim", type=int)
    p.add_argument("--lambda-sim", type=float)
    p.add_argument("-q", "--quiet", action="store_true", help="no per-epoch progress")


def build_parser():
    parser = argparse.ArgumentParser(prog="fraudgnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--preset", choices=sorted(synth.PRESETS))
    p.add_argument("--nodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="dataset directory")
    p.add_argument("--config", help="flat key = value generator overrides")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the four-stage ladder over seeds")
    _add_run_flags(p)
    p.add_argument("--seeds", help="comma separated seeds (default: --seed)")
    p.add_argument("--ladder-norm", choices=("node", "batch"), default="batch")
    p.add_argument("--csv", help="output CSV (default: <out>/ablation.csv)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stats", help="per-relation degree statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="also write stats.csv here")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UserError, DatasetFormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except training.TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
