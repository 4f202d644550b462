"""Command-line entry point: synthetic cohorts, preprocessing, graph
construction, training, sweeps, explanations, and report rendering.

Configuration is a flat JSON object with module-prefixed keys (one level of
nesting per module is also accepted); command-line overrides win. All
randomness flows from the single master seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from . import data as data_mod
from . import graph as graph_mod
from .autodiff import NumericsError
from .data import DataError, SplitSpec
from .explain import ExplainConfig, ExplainError, explain_cohort
from .graph import GraphError, KernelParams
from .models import KINDS, Model, ModelConfig, ModelError, load_checkpoint, save_checkpoint
from .render import RenderError, render_heatmap_svg, render_lines_svg
from .rng import derive_seed
from .train import (EvalError, TrainConfig, make_splits, predict_proba,
                    run_experiment, sweep_depth, sweep_labels, train)


class ConfigError(ValueError):
    pass


def _positive(x):
    if x <= 0:
        raise ConfigError(f"value must be positive, got {x}")
    return x


def _fraction(x):
    if not 0.0 < x <= 1.0:
        raise ConfigError(f"value must be in (0, 1], got {x}")
    return x


def _mu(x):
    if not 0.1 <= x <= 1.0:
        raise ConfigError(f"graph.mu must be in [0.1, 1.0], got {x}")
    return x


def _kind(x):
    if x not in KINDS:
        raise ConfigError(f"model.kind must be one of {KINDS}, got {x!r}")
    return x


def _int_list(x):
    if not isinstance(x, list) or not all(isinstance(v, int) for v in x):
        raise ConfigError(f"expected a list of integers, got {x!r}")
    return x


def _str_list(x):
    if not isinstance(x, list):
        raise ConfigError(f"expected a list of model kinds, got {x!r}")
    for v in x:
        _kind(v)
    return x


# key -> (python type, default, validator or None)
CONFIG_KEYS = {
    "seed": (int, 0, None),
    "jobs": (int, 1, _positive),
    "data.label_column": (str, "label", None),
    "data.missing_token": (str, "", None),
    "data.drop_threshold": (float, 0.5, _fraction),
    "data.impute_k": (int, 10, _positive),
    "synth.n_per_class": (int, 1000, _positive),
    "synth.n_features": (int, 40, _positive),
    "synth.n_informative": (int, 10, None),
    "synth.cluster_spread": (float, 1.0, None),
    "synth.margin": (float, 2.0, None),
    "synth.noise_rank": (int, 3, None),
    "synth.noise_scale": (float, 0.3, None),
    "graph.k_neighbors": (int, 20, _positive),
    "graph.mu": (float, 0.5, _mu),
    "graph.edge_threshold": (float, 1e-9, _positive),
    "graph.rho_is_squared": (bool, False, None),
    "model.kind": (str, "difformer-attn", _kind),
    "model.depth": (int, 2, _positive),
    "model.hidden": (int, 64, _positive),
    "model.heads": (int, 4, _positive),
    "model.residual_alpha": (float, 0.8, None),
    "model.dropout": (float, 0.5, None),
    "model.binary_degree": (bool, False, None),
    "train.epochs": (int, 1000, _positive),
    "train.learning_rate": (float, 0.001, None),
    "train.weight_decay": (float, 0.01, None),
    "train.selection": (str, "best_val", None),
    "train.patience": (int, None, None),
    "split.labeled_per_class": (int, 10, _positive),
    "split.val_size": (int, 200, _positive),
    "split.test_size": (int, 500, _positive),
    "split.repetitions": (int, 10, _positive),
    "sweep.l_values": (list, [1, 2, 5, 10, 20, 50, 100], _int_list),
    "sweep.depths": (list, [2, 4, 6, 8], _int_list),
    "sweep.models": (list, ["lr", "mlp", "gcn", "gat", "difformer-s",
                            "difformer-attn"], _str_list),
    "explain.epochs": (int, 200, _positive),
    "explain.learning_rate": (float, 0.01, None),
    "explain.lambda_size": (float, 0.1, None),
    "explain.lambda_entropy": (float, 0.1, None),
    "explain.n_targets": (int, 50, _positive),
    "explain.only_correct": (bool, True, None),
}


def _coerce_value(key: str, raw):
    typ = CONFIG_KEYS[key][0]
    if typ is bool and isinstance(raw, str):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if typ is list and isinstance(raw, str):
        raw = json.loads(raw)
    try:
        return typ(raw) if raw is not None else None
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {typ.__name__}") from None


def parse_config(config_path=None, overrides=None) -> dict:
    """Merge defaults, the JSON config file, and flag overrides (in that
    precedence order) into a validated flat config dict."""
    cfg = {k: default for k, (_, default, _) in CONFIG_KEYS.items()}

    def apply(key, value, source):
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r} (from {source})")
        value = _coerce_value(key, value)
        validator = CONFIG_KEYS[key][2]
        if validator is not None and value is not None:
            validator(value)
        cfg[key] = value

    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in doc.items():
            if isinstance(value, dict):
                for sub, v in value.items():
                    apply(f"{key}.{sub}", v, config_path)
            else:
                apply(key, value, config_path)
    for key, value in (overrides or {}).items():
        apply(key, value, "command line")
    return cfg


def emit_config(cfg: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)


# -- config -> module objects --------------------------------------------------

def _kernel_params(cfg) -> KernelParams:
    return KernelParams(k_neighbors=cfg["graph.k_neighbors"], mu=cfg["graph.mu"],
                        edge_threshold=cfg["graph.edge_threshold"],
                        rho_is_squared=cfg["graph.rho_is_squared"])


def _model_config(cfg, kind=None) -> ModelConfig:
    return ModelConfig(kind=kind or cfg["model.kind"], depth=cfg["model.depth"],
                       hidden=cfg["model.hidden"], heads=cfg["model.heads"],
                       residual_alpha=cfg["model.residual_alpha"],
                       dropout=cfg["model.dropout"],
                       binary_degree=cfg["model.binary_degree"])


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(epochs=cfg["train.epochs"],
                       learning_rate=cfg["train.learning_rate"],
                       weight_decay=cfg["train.weight_decay"],
                       seed=derive_seed(cfg["seed"], "train"),
                       selection=cfg["train.selection"],
                       patience=cfg["train.patience"])


def _split_spec(cfg) -> SplitSpec:
    return SplitSpec(labeled_per_class=cfg["split.labeled_per_class"],
                     val_size=cfg["split.val_size"],
                     test_size=cfg["split.test_size"],
                     repetitions=cfg["split.repetitions"],
                     seed=derive_seed(cfg["seed"], "split"))


def _load_cohort(cfg, path):
    return data_mod.load_csv(path, cfg["data.label_column"],
                             cfg["data.missing_token"])


def _require(path, what):
    import os
    if not os.path.exists(path):
        raise ConfigError(f"missing {what}: {path}")
    return path


# -- subcommands ---------------------------------------------------------------

def cmd_synth(cfg, args):
    fm = data_mod.generate_synthetic(
        cfg["synth.n_per_class"], cfg["synth.n_features"],
        cfg["synth.n_informative"], cfg["synth.cluster_spread"],
        seed=derive_seed(cfg["seed"], "synth"), margin=cfg["synth.margin"],
        noise_rank=cfg["synth.noise_rank"], noise_scale=cfg["synth.noise_scale"])
    data_mod.save_csv(fm, args.out, cfg["data.label_column"],
                      cfg["data.missing_token"])
    print(f"wrote synthetic cohort: {fm.n_subjects} subjects, "
          f"{fm.n_features} features -> {args.out}")


def cmd_preprocess(cfg, args):
    fm = _load_cohort(cfg, _require(args.input, "cohort CSV"))
    fm = data_mod.drop_sparse_features(fm, cfg["data.drop_threshold"])
    fm = data_mod.impute_knn_mean(fm, cfg["data.impute_k"])
    fm, stats = data_mod.normalize_unit_variance(fm)
    data_mod.save_csv(fm, args.out, cfg["data.label_column"],
                      cfg["data.missing_token"])
    n_const = int(stats["constant"].sum())
    print(f"preprocessed {fm.n_subjects} subjects, {fm.n_features} features "
          f"({n_const} constant) -> {args.out}")


def cmd_build_graph(cfg, args):
    fm = _load_cohort(cfg, _require(args.input, "preprocessed cohort CSV"))
    g = graph_mod.build_graph(fm.values, _kernel_params(cfg))
    graph_mod.save_graph(g, args.out)
    stats = graph_mod.graph_stats(g)
    with open(args.out + ".stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=1)
    print(f"graph: {stats['n_vertices']} vertices, {stats['n_edges']} edges, "
          f"mean degree {stats['mean_degree']:.2f} -> {args.out}")


def cmd_train(cfg, args):
    fm = _load_cohort(cfg, _require(args.input, "preprocessed cohort CSV"))
    g = graph_mod.load_graph(_require(args.graph, "graph file"))
    spec = _split_spec(cfg)
    split = make_splits(fm.labels, spec, repetition=0)
    model, info = train(_model_config(cfg), _train_config(cfg), fm, g, split)
    save_checkpoint(model, args.out)
    proba = predict_proba(model, fm.values, g if model.config.uses_graph else None)
    from .train import auc as auc_fn
    test_auc = auc_fn(proba[split.test_idx], fm.labels[split.test_idx])
    summary = {"test_auc": test_auc, "selected_epoch": info["selected_epoch"],
               "best_val_auc": info["best_val_auc"]}
    with open(args.out + ".metrics.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1)
    print(f"trained {model.config.kind}: test AUC {test_auc:.4f} "
          f"(epoch {info['selected_epoch']}) -> {args.out}")


def _run_sweep(cfg, args, depth_sweep: bool):
    fm = _load_cohort(cfg, _require(args.input, "preprocessed cohort CSV"))
    g = graph_mod.load_graph(_require(args.graph, "graph file"))
    model_cfgs = {kind: _model_config(cfg, kind) for kind in cfg["sweep.models"]}
    spec, tc = _split_spec(cfg), _train_config(cfg)
    if depth_sweep:
        table = sweep_depth(model_cfgs, cfg["sweep.depths"], fm, g, tc, spec,
                            cfg["jobs"])
    else:
        table = sweep_labels(model_cfgs, cfg["sweep.l_values"], fm, g, tc, spec,
                             cfg["jobs"])
    table.to_csv(args.out_prefix + ".csv")
    table.to_json(args.out_prefix + ".json")
    series = {k: [table.cells[(v, k)].mean for v in table.axis_values]
              for k in table.model_kinds}
    svg = render_lines_svg(table.axis_name, table.axis_values, series)
    with open(args.out_prefix + ".svg", "w", encoding="utf-8") as fh:
        fh.write(svg)
    print(f"sweep written to {args.out_prefix}.{{csv,json,svg}}")


def cmd_sweep_labels(cfg, args):
    _run_sweep(cfg, args, depth_sweep=False)


def cmd_sweep_depth(cfg, args):
    _run_sweep(cfg, args, depth_sweep=True)


def cmd_explain(cfg, args):
    fm = _load_cohort(cfg, _require(args.input, "preprocessed cohort CSV"))
    g = graph_mod.load_graph(_require(args.graph, "graph file"))
    model = load_checkpoint(_require(args.checkpoint, "model checkpoint"))
    ec = ExplainConfig(epochs=cfg["explain.epochs"],
                       learning_rate=cfg["explain.learning_rate"],
                       lambda_size=cfg["explain.lambda_size"],
                       lambda_entropy=cfg["explain.lambda_entropy"],
                       seed=derive_seed(cfg["seed"], "explain"))
    gg = g if model.config.uses_graph else None
    proba = predict_proba(model, fm.values, gg)
    predicted = (proba >= 0.5).astype(int)
    candidates = [i for i in range(fm.n_subjects)
                  if fm.labels[i] != data_mod.UNLABELED
                  and (not cfg["explain.only_correct"]
                       or predicted[i] == fm.labels[i])]
    targets = candidates[:cfg["explain.n_targets"]]
    matrix = explain_cohort(model, fm, g, targets, ec,
                            only_correct=cfg["explain.only_correct"])
    matrix.save_csv(args.out_prefix + ".csv")
    matrix.save_orders(args.out_prefix + ".orders.csv")
    svg = render_heatmap_svg(matrix.values, matrix.row_order, matrix.col_order,
                             matrix.feature_names,
                             [f"subject_{t}" for t in matrix.target_ids])
    with open(args.out_prefix + ".svg", "w", encoding="utf-8") as fh:
        fh.write(svg)
    print(f"explained {len(matrix.target_ids)} subjects -> "
          f"{args.out_prefix}.{{csv,orders.csv,svg}}")


def cmd_report(cfg, args):
    wrote = []
    if args.sweep_json:
        with open(_require(args.sweep_json, "sweep results JSON"),
                  encoding="utf-8") as fh:
            doc = json.load(fh)
        series = {}
        for kind in doc["models"]:
            series[kind] = [next(c["mean"] for c in doc["cells"]
                                 if c["model"] == kind and c[doc["axis"]] == v)
                            for v in doc["values"]]
        svg = render_lines_svg(doc["axis"], doc["values"], series)
        out = args.out_prefix + ".lines.svg"
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(svg)
        wrote.append(out)
    if args.explanation_csv:
        path = _require(args.explanation_csv, "explanation CSV")
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split(",")
            names, rows = [], []
            for line in fh:
                cells = line.rstrip("\n").split(",")
                names.append(cells[0])
                rows.append([float(c) for c in cells[1:]])
        values = np.array(rows)
        from .explain import order_heatmap
        row_order, col_order = order_heatmap(values)
        svg = render_heatmap_svg(values, row_order, col_order, names, header[1:])
        out = args.out_prefix + ".heatmap.svg"
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(svg)
        wrote.append(out)
    if not wrote:
        raise ConfigError("report needs --sweep-json and/or --explanation-csv")
    print("wrote " + ", ".join(wrote))


# -- argument parsing ----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # exit code 1 for usage errors (argparse default is 2)
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


FLAG_ALIASES = {
    "mu": "graph.mu",
    "kind": "model.kind",
    "depth": "model.depth",
    "epochs": "train.epochs",
    "labeled_per_class": "split.labeled_per_class",
    "repetitions": "split.repetitions",
}


def build_parser() -> _Parser:
    parser = _Parser(prog="cohortgraph", description=__doc__)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--jobs", type=int, help="parallel workers")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set graph.mu=0.3")
    parser.add_argument("--mu", type=float, help="kernel scale (graph.mu)")
    parser.add_argument("--kind", help="model kind")
    parser.add_argument("--depth", type=int, help="model depth")
    parser.add_argument("--epochs", type=int, help="training epochs")
    parser.add_argument("--labeled-per-class", dest="labeled_per_class", type=int)
    parser.add_argument("--repetitions", type=int)

    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="drop sparse features, impute, z-score")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("build-graph", help="build the similarity graph")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train one model on one split")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-labels", help="labeled-count sweep over models")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_sweep_labels)

    p = sub.add_parser("sweep-depth", help="depth sweep over models")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_sweep_depth)

    p = sub.add_parser("explain", help="per-subject feature-importance masks")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="render SVG reports from result files")
    p.add_argument("--sweep-json")
    p.add_argument("--explanation-csv")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def _collect_overrides(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    for alias, key in FLAG_ALIASES.items():
        value = getattr(args, alias, None)
        if value is not None:
            overrides[key] = value
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key] = value
    return overrides


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config, _collect_overrides(args))
        args.func(cfg, args)
    except (ConfigError, EvalError, GraphError, ModelError, ExplainError,
            RenderError) as exc:
        print(f"cohortgraph {args.subcommand}: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"cohortgraph {args.subcommand}: data error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"cohortgraph {args.subcommand}: numeric failure: {exc}",
              file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
