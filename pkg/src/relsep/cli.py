"""Command line entry point.

Subcommands cover the whole experiment surface: synthetic data
generation, training, evaluation, variant ablations, edge-removal
sweeps, structural transform dumps, and embedding export. Exit codes:
0 success, 1 invalid input, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import report
from .autodiff import TapeError
from .dataio import FormatError, load_graph, save_graph
from .evaluation import (
    ABLATION_VARIANTS,
    EvalError,
    SPLIT_CHOICES,
    SplitSpec,
    ablation_study,
    config_hash,
    evaluate_embeddings,
    robustness_sweep,
)
from .hetgraph import GraphError, build_incidence, dual_transform
from .relweight import propagation_matrix
from .synthetic import SyntheticConfig, generate_synthetic, \
    xavier_random_features
from .trainer import (
    ConfigError,
    Pipeline,
    TrainConfig,
    TrainError,
    Trainer,
)

USAGE_ERRORS = (FormatError, GraphError, ConfigError, EvalError,
                FileNotFoundError, IsADirectoryError, NotADirectoryError,
                json.JSONDecodeError)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; this artifact reserves 2 for
    runtime failures, so flag errors are remapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_split_flags(sub):
    sub.add_argument("--split", type=int, choices=SPLIT_CHOICES, default=20,
                     help="training nodes drawn per class")
    sub.add_argument("--seed", type=int, default=0,
                     help="split/protocol seed")
    sub.add_argument("--trials", type=int, default=10,
                     help="independent evaluation trials")
    sub.add_argument("--val-size", type=int, default=1000,
                     help="validation set size")
    sub.add_argument("--test-size", type=int, default=1000,
                     help="test set size")


def _split_spec(args) -> SplitSpec:
    return SplitSpec(args.split, args.val_size, args.test_size, args.seed)


def build_parser() -> _Parser:
    parser = _Parser(prog="relsep",
                     description="Relation-separated graph embedding "
                                 "training and evaluation")
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("generate", parents=[],
                          help="write a synthetic planted-partition graph")
    gen.add_argument("--spec", required=True,
                     help="generator config JSON file")
    gen.add_argument("--out", required=True, help="output graph directory")
    gen.add_argument("--seed", type=int, default=None,
                     help="override the generator seed")
    gen.set_defaults(func=cmd_generate)

    tr = subs.add_parser("train", help="train on a graph directory")
    tr.add_argument("--data", required=True, help="graph directory")
    tr.add_argument("--config", required=True,
                    help="training config JSON file")
    tr.add_argument("--out", required=True, help="run output directory")
    tr.add_argument("--seed", type=int, default=None,
                    help="override the config seed")
    tr.add_argument("--precision", type=int, choices=(32, 64), default=None,
                    help="override float precision")
    tr.add_argument("--deterministic", action="store_true",
                    help="force 64-bit deterministic training")
    tr.add_argument("--random-features", type=int, default=None, metavar="D",
                    help="replace node features with seeded random ones")
    tr.set_defaults(func=cmd_train)

    ev = subs.add_parser("eval", help="evaluate a run's embeddings")
    ev.add_argument("--run", required=True, help="training run directory")
    ev.add_argument("--data", required=True, help="graph directory")
    ev.add_argument("--out", default=None,
                    help="report directory (defaults to the run)")
    _add_split_flags(ev)
    ev.set_defaults(func=cmd_eval)

    ab = subs.add_parser("ablate", help="train and score model variants")
    ab.add_argument("--data", required=True, help="graph directory")
    ab.add_argument("--config", required=True,
                    help="training config JSON file")
    ab.add_argument("--out", required=True, help="output directory")
    ab.add_argument("--variants", required=True,
                    help="comma list from " + ",".join(ABLATION_VARIANTS))
    _add_split_flags(ab)
    ab.set_defaults(func=cmd_ablate)

    ps = subs.add_parser("perturb-sweep",
                         help="retrain under random edge removal")
    ps.add_argument("--data", required=True, help="graph directory")
    ps.add_argument("--config", required=True,
                    help="training config JSON file")
    ps.add_argument("--out", required=True, help="output directory")
    ps.add_argument("--rates", required=True,
                    help="comma list of removal rates in [0,1)")
    _add_split_flags(ps)
    ps.set_defaults(func=cmd_perturb)

    tf = subs.add_parser("transform",
                         help="dump incidence/dual structure for a relation")
    tf.add_argument("--data", required=True, help="graph directory")
    tf.add_argument("--relation", required=True, help="relation name")
    tf.add_argument("--out", required=True, help="output directory")
    tf.add_argument("--run", default=None,
                    help="run directory; adds learned edge weights")
    tf.set_defaults(func=cmd_transform)

    ex = subs.add_parser("export", help="write embeddings from a run")
    ex.add_argument("--run", required=True, help="training run directory")
    ex.add_argument("--data", required=True, help="graph directory")
    ex.add_argument("--out", required=True, help="output TSV file")
    ex.add_argument("--mode", choices=("anchor", "concat_views"),
                    default="anchor")
    ex.set_defaults(func=cmd_export)
    return parser


def _load_train_config(path) -> TrainConfig:
    return TrainConfig.from_json(Path(path).read_text(encoding="utf-8"))


def _resolve_config(args) -> TrainConfig:
    cfg = _load_train_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.precision is not None:
        cfg = replace(cfg, precision=args.precision)
    if args.deterministic:
        cfg = replace(cfg, precision=64)
    return cfg


def _load_run(run_dir, graph):
    run_dir = Path(run_dir)
    cfg = _load_train_config(run_dir / "config.json")
    pipeline = Pipeline(graph, cfg)
    trainer = Trainer(pipeline)
    trainer.load(run_dir / "checkpoint.bin")
    return pipeline


def cmd_generate(args) -> int:
    cfg = SyntheticConfig.from_file(args.spec)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    graph = generate_synthetic(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(graph, out)
    print(f"wrote {graph.target_type} graph with "
          f"{sum(t.count for t in graph.node_types)} nodes to {out}")
    return 0


def cmd_train(args) -> int:
    graph = load_graph(args.data)
    cfg = _resolve_config(args)
    if args.random_features is not None:
        graph = xavier_random_features(graph, args.random_features, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    pipeline = Pipeline(graph, cfg)
    trainer = Trainer(pipeline)
    result = trainer.run()
    trainer.save(out / "checkpoint.bin")

    report.write_text(out / "config.json", cfg.to_json() + "\n")
    report.write_training_log(out / "training_log.tsv", result)
    report.write_embeddings(out / "embeddings.tsv",
                            pipeline.export_embeddings())
    report.save_loss_curve(out / "loss_curve.png", result)
    summary = {"best_epoch": result.best_epoch,
               "best_loss": result.best_loss,
               "final_epoch": result.final_epoch,
               "early_stopped": result.early_stopped,
               "config_hash": config_hash(cfg)}
    report.write_text(out / "result.json",
                       json.dumps(summary, indent=2) + "\n")
    print(f"trained to epoch {result.final_epoch} "
          f"(best {result.best_loss:.6f} at {result.best_epoch}), "
          f"artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    graph = load_graph(args.data)
    run_dir = Path(args.run)
    emb = report.read_embeddings(run_dir / "embeddings.tsv")
    cfg = _load_train_config(run_dir / "config.json")
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    metrics = evaluate_embeddings(
        emb, graph.labels, graph.num_classes, _split_spec(args),
        trials=args.trials, dataset=Path(args.data).name,
        config_hash=config_hash(cfg))
    report.write_metrics(out, "report", metrics)
    report.save_metrics_bar(out / "report.png", metrics)
    for name, (mean, std) in metrics.metrics.items():
        print(f"{name}: {mean:.4f} +- {std:.4f}")
    return 0


def cmd_ablate(args) -> int:
    graph = load_graph(args.data)
    cfg = _load_train_config(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise EvalError("no variants given")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablation_study(graph, cfg, variants, _split_spec(args),
                          trials=args.trials)
    report.write_ablation_table(out / "ablation.tsv", rows)
    report.save_ablation_bars(out / "ablation.png", rows)
    for variant, rep in rows:
        print(f"{variant}: micro_f1 {rep.metrics['micro_f1'][0]:.4f}")
    return 0


def cmd_perturb(args) -> int:
    graph = load_graph(args.data)
    cfg = _load_train_config(args.config)
    try:
        rates = [float(r) for r in args.rates.split(",") if r.strip()]
    except ValueError as exc:
        raise EvalError(f"bad --rates value: {exc}") from exc
    if not rates:
        raise EvalError("no rates given")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    points = robustness_sweep(graph, cfg, rates, _split_spec(args),
                              trials=args.trials, perturb_seed=args.seed)
    report.write_sweep_table(out / "robustness.tsv", points)
    report.save_sweep_curve(out / "robustness.png", points)
    for rate, rep in points:
        print(f"rate {rate}: micro_f1 {rep.metrics['micro_f1'][0]:.4f}")
    return 0


def cmd_transform(args) -> int:
    graph = load_graph(args.data)
    relation = graph.relation_by_name(args.relation)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    incidence = build_incidence(graph, relation)
    coo = incidence.matrix.tocoo()
    lines = ["row\tedge"]
    lines += [f"{r}\t{c}" for r, c in
              sorted(zip(coo.row, coo.col), key=lambda rc: (rc[1], rc[0]))]
    report.write_text(out / "incidence.tsv", "\n".join(lines) + "\n")

    dual = dual_transform(incidence)
    deg_lines = ["hyperedge\tdegree"]
    deg_lines += [f"{i}\t{int(d)}"
                  for i, d in enumerate(dual.hyperedge_degrees)]
    report.write_text(out / "dual_degrees.tsv", "\n".join(deg_lines) + "\n")

    prop = propagation_matrix(graph, relation.name, np.float64).toarray()
    prop_lines = ["\t".join(repr(float(v)) for v in row) for row in prop]
    report.write_text(out / "propagation.tsv", "\n".join(prop_lines) + "\n")

    if args.run:
        pipeline = _load_run(args.run, graph)
        from .autodiff import Tape

        result = pipeline.forward(Tape(), training=False, epoch=0)
        if relation.name in result.weights:
            w = result.weights[relation.name].data
            w_lines = ["edge\tweight"]
            w_lines += [f"{i}\t{float(v)!r}" for i, v in enumerate(w)]
            report.write_text(out / "weights.tsv", "\n".join(w_lines) + "\n")
        else:
            print(f"note: relation {relation.name} carries no learned "
                  f"weights in this run")
    print(f"wrote structure dumps for {relation.name} to {out}")
    return 0


def cmd_export(args) -> int:
    graph = load_graph(args.data)
    pipeline = _load_run(args.run, graph)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_embeddings(out, pipeline.export_embeddings(args.mode))
    print(f"wrote embeddings to {out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainError, TapeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
