"""Command-line pipeline: synth, pretrain, tune, eval, sweep, export-w.

Metric lines go to stdout as TSV; logs (including the resolved config echoed
as the first line of every run) go to stderr. Exit codes: 0 success, 2 usage
error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys

import numpy as np

from .data import (
    Checkpoint,
    TunedPrompt,
    generate_sbm,
    labeled_from_split,
    load_checkpoint,
    load_node_dataset,
    load_tu_dataset,
    mask_training_labels,
    sample_k_shot,
    save_checkpoint,
    save_node_dataset,
    export_weight_matrix,
)
from .autodiff import Tensor
from .encoders import gnn_forward, mlp_forward
from .errors import ContractError, PspError
from .graph import GraphData, PromptedGraph, gcn_normalize
from .inference import evaluate, np_prototypes, predict
from .pretrain import PretrainConfig, pretrain, write_loss_log
from .prompt import LabeledSet, PromptConfig, graph_task_views, prompt_tune, prototype_embeddings

DEFAULT_SEEDS = "0,1,2,3,4"


def _echo_config(args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    print(f"config\t{json.dumps(resolved, default=str, sort_keys=True)}", file=sys.stderr)


def _load_dataset(args) -> GraphData:
    if getattr(args, "tu_name", None):
        return load_tu_dataset(args.data, args.tu_name)
    return load_node_dataset(args.data)


def _split_for(g: GraphData, args):
    """Recompute the deterministic few-shot split a run's flags describe."""
    task = getattr(args, "task", "node")
    labels = g.graph_labels if task == "graph" else g.labels
    if labels is None:
        raise ContractError(f"dataset has no labels for task {task!r}")
    split = sample_k_shot(labels, args.k_shot, args.seed, args.val_shots)
    if args.mask_ratio > 0:
        split = mask_training_labels(split, args.mask_ratio, args.seed, labels)
    return split, labels


def _tune_once(g: GraphData, ckpt: Checkpoint, args, seed: int):
    task = getattr(args, "task", "node")
    labels = g.graph_labels if task == "graph" else g.labels
    split = sample_k_shot(labels, args.k_shot, seed, args.val_shots)
    if args.mask_ratio > 0:
        split = mask_training_labels(split, args.mask_ratio, seed, labels)
    cfg = PromptConfig(epochs=args.epochs, lr=args.lr, weight_decay=args.weight_decay,
                       tau=args.tau, edge_ratio=args.edge_ratio, seed=seed, task=task,
                       dropout=args.dropout, patience=args.patience)
    labeled = LabeledSet(labeled_from_split(split.train, labels), k=args.k_shot)
    val = LabeledSet(labeled_from_split(split.val, labels), k=args.val_shots) \
        if split.val else None
    prompted, losses = prompt_tune(g, labeled, ckpt.params, cfg, val=val)
    return prompted, losses, split, labels


def _anchor_rows(g: GraphData, ckpt: Checkpoint, task: str, indices) -> Tensor:
    if task == "graph":
        anchors, _ = graph_task_views(g, ckpt.params)
    else:
        anchors = mlp_forward(g.features, ckpt.params, "eval")
    return Tensor(anchors.data[np.asarray(indices, dtype=np.int64)])


def _metric_line(run_id, seed, task, shots, accuracy) -> str:
    return f"{run_id}\t{seed}\t{task}\t{shots}\t{accuracy!r}"


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    g = generate_sbm(args.n, args.classes, args.homophily, args.avg_deg,
                     args.feat_dim, args.noise, args.seed)
    save_node_dataset(args.out, g)
    print(f"wrote synthetic dataset to {args.out}", file=sys.stderr)
    return 0


def _cmd_pretrain(args) -> int:
    g = _load_dataset(args)
    cfg = PretrainConfig(epochs=args.epochs, lr=args.lr, weight_decay=args.weight_decay,
                         tau=args.tau, dropout=args.dropout, hidden_dim=args.hidden_dim,
                         seed=args.seed)
    params, losses = pretrain(g, cfg)
    save_checkpoint(args.out, Checkpoint(hidden_dim=cfg.hidden_dim, tau=cfg.tau,
                                         seed=cfg.seed, params=params))
    write_loss_log(str(args.out) + ".loss.tsv", losses)
    print(f"pretrained {cfg.epochs} epochs, checkpoint at {args.out}", file=sys.stderr)
    return 0


def _cmd_tune(args) -> int:
    g = _load_dataset(args)
    ckpt = load_checkpoint(args.ckpt)
    if args.tau is None:
        args.tau = ckpt.tau
    prompted, losses, _, _ = _tune_once(g, ckpt, args, args.seed)
    bundle = Checkpoint(hidden_dim=ckpt.hidden_dim, tau=args.tau, seed=args.seed,
                        params=ckpt.params,
                        prompt=TunedPrompt(task=args.task,
                                           proto_features=prompted.proto_features.data,
                                           weights=prompted.weight_rows.data,
                                           mask=prompted.trainable_row_mask))
    save_checkpoint(args.out, bundle)
    write_loss_log(str(args.out) + ".loss.tsv", losses)
    print(f"tuned {len(losses)} epochs, bundle at {args.out}", file=sys.stderr)
    return 0


def _prompted_from_bundle(g: GraphData, ckpt: Checkpoint) -> PromptedGraph:
    p = ckpt.prompt
    return PromptedGraph(base=g, n_prototypes=p.weights.shape[1],
                         proto_features=Tensor(p.proto_features),
                         weight_rows=Tensor(p.weights),
                         trainable_row_mask=p.mask)


def _cmd_eval(args) -> int:
    g = _load_dataset(args)
    ckpt = load_checkpoint(args.ckpt)
    if args.tau is None:
        args.tau = ckpt.tau
    split, labels = _split_for(g, args)
    anchors = _anchor_rows(g, ckpt, args.task, split.test)
    if args.variant == "psp-np":
        if args.task == "graph":
            _, struct_view = graph_task_views(g, ckpt.params)
        else:
            struct_view = gnn_forward(g.features, gcn_normalize(g.adjacency), ckpt.params, "eval")
        labeled = LabeledSet(labeled_from_split(split.train, labels), k=args.k_shot)
        n_classes = g.n_graph_classes if args.task == "graph" else g.n_classes
        prototypes = np_prototypes(struct_view, labeled, n_classes)
    else:
        if ckpt.prompt is None:
            raise ContractError("checkpoint holds no tuned prompt; run `tune` first or use --variant psp-np")
        prompted = _prompted_from_bundle(g, ckpt)
        prototypes = prototype_embeddings(g, prompted, ckpt.params, "eval")
    acc = evaluate(predict(anchors, prototypes, args.tau), labels[split.test])
    print(_metric_line(args.run_id, args.seed, args.task, args.k_shot, acc))
    return 0


def _cmd_export_w(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.prompt is None:
        raise ContractError("checkpoint holds no tuned prompt to export")
    labels = None
    if args.data:
        g = _load_dataset(args)
        labels = g.graph_labels if ckpt.prompt.task == "graph" else g.labels
    export_weight_matrix(Tensor(ckpt.prompt.weights), labels, args.out)
    print(f"wrote weight matrix to {args.out}", file=sys.stderr)
    return 0


def _cmd_sweep(args) -> int:
    g = _load_dataset(args)
    ckpt = load_checkpoint(args.ckpt)
    if args.tau is None:
        args.tau = ckpt.tau
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    grid = list(itertools.product(
        [float(v) for v in args.lr_grid.split(",")],
        [float(v) for v in args.weight_decay_grid.split(",")],
        [float(v) for v in args.dropout_grid.split(",")]))
    best = None
    for lr, wd, dropout in grid:
        val_accs = []
        for seed in seeds:
            point = argparse.Namespace(**vars(args))
            point.lr, point.weight_decay, point.dropout, point.seed = lr, wd, dropout, seed
            prompted, _, split, labels = _tune_once(g, ckpt, point, seed)
            anchors = _anchor_rows(g, ckpt, args.task, split.val)
            proto = prototype_embeddings(g, prompted, ckpt.params, "eval")
            val_accs.append(evaluate(predict(anchors, proto, args.tau), labels[split.val]))
        mean_val = float(np.mean(val_accs))
        print(f"grid\tlr={lr}\twd={wd}\tdropout={dropout}\tval_acc={mean_val:.4f}",
              file=sys.stderr)
        if best is None or mean_val > best[0]:
            best = (mean_val, lr, wd, dropout)
    _, lr, wd, dropout = best
    print(f"selected\tlr={lr}\twd={wd}\tdropout={dropout}")
    test_accs = []
    for seed in seeds:
        point = argparse.Namespace(**vars(args))
        point.lr, point.weight_decay, point.dropout, point.seed = lr, wd, dropout, seed
        prompted, _, split, labels = _tune_once(g, ckpt, point, seed)
        anchors = _anchor_rows(g, ckpt, args.task, split.test)
        proto = prototype_embeddings(g, prompted, ckpt.params, "eval")
        acc = evaluate(predict(anchors, proto, args.tau), labels[split.test])
        test_accs.append(acc)
        print(_metric_line(args.run_id, seed, args.task, args.k_shot, acc))
    print(f"summary\t{args.run_id}\t{float(np.mean(test_accs))!r}\t{float(np.std(test_accs))!r}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--tu-name", default=None, help="TU dataset prefix (graph datasets)")
    p.add_argument("--task", choices=("node", "graph"), default="node")


def _add_split_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k-shot", type=int, default=3)
    p.add_argument("--val-shots", type=int, default=3)
    p.add_argument("--mask-ratio", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)


def _add_tune_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--edge-ratio", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=None, help="defaults to the checkpoint value")
    p.add_argument("--patience", type=int, default=60)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic block-model dataset")
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--h", dest="homophily", type=float, default=0.8)
    p.add_argument("--avg-deg", type=float, default=2.5)
    p.add_argument("--feat-dim", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("pretrain", help="contrastively pre-train the two encoders")
    _add_data_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--hidden-dim", type=int, default=None,
                   help="defaults to 128 for node tasks, 32 for graph tasks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("tune", help="learn prompt weights on a few-shot split")
    _add_data_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    _add_split_flags(p)
    _add_tune_flags(p)
    p.set_defaults(func=_cmd_tune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_data_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--variant", choices=("psp", "psp-np"), default="psp")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--run-id", default="run")
    _add_split_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="grid-search tuning hyperparameters on validation accuracy")
    _add_data_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lr-grid", default="0.0001,0.001,0.01,0.1")
    p.add_argument("--weight-decay-grid", default="0.00001,0.0001,0.001,0.01")
    p.add_argument("--dropout-grid", default="0.2,0.5,0.8")
    p.add_argument("--seeds", default=DEFAULT_SEEDS)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--run-id", default="sweep")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--edge-ratio", type=float, default=1.0)
    p.add_argument("--patience", type=int, default=30)
    _add_split_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("export-w", help="dump learned prompt weights as TSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="optional dataset directory for the label column")
    p.add_argument("--tu-name", default=None)
    p.set_defaults(func=_cmd_export_w)
    return parser


def run(argv=None) -> int:
    """Parse argv and execute one subcommand, mapping failures to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "hidden_dim", 1) is None:
        args.hidden_dim = 32 if args.task == "graph" else 128
    _echo_config(args)
    try:
        return args.func(args)
    except PspError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
