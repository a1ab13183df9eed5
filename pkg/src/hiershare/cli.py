"""Command-line interface.

Subcommands: relevance, cluster, train, eval, attention-sim, sweep.
All randomness flows from --seed / the config seed through deterministic
seed derivation; rerunning a command with the same inputs reproduces its
artifacts exactly. Validation failures exit 1 with a single-line error;
usage errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from .analysis import (
    attention_similarity,
    layer_combination_sweep,
    plan_label,
    probe_examples,
    shared_layer_sweep,
)
from .encoder import EncoderConfig
from .model import Grouping, LayerPlan, load_checkpoint, save_checkpoint
from .pipeline import run_training
from .relevance import (
    PairwiseConfig,
    RelevanceMatrix,
    data_property_matrix,
    kmeans_cluster,
    manual_grouping,
    pairwise_relevance_matrix,
)
from .seeding import derive_seed
from .tasks import load_manifest
from .text import Tokenizer
from .training import TrainConfig, evaluate


@dataclasses.dataclass
class ExperimentConfig:
    """Parsed train-subcommand configuration."""

    tasks: str
    plan: LayerPlan
    grouping_source: str  # manual | data_property | model_based | file
    k: int
    grouping_path: str | None
    encoder: EncoderConfig
    train: TrainConfig
    out_dir: str
    seed: int

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        base = Path(path).parent
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        plan = LayerPlan(*raw.get("plan", [8, 2, 2]))
        grouping = raw.get("grouping", {"source": "manual"})
        encoder = EncoderConfig(**raw.get("encoder", {}))
        seed = int(raw.get("seed", 0))
        train = TrainConfig(seed=derive_seed(seed, "train"),
                            **raw.get("train", {}))
        grouping_path = grouping.get("path")
        if grouping_path is not None:
            grouping_path = str(base / grouping_path)
        config = cls(
            tasks=str(base / raw["tasks"]),
            plan=plan,
            grouping_source=grouping.get("source", "manual"),
            k=int(grouping.get("k", 3)),
            grouping_path=grouping_path,
            encoder=encoder,
            train=train,
            out_dir=str(base / raw.get("out_dir", "run")),
            seed=seed,
        )
        if config.grouping_source not in ("manual", "data_property",
                                          "model_based", "file"):
            raise ValueError(
                f"unknown grouping source {config.grouping_source!r}")
        if config.grouping_source == "file" and not config.grouping_path:
            raise ValueError("grouping source 'file' requires grouping.path")
        return config


def load_grouping_file(path) -> Grouping:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    return Grouping(cluster_of={t: int(c) for t, c in raw["cluster_of"].items()},
                    k=int(raw["k"]))


def save_grouping_file(grouping: Grouping, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"k": grouping.k, "cluster_of": grouping.cluster_of},
                  f, indent=2, sort_keys=True)
        f.write("\n")


def resolve_grouping(config: ExperimentConfig, datasets) -> Grouping:
    if config.grouping_source == "file":
        return load_grouping_file(config.grouping_path)
    if config.grouping_source == "manual":
        return manual_grouping({t: d.spec.category for t, d in datasets.items()})
    if config.grouping_source == "data_property":
        matrix = data_property_matrix(datasets)
    else:
        matrix = pairwise_relevance_matrix(
            datasets,
            PairwiseConfig(encoder=config.encoder, train=config.train,
                           seed=derive_seed(config.seed, "relevance")))
    return kmeans_cluster(matrix, k=config.k,
                          seed=derive_seed(config.seed, "cluster"))


def _add_encoder_args(parser, dim=64, heads=4, max_len=64):
    parser.add_argument("--dim", type=int, default=dim)
    parser.add_argument("--heads", type=int, default=heads)
    parser.add_argument("--max-len", type=int, default=max_len)


def _add_train_args(parser, epochs=3, batch_size=16, lr=3e-4):
    parser.add_argument("--epochs", type=int, default=epochs)
    parser.add_argument("--batch-size", type=int, default=batch_size)
    parser.add_argument("--lr", type=float, default=lr)
    parser.add_argument("--weight-decay", type=float, default=0.01)


def _encoder_of(args) -> EncoderConfig:
    return EncoderConfig(dim=args.dim, heads=args.heads, max_len=args.max_len)


def _train_of(args, seed: int) -> TrainConfig:
    return TrainConfig(max_epochs=args.epochs, batch_size=args.batch_size,
                       lr=args.lr, weight_decay=args.weight_decay, seed=seed)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_relevance(args) -> int:
    datasets = load_manifest(args.tasks, seed=derive_seed(args.seed, "data"))
    if args.kind == "data_property":
        matrix = data_property_matrix(datasets)
    else:
        config = PairwiseConfig(
            depth=args.depth, encoder=_encoder_of(args),
            train=_train_of(args, seed=0), seed=derive_seed(args.seed, "relevance"),
            jobs=args.jobs)
        matrix = pairwise_relevance_matrix(datasets, config)
    matrix.save_csv(args.out)
    print(f"wrote {args.kind} matrix for {len(matrix.tasks)} tasks to {args.out}")
    return 0


def _infer_matrix_kind(path) -> str:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    diag = [float(rows[i + 1][i + 1]) for i in range(len(rows) - 1)]
    if all(abs(d - 1.0) < 1e-9 for d in diag):
        return "data_property"
    if all(d == 0.0 for d in diag):
        return "model_based"
    raise ValueError(f"{path}: cannot infer matrix kind from diagonal")


def cmd_cluster(args) -> int:
    kind = args.kind or _infer_matrix_kind(args.matrix)
    matrix = RelevanceMatrix.load_csv(args.matrix, kind=kind)
    grouping = kmeans_cluster(matrix, k=args.k, seed=args.seed,
                              restarts=args.restarts)
    if args.out:
        save_grouping_file(grouping, args.out)
    for c in range(grouping.k):
        members = ", ".join(sorted(grouping.members(c)))
        print(f"cluster {c}: {members}")
    return 0


def cmd_train(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    datasets = load_manifest(config.tasks, seed=derive_seed(config.seed, "data"))
    grouping = resolve_grouping(config, datasets)
    model, tokenizer, history = run_training(
        datasets, config.plan, grouping, config.encoder, config.train,
        init_seed=derive_seed(config.seed, "init"))
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint")
    tokenizer.save(out / "checkpoint" / "vocab.txt")
    save_grouping_file(grouping, out / "grouping.json")
    history.export_jsonl(out / "metrics.jsonl")
    history.export_loss_csv(out / "loss.csv")
    with open(out / "experiment.json", "w", encoding="utf-8") as f:
        json.dump({"config": str(args.config), "seed": config.seed,
                   "plan": config.plan.as_tuple(),
                   "grouping_source": config.grouping_source}, f, indent=2)
    for task, value in sorted(history.final_metrics().items()):
        print(f"{task}: {datasets[task].spec.metric} = {value:.4f}")
    print(f"artifacts in {out}")
    return 0


def _load_checkpoint_and_tokenizer(directory):
    model = load_checkpoint(directory)
    tokenizer = Tokenizer.load(Path(directory) / "vocab.txt",
                               max_len=model.config.max_len)
    if len(tokenizer) != model.vocab_size:
        raise ValueError("checkpoint vocabulary does not match model")
    return model, tokenizer


def cmd_eval(args) -> int:
    model, tokenizer = _load_checkpoint_and_tokenizer(args.checkpoint)
    seed = args.seed
    experiment = Path(args.checkpoint).parent / "experiment.json"
    if seed is None and experiment.exists():
        with open(experiment, encoding="utf-8") as f:
            seed = int(json.load(f)["seed"])
    seed = 0 if seed is None else seed
    datasets = load_manifest(args.tasks, seed=derive_seed(seed, "data"))
    rows = []
    for task, dataset in datasets.items():
        if task not in model.task_specs:
            raise ValueError(f"checkpoint does not route task {task!r}")
        value = evaluate(model, tokenizer, dataset, split=args.split)
        rows.append((task, dataset.spec.metric, value))
        print(f"{task}: {dataset.spec.metric} = {value:.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write("task,metric,value\n")
            for task, metric, value in rows:
                f.write(f"{task},{metric},{value!r}\n")
    return 0


def cmd_attention_sim(args) -> int:
    model_a, tokenizer = _load_checkpoint_and_tokenizer(args.checkpoint_a)
    model_b, tokenizer_b = _load_checkpoint_and_tokenizer(args.checkpoint_b)
    if tokenizer.vocab != tokenizer_b.vocab:
        raise ValueError("checkpoints were trained with different vocabularies")
    datasets = load_manifest(args.tasks, seed=derive_seed(args.seed, "data"))
    if args.task not in datasets:
        raise ValueError(f"task {args.task!r} not in manifest")
    probe = probe_examples(datasets[args.task], size=args.probe, seed=args.seed)
    report = attention_similarity(model_a, model_b, tokenizer, args.task, probe)
    report.save_csv(args.out)
    print(f"wrote {report.values.shape[0]}x{report.values.shape[1]} "
          f"similarity table to {args.out}")
    return 0


def _parse_plan(text: str) -> LayerPlan:
    parts = text.split("-")
    if len(parts) != 3:
        raise ValueError(f"plan must look like '8-2-2', got {text!r}")
    return LayerPlan(*(int(p) for p in parts))


def cmd_sweep(args) -> int:
    datasets = load_manifest(args.tasks, seed=derive_seed(args.seed, "data"))
    encoder = _encoder_of(args)
    train_template = _train_of(args, seed=0)
    if args.mode == "shared-layers":
        result = shared_layer_sweep(datasets, encoder, train_template,
                                    total_depth=args.depth, seeds=args.seeds,
                                    seed=args.seed, jobs=args.jobs)
    else:
        plans = [_parse_plan(p) for p in args.plans.split(",")]
        groupings = {}
        for entry in args.grouping or ["manual"]:
            if entry == "manual":
                groupings["manual"] = manual_grouping(
                    {t: d.spec.category for t, d in datasets.items()})
            else:
                name, _, path = entry.partition("=")
                if not path:
                    raise ValueError(
                        f"grouping {entry!r} must be 'manual' or 'name=path.json'")
                groupings[name] = load_grouping_file(path)
        result = layer_combination_sweep(datasets, plans, groupings, encoder,
                                         train_template, seeds=args.seeds,
                                         seed=args.seed, jobs=args.jobs)
        for (plan, grouping), value in sorted(result.average_scores().items()):
            print(f"{plan} / {grouping}: average = {value:.4f}")
    result.save_csv(args.out)
    print(f"wrote {len(result.rows)} sweep rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hiershare",
        description="Hierarchical parameter-sharing multi-task learning lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("relevance", help="compute a task-relevance matrix")
    p.add_argument("--kind", choices=("data_property", "model_based"),
                   required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--depth", type=int, default=4)
    _add_encoder_args(p, dim=32, heads=4, max_len=32)
    _add_train_args(p, epochs=2, batch_size=16, lr=1e-3)
    p.set_defaults(run=cmd_relevance)

    p = sub.add_parser("cluster", help="k-means grouping from a matrix CSV")
    p.add_argument("--matrix", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--restarts", type=int, default=50)
    p.add_argument("--kind", choices=("data_property", "model_based"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(run=cmd_cluster)

    p = sub.add_parser("train", help="train a hierarchy from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--split", choices=("dev", "train"), default="dev")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("attention-sim",
                       help="cosine similarity of two checkpoints' attention")
    p.add_argument("--checkpoint-a", required=True)
    p.add_argument("--checkpoint-b", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--probe", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=cmd_attention_sim)

    p = sub.add_parser("sweep", help="layer-sharing sweeps")
    p.add_argument("--mode", choices=("shared-layers", "combinations"),
                   required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plans", default="12-0-0,8-2-2,6-3-3,4-4-4")
    p.add_argument("--grouping", action="append",
                   help="'manual' or 'name=grouping.json' (repeatable)")
    p.add_argument("--depth", type=int, default=12)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    _add_encoder_args(p)
    _add_train_args(p)
    p.set_defaults(run=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.run(args)
    except Exception as exc:  # single-line machine-parsable failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
