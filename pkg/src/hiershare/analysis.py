"""Attention-map similarity between models and layer-sharing sweeps.

The similarity study flattens each post-softmax attention map per example,
takes the cosine between the two models' maps, and averages over a probe
batch (per-example-then-average; the choice is recorded in the CSV
header). Sweeps train one model per grid cell with a seed derived from
the cell coordinates, so any cell can be reproduced bit-for-bit.
"""

from __future__ import annotations

import csv
import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig
from .model import Grouping, HierarchicalModel, LayerPlan
from .pipeline import run_training
from .seeding import derive_seed
from .tasks import TaskDataset
from .text import Tokenizer
from .training import TrainConfig

FLATTENING = "per-example-then-average"


@dataclass
class AttentionSimilarityReport:
    """Cosine similarity per (layer, head) between two models' attention."""

    task_id: str
    values: np.ndarray  # (layers, heads)
    probe_size: int
    flattening: str = FLATTENING

    def save_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write(f"# task={self.task_id} probe={self.probe_size} "
                    f"flattening={self.flattening}\n")
            writer = csv.writer(f)
            writer.writerow(["layer", "head", "cosine"])
            for layer in range(self.values.shape[0]):
                for head in range(self.values.shape[1]):
                    writer.writerow([layer, head, repr(float(self.values[layer, head]))])


def probe_examples(dataset: TaskDataset, size: int = 32, seed: int = 0):
    """A fixed, seeded probe batch drawn from the dev split."""
    examples = dataset.dev
    if not examples:
        raise ValueError(f"{dataset.spec.task_id}: empty dev split")
    rng = np.random.default_rng(derive_seed(seed, "probe", dataset.spec.task_id))
    picked = rng.choice(len(examples), size=min(size, len(examples)), replace=False)
    return [examples[i] for i in picked]


def attention_similarity(model_a: HierarchicalModel, model_b: HierarchicalModel,
                         tokenizer: Tokenizer, task_id: str,
                         examples) -> AttentionSimilarityReport:
    """Compare the two models' attention maps on the task's routed path."""
    spec = model_a.task_specs[task_id]
    ids, mask = tokenizer.encode_batch(examples, spec.mode)
    _, maps_a = model_a.forward(task_id, ids, mask, capture_attention=True)
    _, maps_b = model_b.forward(task_id, ids, mask, capture_attention=True)
    if len(maps_a) != len(maps_b):
        raise ValueError(
            f"path depths differ: {len(maps_a)} vs {len(maps_b)} layers")
    if maps_a and maps_a[0].shape[1] != maps_b[0].shape[1]:
        raise ValueError("models have different head counts")
    layers = len(maps_a)
    heads = maps_a[0].shape[1] if layers else 0
    values = np.zeros((layers, heads))
    for layer in range(layers):
        a, b = maps_a[layer], maps_b[layer]  # (B, h, L, L)
        flat_a = a.reshape(a.shape[0], heads, -1)
        flat_b = b.reshape(b.shape[0], heads, -1)
        dots = (flat_a * flat_b).sum(axis=-1)
        norms = (np.linalg.norm(flat_a, axis=-1) * np.linalg.norm(flat_b, axis=-1))
        values[layer] = (dots / norms).mean(axis=0)
    return AttentionSimilarityReport(task_id=task_id, values=values,
                                     probe_size=len(examples))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    rows: list[dict] = field(default_factory=list)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["plan", "grouping", "task", "metric", "value", "seed"])
            for row in self.rows:
                writer.writerow([row["plan"], row["grouping"], row["task"],
                                 row["metric"], repr(row["value"]), row["seed"]])

    def mean_value(self, task_id: str, plan: str | None = None,
                   grouping: str | None = None) -> float:
        picked = [r["value"] for r in self.rows
                  if r["task"] == task_id
                  and (plan is None or r["plan"] == plan)
                  and (grouping is None or r["grouping"] == grouping)]
        if not picked:
            raise KeyError(f"no sweep rows for task {task_id!r}")
        return float(np.mean(picked))

    def average_scores(self) -> dict[tuple[str, str], float]:
        """Mean metric over tasks and seeds per (plan, grouping) cell."""
        cells: dict[tuple[str, str], list[float]] = {}
        for row in self.rows:
            cells.setdefault((row["plan"], row["grouping"]), []).append(row["value"])
        return {cell: float(np.mean(vals)) for cell, vals in cells.items()}


def plan_label(plan: LayerPlan) -> str:
    return f"{plan.shared}-{plan.clustered}-{plan.specific}"


def _sweep_cell(args) -> list[dict]:
    """Train one (plan, grouping, seed) cell; one result row per task."""
    datasets, plan, grouping, grouping_name, encoder, train_template, cell_seed = args
    config = dataclasses.replace(train_template,
                                 seed=derive_seed(cell_seed, "train"))
    _, _, history = run_training(datasets, plan, grouping, encoder, config,
                                 init_seed=derive_seed(cell_seed, "init"))
    rows = []
    for task_id, value in history.final_metrics().items():
        rows.append({
            "plan": plan_label(plan), "grouping": grouping_name,
            "task": task_id, "metric": datasets[task_id].spec.metric,
            "value": value, "seed": cell_seed,
        })
    return rows


def _run_cells(cells, jobs: int) -> SweepResult:
    result = SweepResult()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rows in pool.map(_sweep_cell, cells):
                result.rows.extend(rows)
    else:
        for cell in cells:
            result.rows.extend(_sweep_cell(cell))
    return result


def shared_layer_sweep(datasets: dict[str, TaskDataset],
                       encoder: EncoderConfig, train_template: TrainConfig,
                       total_depth: int = 12, seeds: int = 3,
                       seed: int = 0, jobs: int = 1) -> SweepResult:
    """Train {x, 0, depth-x} two-cluster models for every shared count x.

    Expects exactly two tasks (one large, one small); each task keeps its
    own upper tower while the bottom x layers are shared.
    """
    if len(datasets) != 2:
        raise ValueError("shared_layer_sweep expects exactly two tasks")
    ids = sorted(datasets)
    grouping = Grouping(cluster_of={ids[0]: 0, ids[1]: 1}, k=2)
    cells = []
    for x in range(total_depth + 1):
        plan = LayerPlan(x, 0, total_depth - x)
        for i in range(seeds):
            cells.append((datasets, plan, grouping, "two-cluster", encoder,
                          train_template, derive_seed(seed, "shared-sweep", x, i)))
    return _run_cells(cells, jobs)


def layer_combination_sweep(datasets: dict[str, TaskDataset],
                            plans: list[LayerPlan],
                            groupings: dict[str, Grouping],
                            encoder: EncoderConfig,
                            train_template: TrainConfig,
                            seeds: int = 1, seed: int = 0,
                            jobs: int = 1) -> SweepResult:
    """Grid over plans x groupings; rows carry per-task metrics per seed."""
    depths = {p.depth for p in plans}
    if len(depths) != 1:
        raise ValueError(f"plans must share one total depth, got {sorted(depths)}")
    cells = []
    for plan in plans:
        for name, grouping in groupings.items():
            for i in range(seeds):
                cells.append((datasets, plan, grouping, name, encoder,
                              train_template,
                              derive_seed(seed, "combo", plan_label(plan), name, i)))
    return _run_cells(cells, jobs)
