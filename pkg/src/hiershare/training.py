"""Multi-task mini-batch training over the routed hierarchy.

The loop packs each dataset into homogeneous task-tagged mini-batches
once, then per epoch shuffles the merged batch list and, for every batch,
runs its task's path, backpropagates, and applies one AdamW step to the
parameters on that path only. The learning rate decays linearly to zero
over max_epochs * len(merged batches) steps.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .model import HierarchicalModel
from .seeding import derive_seed
from .tasks import Example, TaskDataset, compute_metric
from .text import Tokenizer


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 3
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, task_id: str):
        super().__init__(f"non-finite loss at step {step} on task {task_id!r}")
        self.step = step
        self.task_id = task_id


def pack_batches(examples: list[Example], batch_size: int,
                 seed: int) -> list[list[Example]]:
    """Seeded shuffle, then contiguous chunks; the last may be short."""
    if not examples:
        raise ValueError("cannot pack an empty dataset")
    order = np.random.default_rng(seed).permutation(len(examples))
    shuffled = [examples[i] for i in order]
    return [shuffled[i : i + batch_size]
            for i in range(0, len(shuffled), batch_size)]


def linear_decay(step: int, total_steps: int, lr0: float) -> float:
    """lr(step) = lr0 * (1 - step / total_steps)."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps)


class AdamW:
    """Decoupled weight decay; moment estimates and step counts per tensor.

    Update order for each parameter p with gradient g (pinned so that
    independent re-implementations can match it bitwise):

        t += 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        p *= 1 - lr * weight_decay
        p -= lr * (m / (1 - beta1^t)) / (sqrt(v / (1 - beta2^t)) + eps)
    """

    def __init__(self, weight_decay: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._state: dict[int, dict] = {}

    def _slot(self, tensor: Tensor) -> dict:
        slot = self._state.get(id(tensor))
        if slot is None:
            slot = {"m": np.zeros_like(tensor.data),
                    "v": np.zeros_like(tensor.data), "t": 0}
            self._state[id(tensor)] = slot
        return slot

    def step_count(self, tensor: Tensor) -> int:
        slot = self._state.get(id(tensor))
        return slot["t"] if slot else 0

    def step(self, params: list[Tensor], lr: float) -> None:
        if lr < 0:
            raise ValueError("lr must be non-negative")
        for p in params:
            g = p.grad
            if g is None:
                raise ValueError("parameter has no gradient buffer")
            if g.shape != p.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{p.data.shape}"
                )
            slot = self._slot(p)
            slot["t"] += 1
            t = slot["t"]
            m, v = slot["m"], slot["v"]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data *= 1.0 - lr * self.weight_decay
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class RunHistory:
    """Per-step loss trace and per-(epoch, task) dev metrics."""

    losses: list[dict] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    checkpoint: str | None = None
    optimizer: AdamW | None = None  # exposed for update-count assertions

    def metric_value(self, epoch: int, task_id: str) -> float:
        for record in self.metrics:
            if record["epoch"] == epoch and record["task"] == task_id:
                return record["value"]
        raise KeyError(f"no metric for epoch {epoch}, task {task_id!r}")

    def final_metrics(self) -> dict[str, float]:
        last = max((r["epoch"] for r in self.metrics), default=0)
        return {r["task"]: r["value"] for r in self.metrics if r["epoch"] == last}

    def export_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for record in self.metrics:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def export_loss_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "epoch", "task", "lr", "loss"])
            for row in self.losses:
                writer.writerow([row["step"], row["epoch"], row["task"],
                                 repr(row["lr"]), repr(row["loss"])])


def _encode_batch(tokenizer: Tokenizer, batch: list[Example], spec):
    ids, mask = tokenizer.encode_batch(batch, spec.mode)
    if spec.is_regression:
        labels = np.array([ex.label for ex in batch], dtype=np.float64)
    else:
        labels = np.array([ex.label for ex in batch], dtype=np.int64)
    return ids, mask, labels


def batch_loss(model: HierarchicalModel, task_id: str, ids, mask, labels):
    """Forward one homogeneous batch and return the task loss tensor."""
    logits = model.forward(task_id, ids, mask)
    if model.task_specs[task_id].is_regression:
        return ad.mean_squared_error(logits, labels)
    return ad.cross_entropy(logits, labels)


def evaluate(model: HierarchicalModel, tokenizer: Tokenizer,
             dataset: TaskDataset, split: str = "dev",
             batch_size: int = 32) -> float:
    """Dev-set metric of one task under the routed model."""
    examples = getattr(dataset, split)
    if not examples:
        raise ValueError(f"{dataset.spec.task_id}: empty {split} split")
    spec = dataset.spec
    preds = []
    for start in range(0, len(examples), batch_size):
        batch = examples[start : start + batch_size]
        ids, mask, _ = _encode_batch(tokenizer, batch, spec)
        logits = model.forward(spec.task_id, ids, mask)
        if spec.is_regression:
            preds.extend(logits.data.reshape(-1).tolist())
        else:
            preds.extend(np.argmax(logits.data, axis=1).tolist())
    golds = [ex.label for ex in examples]
    return compute_metric(spec.metric, preds, golds)


def train(model: HierarchicalModel, datasets: dict[str, TaskDataset],
          tokenizer: Tokenizer, config: TrainConfig,
          evaluate_each_epoch: bool = True) -> RunHistory:
    """Run the multi-task loop; mutates `model`, returns the history."""
    unknown = [t for t in datasets if t not in model.task_specs]
    if unknown:
        raise ValueError(f"model does not route tasks: {unknown}")

    merged = []
    for task_id in datasets:
        spec = datasets[task_id].spec
        batches = pack_batches(datasets[task_id].train, config.batch_size,
                               derive_seed(config.seed, "pack", task_id))
        for batch in batches:
            merged.append((task_id, _encode_batch(tokenizer, batch, spec)))

    optimizer = AdamW(weight_decay=config.weight_decay, beta1=config.beta1,
                      beta2=config.beta2, eps=config.eps)
    history = RunHistory()
    total_steps = config.max_epochs * len(merged)
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng(
            derive_seed(config.seed, "order", epoch)).permutation(len(merged))
        for index in order:
            task_id, (ids, mask, labels) = merged[index]
            lr_t = linear_decay(step, total_steps, config.lr)
            params = model.path_parameters(task_id)
            for p in params:
                p.zero_grad()
            with Graph() as graph:
                loss = batch_loss(model, task_id, ids, mask, labels)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(step, task_id)
                graph.backward(loss)
            optimizer.step(params, lr_t)
            history.losses.append({"step": step, "epoch": epoch,
                                   "task": task_id, "lr": lr_t, "loss": value})
            step += 1
        if evaluate_each_epoch:
            for task_id, dataset in datasets.items():
                history.metrics.append({
                    "epoch": epoch, "task": task_id,
                    "metric": dataset.spec.metric,
                    "value": evaluate(model, tokenizer, dataset),
                })
    history.optimizer = optimizer
    return history


def build_tokenizer(datasets: dict[str, TaskDataset],
                    max_len: int = 64) -> Tokenizer:
    """One vocabulary over the union of all training splits."""
    texts = []
    for dataset in datasets.values():
        texts.extend(dataset.training_texts())
    return Tokenizer.build(texts, max_len=max_len)
