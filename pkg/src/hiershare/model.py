"""Three-tier parameter-sharing hierarchy over encoder layers.

A model owns one shared stack (bottom), one stack per task cluster
(middle), one stack per task (top), a per-task head, and a single
embedding table shared by every path. Each task activates exactly one
module per layer position, so its activated encoder depth always equals
shared + clustered + specific.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, load_tensor, save_tensor
from .encoder import (
    EncoderConfig,
    EncoderLayerParams,
    encoder_layer_forward,
    encoder_layer_param_count,
    truncated_normal,
)
from .seeding import derive_seed
from .tasks import TaskSpec


@dataclass(frozen=True)
class LayerPlan:
    """Layer counts per tier, bottom up: shared, clustered, task-specific."""

    shared: int
    clustered: int
    specific: int

    def __post_init__(self):
        if min(self.shared, self.clustered, self.specific) < 0:
            raise ValueError(f"layer counts must be non-negative, got {self}")

    @property
    def depth(self) -> int:
        return self.shared + self.clustered + self.specific

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.shared, self.clustered, self.specific)


DEFAULT_PLAN = LayerPlan(shared=8, clustered=2, specific=2)


@dataclass(frozen=True)
class Grouping:
    """Task -> cluster assignment with dense cluster indices in [0, k)."""

    cluster_of: dict[str, int]
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("grouping needs at least one cluster")
        used = set(self.cluster_of.values())
        if used != set(range(self.k)):
            raise ValueError(f"cluster indices {sorted(used)} not dense in [0, {self.k})")

    @property
    def task_ids(self) -> tuple[str, ...]:
        return tuple(self.cluster_of)

    def cluster(self, task_id: str) -> int:
        try:
            return self.cluster_of[task_id]
        except KeyError:
            raise KeyError(f"task {task_id!r} missing from grouping") from None

    def members(self, cluster: int) -> tuple[str, ...]:
        return tuple(t for t, c in self.cluster_of.items() if c == cluster)


def single_cluster_grouping(task_ids) -> Grouping:
    return Grouping(cluster_of={t: 0 for t in task_ids}, k=1)


class TaskHead:
    """Affine readout of the [CLS] state; one per task."""

    def __init__(self, dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = Tensor(truncated_normal(rng, (dim, out_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def named_tensors(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def param_count(self) -> int:
        return self.weight.data.size + self.bias.data.size


class HierarchicalModel:
    """Embeddings + shared / per-cluster / per-task encoder stacks + heads.

    With `share_heads` every group of tasks with an identical label space
    reads through one common head (the fully shared single channel used
    by the relevance co-training probes); by default each task owns its
    head.
    """

    def __init__(self, plan: LayerPlan, grouping: Grouping,
                 task_specs: dict[str, TaskSpec], config: EncoderConfig,
                 vocab_size: int, init_seed: int, share_heads: bool = False):
        missing = [t for t in task_specs if t not in grouping.cluster_of]
        if missing:
            raise ValueError(f"tasks missing from grouping: {missing}")
        self.plan = plan
        self.grouping = grouping
        self.task_specs = dict(task_specs)
        self.config = config
        self.vocab_size = vocab_size
        self.init_seed = init_seed
        self.share_heads = share_heads

        def layer(*labels) -> EncoderLayerParams:
            rng = np.random.default_rng(derive_seed(init_seed, *labels))
            return EncoderLayerParams(config, rng)

        emb_rng = np.random.default_rng(derive_seed(init_seed, "embeddings"))
        self.token_embedding = Tensor(
            truncated_normal(emb_rng, (vocab_size, config.dim)), requires_grad=True)
        self.position_embedding = Tensor(
            truncated_normal(emb_rng, (config.max_len, config.dim)), requires_grad=True)

        self.shared_stack = [layer("shared", i) for i in range(plan.shared)]
        self.cluster_stacks = [
            [layer("cluster", c, i) for i in range(plan.clustered)]
            for c in range(grouping.k)
        ]
        self.task_stacks = {
            t: [layer("task", t, i) for i in range(plan.specific)]
            for t in task_specs
        }
        self.heads = {}
        shared_heads: dict[tuple, TaskHead] = {}
        for t, spec in task_specs.items():
            out_dim = 1 if spec.is_regression else spec.num_labels
            if share_heads:
                key = (spec.is_regression, out_dim)
                if key not in shared_heads:
                    rng = np.random.default_rng(
                        derive_seed(init_seed, "shared-head", *key))
                    shared_heads[key] = TaskHead(config.dim, out_dim, rng)
                self.heads[t] = shared_heads[key]
            else:
                rng = np.random.default_rng(derive_seed(init_seed, "head", t))
                self.heads[t] = TaskHead(config.dim, out_dim, rng)

    # -- structure ---------------------------------------------------------

    def route(self, task_id: str) -> list[EncoderLayerParams]:
        """Ordered encoder layers on the task's activated path."""
        if task_id not in self.task_specs:
            raise KeyError(f"unknown task {task_id!r}")
        cluster = self.grouping.cluster(task_id)
        return (list(self.shared_stack)
                + list(self.cluster_stacks[cluster])
                + list(self.task_stacks[task_id]))

    def named_parameters(self):
        """All (name, tensor) pairs; names are checkpoint paths."""
        yield "embeddings/token", self.token_embedding
        yield "embeddings/position", self.position_embedding
        for i, layer in enumerate(self.shared_stack):
            for name, t in layer.named_tensors():
                yield f"shared/{i:02d}/{name}", t
        for c, stack in enumerate(self.cluster_stacks):
            for i, layer in enumerate(stack):
                for name, t in layer.named_tensors():
                    yield f"cluster-{c}/{i:02d}/{name}", t
        for task, stack in self.task_stacks.items():
            for i, layer in enumerate(stack):
                for name, t in layer.named_tensors():
                    yield f"task-{task}/{i:02d}/{name}", t
        for task, head in self.heads.items():
            for name, t in head.named_tensors():
                yield f"head-{task}/{name}", t

    def path_parameters(self, task_id: str) -> list[Tensor]:
        """Tensors updated by a step on `task_id`: embeddings, path, head."""
        tensors = [self.token_embedding, self.position_embedding]
        for layer in self.route(task_id):
            tensors.extend(layer.tensors())
        tensors.extend(t for _, t in self.heads[task_id].named_tensors())
        return tensors

    # -- forward -----------------------------------------------------------

    def forward(self, task_id: str, token_ids: np.ndarray, mask: np.ndarray,
                capture_attention: bool = False):
        """Run the routed path; returns logits (B, n_labels) or (B, 1).

        With `capture_attention`, returns (logits, maps) where maps is one
        (B, heads, L, L) array of post-softmax probabilities per layer.
        """
        token_ids = np.asarray(token_ids)
        if token_ids.ndim != 2:
            raise ValueError(f"token_ids must be (B, L), got {token_ids.shape}")
        if token_ids.shape[1] > self.config.max_len:
            raise ValueError(
                f"sequence length {token_ids.shape[1]} exceeds "
                f"max_len {self.config.max_len}"
            )
        positions = np.broadcast_to(np.arange(token_ids.shape[1]), token_ids.shape)
        hidden = ad.add(ad.embedding(self.token_embedding, token_ids),
                        ad.embedding(self.position_embedding, positions))
        maps = []
        for layer in self.route(task_id):
            hidden, probs = encoder_layer_forward(hidden, mask, layer)
            if capture_attention:
                maps.append(probs.data)
        head = self.heads[task_id]
        logits = ad.add(ad.matmul(ad.take_position(hidden, 0), head.weight), head.bias)
        if capture_attention:
            return logits, maps
        return logits

    # -- accounting ---------------------------------------------------------

    def count_params(self) -> dict:
        """Activated-per-task vs overall parameter accounting."""
        per_layer = encoder_layer_param_count(self.config.dim)
        embedding = self.token_embedding.data.size + self.position_embedding.data.size
        encoder_activated = self.plan.depth * per_layer
        heads = {t: h.param_count() for t, h in self.heads.items()}
        n_layers_total = (len(self.shared_stack)
                          + sum(len(s) for s in self.cluster_stacks)
                          + sum(len(s) for s in self.task_stacks.values()))
        unique_heads = {id(h): h.param_count() for h in self.heads.values()}
        overall = (embedding
                   + n_layers_total * per_layer
                   + sum(unique_heads.values()))
        return {
            "per_layer": per_layer,
            "embedding": embedding,
            "encoder_activated": encoder_activated,
            "activated_per_task": {
                t: embedding + encoder_activated + heads[t] for t in heads
            },
            "heads": heads,
            "encoder_layers_total": n_layers_total,
            "overall": overall,
        }


def build_model(plan: LayerPlan, grouping: Grouping,
                task_specs: dict[str, TaskSpec], config: EncoderConfig,
                vocab_size: int, init_seed: int,
                share_heads: bool = False) -> HierarchicalModel:
    """Build a seeded model; identical arguments give identical weights."""
    return HierarchicalModel(plan, grouping, task_specs, config, vocab_size,
                             init_seed, share_heads=share_heads)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: HierarchicalModel, directory) -> None:
    """Write manifest + one tensor file per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "plan": model.plan.as_tuple(),
        "grouping": {"cluster_of": model.grouping.cluster_of,
                     "k": model.grouping.k},
        "tasks": {
            t: {"category": s.category, "mode": s.mode,
                "labels": "regression" if s.is_regression else s.num_labels,
                "metric": s.metric}
            for t, s in model.task_specs.items()
        },
        "encoder": {"dim": model.config.dim, "heads": model.config.heads,
                    "max_len": model.config.max_len},
        "vocab_size": model.vocab_size,
        "init_seed": model.init_seed,
        "share_heads": model.share_heads,
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    for name, tensor in model.named_parameters():
        path = directory / "tensors" / f"{name}.bin"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_tensor(path, tensor)


def load_checkpoint(directory) -> HierarchicalModel:
    directory = Path(directory)
    with open(directory / "manifest.json", encoding="utf-8") as f:
        manifest = json.load(f)
    task_specs = {
        t: TaskSpec(task_id=t, category=entry["category"], mode=entry["mode"],
                    num_labels=None if entry["labels"] == "regression"
                    else int(entry["labels"]),
                    metric=entry["metric"])
        for t, entry in manifest["tasks"].items()
    }
    model = HierarchicalModel(
        plan=LayerPlan(*manifest["plan"]),
        grouping=Grouping(cluster_of=dict(manifest["grouping"]["cluster_of"]),
                          k=manifest["grouping"]["k"]),
        task_specs=task_specs,
        config=EncoderConfig(**manifest["encoder"]),
        vocab_size=manifest["vocab_size"],
        init_seed=manifest["init_seed"],
        share_heads=manifest.get("share_heads", False),
    )
    for name, tensor in model.named_parameters():
        stored = load_tensor(directory / "tensors" / f"{name}.bin")
        if stored.shape != tensor.data.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {stored.shape}, "
                             f"expected {tensor.data.shape}")
        tensor.data = stored
    return model
