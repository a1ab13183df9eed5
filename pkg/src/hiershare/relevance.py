"""Task-relevance measures and the clustering that turns them into groups.

Three measures: vocabulary co-occurrence between task token sets
(data property), manually assigned categories, and the relative
performance change from co-training a pair versus training each task
alone (model based). The two score-based measures produce an asymmetric
n x n matrix whose rows feed k-means.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig
from .model import Grouping, LayerPlan, build_model, single_cluster_grouping
from .seeding import derive_seed
from .tasks import TaskDataset
from .training import TrainConfig, build_tokenizer, evaluate, train

MATRIX_KINDS = ("data_property", "model_based", "manual")


@dataclass(frozen=True)
class TaskVocabulary:
    """Token set of one task's training split (shared tokenization)."""

    task_id: str
    tokens: frozenset[str]

    @classmethod
    def of(cls, dataset: TaskDataset) -> "TaskVocabulary":
        return cls(task_id=dataset.spec.task_id,
                   tokens=frozenset(dataset.vocabulary()))


def vocab_cooccurrence(source: TaskVocabulary,
                       target: TaskVocabulary) -> tuple[float, float]:
    """Shared-vocabulary ratios (r_source, r_target).

    r_source = |Vs & Vt| / |Vs| and r_target = |Vs & Vt| / |Vt|: the
    fraction of each side's vocabulary that the pair has in common.
    """
    if not source.tokens or not target.tokens:
        empty = source.task_id if not source.tokens else target.task_id
        raise ValueError(f"task {empty!r} has an empty vocabulary")
    shared = len(source.tokens & target.tokens)
    return shared / len(source.tokens), shared / len(target.tokens)


@dataclass(frozen=True)
class PerformanceQuad:
    """Dev scores of a pair: trained alone (f_s, f_t) and jointly (f_js, f_jt)."""

    f_s: float
    f_t: float
    f_js: float
    f_jt: float
    source: str = "source"
    target: str = "target"

    def __post_init__(self):
        for name in ("f_s", "f_t", "f_js", "f_jt"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


def model_based_relevance(quad: PerformanceQuad) -> tuple[float, float]:
    """Relative performance change of each side under co-training.

    r_source = (f_js - f_s) / f_s, r_target = (f_jt - f_t) / f_t.
    """
    if quad.f_s <= 0:
        raise ZeroDivisionError(
            f"baseline score of task {quad.source!r} is not positive")
    if quad.f_t <= 0:
        raise ZeroDivisionError(
            f"baseline score of task {quad.target!r} is not positive")
    return (quad.f_js - quad.f_s) / quad.f_s, (quad.f_jt - quad.f_t) / quad.f_t


# ---------------------------------------------------------------------------
# relevance matrices
# ---------------------------------------------------------------------------


@dataclass
class RelevanceMatrix:
    """Asymmetric scores; entry (s, t) is the relevance of target t for source s."""

    kind: str
    tasks: tuple[str, ...]
    scores: np.ndarray

    def __post_init__(self):
        if self.kind not in MATRIX_KINDS:
            raise ValueError(f"unknown relevance kind {self.kind!r}")
        self.tasks = tuple(self.tasks)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        n = len(self.tasks)
        if self.scores.shape != (n, n):
            raise ValueError(f"scores must be {n}x{n}, got {self.scores.shape}")
        diag = np.diag(self.scores)
        if self.kind == "data_property":
            if not ((self.scores >= 0) & (self.scores <= 1)).all():
                raise ValueError("data-property scores must lie in [0, 1]")
            if not np.allclose(diag, 1.0, atol=1e-12):
                raise ValueError("data-property diagonal must be 1")
        if self.kind == "model_based" and not (diag == 0).all():
            raise ValueError("model-based diagonal must be 0")

    def entry(self, source: str, target: str) -> float:
        return float(self.scores[self.tasks.index(source),
                                 self.tasks.index(target)])

    def save_csv(self, path) -> None:
        """Header of task ids, one row per source task, scores as decimals."""
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["task", *self.tasks])
            for task, row in zip(self.tasks, self.scores):
                writer.writerow([task, *(repr(float(v)) for v in row)])

    @classmethod
    def load_csv(cls, path, kind: str) -> "RelevanceMatrix":
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        if not rows or rows[0][0] != "task":
            raise ValueError(f"{path}: expected a 'task' header column")
        tasks = tuple(rows[0][1:])
        scores = np.zeros((len(tasks), len(tasks)))
        if len(rows) - 1 != len(tasks):
            raise ValueError(f"{path}: expected {len(tasks)} rows")
        for i, row in enumerate(rows[1:]):
            if row[0] != tasks[i]:
                raise ValueError(f"{path}: row {row[0]!r} out of order")
            scores[i] = [float(v) for v in row[1:]]
        return cls(kind=kind, tasks=tasks, scores=scores)


def fixture_path(kind: str) -> Path:
    """Path of a bundled relevance table (paper-derived transcription)."""
    name = {"data_property": "data_property.csv",
            "model_based": "model_based.csv"}[kind]
    return Path(resources.files("hiershare") / "fixtures" / name)


def load_fixture_matrix(kind: str) -> RelevanceMatrix:
    return RelevanceMatrix.load_csv(fixture_path(kind), kind=kind)


def data_property_matrix(datasets: dict[str, TaskDataset]) -> RelevanceMatrix:
    """Vocabulary co-occurrence matrix over all tasks; diagonal 1."""
    vocabs = [TaskVocabulary.of(datasets[t]) for t in datasets]
    n = len(vocabs)
    scores = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            r_s, r_t = vocab_cooccurrence(vocabs[i], vocabs[j])
            scores[i, j] = r_s
            scores[j, i] = r_t
    return RelevanceMatrix(kind="data_property",
                           tasks=tuple(v.task_id for v in vocabs),
                           scores=scores)


# ---------------------------------------------------------------------------
# model-based pairwise matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairwiseConfig:
    """How the single-task and co-training runs are set up.

    The default budget saturates a lone synthetic task, so relevance
    entries isolate the effect of adding the partner.
    """

    depth: int = 4
    encoder: EncoderConfig = EncoderConfig(dim=32, heads=4, max_len=32)
    train: TrainConfig = TrainConfig(max_epochs=4, batch_size=16, lr=2e-3)
    seed: int = 0
    jobs: int = 1


def _run_cell(args) -> tuple[tuple[str, ...], dict[str, float]]:
    """Train one shared single channel on `task_ids` and return dev scores.

    Co-training shares everything one channel can share: all encoder
    layers and, whenever the tasks' label spaces coincide, the decision
    layer as well, so the probe measures whether one shared model can
    serve both tasks.
    """
    task_ids, datasets, config = args
    subset = {t: datasets[t] for t in task_ids}
    tokenizer = build_tokenizer(datasets, max_len=config.encoder.max_len)
    plan = LayerPlan(config.depth, 0, 0)
    specs = {t: d.spec for t, d in subset.items()}
    run_seed = derive_seed(config.seed, "run", *task_ids)
    model = build_model(plan, single_cluster_grouping(task_ids), specs,
                        config.encoder, len(tokenizer),
                        derive_seed(config.seed, "init"), share_heads=True)
    train_config = dataclasses.replace(config.train, seed=run_seed)
    try:
        train(model, subset, tokenizer, train_config, evaluate_each_epoch=False)
    except RuntimeError as exc:
        raise RuntimeError(
            f"training run for tasks {task_ids} diverged: {exc}") from exc
    return task_ids, {
        t: evaluate(model, tokenizer, subset[t]) for t in task_ids
    }


def pairwise_relevance_matrix(datasets: dict[str, TaskDataset],
                              config: PairwiseConfig) -> RelevanceMatrix:
    """Eq.-style model-based matrix from n single runs + n(n-1)/2 co-runs.

    All runs share one tokenizer (union vocabulary) and one init seed, so
    scores differ only through which tasks trained together.
    """
    task_ids = tuple(datasets)
    if len(task_ids) < 2:
        raise ValueError("need at least two tasks")
    cells = [(t,) for t in task_ids]
    cells += [(task_ids[i], task_ids[j])
              for i in range(len(task_ids)) for j in range(i + 1, len(task_ids))]
    jobs = [(ids, datasets, config) for ids in cells]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = dict(pool.map(_run_cell, jobs))
    else:
        results = dict(map(_run_cell, jobs))

    single = {t: results[(t,)][t] for t in task_ids}
    n = len(task_ids)
    scores = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            s, t = task_ids[i], task_ids[j]
            joint = results[(s, t)]
            quad = PerformanceQuad(f_s=single[s], f_t=single[t],
                                   f_js=joint[s], f_jt=joint[t],
                                   source=s, target=t)
            r_s, r_t = model_based_relevance(quad)
            scores[i, j] = r_s
            scores[j, i] = r_t
    return RelevanceMatrix(kind="model_based", tasks=task_ids, scores=scores)


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------


def _lloyd(points: np.ndarray, k: int, rng: np.random.Generator,
           max_iters: int = 200):
    """One Lloyd run. Returns (assignment, inertia trace)."""
    n = len(points)
    centroids = points[rng.choice(n, size=k, replace=False)].copy()
    assignment = np.full(n, -1)
    trace = []
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
        new_assignment = d2.argmin(axis=1)  # ties resolve to the lowest index
        # reseed empty clusters at the point farthest from its own centroid
        for c in range(k):
            if not (new_assignment == c).any():
                own = d2[np.arange(n), new_assignment]
                farthest = int(own.argmax())
                centroids[c] = points[farthest]
                d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
                new_assignment = d2.argmin(axis=1)
        if (new_assignment == assignment).all():
            break
        assignment = new_assignment
        for c in range(k):
            centroids[c] = points[assignment == c].mean(axis=0)
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
        trace.append(float(d2[np.arange(n), assignment].sum()))
    return assignment, trace


def kmeans_cluster(matrix: RelevanceMatrix, k: int, seed: int = 0,
                   restarts: int = 50) -> Grouping:
    """Cluster tasks by their matrix rows; best of `restarts` Lloyd runs.

    Rows are used raw (scores are already commensurate ratios). Returns
    the partition with minimum within-cluster sum of squares; cluster
    indices are relabeled by first appearance over the task order.
    """
    n = len(matrix.tasks)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    points = matrix.scores
    best_assignment, best_inertia = None, np.inf
    for restart in range(restarts):
        rng = np.random.default_rng(derive_seed(seed, "restart", restart))
        assignment, trace = _lloyd(points, k, rng)
        inertia = trace[-1] if trace else 0.0
        if inertia < best_inertia:
            best_assignment, best_inertia = assignment, inertia

    relabel: dict[int, int] = {}
    cluster_of = {}
    for task, raw in zip(matrix.tasks, best_assignment):
        relabel.setdefault(int(raw), len(relabel))
        cluster_of[task] = relabel[int(raw)]
    return Grouping(cluster_of=cluster_of, k=k)


def manual_grouping(categories: dict[str, str]) -> Grouping:
    """One cluster per distinct category, indexed by first appearance."""
    index: dict[str, int] = {}
    cluster_of = {}
    for task, category in categories.items():
        if not category:
            raise ValueError(f"task {task!r} has no category label")
        index.setdefault(category, len(index))
        cluster_of[task] = index[category]
    return Grouping(cluster_of=cluster_of, k=len(index))
