"""Task specs, dataset loading, synthetic task generation, and metrics.

Synthetic tasks plant key tokens whose identity determines the label, so
Bayes accuracy is 1 by construction. A pair of tasks can be `aligned`
(same key tokens, same label map), `conflicting` (same key tokens,
inverted label map), or `independent` (disjoint vocabulary slices).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import derive_seed
from .text import INPUT_MODES, split_text

METRICS = ("accuracy", "f1", "pearson", "spearman", "f1_a", "exact_match")
RELATIONS = ("independent", "aligned", "conflicting")

CLASSIFICATION_METRICS = {"accuracy", "f1", "f1_a", "exact_match"}
REGRESSION_METRICS = {"pearson", "spearman"}


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    category: str
    mode: str = "single"
    num_labels: int | None = 2  # None for regression
    metric: str = "accuracy"

    def __post_init__(self):
        if self.mode not in INPUT_MODES:
            raise ValueError(f"{self.task_id}: unknown input mode {self.mode!r}")
        if self.metric not in METRICS:
            raise ValueError(f"{self.task_id}: unknown metric {self.metric!r}")
        if self.is_regression and self.metric not in REGRESSION_METRICS:
            raise ValueError(
                f"{self.task_id}: metric {self.metric!r} incompatible with regression"
            )
        if not self.is_regression:
            if self.num_labels < 2:
                raise ValueError(f"{self.task_id}: need at least 2 labels")
            if self.metric not in CLASSIFICATION_METRICS:
                raise ValueError(
                    f"{self.task_id}: metric {self.metric!r} incompatible with "
                    "classification"
                )

    @property
    def is_regression(self) -> bool:
        return self.num_labels is None


@dataclass(frozen=True)
class Example:
    text_a: str
    text_b: str | None = None
    text_c: str | None = None
    label: float | int = 0


@dataclass
class TaskDataset:
    spec: TaskSpec
    train: list[Example]
    dev: list[Example]

    def vocabulary(self) -> set[str]:
        """Token set of the training split, under the shared tokenization."""
        tokens: set[str] = set()
        for ex in self.train:
            for part in (ex.text_a, ex.text_b, ex.text_c):
                if part:
                    tokens.update(split_text(part))
        return tokens

    def training_texts(self) -> list[str]:
        out = []
        for ex in self.train:
            for part in (ex.text_a, ex.text_b, ex.text_c):
                if part:
                    out.append(part)
        return out


# ---------------------------------------------------------------------------
# JSONL loading
# ---------------------------------------------------------------------------


def _validate_example(record: dict, spec: TaskSpec, lineno: int, path) -> Example:
    where = f"{path}:{lineno}"
    text_a = record.get("text_a")
    if not isinstance(text_a, str) or not text_a.strip():
        raise ValueError(f"{where}: text_a missing or empty")
    text_b = record.get("text_b")
    text_c = record.get("text_c")
    if spec.mode in ("pair", "qa-triple") and not text_b:
        raise ValueError(f"{where}: mode {spec.mode!r} requires text_b")
    if spec.mode == "qa-triple" and not text_c:
        raise ValueError(f"{where}: mode 'qa-triple' requires text_c")
    label = record.get("label")
    if spec.is_regression:
        if not isinstance(label, (int, float)) or isinstance(label, bool):
            raise ValueError(f"{where}: regression label must be numeric, got {label!r}")
        label = float(label)
    else:
        if not isinstance(label, int) or isinstance(label, bool):
            raise ValueError(f"{where}: class label must be an integer, got {label!r}")
        if not 0 <= label < spec.num_labels:
            raise ValueError(
                f"{where}: label {label} outside [0, {spec.num_labels})"
            )
    return Example(text_a=text_a, text_b=text_b, text_c=text_c, label=label)


def load_jsonl(path, spec: TaskSpec) -> list[Example]:
    """Load one split; malformed records raise with their line number."""
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            examples.append(_validate_example(record, spec, lineno, path))
    return examples


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------


RULES = ("single-key", "xor-pair")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task_id: str
    category: str
    vocab_tag: str
    relation: str = "independent"
    num_labels: int = 2
    seq_len: int = 10
    n_patterns: int = 8
    n_fillers: int = 24
    pattern_seed: int = 0
    metric: str = "accuracy"
    rule: str = "single-key"  # xor-pair: label = xor of two planted keys' bits
    filler_tag: str | None = None  # share filler slices without sharing patterns
    extra_fillers: tuple[str, ...] = ()  # label-irrelevant tokens mixed in
    key_copies: int = 1  # plantings of the key token per sequence

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise ValueError(f"unknown relation {self.relation!r}")
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}")
        if self.rule == "xor-pair":
            if self.num_labels != 2:
                raise ValueError("xor-pair tasks are binary")
            if self.seq_len < 3:
                raise ValueError("xor-pair needs room for two keys")
        elif self.n_patterns % self.num_labels != 0:
            raise ValueError("n_patterns must be a multiple of num_labels")
        if set(self.extra_fillers) & set(self.key_tokens()):
            raise ValueError("extra fillers must not collide with key tokens")
        planted = self.key_copies * (2 if self.rule == "xor-pair" else 1)
        if not 1 <= self.key_copies or planted >= self.seq_len:
            raise ValueError("key plantings must leave room for fillers")

    def task_spec(self) -> TaskSpec:
        return TaskSpec(task_id=self.task_id, category=self.category, mode="single",
                        num_labels=self.num_labels, metric=self.metric)

    def key_tokens(self) -> list[str]:
        """All key tokens; for xor-pair, family a then family b."""
        if self.rule == "xor-pair":
            return ([f"key-{self.vocab_tag}-a{i}" for i in range(self.n_patterns)]
                    + [f"key-{self.vocab_tag}-b{i}" for i in range(self.n_patterns)])
        return [f"key-{self.vocab_tag}-{i}" for i in range(self.n_patterns)]

    def filler_tokens(self) -> list[str]:
        tag = self.filler_tag or self.vocab_tag
        return [f"w-{tag}-{i}" for i in range(self.n_fillers)]

    def _polarities(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(derive_seed(self.pattern_seed, "xorbits",
                                                self.vocab_tag))
        bits = rng.integers(0, 2, size=2 * self.n_patterns)
        return bits[: self.n_patterns], bits[self.n_patterns :]

    def pattern_table(self) -> list[tuple]:
        """The finite pattern set the label map is defined over."""
        if self.rule == "xor-pair":
            return [(i, j) for i in range(self.n_patterns)
                    for j in range(self.n_patterns)]
        return [(i,) for i in range(self.n_patterns)]

    def label_map(self) -> list[int]:
        """Class per pattern-table entry. Conflicting specs invert the base map."""
        if self.rule == "xor-pair":
            bits_a, bits_b = self._polarities()
            base = np.array([int(bits_a[i] ^ bits_b[j])
                             for i, j in self.pattern_table()])
        else:
            rng = np.random.default_rng(derive_seed(self.pattern_seed, "labels",
                                                    self.vocab_tag))
            base = np.repeat(np.arange(self.num_labels),
                             self.n_patterns // self.num_labels)
            rng.shuffle(base)
        if self.relation == "conflicting":
            base = (base + 1) % self.num_labels
        return [int(c) for c in base]


def _twin(spec: SyntheticTaskSpec, task_id: str, relation: str) -> SyntheticTaskSpec:
    return dataclasses.replace(spec, task_id=task_id, relation=relation)


def aligned_twin(spec: SyntheticTaskSpec, task_id: str) -> SyntheticTaskSpec:
    """A task with the same patterns and label map as `spec`."""
    return _twin(spec, task_id, "aligned")


def conflicting_twin(spec: SyntheticTaskSpec, task_id: str) -> SyntheticTaskSpec:
    """A task with the same patterns as `spec` but an inverted label map."""
    return _twin(spec, task_id, "conflicting")


def _gen_split(spec: SyntheticTaskSpec, n: int, rng: np.random.Generator):
    keys = spec.key_tokens()
    fillers = spec.filler_tokens() + list(spec.extra_fillers)
    table = spec.pattern_table()
    label_map = spec.label_map()
    examples = []
    for _ in range(n):
        index = int(rng.integers(len(table)))
        if spec.rule == "xor-pair":
            i, j = table[index]
            planted = [keys[i], keys[spec.n_patterns + j]] * spec.key_copies
        else:
            planted = [keys[table[index][0]]] * spec.key_copies
        tokens = [fillers[i] for i in rng.integers(len(fillers),
                                                   size=spec.seq_len - len(planted))]
        slots = rng.choice(spec.seq_len, size=len(planted), replace=False)
        for slot, key in zip(sorted(int(s) for s in slots), planted):
            tokens.insert(slot, key)
        examples.append(Example(text_a=" ".join(tokens), label=label_map[index]))
    return examples


def gen_synthetic(spec: SyntheticTaskSpec, n_train: int, n_dev: int,
                  seed: int) -> TaskDataset:
    """Generate a labeled dataset; identical seeds give identical data."""
    if n_train < 1 or n_dev < 1:
        raise ValueError("n_train and n_dev must be at least 1")
    train = _gen_split(spec, n_train,
                       np.random.default_rng(derive_seed(seed, spec.task_id, "train")))
    dev = _gen_split(spec, n_dev,
                     np.random.default_rng(derive_seed(seed, spec.task_id, "dev")))
    return TaskDataset(spec=spec.task_spec(), train=train, dev=dev)


def default_suite() -> list[SyntheticTaskSpec]:
    """Six named tasks: an aligned pair, a conflicting pair, two independents."""
    pol = SyntheticTaskSpec(task_id="pol_a", category="polarity", vocab_tag="pol",
                            relation="aligned", pattern_seed=11)
    flip = SyntheticTaskSpec(task_id="flip_a", category="keying", vocab_tag="flip",
                             relation="aligned", pattern_seed=23)
    return [
        pol,
        aligned_twin(pol, "pol_b"),
        flip,
        conflicting_twin(flip, "flip_b"),
        SyntheticTaskSpec(task_id="solo_a", category="triage", vocab_tag="soloa",
                          num_labels=3, n_patterns=9, pattern_seed=37),
        SyntheticTaskSpec(task_id="solo_b", category="spotting", vocab_tag="solob",
                          seq_len=8, pattern_seed=41),
    ]


def build_suite(seed: int, n_train: int = 256, n_dev: int = 128,
                specs=None) -> dict[str, TaskDataset]:
    specs = default_suite() if specs is None else specs
    return {s.task_id: gen_synthetic(s, n_train, n_dev, seed) for s in specs}


def suite_grouping() -> dict[str, int]:
    """Reference grouping of the default suite: aligned tasks together,
    conflicting tasks separated, independents pooled."""
    return {"pol_a": 0, "pol_b": 0, "flip_a": 1, "flip_b": 2,
            "solo_a": 3, "solo_b": 3}


def sweep_pair() -> tuple[SyntheticTaskSpec, SyntheticTaskSpec]:
    """One large broad task and one small interaction task for layer sweeps.

    The small task's label is an xor over two planted keys, so it needs a
    non-linear circuit of its own: with every layer shared it is reduced
    to a linear readout of the big task's features, and with no shared
    layers its private tower is too deep for its data.
    """
    big = SyntheticTaskSpec(task_id="big", category="breadth", vocab_tag="big",
                            n_patterns=16, pattern_seed=3)
    small = SyntheticTaskSpec(task_id="small", category="focus", vocab_tag="small",
                              rule="xor-pair", n_patterns=2, seq_len=10,
                              key_copies=2, pattern_seed=5, filler_tag="big")
    return big, small


def build_sweep_pair(seed: int, n_big: int = 1024, n_small: int = 192,
                     n_dev: int = 256) -> dict[str, TaskDataset]:
    big, small = sweep_pair()
    return {big.task_id: gen_synthetic(big, n_big, n_dev, seed),
            small.task_id: gen_synthetic(small, n_small, n_dev, seed)}


def attention_pair() -> tuple[SyntheticTaskSpec, SyntheticTaskSpec]:
    """Anchor + partner pair for the attention-map similarity study."""
    anchor = SyntheticTaskSpec(task_id="anchor", category="focus",
                               vocab_tag="anc", n_patterns=12, pattern_seed=3)
    partner = SyntheticTaskSpec(task_id="partner", category="breadth",
                                vocab_tag="par", rule="xor-pair", n_patterns=3,
                                pattern_seed=9)
    return anchor, partner


def build_attention_pair(seed: int, n_anchor: int = 512, n_partner: int = 1024,
                         n_dev: int = 128) -> dict[str, TaskDataset]:
    anchor, partner = attention_pair()
    return {anchor.task_id: gen_synthetic(anchor, n_anchor, n_dev, seed),
            partner.task_id: gen_synthetic(partner, n_partner, n_dev, seed)}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _check_lengths(predictions, golds):
    p = np.asarray(predictions, dtype=np.float64)
    g = np.asarray(golds, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 1 or p.size == 0:
        raise ValueError(
            f"predictions and golds must be equal-length non-empty vectors, "
            f"got {p.shape} and {g.shape}"
        )
    return p, g


def _accuracy(p, g):
    return float((p == g).mean())


def _binary_f1(p, g):
    tp = float(((p == 1) & (g == 1)).sum())
    fp = float(((p == 1) & (g == 0)).sum())
    fn = float(((p == 0) & (g == 1)).sum())
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def _pearson(p, g):
    pc = p - p.mean()
    gc = g - g.mean()
    denom = np.sqrt((pc * pc).sum() * (gc * gc).sum())
    if denom == 0:
        raise ValueError("correlation undefined for zero-variance input")
    return float((pc * gc).sum() / denom)


def _average_ranks(x):
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # ties share the mean rank
        i = j + 1
    return ranks


def _spearman(p, g):
    return _pearson(_average_ranks(p), _average_ranks(g))


def compute_metric(kind: str, predictions, golds) -> float:
    """Score predictions against golds.

    accuracy / exact_match: fraction equal. f1: binary F1 of the positive
    class. f1_a: binary F1 pooled over per-answer decisions (same formula,
    inputs are flattened answer candidates). pearson / spearman:
    correlation, error on zero variance.
    """
    p, g = _check_lengths(predictions, golds)
    if kind in ("accuracy", "exact_match"):
        return _accuracy(p, g)
    if kind in ("f1", "f1_a"):
        return _binary_f1(p, g)
    if kind == "pearson":
        return _pearson(p, g)
    if kind == "spearman":
        return _spearman(p, g)
    raise ValueError(f"unknown metric kind {kind!r}")


# ---------------------------------------------------------------------------
# manifest files
# ---------------------------------------------------------------------------


def load_manifest(path, seed: int = 0) -> dict[str, TaskDataset]:
    """Load a task manifest: a JSON list of task entries.

    Each entry names a TaskSpec plus either dataset paths
    {"train": ..., "dev": ...} (relative to the manifest) or a
    {"synthetic": {...}} block with SyntheticTaskSpec fields and sizes.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        entries = json.load(f)
    if not isinstance(entries, list) or not entries:
        raise ValueError(f"{path}: manifest must be a non-empty list")
    datasets: dict[str, TaskDataset] = {}
    for entry in entries:
        task_id = entry.get("id")
        if not task_id:
            raise ValueError(f"{path}: manifest entry without an id")
        if task_id in datasets:
            raise ValueError(f"{path}: duplicate task id {task_id!r}")
        if "synthetic" in entry:
            syn = dict(entry["synthetic"])
            n_train = syn.pop("n_train", 256)
            n_dev = syn.pop("n_dev", 128)
            if "extra_fillers" in syn:
                syn["extra_fillers"] = tuple(syn["extra_fillers"])
            spec = SyntheticTaskSpec(task_id=task_id,
                                     category=entry.get("category", "misc"), **syn)
            datasets[task_id] = gen_synthetic(spec, n_train, n_dev, seed)
        else:
            labels = entry.get("labels", 2)
            spec = TaskSpec(
                task_id=task_id,
                category=entry.get("category", "misc"),
                mode=entry.get("mode", "single"),
                num_labels=None if labels == "regression" else int(labels),
                metric=entry.get("metric", "accuracy"),
            )
            train = load_jsonl(path.parent / entry["train"], spec)
            dev = load_jsonl(path.parent / entry["dev"], spec)
            datasets[task_id] = TaskDataset(spec=spec, train=train, dev=dev)
    return datasets
