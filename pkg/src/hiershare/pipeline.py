"""End-to-end run helper shared by the CLI, sweeps, and relevance runs."""

from __future__ import annotations

from .encoder import EncoderConfig
from .model import Grouping, LayerPlan, build_model
from .tasks import TaskDataset
from .text import Tokenizer
from .training import RunHistory, TrainConfig, build_tokenizer, train


def run_training(datasets: dict[str, TaskDataset], plan: LayerPlan,
                 grouping: Grouping, encoder_config: EncoderConfig,
                 train_config: TrainConfig, init_seed: int,
                 evaluate_each_epoch: bool = True,
                 tokenizer: Tokenizer | None = None):
    """Build tokenizer + model, train, return (model, tokenizer, history)."""
    if tokenizer is None:
        tokenizer = build_tokenizer(datasets, max_len=encoder_config.max_len)
    specs = {t: d.spec for t, d in datasets.items()}
    model = build_model(plan, grouping, specs, encoder_config,
                        len(tokenizer), init_seed)
    history: RunHistory = train(model, datasets, tokenizer, train_config,
                                evaluate_each_epoch=evaluate_each_epoch)
    return model, tokenizer, history
