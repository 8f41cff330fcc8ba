"""Shared fixtures.

The expensive piece is ``bias_runs``: fully trained models on the default
bias benchmark for three seeds.  It is session-scoped and lazy, so unit
test files that never request it pay nothing.
"""

import time
from dataclasses import dataclass, replace

import pytest

from talgate.cli import _CONFLICT_SALT
from talgate.model import ModelConfig, ModelState
from talgate.nn import Rng
from talgate.synthgen import (Corpus, GenConfig, generate_corpus,
                              generate_distractors, inject_conflict)
from talgate.train import TrainConfig, TrainLog, fit

BIAS_SEEDS = (0, 1, 2)


def bias_gen_config(seed: int, num_videos: int = 96) -> GenConfig:
    """The stock bias benchmark: classes 0-3 visually easy with unhelpful
    language, classes 4-7 visually ambiguous with informative language."""
    return GenConfig(
        num_classes=8, num_videos=num_videos, frames=256, dim=32,
        ambiguity=(0.1, 0.1, 0.1, 0.1, 0.8, 0.8, 0.8, 0.8),
        helpfulness=(0.2, 0.2, 0.2, 0.2, 0.9, 0.9, 0.9, 0.9),
        seed=seed,
    )


@dataclass(eq=False)
class BiasRun:
    seed: int
    train_corpus: Corpus
    eval_corpus: Corpus
    conflicted_eval: Corpus
    distractors: Corpus
    full: ModelState
    full_log: TrainLog
    vision: ModelState
    fixed_one: ModelState


def _build_run(seed: int) -> BiasRun:
    gen = bias_gen_config(seed)
    whole = generate_corpus(gen)
    # one corpus, split by prefix: train and eval share the latent
    # prototypes, which is what makes cross-split evaluation meaningful
    train_corpus = Corpus(gen, whole.videos[:64])
    eval_corpus = Corpus(gen, whole.videos[64:])
    conflicted = inject_conflict(eval_corpus, Rng((seed ^ _CONFLICT_SALT) % 2**64))
    distractors = generate_distractors(replace(gen, num_videos=32))

    base = ModelConfig(dim=gen.dim, num_classes=gen.num_classes)
    tc = TrainConfig(seed=seed)
    full, full_log = fit(train_corpus, replace(base, lambda_mode="learned"), tc)
    vision, _ = fit(train_corpus, replace(base, lambda_mode="fixed", fixed_lambda=0.0), tc)
    fixed_one, _ = fit(train_corpus, replace(base, lambda_mode="fixed", fixed_lambda=1.0), tc)
    return BiasRun(seed, train_corpus, eval_corpus, conflicted, distractors,
                   full, full_log, vision, fixed_one)


@pytest.fixture(scope="session")
def bias_runs():
    """(runs by seed, wall seconds spent building them)."""
    t0 = time.perf_counter()
    runs = {seed: _build_run(seed) for seed in BIAS_SEEDS}
    return runs, time.perf_counter() - t0
