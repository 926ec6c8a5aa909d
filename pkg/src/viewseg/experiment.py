"""Desk-scale single-vs-per-view comparison on phantom data."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

from .dataset import PhantomSpec, SplitFractions, SplitMode, generate_phantom, make_split
from .metrics import ComparisonReport, EvalResult, evaluate, comparison_report
from .model import LinkNetConfig
from .router import RouterMode, build_router
from .training import TrainConfig, train_per_view, train_single

SMALL_LINKNET = LinkNetConfig(encoder_filters=(16, 32, 64, 128), head_channels=16)
DESK_TRAIN = TrainConfig(learning_rate=3e-3, batch_size=8, max_epochs=40, patience=40)


@dataclass
class SeedOutcome:
    seed: int
    single: EvalResult
    per_view: EvalResult
    report: ComparisonReport
    seconds: float

    @property
    def margin(self) -> float:
        return self.per_view.mean_dice - self.single.mean_dice


@dataclass
class ExperimentResult:
    outcomes: list[SeedOutcome] = field(default_factory=list)

    def wins(self, margin: float = 0.02) -> int:
        return sum(o.margin >= margin for o in self.outcomes)


def run_seed(
    seed: int,
    n: int = 300,
    size: int = 64,
    train_frac: float = 0.6,
    model_config: LinkNetConfig = SMALL_LINKNET,
    train_config: TrainConfig = DESK_TRAIN,
    threshold: float = 0.5,
) -> SeedOutcome:
    """Train both pipelines on the same phantom data and the same test slices.

    Both pipelines get the same number of epochs; the single network sees every
    training slice once per epoch, as do the three view networks combined.
    """
    t0 = time.perf_counter()
    index = generate_phantom(PhantomSpec(n=n, size=size, seed=seed))
    split = make_split(index, SplitMode.PER_VIEW, SplitFractions(train=train_frac), seed=seed)
    cfg = replace(train_config, seed=seed, threshold=threshold)
    test = index.select(split.ids("test"))

    single_model, _ = train_single(index, split.merged(), cfg, model_config)
    single = evaluate(build_router(RouterMode.SINGLE, single_model), test, threshold)

    trained = train_per_view(index, split, cfg, model_config)
    router = build_router(RouterMode.PER_VIEW, {v: m for v, (m, _) in trained.items()})
    per_view = evaluate(router, test, threshold)
    report = comparison_report(single, per_view.by_view())
    return SeedOutcome(seed, single, per_view, report, time.perf_counter() - t0)


def run_experiment(seeds=(0, 1, 2, 3, 4), **kwargs) -> ExperimentResult:
    return ExperimentResult([run_seed(s, **kwargs) for s in seeds])
