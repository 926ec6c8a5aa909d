"""View-routed LinkNet segmentation of brain tumors in CE-MRI slices."""

from .dataset import (
    DatasetIndex,
    DatasetSplit,
    MriSlice,
    PhantomSpec,
    SplitFractions,
    SplitMode,
    TumorType,
    ViewLabel,
    compute_stats,
    generate_phantom,
    load_slice,
    make_split,
    preprocess,
    scan_dataset,
)
from .metrics import ConfusionCounts, EvalResult, binarize, confusion, dice, evaluate, comparison_report
from .model import LinkNet, LinkNetConfig, build_linknet, count_parameters, forward, trace_shapes
from .router import RouterMode, ViewRouter, build_router, predict, route
from .training import TrainConfig, TrainReport, bce_loss, compute_prior_map, gradient_check, train_model, train_per_view

__version__ = "0.1.0"
