"""Dispatch of slices to a single network or to one network per view."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .dataset import KNOWN_VIEWS, MriSlice, ViewLabel
from .metrics import binarize
from .model import LinkNet, forward, load_checkpoint


class RoutingError(ValueError):
    pass


class RouterMode(enum.Enum):
    SINGLE = "single"
    PER_VIEW = "per-view"


SINGLE_KEY = "single"


@dataclass(frozen=True)
class ViewRouter:
    mode: RouterMode
    models: Mapping[str, LinkNet]  # SINGLE_KEY, or view values

    def model_for(self, key: str) -> LinkNet:
        return self.models[key]


def build_router(mode: RouterMode | str, models) -> ViewRouter:
    """``models`` is one model (or a 1-element sequence/mapping) in single mode,
    a mapping keyed by the three views in per-view mode."""
    mode = RouterMode(mode)
    if mode is RouterMode.SINGLE:
        if isinstance(models, LinkNet):
            models = [models]
        members = list(models.values()) if isinstance(models, Mapping) else list(models)
        if len(members) != 1:
            raise RoutingError(f"single mode needs exactly one model, got {len(members)}")
        return ViewRouter(mode, {SINGLE_KEY: members[0]})

    if not isinstance(models, Mapping):
        raise RoutingError("per-view mode needs a mapping view -> model")
    keyed: dict[str, LinkNet] = {}
    for k, m in models.items():
        view = k if isinstance(k, ViewLabel) else ViewLabel.parse(str(k))
        if view is ViewLabel.UNKNOWN:
            raise RoutingError("per-view router cannot hold a model for the unknown view")
        if view.value in keyed:
            raise RoutingError(f"duplicate model for view {view.value}")
        keyed[view.value] = m
    missing = [v.value for v in KNOWN_VIEWS if v.value not in keyed]
    if missing or len(keyed) != 3:
        raise RoutingError(f"per-view mode needs exactly three view models; missing {missing}")
    ordered = {v.value: keyed[v.value] for v in KNOWN_VIEWS}
    archs = {_architecture(m) for m in ordered.values()}
    if len(archs) != 1:
        raise RoutingError("view models must share one architecture config")
    return ViewRouter(mode, ordered)


def _architecture(model: LinkNet) -> tuple:
    d = model.config.to_dict()
    d.pop("init_seed")
    d["encoder_filters"] = tuple(d["encoder_filters"])
    return tuple(sorted(d.items()))


def route(router: ViewRouter, s: MriSlice) -> str:
    if router.mode is RouterMode.SINGLE:
        return SINGLE_KEY
    if s.view is ViewLabel.UNKNOWN:
        raise RoutingError(f"slice {s.slice_id} has no view label; cannot route in per-view mode")
    return s.view.value


def predict(router: ViewRouter, s: MriSlice, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    (out,) = predict_many(router, [s], threshold)
    return out


def predict_many(
    router: ViewRouter, slices: Sequence[MriSlice], threshold: float = 0.5, batch_size: int = 16
) -> list[tuple[np.ndarray, np.ndarray]]:
    """(probability map, binary mask) per slice, in input order."""
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(slices):
        groups.setdefault(route(router, s), []).append(i)
    out: list = [None] * len(slices)
    for key, idx in groups.items():
        model = router.model_for(key)
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            shapes = {slices[i].shape for i in chunk}
            if len(shapes) != 1:
                raise RoutingError(f"slices in one batch have differing shapes {sorted(shapes)}")
            batch = torch.from_numpy(np.stack([slices[i].image for i in chunk]).astype(np.float32))[:, None]
            probs = forward(model, batch)[:, 0].cpu().numpy()
            for j, i in enumerate(chunk):
                out[i] = (probs[j], binarize(probs[j], threshold))
    return out


# ---------------------------------------------------------------------------
# Manifest: mode + checkpoint path per key, relative to the manifest file.


def save_manifest(path: str | os.PathLike, mode: RouterMode, checkpoints: Mapping[str, str | os.PathLike]) -> None:
    path = Path(path)
    rel = {k: os.path.relpath(Path(p).resolve(), path.parent.resolve()) for k, p in checkpoints.items()}
    path.write_text(json.dumps({"mode": RouterMode(mode).value, "checkpoints": rel}, indent=1) + "\n")


def read_manifest(path: str | os.PathLike) -> tuple[RouterMode, dict[str, Path]]:
    path = Path(path)
    d = json.loads(path.read_text())
    mode = RouterMode(d["mode"])
    return mode, {k: path.parent / p for k, p in d["checkpoints"].items()}


def load_router(path: str | os.PathLike, map_location="cpu") -> ViewRouter:
    mode, ckpts = read_manifest(path)
    models = {k: load_checkpoint(p, map_location) for k, p in ckpts.items()}
    return build_router(mode, models)
