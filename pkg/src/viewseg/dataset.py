"""Ingestion, view annotation, statistics, splitting and phantom generation
for the CE-MRI brain tumor slice collection."""

from __future__ import annotations

import csv
import enum
import json
import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import h5py
import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

# Total downsampling factor of the network; every working resolution must be a multiple.
SIZE_MULTIPLE = 32


class DatasetError(ValueError):
    """Raised for unreadable, malformed or inconsistent dataset inputs."""


class ViewLabel(enum.Enum):
    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, text: str) -> "ViewLabel":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise DatasetError(f"unrecognized view label {text!r}") from None


# Iteration order used everywhere a per-view loop needs to be reproducible.
KNOWN_VIEWS = (ViewLabel.AXIAL, ViewLabel.CORONAL, ViewLabel.SAGITTAL)


class TumorType(enum.IntEnum):
    MENINGIOMA = 1
    GLIOMA = 2
    PITUITARY = 3


@dataclass(frozen=True, eq=False)
class MriSlice:
    slice_id: str
    patient_id: str
    view: ViewLabel
    tumor_type: TumorType
    image: np.ndarray
    mask: np.ndarray
    source_path: str = ""

    def __post_init__(self):
        if self.image.ndim != 2:
            raise DatasetError(f"{self.slice_id}: image must be 2D, got shape {self.image.shape}")
        if self.mask.shape != self.image.shape:
            raise DatasetError(
                f"{self.slice_id}: mask shape {self.mask.shape} does not match image shape {self.image.shape}"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise DatasetError(f"{self.slice_id}: mask is not binary")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise DatasetError(f"{self.slice_id}: image intensities outside [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    def with_view(self, view: ViewLabel) -> "MriSlice":
        return replace(self, view=view)


@dataclass(frozen=True)
class DatasetStats:
    total: int
    per_view: dict[str, int]
    per_type: dict[str, int]
    patients: int

    def as_rows(self) -> list[tuple[str, int]]:
        rows = [("total", self.total)]
        rows += [(f"view:{k}", v) for k, v in self.per_view.items()]
        rows += [(f"type:{k}", v) for k, v in self.per_type.items()]
        rows.append(("patients", self.patients))
        return rows


def _tally(slices: Iterable[MriSlice]) -> DatasetStats:
    slices = list(slices)
    views = Counter(s.view for s in slices)
    types = Counter(s.tumor_type for s in slices)
    return DatasetStats(
        total=len(slices),
        per_view={v.value: views.get(v, 0) for v in (*KNOWN_VIEWS, ViewLabel.UNKNOWN)},
        per_type={t.name.lower(): types.get(t, 0) for t in TumorType},
        patients=len({s.patient_id for s in slices}),
    )


class DatasetIndex:
    """Immutable, ordered collection of slices with their tallies."""

    def __init__(self, slices: Iterable[MriSlice], warnings: Sequence[str] = ()):
        self.slices: tuple[MriSlice, ...] = tuple(slices)
        self._by_id: dict[str, MriSlice] = {}
        for s in self.slices:
            if s.slice_id in self._by_id:
                raise DatasetError(f"duplicate slice_id {s.slice_id!r}")
            self._by_id[s.slice_id] = s
        self.counts = _tally(self.slices)
        self.warnings: tuple[str, ...] = tuple(warnings)

    def __len__(self) -> int:
        return len(self.slices)

    def __iter__(self):
        return iter(self.slices)

    def __contains__(self, slice_id: str) -> bool:
        return slice_id in self._by_id

    def __getitem__(self, slice_id: str) -> MriSlice:
        return self._by_id[slice_id]

    @property
    def ids(self) -> list[str]:
        return [s.slice_id for s in self.slices]

    def select(self, ids: Iterable[str]) -> list[MriSlice]:
        """Slices for ``ids`` in index order."""
        wanted = set(ids)
        missing = wanted - self._by_id.keys()
        if missing:
            raise DatasetError(f"{len(missing)} ids not in index, e.g. {sorted(missing)[0]!r}")
        return [s for s in self.slices if s.slice_id in wanted]

    def map(self, fn, jobs: int = 1) -> "DatasetIndex":
        if jobs > 1:
            with ThreadPoolExecutor(jobs) as pool:
                out = list(pool.map(fn, self.slices))
        else:
            out = [fn(s) for s in self.slices]
        return DatasetIndex(out, self.warnings)


# ---------------------------------------------------------------------------
# Container ingestion


def _normalize(image: np.ndarray) -> np.ndarray:
    """Per-slice min-max scaling to [0, 1]; a constant image maps to zeros."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi - lo <= 0:
        return np.zeros(image.shape, dtype=np.float32)
    return ((image - lo) / (hi - lo)).astype(np.float32)


def _read_matlab_string(ds: h5py.Dataset) -> str:
    # MATLAB v7.3 stores char arrays as uint16 code points.
    codes = np.asarray(ds[()]).ravel()
    return "".join(chr(int(c)) for c in codes if c)


def load_slice(path: str | os.PathLike) -> MriSlice:
    """Read one ``cjdata`` record from a MATLAB v7.3 (HDF5) container.

    The view is left as UNKNOWN; views come from a sidecar annotation table.
    """
    path = Path(path)
    try:
        f = h5py.File(path, "r")
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{path}: unreadable container ({exc})") from exc
    with f:
        if "cjdata" not in f:
            raise DatasetError(f"{path}: missing 'cjdata' record")
        rec = f["cjdata"]
        for key in ("image", "tumorMask", "label", "PID"):
            if key not in rec:
                raise DatasetError(f"{path}: missing field cjdata/{key}")
        # column-major on disk: transpose back to (rows, cols)
        image = np.asarray(rec["image"][()]).T
        mask = np.asarray(rec["tumorMask"][()]).T
        label = int(np.asarray(rec["label"][()]).ravel()[0])
        patient = _read_matlab_string(rec["PID"])
    if image.shape != mask.shape:
        raise DatasetError(f"{path}: image {image.shape} and mask {mask.shape} dimensions differ")
    try:
        tumor_type = TumorType(label)
    except ValueError:
        raise DatasetError(f"{path}: tumor label {label} outside {{1, 2, 3}}") from None
    if not np.isin(mask, (0, 1)).all():
        raise DatasetError(f"{path}: tumorMask is not binary")
    return MriSlice(
        slice_id=path.stem,
        patient_id=patient,
        view=ViewLabel.UNKNOWN,
        tumor_type=tumor_type,
        image=_normalize(image),
        mask=mask.astype(np.uint8),
        source_path=str(path),
    )


def write_slice(path: str | os.PathLike, s: MriSlice, intensity_scale: int = 1000) -> None:
    """Write ``s`` in the same v7.3 layout :func:`load_slice` reads.

    Intensities are quantized to int16 in ``[0, intensity_scale]``.
    """
    path = Path(path)
    # 512-byte userblock + MATLAB header text makes the file recognizable as v7.3
    with h5py.File(path, "w", userblock_size=512) as f:
        g = f.create_group("cjdata")
        g.attrs["MATLAB_class"] = np.bytes_("struct")
        img = np.round(s.image.astype(np.float64) * intensity_scale).astype(np.int16)
        d = g.create_dataset("image", data=img.T)
        d.attrs["MATLAB_class"] = np.bytes_("int16")
        d = g.create_dataset("tumorMask", data=s.mask.astype(np.uint8).T)
        d.attrs["MATLAB_class"] = np.bytes_("logical")
        d = g.create_dataset("label", data=np.array([[float(s.tumor_type)]]))
        d.attrs["MATLAB_class"] = np.bytes_("double")
        pid = np.array([[ord(c)] for c in s.patient_id], dtype=np.uint16)
        d = g.create_dataset("PID", data=pid if pid.size else np.zeros((1, 1), np.uint16))
        d.attrs["MATLAB_class"] = np.bytes_("char")
        d = g.create_dataset("tumorBorder", data=np.zeros((1, 0)))
        d.attrs["MATLAB_class"] = np.bytes_("double")
    header = b"MATLAB 7.3 MAT-file, Platform: GLNXA64, Created by: viewseg HDF5 schema 1.00 ."
    with open(path, "r+b") as fh:
        fh.write(header.ljust(116, b" ") + b"\x00" * 8 + b"\x00\x02IM")


def read_annotations(path: str | os.PathLike) -> dict[str, ViewLabel]:
    """Parse a ``slice_id,view`` table (view names case-insensitive)."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [h.strip() for h in reader.fieldnames] != ["slice_id", "view"]:
            raise DatasetError(f"{path}: expected header 'slice_id,view'")
        out: dict[str, ViewLabel] = {}
        for row in reader:
            sid = row["slice_id"].strip()
            view = ViewLabel.parse(row["view"])
            if view is ViewLabel.UNKNOWN:
                raise DatasetError(f"{path}: view for {sid!r} must be axial, coronal or sagittal")
            if sid in out:
                raise DatasetError(f"{path}: duplicate annotation for {sid!r}")
            out[sid] = view
    return out


def write_annotations(path: str | os.PathLike, slices: Iterable[MriSlice]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice_id", "view"])
        for s in slices:
            if s.view is not ViewLabel.UNKNOWN:
                w.writerow([s.slice_id, s.view.value])


def _natural_key(path: Path):
    stem = path.stem
    return (0, int(stem), stem) if stem.isdigit() else (1, 0, stem)


def scan_dataset(
    root: str | os.PathLike,
    annotations: Mapping[str, ViewLabel] | str | os.PathLike | None = None,
    jobs: int = 1,
) -> DatasetIndex:
    """Load every ``*.mat`` container under ``root`` and attach view labels."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    paths = sorted(root.glob("*.mat"), key=_natural_key)
    if not paths:
        raise DatasetError(f"{root}: no .mat container files found")
    if annotations is not None and not isinstance(annotations, Mapping):
        annotations = read_annotations(annotations)
    annotations = dict(annotations or {})

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            slices = list(pool.map(load_slice, paths))
    else:
        slices = [load_slice(p) for p in paths]

    warnings = []
    labeled = []
    for s in slices:
        view = annotations.get(s.slice_id, ViewLabel.UNKNOWN)
        labeled.append(s.with_view(view))
    present = {s.slice_id for s in slices}
    dangling = sorted(set(annotations) - present)
    if dangling:
        warnings.append(f"{len(dangling)} annotations reference missing slices, e.g. {dangling[0]!r}")
    n_unknown = sum(s.view is ViewLabel.UNKNOWN for s in labeled)
    if n_unknown:
        warnings.append(f"{n_unknown} slices have no view annotation")
    for w in warnings:
        log.warning("%s: %s", root, w)
    return DatasetIndex(labeled, warnings)


def compute_stats(index: DatasetIndex | Iterable[MriSlice]) -> DatasetStats:
    return _tally(index)


# ---------------------------------------------------------------------------
# Splits


class SplitMode(enum.Enum):
    SINGLE = "single"
    PER_VIEW = "per-view"


# Training pool sizes used when no explicit count/fraction is given.
DEFAULT_TRAIN_COUNT = {SplitMode.SINGLE: 2100, SplitMode.PER_VIEW: 900}
# Per-view RNG stream offsets; fixed so per-view splits and seeds never collide.
VIEW_SEED_OFFSET = {ViewLabel.AXIAL: 101, ViewLabel.CORONAL: 202, ViewLabel.SAGITTAL: 303}


@dataclass(frozen=True)
class SplitFractions:
    """How much of a pool goes to training.

    ``train`` is an absolute count when an int, a fraction of the pool when a
    float, and the mode's default count when None.  ``val_frac`` of the
    training draw becomes validation.  Counts apply per view in per-view mode.
    """

    train: int | float | None = None
    val_frac: float = 0.2
    patient_disjoint: bool = False

    def train_count(self, pool: int, mode: SplitMode) -> int:
        t = self.train
        if t is None:
            n = DEFAULT_TRAIN_COUNT[mode]
        elif isinstance(t, float):
            if not 0.0 < t <= 1.0:
                raise DatasetError(f"train fraction {t} outside (0, 1]")
            n = int(round(t * pool))
        else:
            n = int(t)
        if n < 1 or n > pool:
            raise DatasetError(f"train count {n} infeasible for a pool of {pool} slices")
        return n

    def val_count(self, train_count: int) -> int:
        if not 0.0 <= self.val_frac < 1.0:
            raise DatasetError(f"val_frac {self.val_frac} outside [0, 1)")
        return int(round(self.val_frac * train_count))


@dataclass(frozen=True)
class Partition:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def all_ids(self) -> set[str]:
        return set(self.train) | set(self.val) | set(self.test)


@dataclass(frozen=True)
class DatasetSplit:
    mode: SplitMode
    seed: int
    fractions: SplitFractions
    partitions: dict[str, Partition]  # "all" for single mode, view values for per-view
    warnings: tuple[str, ...] = ()

    def partition(self, view: ViewLabel | None = None) -> Partition:
        key = "all" if self.mode is SplitMode.SINGLE else view.value
        return self.partitions[key]

    def ids(self, subset: str) -> list[str]:
        """All ids of ``subset`` (train/val/test) across partitions."""
        out: list[str] = []
        for p in self.partitions.values():
            out.extend(getattr(p, subset))
        return out

    def merged(self) -> "DatasetSplit":
        """Single-mode view of this split with identical train/val/test membership."""
        if self.mode is SplitMode.SINGLE:
            return self
        part = Partition(*(tuple(self.ids(k)) for k in ("train", "val", "test")))
        return DatasetSplit(SplitMode.SINGLE, self.seed, self.fractions, {"all": part}, self.warnings)

    # -- persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "seed": self.seed,
            "fractions": {
                "train": self.fractions.train,
                "val_frac": self.fractions.val_frac,
                "patient_disjoint": self.fractions.patient_disjoint,
            },
            "partitions": {
                k: {"train": list(p.train), "val": list(p.val), "test": list(p.test)}
                for k, p in self.partitions.items()
            },
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        try:
            fr = d["fractions"]
            return cls(
                mode=SplitMode(d["mode"]),
                seed=int(d["seed"]),
                fractions=SplitFractions(fr["train"], float(fr["val_frac"]), bool(fr["patient_disjoint"])),
                partitions={
                    k: Partition(tuple(p["train"]), tuple(p["val"]), tuple(p["test"]))
                    for k, p in d["partitions"].items()
                },
                warnings=tuple(d.get("warnings", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed split record: {exc}") from exc

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetSplit":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: not a split file ({exc})") from exc


def _partition(
    slices: Sequence[MriSlice], fractions: SplitFractions, mode: SplitMode, rng: np.random.Generator
) -> Partition:
    ids = sorted(s.slice_id for s in slices)
    n_train = fractions.train_count(len(ids), mode)
    n_val = fractions.val_count(n_train)
    if fractions.patient_disjoint:
        patient_of = {s.slice_id: s.patient_id for s in slices}
        by_patient: dict[str, list[str]] = {}
        for sid in ids:
            by_patient.setdefault(patient_of[sid], []).append(sid)
        patients = sorted(by_patient)
        order = [patients[i] for i in rng.permutation(len(patients))]
        pool_patients = []
        taken = 0
        for p in order:
            if taken >= n_train:
                break
            pool_patients.append(p)
            taken += len(by_patient[p])
        rest = [sid for p in order[len(pool_patients):] for sid in by_patient[p]]
        val, got = [], 0
        for p in pool_patients:
            if got >= n_val:
                break
            val.extend(by_patient[p])
            got += len(by_patient[p])
        pool = [sid for p in pool_patients for sid in by_patient[p]]
        val_set = set(val)
        train = [sid for sid in pool if sid not in val_set]
        return Partition(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(rest)))
    order = [ids[i] for i in rng.permutation(len(ids))]
    pool, test = order[:n_train], order[n_train:]
    val, train = pool[:n_val], pool[n_val:]
    return Partition(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test)))


def make_split(
    index: DatasetIndex,
    mode: SplitMode | str = SplitMode.SINGLE,
    fractions: SplitFractions = SplitFractions(),
    seed: int = 0,
) -> DatasetSplit:
    """Deterministic train/val/test partition of ``index``.

    Per-view mode partitions each known view independently and leaves
    UNKNOWN-view slices out (recorded in ``warnings``).
    """
    mode = SplitMode(mode)
    if mode is SplitMode.SINGLE:
        part = _partition(index.slices, fractions, mode, np.random.default_rng(seed))
        return DatasetSplit(mode, seed, fractions, {"all": part})

    warnings = []
    n_unknown = index.counts.per_view[ViewLabel.UNKNOWN.value]
    if n_unknown:
        warnings.append(f"{n_unknown} slices with unknown view excluded from per-view split")
        log.warning(warnings[-1])
    parts = {}
    for view in KNOWN_VIEWS:
        members = [s for s in index if s.view is view]
        if not members:
            raise DatasetError(f"per-view split: no slices with view {view.value}")
        rng = np.random.default_rng([seed, VIEW_SEED_OFFSET[view]])
        parts[view.value] = _partition(members, fractions, mode, rng)
    return DatasetSplit(mode, seed, fractions, parts, tuple(warnings))


# ---------------------------------------------------------------------------
# Preprocessing


def check_size(size: int) -> None:
    if size <= 0 or size % SIZE_MULTIPLE:
        raise DatasetError(f"size {size} is not a positive multiple of {SIZE_MULTIPLE}")


def preprocess(s: MriSlice, target_size: int = 256) -> MriSlice:
    """Resample to ``target_size`` squared: bilinear image, nearest-neighbor mask."""
    check_size(target_size)
    if s.shape == (target_size, target_size):
        return replace(s, image=_normalize(s.image))
    size = (target_size, target_size)
    img = torch.from_numpy(np.ascontiguousarray(s.image, dtype=np.float32))[None, None]
    img = F.interpolate(img, size=size, mode="bilinear", align_corners=False, antialias=True)
    msk = torch.from_numpy(np.ascontiguousarray(s.mask, dtype=np.float32))[None, None]
    msk = F.interpolate(msk, size=size, mode="nearest")
    return replace(s, image=_normalize(img[0, 0].numpy()), mask=msk[0, 0].numpy().astype(np.uint8))


# ---------------------------------------------------------------------------
# Synthetic phantoms


@dataclass(frozen=True)
class ViewStyle:
    """Rendering parameters for one capture direction.

    ``head_aspect`` is (vertical, horizontal) semi-axes as fractions of the
    half-width.  Tumors are drawn at ``tumor_intensity``; look-alike blobs that
    are *not* tumor are drawn at ``decoy_intensity``.
    """

    head_aspect: tuple[float, float]
    tissue_intensity: float
    tumor_intensity: float
    decoy_intensity: float
    texture: str  # "smooth", "hstripes" or "vstripes"
    texture_amplitude: float = 0.08
    background: float = 0.0


DEFAULT_VIEW_STYLES: dict[ViewLabel, ViewStyle] = {
    ViewLabel.AXIAL: ViewStyle((0.86, 0.74), 0.45, 0.95, 0.08, "smooth"),
    ViewLabel.CORONAL: ViewStyle((0.86, 0.78), 0.45, 0.08, 0.95, "hstripes", texture_amplitude=0.01),
    ViewLabel.SAGITTAL: ViewStyle((0.72, 0.90), 0.40, 0.85, 0.10, "vstripes"),
}


@dataclass(frozen=True)
class PhantomSpec:
    n: int = 30
    size: int = 64
    seed: int = 0
    view_styles: Mapping[ViewLabel, ViewStyle] = field(default_factory=lambda: dict(DEFAULT_VIEW_STYLES))
    tumor_radius_range: tuple[float, float] | None = None  # pixels; None scales with size
    noise: float = 0.03
    slices_per_patient: int = 6

    def validate(self) -> None:
        if self.n < 3:
            raise DatasetError(f"phantom n={self.n} must be at least 3")
        check_size(self.size)
        if set(self.view_styles) != set(KNOWN_VIEWS):
            raise DatasetError("view_styles must define exactly axial, coronal and sagittal")
        lo, hi = self.radius_range()
        if not 1.0 <= lo <= hi or hi > self.size / 4:
            raise DatasetError(f"tumor_radius_range {(lo, hi)} invalid for size {self.size}")
        if self.noise < 0 or self.slices_per_patient < 1:
            raise DatasetError("noise must be >= 0 and slices_per_patient >= 1")

    def radius_range(self) -> tuple[float, float]:
        if self.tumor_radius_range is not None:
            return tuple(map(float, self.tumor_radius_range))
        return (0.06 * self.size, 0.14 * self.size)


def _ellipse(yy, xx, cy, cx, ry, rx, theta=0.0):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def _render_phantom(idx: int, view: ViewLabel, style: ViewStyle, spec: PhantomSpec, rng: np.random.Generator):
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    half = size / 2.0
    ry = style.head_aspect[0] * half * rng.uniform(0.95, 1.0)
    rx = style.head_aspect[1] * half * rng.uniform(0.95, 1.0)
    head = _ellipse(yy, xx, half, half, ry, rx)

    phase = rng.uniform(0, 2 * np.pi)
    freq = rng.uniform(5.0, 7.0) * 2 * np.pi / size
    if style.texture == "hstripes":
        tex = np.sin(freq * yy + phase)
    elif style.texture == "vstripes":
        tex = np.sin(freq * xx + phase)
    else:
        tex = np.sin(0.35 * freq * xx + phase) * np.cos(0.35 * freq * yy - phase)
    image = np.full((size, size), style.background)
    image[head] = style.tissue_intensity + style.texture_amplitude * tex[head]

    lo, hi = spec.radius_range()

    def place(avoid: np.ndarray | None):
        for _ in range(100):
            r1, r2 = rng.uniform(lo, hi, size=2)
            cy = half + rng.uniform(-0.55, 0.55) * ry
            cx = half + rng.uniform(-0.55, 0.55) * rx
            blob = _ellipse(yy, xx, cy, cx, r1, r2, rng.uniform(0, np.pi)) & head
            if blob.any() and (avoid is None or not (blob & avoid).any()):
                return blob
        return None

    tumor = place(None)
    if tumor is None:  # degenerate spec; fall back to a disk at the head center
        tumor = _ellipse(yy, xx, half, half, lo, lo)
    # dilated exclusion zone keeps the decoy visually separate from the tumor
    guard = _ellipse(yy, xx, *np.argwhere(tumor).mean(axis=0) + 0.5, 2 * hi, 2 * hi)
    decoy = place(tumor | guard)
    if decoy is not None:
        image[decoy] = style.decoy_intensity
    image[tumor] = style.tumor_intensity
    image = image + rng.normal(0.0, spec.noise, size=image.shape)
    return _normalize(np.clip(image, 0.0, 1.0)), tumor.astype(np.uint8)


def generate_phantom(spec: PhantomSpec = PhantomSpec()) -> DatasetIndex:
    """Deterministic synthetic slices, views assigned round-robin."""
    spec.validate()
    children = np.random.SeedSequence(spec.seed).spawn(spec.n)
    slices = []
    for i in range(spec.n):
        view = KNOWN_VIEWS[i % 3]
        rng = np.random.default_rng(children[i])
        image, mask = _render_phantom(i, view, spec.view_styles[view], spec, rng)
        slices.append(
            MriSlice(
                slice_id=str(i + 1),
                patient_id=f"P{i // spec.slices_per_patient:04d}",
                view=view,
                tumor_type=TumorType(int(rng.integers(1, 4))),
                image=image,
                mask=mask,
                source_path="",
            )
        )
    return DatasetIndex(slices)


def write_dataset(index: DatasetIndex, root: str | os.PathLike) -> Path:
    """Write containers plus ``annotations.csv``; returns the annotation path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in index:
        write_slice(root / f"{s.slice_id}.mat", s)
    ann = root / "annotations.csv"
    write_annotations(ann, index)
    return ann
