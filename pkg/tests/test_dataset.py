import hashlib
from collections import Counter

import h5py
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viewseg.dataset import (
    DatasetError,
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
    read_annotations,
    scan_dataset,
    write_annotations,
    write_slice,
)


def _write_raw(path, image, mask, label=2.0, pid="100360"):
    # MATLAB v7.3 layout: column-major arrays, char as uint16
    with h5py.File(path, "w") as f:
        g = f.create_group("cjdata")
        g.create_dataset("image", data=np.asarray(image).T)
        g.create_dataset("tumorMask", data=np.asarray(mask, dtype=np.uint8).T)
        g.create_dataset("label", data=np.array([[label]]))
        g.create_dataset("PID", data=np.array([[ord(c)] for c in pid], dtype=np.uint16))
        g.create_dataset("tumorBorder", data=np.zeros((1, 8)))


def _fake_index(view_counts, type_counts=None, patients=1):
    """Index of 1x1 slices with prescribed view/type/patient tallies."""
    views = [v for v, n in view_counts.items() for _ in range(n)]
    types = [TumorType.GLIOMA] * len(views)
    if type_counts:
        types = [t for t, n in type_counts.items() for _ in range(n)]
    img = np.zeros((1, 1), np.float32)
    msk = np.zeros((1, 1), np.uint8)
    return DatasetIndex(
        MriSlice(str(i + 1), f"P{i % patients}", v, t, img, msk) for i, (v, t) in enumerate(zip(views, types))
    )


class TestLoadSlice:
    def test_reads_transposed_fields(self, tmp_path):
        image = np.arange(64 * 32, dtype=np.int16).reshape(64, 32)
        mask = np.zeros((64, 32), np.uint8)
        mask[10:20, 5:8] = 1
        _write_raw(tmp_path / "7.mat", image, mask, label=3.0, pid="MR042")
        s = load_slice(tmp_path / "7.mat")
        assert s.slice_id == "7"
        assert s.patient_id == "MR042"
        assert s.tumor_type is TumorType.PITUITARY
        assert s.view is ViewLabel.UNKNOWN
        assert s.image.shape == (64, 32)
        np.testing.assert_array_equal(s.mask, mask)
        # min-max normalization of a strictly increasing ramp
        assert s.image.min() == 0.0 and s.image.max() == 1.0
        assert s.image[0, 1] > s.image[0, 0]

    def test_dimension_mismatch(self, tmp_path):
        _write_raw(tmp_path / "1.mat", np.zeros((512, 512), np.int16), np.zeros((256, 256)))
        with pytest.raises(DatasetError, match="dimensions differ"):
            load_slice(tmp_path / "1.mat")

    def test_label_outside_domain(self, tmp_path):
        _write_raw(tmp_path / "1.mat", np.ones((8, 8), np.int16), np.zeros((8, 8)), label=4.0)
        with pytest.raises(DatasetError, match="label 4"):
            load_slice(tmp_path / "1.mat")

    def test_missing_field(self, tmp_path):
        with h5py.File(tmp_path / "1.mat", "w") as f:
            f.create_group("cjdata").create_dataset("image", data=np.zeros((4, 4)))
        with pytest.raises(DatasetError, match="tumorMask"):
            load_slice(tmp_path / "1.mat")

    def test_unreadable(self, tmp_path):
        (tmp_path / "1.mat").write_bytes(b"not an hdf5 file")
        with pytest.raises(DatasetError, match="unreadable"):
            load_slice(tmp_path / "1.mat")

    def test_constant_image_normalizes_to_zero(self, tmp_path):
        _write_raw(tmp_path / "1.mat", np.full((8, 8), 300, np.int16), np.zeros((8, 8)))
        assert not load_slice(tmp_path / "1.mat").image.any()

    def test_write_slice_round_trip(self, tmp_path, small_phantom):
        s = small_phantom.slices[0]
        write_slice(tmp_path / "x.mat", s)
        back = load_slice(tmp_path / "x.mat")
        assert back.patient_id == s.patient_id and back.tumor_type == s.tumor_type
        np.testing.assert_array_equal(back.mask, s.mask)
        np.testing.assert_allclose(back.image, s.image, atol=1e-3)
        assert (tmp_path / "x.mat").read_bytes()[:10] == b"MATLAB 7.3"


class TestScanDataset:
    def test_empty_directory(self, tmp_path):
        with pytest.raises(DatasetError, match="no .mat"):
            scan_dataset(tmp_path)

    def test_missing_annotations_become_unknown(self, tmp_path, small_phantom):
        for s in small_phantom.slices[:12]:
            write_slice(tmp_path / f"{s.slice_id}.mat", s)
        write_annotations(tmp_path / "ann.csv", small_phantom.slices[5:12])
        index = scan_dataset(tmp_path, tmp_path / "ann.csv")
        assert len(index) == 12
        assert index.counts.per_view["unknown"] == 5
        assert any("5 slices have no view" in w for w in index.warnings)
        assert index.ids == [str(i) for i in range(1, 13)]  # natural order

    def test_dangling_annotation_is_a_warning(self, tmp_path, small_phantom):
        write_slice(tmp_path / "1.mat", small_phantom.slices[0])
        index = scan_dataset(tmp_path, {"1": ViewLabel.AXIAL, "999": ViewLabel.CORONAL})
        assert index["1"].view is ViewLabel.AXIAL
        assert any("missing slices" in w for w in index.warnings)

    def test_duplicate_ids_rejected(self, slice_factory):
        with pytest.raises(DatasetError, match="duplicate"):
            DatasetIndex([slice_factory("a"), slice_factory("a")])

    def test_parallel_load_matches_serial(self, tmp_path, small_phantom):
        for s in small_phantom.slices[:6]:
            write_slice(tmp_path / f"{s.slice_id}.mat", s)
        a, b = scan_dataset(tmp_path, jobs=1), scan_dataset(tmp_path, jobs=3)
        assert a.ids == b.ids
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.image, y.image)


class TestAnnotations:
    def test_case_insensitive(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("slice_id,view\n1,Axial\n2,CORONAL\n3,sagittal\n")
        assert read_annotations(p) == {"1": ViewLabel.AXIAL, "2": ViewLabel.CORONAL, "3": ViewLabel.SAGITTAL}

    @pytest.mark.parametrize("body", ["id,view\n1,axial\n", "slice_id,view\n1,oblique\n", "slice_id,view\n1,axial\n1,axial\n"])
    def test_rejects_bad_tables(self, tmp_path, body):
        p = tmp_path / "a.csv"
        p.write_text(body)
        with pytest.raises(DatasetError):
            read_annotations(p)


class TestStats:
    def test_full_dataset_tallies(self):
        views = {ViewLabel.CORONAL: 1047, ViewLabel.AXIAL: 990, ViewLabel.SAGITTAL: 1027}
        types = {TumorType.MENINGIOMA: 708, TumorType.GLIOMA: 1426, TumorType.PITUITARY: 930}
        stats = compute_stats(_fake_index(views, types, patients=233))
        assert stats.total == 3064
        assert stats.per_view == {"axial": 990, "coronal": 1047, "sagittal": 1027, "unknown": 0}
        assert stats.per_type == {"meningioma": 708, "glioma": 1426, "pituitary": 930}
        assert stats.patients == 233

    def test_empty(self):
        stats = compute_stats(DatasetIndex([]))
        assert stats.total == 0 and stats.patients == 0
        assert set(stats.per_view.values()) == {0} and set(stats.per_type.values()) == {0}

    def test_matches_naive_tally(self, small_phantom):
        stats = compute_stats(small_phantom)
        naive_views = Counter(s.view.value for s in small_phantom.slices)
        naive_types = Counter(s.tumor_type.name.lower() for s in small_phantom.slices)
        assert stats.total == len(small_phantom.slices)
        for k, v in stats.per_view.items():
            assert v == naive_views.get(k, 0)
        for k, v in stats.per_type.items():
            assert v == naive_types.get(k, 0)
        assert stats.patients == len({s.patient_id for s in small_phantom.slices})
        assert stats == small_phantom.counts


FULL_VIEWS = {ViewLabel.CORONAL: 1047, ViewLabel.AXIAL: 990, ViewLabel.SAGITTAL: 1027}


class TestSplit:
    def test_single_default_counts(self):
        split = make_split(_fake_index(FULL_VIEWS), SplitMode.SINGLE, SplitFractions(train=2100, val_frac=0.2), seed=0)
        p = split.partition()
        assert (len(p.train), len(p.val), len(p.test)) == (1680, 420, 964)

    def test_single_uses_default_count(self):
        p = make_split(_fake_index(FULL_VIEWS)).partition()
        assert len(p.train) + len(p.val) == 2100

    def test_per_view_test_sizes(self):
        split = make_split(_fake_index(FULL_VIEWS), SplitMode.PER_VIEW, SplitFractions(train=900), seed=0)
        tests = {v: len(split.partition(v).test) for v in FULL_VIEWS}
        assert tests == {ViewLabel.CORONAL: 147, ViewLabel.AXIAL: 90, ViewLabel.SAGITTAL: 127}
        for v in FULL_VIEWS:
            assert (len(split.partition(v).train), len(split.partition(v).val)) == (720, 180)

    def test_per_view_members_have_that_view(self, small_phantom):
        split = make_split(small_phantom, SplitMode.PER_VIEW, SplitFractions(train=0.6), seed=3)
        for view in FULL_VIEWS:
            p = split.partition(view)
            assert all(small_phantom[i].view is view for i in p.all_ids())

    def test_per_view_excludes_unknown_with_warning(self):
        idx = _fake_index({ViewLabel.AXIAL: 5, ViewLabel.CORONAL: 5, ViewLabel.SAGITTAL: 5, ViewLabel.UNKNOWN: 4})
        split = make_split(idx, SplitMode.PER_VIEW, SplitFractions(train=3), seed=0)
        assert "4 slices with unknown view" in split.warnings[0]
        unknown = {s.slice_id for s in idx if s.view is ViewLabel.UNKNOWN}
        assert not (unknown & set(split.ids("train") + split.ids("val") + split.ids("test")))

    def test_infeasible(self):
        with pytest.raises(DatasetError, match="infeasible"):
            make_split(_fake_index({ViewLabel.AXIAL: 10}), SplitMode.SINGLE, SplitFractions(train=2100))

    def test_fraction_rounding_to_zero_is_infeasible(self):
        with pytest.raises(DatasetError, match="train count 0"):
            make_split(_fake_index({ViewLabel.AXIAL: 9}), SplitMode.SINGLE, SplitFractions(train=0.05))

    def test_per_view_missing_view(self):
        with pytest.raises(DatasetError, match="coronal"):
            make_split(_fake_index({ViewLabel.AXIAL: 5, ViewLabel.SAGITTAL: 5}), SplitMode.PER_VIEW, SplitFractions(train=3))

    def test_deterministic_and_seed_sensitive(self, small_phantom):
        a = make_split(small_phantom, SplitMode.SINGLE, SplitFractions(train=20), seed=5)
        b = make_split(small_phantom, SplitMode.SINGLE, SplitFractions(train=20), seed=5)
        c = make_split(small_phantom, SplitMode.SINGLE, SplitFractions(train=20), seed=6)
        assert a.to_dict() == b.to_dict()
        assert a.to_dict() != c.to_dict()

    def test_file_round_trip(self, tmp_path, small_phantom):
        split = make_split(small_phantom, SplitMode.PER_VIEW, SplitFractions(train=0.5, val_frac=0.25), seed=1)
        split.save(tmp_path / "s.json")
        assert DatasetSplit.load(tmp_path / "s.json") == split
        h1 = hashlib.sha256((tmp_path / "s.json").read_bytes()).hexdigest()
        DatasetSplit.load(tmp_path / "s.json").save(tmp_path / "t.json")
        assert hashlib.sha256((tmp_path / "t.json").read_bytes()).hexdigest() == h1

    def test_patient_disjoint(self):
        idx = _fake_index({ViewLabel.AXIAL: 60}, patients=12)
        split = make_split(idx, SplitMode.SINGLE, SplitFractions(train=30, patient_disjoint=True), seed=0)
        p = split.partition()
        pats = [{idx[i].patient_id for i in ids} for ids in (p.train, p.val, p.test)]
        assert not (pats[0] & pats[1]) and not (pats[0] & pats[2]) and not (pats[1] & pats[2])
        assert p.all_ids() == set(idx.ids)

    def test_merged_preserves_membership(self, small_phantom):
        split = make_split(small_phantom, SplitMode.PER_VIEW, SplitFractions(train=0.6), seed=0)
        m = split.merged().partition()
        assert sorted(m.test) == sorted(split.ids("test"))
        assert sorted(m.train) == sorted(split.ids("train"))

    @settings(max_examples=40, deadline=None)
    @given(
        n=st.integers(3, 80),
        frac=st.floats(0.4, 1.0),
        val=st.floats(0.0, 0.9),
        seed=st.integers(0, 2**31),
        mode=st.sampled_from(list(SplitMode)),
        disjoint=st.booleans(),
    )
    def test_disjoint_and_within_index(self, n, frac, val, seed, mode, disjoint):
        idx = _fake_index({ViewLabel.AXIAL: n, ViewLabel.CORONAL: n, ViewLabel.SAGITTAL: n}, patients=7)
        split = make_split(idx, mode, SplitFractions(train=frac, val_frac=val, patient_disjoint=disjoint), seed)
        sets = [set(split.ids(k)) for k in ("train", "val", "test")]
        assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
        assert sum(len(s) for s in sets) == len(split.ids("train")) + len(split.ids("val")) + len(split.ids("test"))
        assert set().union(*sets) <= set(idx.ids)
        assert make_split(idx, mode, split.fractions, seed) == split


class TestPreprocess:
    def test_resize_512_to_256(self, slice_factory):
        s = preprocess(slice_factory(size=512), 256)
        assert s.image.shape == s.mask.shape == (256, 256)
        assert set(np.unique(s.mask)) <= {0, 1}
        assert s.image.min() == 0.0 and s.image.max() == 1.0

    def test_constant_image(self, slice_factory):
        s = slice_factory(size=64)
        s = MriSlice(s.slice_id, s.patient_id, s.view, s.tumor_type, np.full((64, 64), 0.4, np.float32), s.mask)
        assert not preprocess(s, 32).image.any()

    @pytest.mark.parametrize("size", [0, 100, 250])
    def test_rejects_bad_size(self, slice_factory, size):
        with pytest.raises(DatasetError, match="multiple of 32"):
            preprocess(slice_factory(size=64), size)

    @settings(max_examples=25, deadline=None)
    @given(src=st.integers(8, 130), dst=st.sampled_from([32, 64, 96]), seed=st.integers(0, 1000))
    def test_mask_stays_binary(self, src, dst, seed):
        rng = np.random.default_rng(seed)
        s = MriSlice("x", "p", ViewLabel.AXIAL, TumorType.GLIOMA, rng.random((src, src)).astype(np.float32),
                     (rng.random((src, src)) < 0.5).astype(np.uint8))
        out = preprocess(s, dst)
        assert out.mask.shape == out.image.shape == (dst, dst)
        assert set(np.unique(out.mask)) <= {0, 1}
        assert 0.0 <= out.image.min() and out.image.max() <= 1.0


class TestPhantom:
    def test_round_robin_counts(self, small_phantom):
        assert len(small_phantom) == 30
        assert small_phantom.counts.per_view == {"axial": 10, "coronal": 10, "sagittal": 10, "unknown": 0}

    def test_every_slice_has_tumor(self, small_phantom):
        assert all(s.mask.any() for s in small_phantom)

    def test_deterministic(self, small_phantom):
        again = generate_phantom(PhantomSpec(n=30, size=64, seed=42))
        for a, b in zip(small_phantom, again):
            assert a.slice_id == b.slice_id and a.view == b.view and a.patient_id == b.patient_id
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.mask, b.mask)

    def test_seed_changes_pixels(self, small_phantom):
        other = generate_phantom(PhantomSpec(n=30, size=64, seed=43))
        assert not np.array_equal(small_phantom.slices[0].image, other.slices[0].image)

    def test_views_render_differently(self):
        idx = generate_phantom(PhantomSpec(n=300, size=64, seed=0))
        # coronal tumors are dark, axial/sagittal tumors bright
        mean_in = {v: np.mean([s.image[s.mask == 1].mean() for s in idx if s.view is v]) for v in FULL_VIEWS}
        assert mean_in[ViewLabel.CORONAL] < 0.3 < min(mean_in[ViewLabel.AXIAL], mean_in[ViewLabel.SAGITTAL])

    @pytest.mark.parametrize("kwargs", [{"n": 2}, {"size": 50}, {"tumor_radius_range": (0.5, 2.0)}, {"view_styles": {}}])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(DatasetError):
            generate_phantom(PhantomSpec(**kwargs))
