"""Manifest parsing, decoding, augmentation determinism, split algebra, and
batch coverage."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from hybridcnn.data import (AugmentationPlan, ImageCache, SampleRecord, apply_plan,
                            apply_transform, batches, class_counts, decode_and_resize,
                            default_plan, generate_synthetic, load_manifest,
                            plan_from_dict, save_manifest, scan_directory, split)
from hybridcnn.errors import ConfigurationError, DataError
from hybridcnn.graphs import CLASS_LABELS

PAPERISH_BEFORE = {"Normal": 5077, "Stone": 1377, "Cyst": 3709, "Tumor": 2283}
EXPECTED_AFTER = {"Normal": 5141, "Stone": 3918, "Cyst": 11127, "Tumor": 6849}


def fake_manifest(counts):
    records = []
    for label, n in counts.items():
        records.extend(SampleRecord(path=f"{label}/{i}.png", label=label)
                       for i in range(n))
    return records


class TestManifest:
    def test_round_trip(self, tmp_path):
        records = [SampleRecord("a.png", "Normal", "train"),
                   SampleRecord("b.png", "Cyst", "test", "augmented:rotate30")]
        p = tmp_path / "m.jsonl"
        save_manifest(records, p)
        loaded = load_manifest(p)
        assert loaded == records

    def test_empty_file(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text("")
        assert load_manifest(p) == []
        assert class_counts([]) == {c: 0 for c in CLASS_LABELS}

    def test_unknown_label_names_line(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text('{"path": "a.png", "label": "Cyst"}\n'
                     '{"path": "b.png", "label": "Cysts"}\n')
        with pytest.raises(DataError, match=r":2.*Cysts"):
            load_manifest(p)

    def test_malformed_line_number(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text('{"path": "a.png", "label": "Stone"}\n{oops\n')
        with pytest.raises(DataError, match=":2"):
            load_manifest(p)

    def test_class_counts(self):
        records = fake_manifest(PAPERISH_BEFORE)
        counts = class_counts(records)
        assert counts == PAPERISH_BEFORE
        assert sum(counts.values()) == 12_446

    def test_scan_directory(self, tmp_path):
        for label, n in (("Normal", 2), ("Stone", 1)):
            d = tmp_path / label
            d.mkdir()
            for i in range(n):
                Image.fromarray(np.zeros((8, 8), np.uint8)).save(d / f"{i}.png")
        records = scan_directory(tmp_path)
        assert class_counts(records)["Normal"] == 2
        assert class_counts(records)["Stone"] == 1

    def test_scan_rejects_unknown_directory(self, tmp_path):
        (tmp_path / "Gravel").mkdir()
        with pytest.raises(DataError, match="Gravel"):
            scan_directory(tmp_path)


class TestDecodeResize:
    def test_resize_shape_and_range(self, tmp_path):
        p = tmp_path / "big.png"
        rng = np.random.default_rng(0)
        Image.fromarray(rng.integers(0, 256, (640, 640, 3), dtype=np.uint8)).save(p)
        arr = decode_and_resize(p, (224, 224))
        assert arr.shape == (224, 224, 3)
        assert arr.dtype == np.float32
        assert arr.min() >= 0.0 and arr.max() <= 1.0

    def test_identity_at_target_size(self, tmp_path):
        p = tmp_path / "s.png"
        src = np.random.default_rng(1).integers(0, 256, (32, 32, 3), dtype=np.uint8)
        Image.fromarray(src).save(p)
        arr = decode_and_resize(p, (32, 32))
        assert np.abs(arr - src.astype(np.float32) / 255.0).max() == 0.0

    def test_grayscale_replicates_channels(self, tmp_path):
        p = tmp_path / "g.png"
        Image.fromarray(np.full((16, 16), 100, np.uint8), mode="L").save(p)
        arr = decode_and_resize(p, (16, 16))
        assert arr.shape == (16, 16, 3)
        assert np.array_equal(arr[:, :, 0], arr[:, :, 2])

    def test_undecodable_names_path(self, tmp_path):
        p = tmp_path / "junk.png"
        p.write_bytes(b"not an image")
        with pytest.raises(DataError, match="junk.png"):
            decode_and_resize(p, (8, 8))


class TestTransforms:
    def test_flip_involution(self):
        rng = np.random.default_rng(2)
        arr = rng.integers(0, 256, (21, 17, 3), dtype=np.uint8)
        assert np.array_equal(apply_transform(apply_transform(arr, "horizontal_flip"),
                                              "horizontal_flip"), arr)
        assert np.array_equal(apply_transform(apply_transform(arr, "vertical_flip"),
                                              "vertical_flip"), arr)

    def test_median_of_constant_is_constant(self):
        arr = np.full((12, 12, 3), 77, np.uint8)
        assert np.array_equal(apply_transform(arr, "median3"), arr)

    def test_median_kills_isolated_speck(self):
        arr = np.zeros((9, 9), np.uint8)
        arr[4, 4] = 255
        assert apply_transform(arr, "median3").max() == 0

    def test_rotation_shape_corners_and_mean(self):
        rng = np.random.default_rng(3)
        arr = rng.integers(60, 200, (32, 32), dtype=np.uint8)
        rot = apply_transform(arr, "rotate30")
        assert rot.shape == arr.shape
        for corner in ((0, 0), (0, -1), (-1, 0), (-1, -1)):
            assert rot[corner] == 0  # zero fill
        assert rot.mean() <= arr.mean()

    def test_unknown_transform(self):
        with pytest.raises(ConfigurationError):
            apply_transform(np.zeros((4, 4), np.uint8), "shear")


class TestAugmentationPlan:
    def test_preset_reproduces_reference_counts(self):
        records = fake_manifest(PAPERISH_BEFORE)
        expanded = default_plan().assignments(records)
        assert class_counts(expanded) == EXPECTED_AFTER
        assert sum(class_counts(expanded).values()) == 27_035

    def test_empty_plan_keeps_counts(self):
        records = fake_manifest({"Normal": 10, "Stone": 5, "Cyst": 4, "Tumor": 3})
        plan = AugmentationPlan()
        assert class_counts(plan.assignments(records)) == class_counts(records)

    def test_truncated_pass_takes_first_records(self):
        records = [SampleRecord(f"Stone/{i}.png", "Stone") for i in range(4)]
        plan = AugmentationPlan(transforms={"Stone": ("horizontal_flip",)},
                                multipliers={"Stone": 1.5})
        expanded = plan.assignments(records)
        variants = [r for r in expanded if r.provenance != "original"]
        assert len(variants) == 2
        assert all("0" in v.path or "1" in v.path for v in variants)

    def test_multiplier_below_one_rejected(self):
        with pytest.raises(ConfigurationError):
            AugmentationPlan(multipliers={"Stone": 0.5})

    def test_plan_json_round_trip(self):
        d = {"version": 1, "classes": {
            "Stone": {"transforms": ["horizontal_flip", "rotate30"], "multiplier": 2.0}}}
        plan = plan_from_dict(d)
        assert plan.transforms["Stone"] == ("horizontal_flip", "rotate30")
        assert plan.multipliers["Stone"] == 2.0

    def test_materialisation_deterministic(self, tmp_path):
        src = tmp_path / "src" / "Stone"
        src.mkdir(parents=True)
        rng = np.random.default_rng(4)
        for i in range(3):
            Image.fromarray(rng.integers(0, 256, (16, 16), dtype=np.uint8)).save(
                src / f"s{i}.png")
        records = scan_directory(tmp_path / "src")
        plan = AugmentationPlan(transforms={"Stone": ("horizontal_flip", "median3")},
                                multipliers={"Stone": 3.0})
        out_a = apply_plan(records, plan, tmp_path / "a", seed=0)
        out_b = apply_plan(records, plan, tmp_path / "b", seed=0, workers=4)
        assert len(out_a) == len(out_b) == 9
        for ra, rb in zip(out_a, out_b):
            if ra.provenance == "original":
                continue
            ba = (tmp_path / "a" / "Stone" / str(ra.path).split("/")[-1]).read_bytes()
            bb = (tmp_path / "b" / "Stone" / str(rb.path).split("/")[-1]).read_bytes()
            assert ba == bb


class TestSplit:
    def test_reference_split_sizes(self):
        records = fake_manifest(PAPERISH_BEFORE)
        assigned = split(records, seed=0)
        n_train = sum(1 for r in assigned if r.split == "train")
        n_other = len(assigned) - n_train
        assert n_train == 8_712
        assert n_other == 3_734  # test + validation carved from it

    def test_partition_exact(self):
        records = fake_manifest({"Normal": 50, "Stone": 33, "Cyst": 20, "Tumor": 7})
        assigned = split(records, seed=3)
        assert all(r.split in ("train", "test", "validation") for r in assigned)
        assert len(assigned) == len(records)
        paths = [r.path for r in assigned]
        assert len(set(paths)) == len(paths)

    def test_deterministic_per_seed(self):
        records = fake_manifest({"Normal": 100, "Stone": 3, "Cyst": 3, "Tumor": 3})
        a = [r.split for r in split(records, seed=5)]
        b = [r.split for r in split(records, seed=5)]
        c = [r.split for r in split(records, seed=6)]
        assert a == b
        assert a != c

    @given(st.integers(10, 999), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_per_class_train_fraction_within_one(self, n, seed):
        records = fake_manifest({"Normal": n, "Stone": 3, "Cyst": 3, "Tumor": 3})
        assigned = split(records, seed=seed)
        n_train = sum(1 for r in assigned if r.split == "train" and r.label == "Normal")
        assert abs(n_train - 0.7 * n) <= 1

    def test_tiny_class_rejected(self):
        records = fake_manifest({"Normal": 5, "Stone": 2, "Cyst": 3, "Tumor": 3})
        with pytest.raises(DataError, match="Stone"):
            split(records)

    def test_missing_class_tolerated(self):
        records = fake_manifest({"Normal": 5, "Stone": 5, "Cyst": 0, "Tumor": 0})
        assigned = split(records)
        assert len(assigned) == 10


class TestBatches:
    def _dataset(self, tmp_path, n=10):
        d = tmp_path / "Normal"
        d.mkdir()
        rng = np.random.default_rng(7)
        records = []
        for i in range(n):
            p = d / f"{i}.png"
            Image.fromarray(rng.integers(0, 256, (8, 8), dtype=np.uint8)).save(p)
            records.append(SampleRecord(str(p), "Normal"))
        return records

    def test_batch_sizes(self, tmp_path):
        records = self._dataset(tmp_path, 10)
        sizes = [len(lbl) for _, lbl in batches(records, classes=("Normal",),
                                                image_size=(8, 8), batch_size=4)]
        assert sizes == [4, 4, 2]

    def test_hundred_records_at_batch_32(self, tmp_path):
        records = self._dataset(tmp_path, 100)
        sizes = [len(lbl) for _, lbl in batches(records, classes=("Normal",),
                                                image_size=(8, 8), batch_size=32)]
        assert sizes == [32, 32, 32, 4]

    def test_epoch_coverage(self, tmp_path):
        records = self._dataset(tmp_path, 9)
        seen = []
        cache = ImageCache((8, 8))
        ref = [float(cache.get(r.path).sum()) for r in records]
        for imgs, _ in batches(records, classes=("Normal",), image_size=(8, 8),
                               batch_size=4, cache=cache, seed=1, epoch=0):
            seen.extend(float(v) for v in imgs.sum(axis=(1, 2, 3)))
        assert np.allclose(sorted(seen), sorted(ref))

    def test_shuffle_is_function_of_seed_and_epoch(self, tmp_path):
        records = self._dataset(tmp_path, 12)

        def order(seed, epoch):
            out = []
            for imgs, _ in batches(records, classes=("Normal",), image_size=(8, 8),
                                   batch_size=5, seed=seed, epoch=epoch):
                out.extend(imgs.sum(axis=(1, 2, 3)).tolist())
            return out

        assert order(3, 0) == order(3, 0)
        assert order(3, 0) != order(3, 1)
        assert order(3, 0) != order(4, 0)

    def test_unknown_label_rejected(self, tmp_path):
        records = self._dataset(tmp_path, 3)
        with pytest.raises(DataError):
            next(batches(records, classes=("Cyst",), image_size=(8, 8)))


class TestSynthetic:
    def test_generator_shapes_and_counts(self, tmp_path):
        records = generate_synthetic(tmp_path, images_per_class=5, image_size=32, seed=0)
        assert len(records) == 20
        counts = class_counts(records)
        assert all(counts[c] == 5 for c in CLASS_LABELS)
        arr = decode_and_resize(records[0].path, (32, 32))
        assert arr.shape == (32, 32, 3)

    def test_generator_deterministic(self, tmp_path):
        a = generate_synthetic(tmp_path / "a", images_per_class=3, image_size=24, seed=9)
        b = generate_synthetic(tmp_path / "b", images_per_class=3, image_size=24, seed=9)
        for ra, rb in zip(a, b):
            assert open(ra.path, "rb").read() == open(rb.path, "rb").read()

    def test_classes_are_visually_distinct(self, tmp_path):
        records = generate_synthetic(tmp_path, images_per_class=8, image_size=32, seed=1)
        means = {}
        for label in CLASS_LABELS:
            arrs = [decode_and_resize(r.path, (32, 32)) for r in records if r.label == label]
            means[label] = np.mean([a.mean() for a in arrs])
        assert len({round(v, 2) for v in means.values()}) >= 3
