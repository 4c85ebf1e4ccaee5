import json
import math
from collections import Counter

import numpy as np
import pytest
from PIL import Image as PILImage

from distortadapt import scenes as S
from distortadapt.distortions import DistortionSpec
from distortadapt.imagecore import RandomSource, to_bytes


class TestGeneration:
    def test_deterministic(self, scene_split_small):
        again = S.generate_scenes(10, 3, 64, RandomSource(77, "split"), role="train")
        for a, b in zip(scene_split_small.samples, again.samples):
            assert a.sample_id == b.sample_id
            assert np.array_equal(a.image, b.image)
            assert len(a.annotations) == len(b.annotations)
            for x, y in zip(a.annotations, b.annotations):
                assert x.class_id == y.class_id
                assert np.array_equal(x.mask, y.mask)

    def test_masks_disjoint_and_visible(self, scene_split_small):
        for sample in scene_split_small.samples:
            stack = np.zeros(sample.image.shape[:2], dtype=int)
            for ann in sample.annotations:
                assert int(ann.mask.sum()) >= S.MIN_VISIBLE_PIXELS
                stack += ann.mask
            assert stack.max() <= 1

    def test_images_valid_range(self, scene_split_small):
        for sample in scene_split_small.samples:
            assert sample.image.dtype == np.float64
            assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0

    def test_classes_balanced(self):
        split = S.generate_scenes(30, 4, 64, RandomSource(5, "bal"), role="train")
        counts = Counter(a.class_id for s in split.samples for a in s.annotations)
        assert set(counts) == {1, 2, 3, 4}
        assert min(counts.values()) >= 0.5 * max(counts.values())

    def test_sample_content_independent_of_count(self):
        # Sample k is derived from its id, so generating more scenes must not
        # change earlier ones.
        a = S.generate_scenes(3, 3, 64, RandomSource(9, "g"), role="train")
        b = S.generate_scenes(6, 3, 64, RandomSource(9, "g"), role="train")
        for x, y in zip(a.samples, b.samples):
            assert np.array_equal(x.image, y.image)

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            S.generate_scenes(2, 0, 64, RandomSource(0))
        with pytest.raises(ValueError):
            S.generate_scenes(2, 5, 64, RandomSource(0))
        with pytest.raises(ValueError):
            S.generate_scenes(2, 3, 16, RandomSource(0))


class TestCorruptSplit:
    def test_annotations_carry_over_and_psnr_recorded(self, scene_split_small):
        spec = DistortionSpec("awgn", 25.0)
        out = S.corrupt_split(scene_split_small, spec, RandomSource(3, "c"))
        assert out.domain_tag == "awgn:25"
        assert out.provenance == spec
        for a, b in zip(scene_split_small.samples, out.samples):
            assert b.annotations is a.annotations
            assert not np.array_equal(a.image, b.image)
            assert math.isfinite(out.psnr_by_id[a.sample_id])
        assert 10.0 < out.mean_psnr < 40.0

    def test_deterministic_and_order_independent(self, scene_split_small):
        spec = DistortionSpec("awgn", 25.0)
        out1 = S.corrupt_split(scene_split_small, spec, RandomSource(3, "c"))
        reversed_split = S.DatasetSplit(
            role="train", domain_tag="pristine", samples=list(reversed(scene_split_small.samples))
        )
        out2 = S.corrupt_split(reversed_split, spec, RandomSource(3, "c"))
        by_id = {s.sample_id: s.image for s in out2.samples}
        for s in out1.samples:
            assert np.array_equal(s.image, by_id[s.sample_id])

    def test_worker_pool_matches_serial(self, scene_split_small):
        spec = DistortionSpec("blur", 2.0)
        serial = S.corrupt_split(scene_split_small, spec, RandomSource(3, "w"))
        parallel = S.corrupt_split(scene_split_small, spec, RandomSource(3, "w"), workers=2)
        for a, b in zip(serial.samples, parallel.samples):
            assert np.array_equal(a.image, b.image)
        assert serial.psnr_by_id == parallel.psnr_by_id

    def test_identity_distortion_gives_infinite_psnr(self, scene_split_small):
        out = S.corrupt_split(scene_split_small, DistortionSpec("blur", 0.0), RandomSource(1))
        assert out.mean_psnr == math.inf


class TestMaskRle:
    def test_full_foreground_single_run(self):
        mask = np.ones((4, 4), dtype=bool)
        rle = S.encode_mask(mask)
        assert rle == {"size": [4, 4], "runs": [0, 16]}
        assert np.array_equal(S.decode_mask(rle), mask)

    def test_empty_mask(self):
        mask = np.zeros((4, 4), dtype=bool)
        rle = S.encode_mask(mask)
        assert rle == {"size": [4, 4], "runs": [16]}
        assert np.array_equal(S.decode_mask(rle), mask)

    def test_alternation_starts_with_background(self):
        mask = np.array([[1, 0], [0, 1]], dtype=bool)
        rle = S.encode_mask(mask)
        assert rle["runs"] == [0, 1, 2, 1]
        assert sum(rle["runs"]) == 4

    def test_round_trip_fuzz(self):
        rng = RandomSource(8, "rle")
        for _ in range(50):
            mask = rng.gen.random((13, 17)) < rng.gen.random()
            rle = S.encode_mask(mask)
            assert sum(rle["runs"]) == mask.size
            assert np.array_equal(S.decode_mask(rle), mask)

    def test_checksum_violation_rejected(self):
        with pytest.raises(ValueError, match="runs sum"):
            S.decode_mask({"size": [2, 2], "runs": [1, 2]})


class TestDiskRoundTrip:
    def test_split_round_trip(self, tmp_path, scene_split_small):
        spec = DistortionSpec("blur", 2.0)
        corrupted = S.corrupt_split(scene_split_small, spec, RandomSource(4))
        S.save_split(corrupted, tmp_path)
        back = S.load_split(tmp_path, "train")
        assert back.domain_tag == "blur:2"
        assert back.provenance == spec
        assert len(back.samples) == len(corrupted.samples)
        for a, b in zip(corrupted.samples, back.samples):
            assert a.sample_id == b.sample_id
            assert np.array_equal(to_bytes(a.image), to_bytes(b.image))
            for x, y in zip(a.annotations, b.annotations):
                assert x.class_id == y.class_id
                assert np.array_equal(x.mask, y.mask)
        assert back.psnr_by_id.keys() == corrupted.psnr_by_id.keys()

    def test_manifest_holds_both_roles(self, tmp_path, scene_split_small):
        test_split = S.generate_scenes(3, 3, 64, RandomSource(6, "t"), role="test")
        S.save_split(scene_split_small, tmp_path)
        S.save_split(test_split, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert set(manifest["splits"]) == {"train", "test"}
        assert manifest["splits"]["train"]["count"] == len(scene_split_small.samples)

    def test_infinite_psnr_survives_json(self, tmp_path, scene_split_small):
        out = S.corrupt_split(scene_split_small, DistortionSpec("blur", 0.0), RandomSource(1))
        S.save_split(out, tmp_path)
        back = S.load_split(tmp_path, "train")
        assert back.mean_psnr == math.inf

    def test_missing_annotation_file_raises(self, tmp_path, scene_split_small):
        S.save_split(scene_split_small, tmp_path)
        victim = scene_split_small.samples[0].sample_id
        (tmp_path / "train" / "annotations" / f"{victim}.json").unlink()
        with pytest.raises(FileNotFoundError, match=victim):
            S.load_split(tmp_path, "train")

    def test_missing_role_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            S.load_split(tmp_path, "test")


def _write_cityscapes_fixture(root, stem: str, ids: np.ndarray) -> None:
    img_dir = root / "leftImg8bit" / "val" / "cityA"
    lbl_dir = root / "gtFine" / "val" / "cityA"
    img_dir.mkdir(parents=True, exist_ok=True)
    lbl_dir.mkdir(parents=True, exist_ok=True)
    h, w = ids.shape
    raster = (np.arange(h * w * 3, dtype=np.uint8).reshape(h, w, 3) % 251)
    PILImage.fromarray(raster, mode="RGB").save(img_dir / f"{stem}_leftImg8bit.png")
    PILImage.fromarray(ids.astype(np.uint16), mode="I;16").save(lbl_dir / f"{stem}_gtFine_instanceIds.png")


class TestCityscapesLoader:
    def test_instances_decoded_with_mapping(self, tmp_path):
        ids = np.zeros((32, 32), dtype=np.int64)
        ids[:8, :8] = 26000  # raw class 26, instance 0
        ids[10:20, 10:20] = 26001  # raw class 26, instance 1
        ids[24:30, 24:30] = 24003  # raw class 24, instance 3
        ids[0, 31] = 7  # semantic-only pixel, ignored
        _write_cityscapes_fixture(tmp_path, "cityA_000001_000019", ids)
        split = S.load_cityscapes_format(tmp_path, {"26": 1, "24": 2}, role="test")
        assert len(split.samples) == 1
        sample = split.samples[0]
        assert sample.sample_id == "cityA_000001_000019"
        classes = sorted(a.class_id for a in sample.annotations)
        assert classes == [1, 1, 2]
        sizes = {a.class_id: int(a.mask.sum()) for a in sample.annotations if a.class_id == 2}
        assert sizes[2] == 36

    def test_unmapped_classes_skipped(self, tmp_path):
        ids = np.zeros((16, 16), dtype=np.int64)
        ids[:4, :4] = 33001
        _write_cityscapes_fixture(tmp_path, "cityA_000002_000019", ids)
        split = S.load_cityscapes_format(tmp_path, {26: 1}, role="test")
        assert split.samples[0].annotations == []

    def test_missing_label_raises_with_image_name(self, tmp_path):
        ids = np.zeros((16, 16), dtype=np.int64)
        _write_cityscapes_fixture(tmp_path, "cityA_000003_000019", ids)
        label = next(tmp_path.rglob("*_instanceIds.png"))
        label.unlink()
        with pytest.raises(FileNotFoundError, match="cityA_000003_000019"):
            S.load_cityscapes_format(tmp_path, {26: 1})

    def test_mapping_from_file(self, tmp_path):
        ids = np.zeros((16, 16), dtype=np.int64)
        ids[:4, :4] = 26001
        _write_cityscapes_fixture(tmp_path, "cityA_000004_000019", ids)
        mapping = tmp_path / "mapping.json"
        mapping.write_text(json.dumps({"26": 1}))
        split = S.load_cityscapes_format(tmp_path, mapping)
        assert split.samples[0].annotations[0].class_id == 1

    def test_empty_tree_gives_empty_split(self, tmp_path):
        split = S.load_cityscapes_format(tmp_path, {26: 1})
        assert split.samples == []


class TestImageDir:
    def test_loads_sorted_pngs(self, tmp_path, scene_split_small):
        from distortadapt.imagecore import save_png

        for s in scene_split_small.samples[:3]:
            save_png(s.image, tmp_path / f"{s.sample_id}.png")
        imgs = S.load_image_dir(tmp_path)
        assert len(imgs) == 3
        assert np.array_equal(
            to_bytes(imgs[0]), to_bytes(scene_split_small.samples[0].image)
        )

    def test_empty_dir_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            S.load_image_dir(tmp_path)
