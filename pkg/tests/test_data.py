import dataclasses

import numpy as np
import pytest

from fodloc.data import (
    ANNOTATION_HEADER,
    Frame,
    GroundTruth,
    PatchSpec,
    SyntheticSceneConfig,
    bilinear_resize,
    build_dataset,
    generate_synthetic_scene,
    load_annotations,
    load_frame,
    load_split,
    load_split_array,
    read_manifest,
    resize_to_grid,
    save_annotations,
    save_png,
    split_into_patches,
)
from fodloc.errors import AnnotationError, ConfigError, FormatError, SizeError
from fodloc.imaging import BoundingBox, stitch_patches

SMALL = SyntheticSceneConfig(seed=0, patch_size=PatchSpec(64, 64), object_size=(10, 20))


class TestLoadFrame:
    def test_rgb_png_roundtrip(self, tmp_path, rng):
        pixels = rng.uniform(0, 1, size=(32, 48, 3))
        save_png(tmp_path / "f.png", pixels)
        frame = load_frame(tmp_path / "f.png")
        assert frame.pixels.shape == (32, 48, 3)
        assert frame.pixels.min() >= 0.0 and frame.pixels.max() <= 1.0
        assert np.abs(frame.pixels - pixels).max() <= 0.5 / 255 + 1e-9
        assert frame.source_id == "f"

    def test_grayscale_rejected(self, tmp_path):
        from PIL import Image

        Image.fromarray(np.zeros((16, 16), dtype=np.uint8), mode="L").save(tmp_path / "g.png")
        with pytest.raises(FormatError):
            load_frame(tmp_path / "g.png")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_frame(tmp_path / "nope.png")


class TestResizeToGrid:
    def test_paper_grid_dimensions(self):
        # 3840x2160 at 448 patches floors to an 8x4 grid
        frame = Frame(np.zeros((2160, 3840, 3)))
        out = resize_to_grid(frame, PatchSpec(448, 448))
        assert (out.width, out.height) == (3584, 1792)

    def test_identity_when_exact(self, rng):
        frame = Frame(rng.uniform(0, 1, (448, 448, 3)))
        out = resize_to_grid(frame, PatchSpec(448, 448))
        assert out is frame

    def test_floor_arithmetic(self):
        frame = Frame(np.zeros((450, 900, 3)))
        out = resize_to_grid(frame, PatchSpec(448, 448))
        assert (out.width, out.height) == (448, 448)

    def test_output_is_exact_multiple(self, rng):
        for w, h in ((130, 300), (128, 128), (999, 130)):
            frame = Frame(rng.uniform(0, 1, (h, w, 3)))
            out = resize_to_grid(frame, PatchSpec(64, 64))
            assert out.width % 64 == 0 and out.height % 64 == 0

    def test_too_small(self):
        with pytest.raises(SizeError):
            resize_to_grid(Frame(np.zeros((40, 500, 3))), PatchSpec(64, 64))

    def test_bilinear_preserves_constant(self):
        out = bilinear_resize(np.full((50, 70, 3), 0.37), 32, 16)
        assert np.abs(out - 0.37).max() < 1e-12


class TestSplitIntoPatches:
    def test_grid_count_and_order(self, rng):
        frame = Frame(rng.uniform(0, 1, (128, 192, 3)))
        patches = split_into_patches(frame, PatchSpec(64, 64))
        assert len(patches) == 6
        assert [(p.row, p.col) for p in patches] == [
            (0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]

    def test_single_patch(self, rng):
        frame = Frame(rng.uniform(0, 1, (64, 64, 3)))
        patches = split_into_patches(frame, PatchSpec(64, 64))
        assert len(patches) == 1
        assert np.array_equal(patches[0].pixels, frame.pixels)

    def test_non_multiple_rejected(self, rng):
        with pytest.raises(SizeError):
            split_into_patches(Frame(np.zeros((100, 128, 3))), PatchSpec(64, 64))

    def test_split_stitch_roundtrip(self, rng):
        frame = Frame(rng.uniform(0, 1, (128, 192, 3)))
        patches = split_into_patches(frame, PatchSpec(64, 64))
        grid = [patches[:3], patches[3:]]
        assert np.array_equal(stitch_patches(grid), frame.pixels)


class TestAnnotations:
    def test_roundtrip(self, tmp_path):
        truths = [
            GroundTruth("p001", BoundingBox(10, 20, 60, 90), "Bolt"),
            GroundTruth("p001", BoundingBox(1, 2, 5, 9), "Nut"),
            GroundTruth("p002", BoundingBox(0, 0, 64, 64), "Wrench"),
        ]
        save_annotations(tmp_path / "a.csv", truths)
        loaded = load_annotations(tmp_path / "a.csv")
        assert loaded == truths

    def test_direct_parse(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("patch_id,x_min,y_min,x_max,y_max,label\np001,10,20,60,90,Bolt\n")
        (gt,) = load_annotations(path)
        assert gt.box == BoundingBox(10, 20, 60, 90)
        assert gt.label == "Bolt"

    def test_header_only(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text(",".join(ANNOTATION_HEADER) + "\n")
        assert load_annotations(path) == []

    def test_inverted_box_rejected_with_line(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("patch_id,x_min,y_min,x_max,y_max,label\np001,60,20,10,90,Bolt\n")
        with pytest.raises(AnnotationError) as err:
            load_annotations(path)
        assert err.value.line == 2

    def test_non_integer_coordinate(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("patch_id,x_min,y_min,x_max,y_max,label\np001,a,20,60,90,Bolt\n")
        with pytest.raises(AnnotationError):
            load_annotations(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("id,x0,y0,x1,y1,cls\n")
        with pytest.raises(AnnotationError):
            load_annotations(path)

    def test_box_outside_patch(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("patch_id,x_min,y_min,x_max,y_max,label\np001,10,20,70,90,Bolt\n")
        with pytest.raises(AnnotationError):
            load_annotations(path, PatchSpec(64, 128))
        assert len(load_annotations(path, PatchSpec(128, 128))) == 1


class TestSyntheticScene:
    def test_deterministic(self):
        a, ta = generate_synthetic_scene(SMALL)
        b, tb = generate_synthetic_scene(SMALL)
        assert np.array_equal(a.pixels, b.pixels)
        assert ta == tb

    def test_fraction_clean_one(self):
        cfg = dataclasses.replace(SMALL, fraction_clean=1.0)
        for seed in range(5):
            _, truths = generate_synthetic_scene(dataclasses.replace(cfg, seed=seed))
            assert truths == []

    def test_box_is_tight_against_mask_oracle(self):
        for seed in range(30):
            cfg = dataclasses.replace(SMALL, seed=seed)
            _, truths, masks = generate_synthetic_scene(cfg, return_masks=True)
            for gt, mask in zip(truths, masks):
                rows, cols = np.nonzero(mask)
                assert gt.box == BoundingBox(
                    cols.min(), rows.min(), cols.max() + 1, rows.max() + 1
                )

    def test_single_object_size_range(self):
        cfg = dataclasses.replace(
            SMALL, object_count=(1, 1), object_size=(20, 40),
            patch_size=PatchSpec(128, 128),
        )
        for seed in range(20):
            _, truths = generate_synthetic_scene(dataclasses.replace(cfg, seed=seed))
            assert len(truths) == 1
            box = truths[0].box
            assert 20 <= box.width <= 40 and 20 <= box.height <= 40

    def test_boxes_inside_patch(self):
        for seed in range(20):
            cfg = dataclasses.replace(SMALL, seed=seed, object_count=(1, 3))
            _, truths = generate_synthetic_scene(cfg)
            for gt in truths:
                assert gt.box.inside(64, 64)

    def test_values_in_range(self):
        patch, _ = generate_synthetic_scene(SMALL)
        assert patch.pixels.min() >= 0.0 and patch.pixels.max() <= 1.0

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SyntheticSceneConfig(object_size=(80, 200), patch_size=PatchSpec(128, 128))
        with pytest.raises(ConfigError):
            SyntheticSceneConfig(fraction_clean=1.5)
        with pytest.raises(ConfigError):
            SyntheticSceneConfig(object_shapes=("disk", "hexagon"))


class TestBuildDataset:
    def test_counts_and_determinism(self, tmp_path):
        cfg = SMALL
        rec1 = build_dataset(cfg, 4, 3, tmp_path / "d1")
        rec2 = build_dataset(cfg, 4, 3, tmp_path / "d2")
        assert len(rec1) == 7
        assert [r["split"] for r in rec1].count("train") == 4
        for r1, r2 in zip(rec1, rec2):
            b1 = (tmp_path / "d1" / r1["path"]).read_bytes()
            b2 = (tmp_path / "d2" / r2["path"]).read_bytes()
            assert b1 == b2
        a1 = (tmp_path / "d1" / "annotations.csv").read_text()
        a2 = (tmp_path / "d2" / "annotations.csv").read_text()
        assert a1 == a2

    def test_train_patches_clean(self, tmp_path):
        build_dataset(SMALL, 3, 2, tmp_path)
        truths = load_annotations(tmp_path / "annotations.csv", SMALL.patch_size)
        assert all(gt.patch_id.startswith("test") for gt in truths)

    def test_zero_test_gives_header_only_csv(self, tmp_path):
        build_dataset(SMALL, 2, 0, tmp_path)
        lines = (tmp_path / "annotations.csv").read_text().strip().splitlines()
        assert lines == [",".join(ANNOTATION_HEADER)]

    def test_manifest_contents(self, tmp_path):
        build_dataset(SMALL, 2, 1, tmp_path)
        records = read_manifest(tmp_path / "manifest.jsonl")
        assert len(records) == 3
        assert all(
            set(r) == {"path", "split", "width", "height"} for r in records
        )

    def test_loaders(self, tmp_path):
        build_dataset(SMALL, 3, 2, tmp_path)
        ids, patches = load_split(tmp_path, "train")
        assert len(ids) == 3 and len(patches) == 3
        ids_a, arr = load_split_array(tmp_path, "test")
        assert arr.shape == (2, 64, 64, 3) and arr.dtype == np.float32

    def test_negative_counts_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            build_dataset(SMALL, -1, 0, tmp_path)
