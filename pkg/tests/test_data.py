"""Legends, mask codecs, corpus IO, and the synthetic generator."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedukd.data import (
    IGNORE_INDEX,
    CorpusManifest,
    LegendMap,
    SamplePlan,
    SegmentationSample,
    ShapeSpec,
    decode_mask,
    encode_mask,
    generate_synthetic_corpus,
    load_corpus,
    plan_synthetic_corpus,
    rasterize_mask,
    render_sample,
    synthetic_legend,
    write_corpus,
)


class TestLegendMap:
    def test_synthetic_legend_shape(self):
        legend = synthetic_legend(5)
        assert legend.num_classes == 5
        assert legend.name_of(0) == "background"
        assert len({legend.color_of(i) for i in range(5)}) == 5

    def test_rejects_duplicate_colors(self):
        with pytest.raises(ValueError):
            LegendMap(colors=((0, 0, 0), (0, 0, 0)), names=("a", "b"))

    def test_rejects_single_class(self):
        with pytest.raises(ValueError):
            LegendMap(colors=((0, 0, 0),), names=("only",))

    def test_rejects_out_of_range_channel(self):
        with pytest.raises(ValueError):
            LegendMap(colors=((0, 0, 0), (0, 256, 0)), names=("a", "b"))

    def test_csv_round_trip(self, tmp_path):
        legend = synthetic_legend(7)
        path = tmp_path / "legend.csv"
        legend.to_file(path)
        assert LegendMap.from_file(path) == legend

    def test_csv_rows_any_order(self, tmp_path):
        path = tmp_path / "legend.csv"
        path.write_text("128,0,0,1,thing\n0,0,0,0,background\n")
        legend = LegendMap.from_file(path)
        assert legend.color_of(0) == (0, 0, 0)
        assert legend.color_of(1) == (128, 0, 0)

    def test_csv_rejects_gap_in_ids(self, tmp_path):
        path = tmp_path / "legend.csv"
        path.write_text("0,0,0,0,background\n128,0,0,2,thing\n")
        with pytest.raises(ValueError):
            LegendMap.from_file(path)

    def test_ignore_color_unused(self):
        legend = synthetic_legend(4)
        assert legend.ignore_color not in set(legend.colors)


class TestMaskCodec:
    def test_encode_decode_inverse(self):
        legend = synthetic_legend(6)
        rng = np.random.default_rng(0)
        mask = rng.integers(0, 6, size=(16, 16)).astype(np.uint8)
        assert np.array_equal(decode_mask(encode_mask(mask, legend), legend), mask)

    def test_decode_encode_inverse_on_legend_colors(self):
        legend = synthetic_legend(4)
        rng = np.random.default_rng(1)
        mask = rng.integers(0, 4, size=(8, 8)).astype(np.uint8)
        pixels = encode_mask(mask, legend)
        assert np.array_equal(encode_mask(decode_mask(pixels, legend), legend), pixels)

    def test_unknown_color_becomes_ignore(self):
        legend = synthetic_legend(3)
        pixels = np.full((2, 2, 3), 211, dtype=np.uint8)
        assert np.all(decode_mask(pixels, legend) == IGNORE_INDEX)

    def test_unknown_color_strict_raises(self):
        legend = synthetic_legend(3)
        pixels = np.full((2, 2, 3), 211, dtype=np.uint8)
        with pytest.raises(ValueError, match="211"):
            decode_mask(pixels, legend, strict=True)

    def test_encode_rejects_out_of_range_class(self):
        legend = synthetic_legend(3)
        mask = np.full((2, 2), 7, dtype=np.uint8)
        with pytest.raises(ValueError, match="7"):
            encode_mask(mask, legend)

    def test_encode_maps_ignore_to_ignore_color(self):
        legend = synthetic_legend(3)
        mask = np.full((2, 2), IGNORE_INDEX, dtype=np.uint8)
        pixels = encode_mask(mask, legend)
        assert tuple(pixels[0, 0]) == legend.ignore_color

    @given(st.integers(min_value=2, max_value=30), st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_codec_round_trips_for_any_legend_size(self, num_classes, seed):
        legend = synthetic_legend(num_classes)
        rng = np.random.default_rng(seed)
        mask = rng.integers(0, num_classes, size=(6, 6)).astype(np.uint8)
        assert np.array_equal(decode_mask(encode_mask(mask, legend), legend), mask)


class TestRasterizer:
    def test_rectangle_paints_exact_box(self):
        plan = SamplePlan(
            sample_id="p", height=16, width=16, num_classes=3,
            shapes=(ShapeSpec(kind="rectangle", class_id=2, box=(2, 3, 6, 9)),),
            noise_seed=0,
        )
        mask = rasterize_mask(plan)
        expected = np.zeros((16, 16), dtype=np.uint8)
        expected[2:6, 3:9] = 2
        assert np.array_equal(mask, expected)

    def test_later_shape_paints_over_earlier(self):
        plan = SamplePlan(
            sample_id="p", height=8, width=8, num_classes=3,
            shapes=(
                ShapeSpec(kind="rectangle", class_id=1, box=(0, 0, 8, 8)),
                ShapeSpec(kind="rectangle", class_id=2, box=(2, 2, 5, 5)),
            ),
            noise_seed=0,
        )
        mask = rasterize_mask(plan)
        assert mask[3, 3] == 2
        assert mask[0, 0] == 1

    def test_ellipse_inscribed_in_box(self):
        plan = SamplePlan(
            sample_id="p", height=20, width=20, num_classes=2,
            shapes=(ShapeSpec(kind="ellipse", class_id=1, box=(4, 4, 16, 16)),),
            noise_seed=0,
        )
        mask = rasterize_mask(plan)
        assert mask[10, 10] == 1  # centre
        assert mask[4, 4] == 0  # box corner lies outside the ellipse
        ys, xs = np.nonzero(mask)
        assert ys.min() >= 4 and ys.max() < 16 and xs.min() >= 4 and xs.max() < 16

    def test_stripes_follow_period(self):
        plan = SamplePlan(
            sample_id="p", height=9, width=6, num_classes=2,
            shapes=(ShapeSpec(kind="stripes", class_id=1, box=(0, 0, 9, 6), stripe_phase=0),),
            noise_seed=0,
        )
        mask = rasterize_mask(plan)
        on_rows = {int(y) for y in np.nonzero(mask.any(axis=1))[0]}
        assert on_rows == {y for y in range(9) if y % 3 != 2}

    def test_render_matches_plan_repaint(self):
        # Repaint oracle: decoding the rendered mask image must reproduce
        # the rasterized class map exactly.
        legend = synthetic_legend(4)
        plans = plan_synthetic_corpus(4, 4, size=(32, 32), seed=11)
        for plan in plans:
            sample = render_sample(plan, legend)
            assert np.array_equal(sample.mask, rasterize_mask(plan))


class TestSyntheticCorpus:
    def test_empty_corpus(self):
        assert plan_synthetic_corpus(0, 3) == []
        assert generate_synthetic_corpus(0, 3) == []

    def test_deterministic(self):
        a = generate_synthetic_corpus(5, 4, (32, 32), seed=3)
        b = generate_synthetic_corpus(5, 4, (32, 32), seed=3)
        for x, y in zip(a, b):
            assert x.sample_id == y.sample_id
            assert np.array_equal(x.image, y.image)
            assert np.array_equal(x.mask, y.mask)

    def test_seed_changes_content(self):
        a = generate_synthetic_corpus(3, 4, (32, 32), seed=3)
        b = generate_synthetic_corpus(3, 4, (32, 32), seed=4)
        assert any(not np.array_equal(x.mask, y.mask) for x, y in zip(a, b))

    def test_every_foreground_class_covers_at_least_one_percent(self):
        samples = generate_synthetic_corpus(60, 4, (64, 64), seed=0)
        pixels = np.concatenate([s.mask.ravel() for s in samples])
        for class_id in range(1, 4):
            assert np.mean(pixels == class_id) >= 0.01

    def test_class_cycle_controls_presence(self):
        cycle = [[1], [2], []]
        samples = generate_synthetic_corpus(6, 3, (32, 32), seed=2, class_cycle=cycle)
        for i, sample in enumerate(samples):
            present = set(np.unique(sample.mask)) - {0}
            assert present == set(cycle[i % 3])

    def test_images_live_on_uint8_grid(self):
        # Lossless PNG round-trips require exact 1/255 quantisation.
        samples = generate_synthetic_corpus(2, 3, (32, 32), seed=1)
        for sample in samples:
            scaled = sample.image * 255.0
            assert np.allclose(scaled, np.round(scaled), atol=1e-4)

    def test_index_offset_continues_ids(self):
        tail = plan_synthetic_corpus(2, 3, seed=0, index_offset=90, prefix="val")
        assert [p.sample_id for p in tail] == ["val-00090", "val-00091"]


class TestCorpusIO:
    def test_write_then_load_round_trips(self, tmp_path):
        legend = synthetic_legend(3)
        samples = generate_synthetic_corpus(4, 3, (32, 32), seed=5)
        manifest = write_corpus(samples, legend, tmp_path / "corpus")
        loaded = load_corpus(manifest)
        assert [s.sample_id for s in loaded] == [s.sample_id for s in samples]
        for original, restored in zip(samples, loaded):
            assert np.array_equal(original.mask, restored.mask)
            assert np.allclose(original.image, restored.image, atol=1e-6)

    def test_manifest_save_load(self, tmp_path):
        legend = synthetic_legend(3)
        samples = generate_synthetic_corpus(2, 3, (32, 32), seed=5)
        manifest = write_corpus(samples, legend, tmp_path / "corpus")
        restored = CorpusManifest.load(tmp_path / "corpus" / "manifest.json")
        assert restored.samples == manifest.samples
        assert restored.num_classes == manifest.num_classes

    def test_load_resizes_to_target(self, tmp_path):
        legend = synthetic_legend(3)
        samples = generate_synthetic_corpus(2, 3, (64, 64), seed=5)
        manifest = write_corpus(samples, legend, tmp_path / "corpus")
        loaded = load_corpus(manifest, target_size=(32, 32))
        for sample in loaded:
            assert sample.image.shape == (3, 32, 32)
            assert sample.mask.shape == (32, 32)
            present = set(np.unique(sample.mask))
            assert present <= set(range(3))  # nearest keeps legal classes

    def test_missing_file_reported(self, tmp_path):
        legend = synthetic_legend(3)
        samples = generate_synthetic_corpus(1, 3, (32, 32), seed=5)
        manifest = write_corpus(samples, legend, tmp_path / "corpus")
        (tmp_path / "corpus" / manifest.samples[0][1]).unlink()
        with pytest.raises(FileNotFoundError):
            manifest.validate_files()


class TestSegmentationSample:
    def test_rejects_wrong_image_dtype(self):
        with pytest.raises(ValueError):
            SegmentationSample("a", np.zeros((3, 4, 4), dtype=np.float64), np.zeros((4, 4), dtype=np.uint8))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            SegmentationSample(
                "a",
                np.zeros((3, 4, 4), dtype=np.float32),
                np.zeros((5, 4), dtype=np.uint8),
            )

    def test_rejects_out_of_range_image(self):
        image = np.full((3, 4, 4), 1.5, dtype=np.float32)
        with pytest.raises(ValueError):
            SegmentationSample("a", image, np.zeros((4, 4), dtype=np.uint8))
