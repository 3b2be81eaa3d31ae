"""Tests for raster codecs, taxonomy, synthetic scenes, tiling, splitting and normalisation."""
import itertools
import json

import numpy as np
import pytest

import data_pipeline as dp
from conftest import uniform_scene
from errors import FormatError, InputError, ParameterError, SpecError, StratificationError

WHITE_TEXTURES = {
    55: dp.ClassTexture(-20.0, 2.0, -28.0, 1.5, 0.0),
    98: dp.ClassTexture(-9.0, 2.5, -18.0, 2.0, 0.0),
}


def two_class_spec(seed=5, textures=None):
    regions = (dp.Region(0, 0, 32, 16, 55), dp.Region(0, 16, 32, 16, 98))
    return dp.SceneSpec("two", 32, 32, regions, seed, textures or WHITE_TEXTURES)


def record(scene, row, col, cls, size=1, block=(0, 0)):
    return dp.PatchRecord(scene, row, col, size, cls, 1.0, (scene, *block))


def block_records(scene, hist):
    """P=1 records filling one 4x4 block with the given class histogram."""
    cells = iter(itertools.product(range(4), range(4)))
    out = []
    for cls, count in enumerate(hist):
        for _ in range(count):
            row, col = next(cells)
            out.append(record(scene, row, col, cls))
    return out


class TestRasterFiles:
    def test_scene_round_trip_bitwise(self, tmp_path, rng):
        data = rng.standard_normal((2, 5, 7)).astype(np.float32)
        data[0, 1, 1] = np.nan
        scene = dp.SceneRaster("s-ü", 7, 5, data, 37.5)
        loaded = dp.read_scene(dp.write_scene(scene, tmp_path / "a.scn"))
        assert loaded.scene_id == "s-ü"
        assert loaded.pixel_spacing_m == 37.5
        assert loaded.data.tobytes() == data.tobytes()

    def test_label_round_trip(self, tmp_path, rng):
        codes = rng.integers(0, 256, (4, 6)).astype(np.uint8)
        loaded = dp.read_labels(dp.write_labels(dp.LabelRaster(6, 4, codes), tmp_path / "a.lbl"))
        np.testing.assert_array_equal(loaded.codes, codes)

    def test_bad_magic(self, tmp_path):
        path = dp.write_scene(uniform_scene("s", 4, 55)[0], tmp_path / "a.scn")
        path.write_bytes(b"XXXXXXXX" + path.read_bytes()[8:])
        with pytest.raises(FormatError, match="magic"):
            dp.read_scene(path)

    def test_header_inconsistent_with_payload(self, tmp_path):
        path = dp.write_labels(dp.LabelRaster(4, 4, np.zeros((4, 4))), tmp_path / "a.lbl")
        raw = bytearray(path.read_bytes())
        raw[8:12] = (5).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="needs"):
            dp.read_labels(path)

    def test_truncated_scene(self, tmp_path):
        path = dp.write_scene(uniform_scene("s", 4, 55)[0], tmp_path / "a.scn")
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            dp.read_scene(path)

    def test_pairing_mismatch(self, tmp_path):
        scene, _ = uniform_scene("s", 8, 55)
        dp.write_scene(scene, tmp_path / "s.scn")
        dp.write_labels(dp.LabelRaster(8, 7, np.zeros((7, 8))), tmp_path / "s.lbl")
        with pytest.raises(FormatError, match="8x7"):
            dp.read_pair(tmp_path / "s.scn", tmp_path / "s.lbl")

    def test_non_positive_spacing(self):
        with pytest.raises(FormatError):
            dp.SceneRaster("s", 1, 1, np.zeros((2, 1, 1)), 0.0)

    def test_scene_store_is_lazy_mapping(self, tmp_path):
        for name in ("b", "a"):
            dp.write_scene(uniform_scene(name, 4, 55)[0], tmp_path / f"{name}.scn")
        store = dp.SceneStore(tmp_path)
        assert list(store) == ["a", "b"] and len(store) == 2
        assert store["a"] is store["a"]
        with pytest.raises(FileNotFoundError):
            store["c"]


class TestTaxonomy:
    def test_default_classes(self, taxonomy):
        assert taxonomy.names == (
            "Water",
            "New Ice",
            "Young Ice",
            "First-Year Ice",
            "Old/Multi-Year Ice",
            "Glacier Ice",
        )

    @pytest.mark.parametrize("code, expected", [(55, 0), (82, 1), (84, 2), (93, 3), (97, 4), (98, 5)])
    def test_table_lookup(self, taxonomy, code, expected):
        assert dp.map_sa_code(code, taxonomy) == expected

    @pytest.mark.parametrize("code", [255, 80, 99, 0])
    def test_invalid_codes(self, taxonomy, code):
        assert dp.map_sa_code(code, taxonomy) == dp.INVALID

    def test_codes_for_class(self, taxonomy):
        assert taxonomy.codes_for(taxonomy.index_of("Old/Multi-Year Ice")) == [95, 96, 97]

    def test_split_old_alternative(self):
        taxonomy = dp.load_taxonomy(dp.SPLIT_OLD_TAXONOMY_PATH)
        assert taxonomy.num_classes == 7
        assert dp.map_sa_code(96, taxonomy) != dp.map_sa_code(97, taxonomy)

    def test_duplicate_code_rejected(self):
        with pytest.raises(FormatError, match="twice"):
            dp.parse_taxonomy("55,Water\n55,Ice\n")

    def test_comments_and_blank_lines(self):
        taxonomy = dp.parse_taxonomy("# header\n\n81,New Ice  # nilas too\n55,Water\n")
        assert taxonomy.names == ("New Ice", "Water")
        assert taxonomy.index_of("Water") == 1


class TestSyntheticScene:
    def test_single_class_labels_constant(self):
        spec = dp.SceneSpec("one", 16, 8, (dp.Region(0, 0, 8, 16, 86),), seed=1)
        scene, labels = dp.generate_synthetic_scene(spec)
        assert np.all(labels.codes == 86)
        assert np.all(np.isfinite(scene.data))

    def test_deterministic_bytes(self):
        a, la = dp.generate_synthetic_scene(two_class_spec())
        b, lb = dp.generate_synthetic_scene(two_class_spec())
        assert a.data.tobytes() == b.data.tobytes() and la.codes.tobytes() == lb.codes.tobytes()

    def test_region_means_match_textures(self):
        scene, _ = dp.generate_synthetic_scene(two_class_spec(seed=11))
        for cols, texture in ((slice(0, 16), WHITE_TEXTURES[55]), (slice(16, 32), WHITE_TEXTURES[98])):
            for c in range(2):
                mean, std = texture.channel(c)
                pixels = scene.data[c, :, cols].astype(np.float64)
                assert abs(pixels.mean() - mean) <= 3 * std / np.sqrt(pixels.size)

    def test_correlated_field_has_unit_variance(self, rng):
        field = dp.correlated_field(rng, 256, 256, 4.0)
        assert abs(field.mean()) < 0.2
        assert field.std() == pytest.approx(1.0, abs=0.15)

    def test_overlapping_regions(self):
        regions = (dp.Region(0, 0, 4, 4, 55), dp.Region(2, 2, 4, 4, 98))
        with pytest.raises(SpecError, match="overlap"):
            dp.generate_synthetic_scene(dp.SceneSpec("x", 8, 8, regions, 0))

    def test_region_outside_scene(self):
        with pytest.raises(SpecError):
            dp.generate_synthetic_scene(dp.SceneSpec("x", 8, 8, (dp.Region(4, 4, 8, 8, 55),), 0))

    def test_uncovered_pixels_are_nodata(self):
        scene, labels = dp.generate_synthetic_scene(dp.SceneSpec("x", 8, 8, (dp.Region(0, 0, 8, 4, 55),), 0))
        assert np.all(labels.codes[:, 4:] == dp.INVALID_CODE)
        assert np.all(np.isnan(scene.data[:, :, 4:]))

    def test_speckle_changes_texture(self):
        plain, _ = dp.generate_synthetic_scene(two_class_spec())
        spec = dp.SceneSpec("two", 32, 32, two_class_spec().regions, 5, WHITE_TEXTURES, looks=4)
        speckled, _ = dp.generate_synthetic_scene(spec)
        assert np.all(np.isfinite(speckled.data))
        assert speckled.data.std() > plain.data.std()


class TestSyntheticCorpus:
    CONFIG = dp.GeneratorConfig(scene_size=64, min_floe_px=8, max_floe_px=32)

    def test_deterministic(self):
        a = dp.generate_synthetic_corpus(self.CONFIG, 2, seed=4)
        b = dp.generate_synthetic_corpus(self.CONFIG, 2, seed=4)
        for (sa, la), (sb, lb) in zip(a, b):
            assert sa.data.tobytes() == sb.data.tobytes() and la.codes.tobytes() == lb.codes.tobytes()

    def test_full_coverage_and_shares(self):
        corpus = dp.generate_synthetic_corpus(self.CONFIG, 4, seed=2)
        codes = np.concatenate([labels.codes.ravel() for _, labels in corpus])
        assert set(np.unique(codes)) <= set(self.CONFIG.class_codes)
        shares = np.array(self.CONFIG.class_shares) / sum(self.CONFIG.class_shares)
        for code, share in zip(self.CONFIG.class_codes, shares):
            # greedy assignment overshoots a target by at most one floe
            assert abs(np.mean(codes == code) - share) <= 32 * 32 / codes.size + 1e-9
        for scene, labels in corpus:
            dp.validate_pair(scene, labels)
            assert np.all(np.isfinite(scene.data))

    def test_land_share(self):
        config = dp.GeneratorConfig(scene_size=64, min_floe_px=8, max_floe_px=32, land_share=0.3)
        for scene, labels in dp.generate_synthetic_corpus(config, 2, seed=1):
            land = labels.codes == dp.INVALID_CODE
            assert np.all(np.isnan(scene.data[:, land]))

    def test_scene_ids(self):
        ids = [s.scene_id for s, _ in dp.generate_synthetic_corpus(self.CONFIG, 3, seed=0)]
        assert ids == ["scene_000", "scene_001", "scene_002"]

    @pytest.mark.parametrize(
        "values", [{"class_shares": [1.0]}, {"land_share": 1.0}, {"min_floe_px": 20, "max_floe_px": 30}]
    )
    def test_invalid_config(self, values):
        with pytest.raises(SpecError):
            dp.GeneratorConfig.from_dict(values)

    def test_unknown_setting(self):
        with pytest.raises(InputError):
            dp.GeneratorConfig.from_dict({"scenes": 3})


def brute_force_tiles(scene, labels, taxonomy, p, rho):
    kept = set()
    for row0 in range(0, scene.height - p + 1, p):
        for col0 in range(0, scene.width - p + 1, p):
            if np.isnan(scene.data[:, row0 : row0 + p, col0 : col0 + p]).any():
                continue
            counts = {}
            for code in labels.codes[row0 : row0 + p, col0 : col0 + p].ravel():
                cls = dp.map_sa_code(int(code), taxonomy)
                if cls != dp.INVALID:
                    counts[cls] = counts.get(cls, 0) + 1
            n_valid = sum(counts.values())
            if n_valid == 0 or n_valid < 0.5 * p * p:
                continue
            best = max(counts.values())
            majority = min(c for c, n in counts.items() if n == best)
            if best / n_valid >= rho:
                kept.add((row0, col0, majority, round(best / n_valid, 9)))
    return kept


class TestTiling:
    def test_homogeneous_scene(self, taxonomy):
        scene, labels = uniform_scene("h", 128, 86)
        records = dp.tile_scene(scene, labels, taxonomy, 32)
        assert len(records) == 16
        assert all(r.purity == 1.0 and r.class_index == 3 for r in records)

    def test_straddling_patch(self, taxonomy):
        scene, labels = uniform_scene("s", 10, 55)
        labels.codes[:, 6:] = 86
        assert dp.tile_scene(scene, labels, taxonomy, 10, purity_threshold=0.7) == []
        (kept,) = dp.tile_scene(scene, labels, taxonomy, 10, purity_threshold=0.5)
        assert kept.class_index == 0 and kept.purity == pytest.approx(0.6)

    def test_matches_brute_force(self, taxonomy, rng):
        scene, labels = uniform_scene("c", 30, 55)
        scene.data[:] = rng.standard_normal(scene.data.shape).astype(np.float32)
        labels.codes[:, 11:] = 86
        labels.codes[17:, :] = 98
        labels.codes[20:26, 3:9] = dp.INVALID_CODE
        labels.codes[0:4, 24:30] = 80
        labels.codes[2:5, 2:5] = 83
        scene.data[1, 27, 27] = np.nan
        records = dp.tile_scene(scene, labels, taxonomy, 6, purity_threshold=0.7)
        got = {(r.row0, r.col0, r.class_index, round(r.purity, 9)) for r in records}
        assert got == brute_force_tiles(scene, labels, taxonomy, 6, 0.7)

    def test_margins_dropped_and_stride(self, taxonomy):
        scene, labels = uniform_scene("m", 20, 55)
        records = dp.tile_scene(scene, labels, taxonomy, 8)
        assert sorted((r.row0, r.col0) for r in records) == [(0, 0), (0, 8), (8, 0), (8, 8)]

    def test_mostly_invalid_patch_dropped(self, taxonomy):
        scene, labels = uniform_scene("v", 4, 55)
        labels.codes[:3, :] = dp.INVALID_CODE
        assert dp.tile_scene(scene, labels, taxonomy, 4) == []

    def test_patch_larger_than_scene(self, taxonomy):
        scene, labels = uniform_scene("x", 8, 55)
        with pytest.raises(InputError):
            dp.tile_scene(scene, labels, taxonomy, 16)

    def test_bad_purity(self, taxonomy):
        scene, labels = uniform_scene("x", 8, 55)
        with pytest.raises(ParameterError):
            dp.tile_scene(scene, labels, taxonomy, 4, purity_threshold=0.0)

    def test_block_ids(self, taxonomy):
        scene, labels = uniform_scene("b", 64, 55)
        records = dp.tile_scene(scene, labels, taxonomy, 8, block_size=2)
        by_pos = {(r.row0, r.col0): r.block_id for r in records}
        assert by_pos[(8, 8)] == ("b", 0, 0)
        assert by_pos[(16, 40)] == ("b", 1, 2)

    def test_directory_workers_do_not_change_order(self, taxonomy, tmp_path):
        corpus = dp.generate_synthetic_corpus(dp.GeneratorConfig(scene_size=64, min_floe_px=8, max_floe_px=32), 3, 1)
        for scene, labels in corpus:
            dp.write_scene(scene, tmp_path / f"{scene.scene_id}.scn")
            dp.write_labels(labels, tmp_path / f"{scene.scene_id}.lbl")
        serial = dp.tile_directory(tmp_path, taxonomy, 8)
        parallel = dp.tile_directory(tmp_path, taxonomy, 8, workers=3)
        assert serial == parallel and serial


def exhaustive_best_divergence(blocks, k):
    best = float("inf")
    for assignment in itertools.product((0, 1), repeat=len(blocks)):
        if len(set(assignment)) < 2:
            continue
        train = sum(np.bincount([r.class_index for r in b], minlength=k) for b, a in zip(blocks, assignment) if a == 0)
        val = sum(np.bincount([r.class_index for r in b], minlength=k) for b, a in zip(blocks, assignment) if a == 1)
        best = min(best, float(np.abs(train / train.sum() - val / val.sum()).sum()))
    return best


class TestStratifiedSplit:
    def test_identical_histograms(self):
        records = [r for i in range(8) for r in block_records(f"s{i}", [2, 1])]
        manifest = dp.stratified_block_split(records, ratio=0.5, block_size=4, seed=0, num_classes=2)
        assert manifest.divergence == pytest.approx(0.0)

    def test_four_block_fixture_matches_exhaustive_optimum(self):
        blocks = [block_records(name, hist) for name, hist in zip("ABCD", ([5, 3], [3, 3], [3, 1], [1, 1]))]
        manifest = dp.stratified_block_split(
            [r for b in blocks for r in b], ratio=0.5, block_size=4, seed=0, tolerance=0.02, num_classes=2
        )
        assert manifest.divergence <= exhaustive_best_divergence(blocks, 2) + 0.02
        assert manifest.block_ids("train") == {("A", 0, 0), ("D", 0, 0)}

    def test_no_block_in_both_splits(self, taxonomy):
        corpus = dp.generate_synthetic_corpus(dp.GeneratorConfig(scene_size=128, min_floe_px=16, max_floe_px=64), 3, 8)
        records = [r for scene, labels in corpus for r in dp.tile_scene(scene, labels, taxonomy, 8, block_size=2)]
        manifest = dp.stratified_block_split(records, 0.8, 2, seed=8, tolerance=2.0, num_classes=6)
        assert not manifest.block_ids("train") & manifest.block_ids("val")
        assert len(manifest.entries) == len(records)

    def test_deterministic(self):
        records = [r for i in range(6) for r in block_records(f"s{i}", [i + 1, 2])]
        a = dp.stratified_block_split(records, 0.5, 4, seed=3, tolerance=2.0)
        b = dp.stratified_block_split(list(reversed(records)), 0.5, 4, seed=3, tolerance=2.0)
        assert dp.manifest_text(a.entries) == dp.manifest_text(b.entries)

    def test_failure_reports_divergence(self):
        records = block_records("a", [4, 0]) + block_records("b", [0, 4])
        with pytest.raises(StratificationError) as info:
            dp.stratified_block_split(records, 0.5, 4, seed=0, tolerance=0.02)
        assert info.value.divergence > 0.02
        assert info.value.exit_code == 3

    def test_rare_class_warning(self, caplog):
        records = [r for i in range(4) for r in block_records(f"s{i}", [3, 0])] + block_records("rare", [2, 1])
        with caplog.at_level("WARNING"):
            manifest = dp.stratified_block_split(records, 0.5, 4, seed=0, tolerance=2.0)
        assert "perfect stratification impossible" in caplog.text
        assert manifest.warnings

    @pytest.mark.parametrize("kwargs", [{"ratio": 1.0}, {"ratio": 0.0}, {"block_size": 0}])
    def test_invalid_parameters(self, kwargs):
        with pytest.raises(ParameterError):
            dp.stratified_block_split(block_records("a", [1, 1]), **kwargs)

    def test_empty_records(self):
        with pytest.raises(InputError):
            dp.stratified_block_split([])

    def test_summary(self):
        blocks = [block_records(name, hist) for name, hist in zip("ABCD", ([5, 3], [3, 3], [3, 1], [1, 1]))]
        manifest = dp.stratified_block_split([r for b in blocks for r in b], 0.5, 4, seed=0)
        summary = manifest.summary(2)
        assert summary["train"]["patches"] == summary["val"]["patches"] == 10
        assert summary["train"]["class_proportions"] == [0.6, 0.4]

    @pytest.mark.slow
    def test_random_corpora_leakage_and_tolerance(self, taxonomy):
        config = dp.GeneratorConfig(scene_size=128, min_floe_px=16, max_floe_px=48)
        accepted = 0
        for seed in range(20):
            corpus = dp.generate_synthetic_corpus(config, 6, seed)
            records = [r for s, l in corpus for r in dp.tile_scene(s, l, taxonomy, 8, block_size=2)]
            try:
                manifest = dp.stratified_block_split(records, 0.8, 2, seed, 0.02, taxonomy.num_classes)
            except StratificationError as exc:
                assert exc.divergence > 0.02
                continue
            assert not manifest.block_ids("train") & manifest.block_ids("val")
            assert manifest.divergence <= 0.02
            accepted += 1
        assert accepted >= 15


class TestManifestFiles:
    def test_round_trip(self, tmp_path):
        blocks = [block_records(name, hist) for name, hist in zip("ABCD", ([5, 3], [3, 3], [3, 1], [1, 1]))]
        manifest = dp.stratified_block_split([r for b in blocks for r in b], 0.5, 4, seed=0)
        loaded = dp.read_manifest(dp.write_manifest(tmp_path / "m.csv", manifest))
        assert loaded.entries == manifest.entries
        assert loaded.divergence == pytest.approx(manifest.divergence)

    def test_unsplit_records_have_empty_split(self, tmp_path):
        path = dp.write_manifest(tmp_path / "m.csv", block_records("a", [1, 1]))
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(dp.MANIFEST_HEADER)
        assert lines[1].endswith(",a:0:0,")

    def test_bad_header(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("scene,row\n")
        with pytest.raises(FormatError):
            dp.read_manifest(path)


@pytest.fixture
def stats_corpus(rng):
    scenes = {}
    for name in ("a", "b"):
        data = (rng.standard_normal((2, 8, 8)) * [[[3.0]], [[2.0]]] + [[[-15.0]], [[-24.0]]]).astype(np.float32)
        scenes[name] = dp.SceneRaster(name, 8, 8, data)
    entries = [
        (record("a", 0, 0, 0, size=4), "train"),
        (record("a", 4, 4, 1, size=4), "train"),
        (record("b", 0, 4, 0, size=4), "train"),
        (record("b", 4, 0, 1, size=4), "val"),
    ]
    return scenes, dp.SplitManifest(entries)


class TestNormalization:
    def test_matches_two_pass(self, stats_corpus):
        scenes, manifest = stats_corpus
        stats = dp.compute_norm_stats(manifest, scenes)
        pixels = np.concatenate(
            [scenes[r.scene_id].data[:, r.row0 : r.row0 + 4, r.col0 : r.col0 + 4].reshape(2, -1) for r in manifest.records("train")],
            axis=1,
        ).astype(np.float64)
        np.testing.assert_allclose(stats.mean, pixels.mean(axis=1), atol=1e-5)
        np.testing.assert_allclose(stats.std, pixels.std(axis=1), atol=1e-5)
        assert stats.count == 48 and stats.source_split == "train"

    def test_constant_channel_floor(self):
        scene, _ = uniform_scene("c", 4, 55)
        manifest = dp.SplitManifest([(record("c", 0, 0, 0, size=4), "train")])
        stats = dp.compute_norm_stats(manifest, {"c": scene})
        assert stats.mean == (-15.0, -23.0)
        assert stats.std == (1e-6, 1e-6)

    def test_val_patches_do_not_change_stats(self, stats_corpus, tmp_path):
        scenes, manifest = stats_corpus
        more = dp.SplitManifest(manifest.entries + [(record("b", 0, 0, 0, size=4), "val")])
        a = dp.write_stats(dp.compute_norm_stats(manifest, scenes), tmp_path / "a.json").read_bytes()
        b = dp.write_stats(dp.compute_norm_stats(more, scenes), tmp_path / "b.json").read_bytes()
        assert a == b

    def test_normalized_train_corpus(self, stats_corpus):
        scenes, manifest = stats_corpus
        stats = dp.compute_norm_stats(manifest, scenes)
        images, _ = dp.extract_patches(manifest.records("train"), scenes, stats)
        per_channel = images.transpose(1, 0, 2, 3).reshape(2, -1).astype(np.float64)
        assert np.all(np.abs(per_channel.mean(axis=1)) <= 1e-3)
        assert np.all(np.abs(per_channel.std(axis=1) - 1) <= 1e-2)

    def test_mean_maps_to_zero_and_inverse(self, stats_corpus):
        scenes, manifest = stats_corpus
        stats = dp.compute_norm_stats(manifest, scenes)
        at_mean = np.array(stats.mean, dtype=np.float32)[:, None, None] * np.ones((2, 3, 3), dtype=np.float32)
        np.testing.assert_allclose(dp.normalize_patch(at_mean, stats), 0.0, atol=1e-5)
        patch = scenes["a"].data[:, :4, :4]
        np.testing.assert_allclose(dp.denormalize_patch(dp.normalize_patch(patch, stats), stats), patch, atol=1e-5)

    def test_train_only(self, stats_corpus):
        scenes, manifest = stats_corpus
        with pytest.raises(InputError):
            dp.compute_norm_stats(manifest, scenes, split="val")

    def test_empty_train_split(self, stats_corpus):
        scenes, _ = stats_corpus
        with pytest.raises(InputError):
            dp.compute_norm_stats(dp.SplitManifest([(record("a", 0, 0, 0, size=4), "val")]), scenes)

    def test_stats_file_layout(self, stats_corpus, tmp_path):
        scenes, manifest = stats_corpus
        stats = dp.compute_norm_stats(manifest, scenes)
        path = dp.write_stats(stats, tmp_path / "s.json")
        raw = json.loads(path.read_text())
        assert set(raw) == {"channels", "count", "source_split", "manifest_hash"}
        assert raw["manifest_hash"] == dp.manifest_hash(manifest.records("train"))
        assert dp.read_stats(path) == stats


class TestExtractPatches:
    def test_slices_scene_pixels(self, stats_corpus):
        scenes, manifest = stats_corpus
        images, labels = dp.extract_patches(manifest.records("val"), scenes)
        np.testing.assert_array_equal(images[0], scenes["b"].data[:, 4:8, 0:4])
        assert labels.tolist() == [1]

    def test_mixed_patch_sizes(self, stats_corpus):
        scenes, _ = stats_corpus
        with pytest.raises(InputError):
            dp.extract_patches([record("a", 0, 0, 0, size=4), record("a", 0, 0, 0, size=2)], scenes)
