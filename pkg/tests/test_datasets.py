import csv

import pytest
import torch

from clnet.datasets import (
    AugmentedPairs,
    SyntheticPairDataset,
    collate_pairs,
    load_directory_dataset,
    manifest_semi_positives,
    read_manifest,
    synthetic_splits,
    write_dataset,
)
from clnet.errors import DatasetError, ValidationError
from clnet.io import save_image


@pytest.fixture
def small_set(tiny_encoder):
    return SyntheticPairDataset(0, 0, 4, tiny_encoder, noise=0.0)


def test_synthetic_records_are_pure_functions_of_seed_and_index(tiny_encoder):
    a = SyntheticPairDataset(5, 0, 3, tiny_encoder, cache=False)
    b = SyntheticPairDataset(5, 0, 3, tiny_encoder, cache=False)
    for ra, rb in zip(a, b):
        assert ra.pair_id == rb.pair_id
        assert torch.equal(ra.ground, rb.ground)
        assert torch.equal(ra.satellite, rb.satellite)


def test_synthetic_image_sizes_follow_encoder(small_set, tiny_encoder):
    rec = small_set[0]
    assert tuple(rec.ground.shape) == (3, *tiny_encoder.ground_input_hw)
    assert tuple(rec.satellite.shape) == (3, *tiny_encoder.satellite_input_hw)
    with pytest.raises(IndexError):
        small_set[4]


def test_splits_use_disjoint_scene_ranges(tiny_run):
    train, evaluation = synthetic_splits(tiny_run.data, tiny_run.encoder)
    assert len(train) == 8 and len(evaluation) == 8
    assert not set(train.pair_ids()) & set(evaluation.pair_ids())
    assert evaluation.pair_ids()[0] == "0-000008"


def test_offset_mode_references_include_semi_positives(tiny_encoder):
    ds = SyntheticPairDataset(0, 0, 2, tiny_encoder, mode="offset")
    ids, images = ds.references()
    assert len(ids) == 2 * 4 == len(images)
    semi = ds.semi_positives()
    assert all(len(v) == 3 for v in semi.values())


def test_collate_stacks_views(small_set):
    ids, ground, satellite = collate_pairs([small_set[0], small_set[1]])
    assert ids == small_set.pair_ids()[:2]
    assert ground.shape[0] == 2 and satellite.shape[0] == 2


class TestWriteAndLoad:
    def test_counts(self, small_set, tmp_path):
        manifest = write_dataset(small_set, tmp_path / "ds")
        rows = read_manifest(manifest)
        assert len(rows) == 4
        assert len(list((tmp_path / "ds").rglob("*.png"))) == 8

    def test_roundtrip_through_png(self, small_set, tmp_path, tiny_encoder):
        write_dataset(small_set, tmp_path / "ds")
        loaded = load_directory_dataset(
            tmp_path / "ds",
            ground_hw=tiny_encoder.ground_input_hw,
            satellite_hw=tiny_encoder.satellite_input_hw,
        )
        assert len(loaded) == 4
        assert loaded.pair_ids() == small_set.pair_ids()
        # 8-bit quantisation
        assert torch.allclose(loaded[0].ground, small_set[0].ground, atol=1 / 255)

    def test_non_empty_dir_needs_force(self, small_set, tmp_path):
        write_dataset(small_set, tmp_path / "ds")
        with pytest.raises(ValidationError, match="--force"):
            write_dataset(small_set, tmp_path / "ds")
        write_dataset(small_set, tmp_path / "ds", force=True)

    def test_byte_identical_rewrites(self, tiny_encoder, tmp_path):
        for name in ("a", "b"):
            write_dataset(SyntheticPairDataset(1, 0, 2, tiny_encoder), tmp_path / name)
        for path in (tmp_path / "a").rglob("*"):
            if path.is_file():
                twin = tmp_path / "b" / path.relative_to(tmp_path / "a")
                assert path.read_bytes() == twin.read_bytes()

    def test_semi_positive_ids_pass_through(self, tiny_encoder, tmp_path):
        ds = SyntheticPairDataset(0, 0, 2, tiny_encoder, mode="offset")
        manifest = write_dataset(ds, tmp_path / "vigor")
        loaded = load_directory_dataset(tmp_path / "vigor")
        assert loaded.mode == "offset"
        assert loaded[0].semi_positive_ids == ds[0].semi_positive_ids
        assert set(loaded[1].semi_positive_images) == set(ds[1].semi_positive_ids)
        assert manifest_semi_positives(manifest) == ds.semi_positives()


def _manual_dataset(root, rows, image_hw=(4, 8)):
    for sub in ("ground", "satellite"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    with (root / "manifest.csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pair_id", "ground_path", "satellite_path", "semi_positive_ids"])
        for pid, make_files in rows:
            g, s = f"ground/{pid}.png", f"satellite/{pid}.png"
            if make_files:
                save_image(root / g, torch.rand(3, *image_hw))
                save_image(root / s, torch.rand(3, 6, 6))
            writer.writerow([pid, g, s, ""])


class TestDirectoryErrors:
    def test_three_rows(self, tmp_path):
        _manual_dataset(tmp_path, [("a", True), ("b", True), ("c", True)])
        assert len(load_directory_dataset(tmp_path)) == 3

    def test_duplicate_id_is_named(self, tmp_path):
        _manual_dataset(tmp_path, [("a", True), ("dup", True), ("dup", True)])
        with pytest.raises(DatasetError, match="dup"):
            load_directory_dataset(tmp_path)

    def test_all_problems_reported(self, tmp_path):
        _manual_dataset(tmp_path, [("a", False), ("b", False)])
        with pytest.raises(DatasetError) as info:
            load_directory_dataset(tmp_path)
        assert len(info.value.problems) == 4

    def test_size_mismatch(self, tmp_path):
        _manual_dataset(tmp_path, [("a", True)])
        with pytest.raises(DatasetError, match="expected"):
            load_directory_dataset(tmp_path, ground_hw=(16, 64))

    def test_unreadable_image(self, tmp_path):
        _manual_dataset(tmp_path, [("a", True)])
        (tmp_path / "ground" / "a.png").write_bytes(b"not a png")
        with pytest.raises(DatasetError, match="unreadable"):
            load_directory_dataset(tmp_path)

    def test_short_row_is_itemized(self, tmp_path):
        _manual_dataset(tmp_path, [("a", True), ("b", True)])
        with (tmp_path / "manifest.csv").open("a", newline="") as f:
            f.write("c,ground/a.png\n")
        with pytest.raises(DatasetError) as info:
            load_directory_dataset(tmp_path)
        assert info.value.problems == ["line 4: missing satellite_path"]

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="manifest not found"):
            load_directory_dataset(tmp_path)


class TestAugmentedPairs:
    def test_same_epoch_same_sample(self, small_set):
        pairs = AugmentedPairs(small_set, seed=3)
        pairs.set_epoch(2)
        a = pairs[1]
        b = pairs[1]
        assert torch.equal(a.ground, b.ground)

    def test_disabled_returns_base(self, small_set):
        pairs = AugmentedPairs(small_set, seed=3, enabled=False)
        assert pairs[0] is small_set[0]

    def test_offset_mode_is_never_augmented(self, tiny_encoder):
        base = SyntheticPairDataset(0, 0, 2, tiny_encoder, mode="offset")
        pairs = AugmentedPairs(base, seed=0)
        assert not pairs.enabled
        assert pairs[0] is base[0]
