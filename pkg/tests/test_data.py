import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pyramid_unet.data import (
    DatasetError,
    DatasetKind,
    DatasetSpec,
    SampleRecord,
    augment,
    diagonal_flip,
    hflip,
    load_dataset,
    prepare_records,
    preprocess,
    resize_mask,
    split,
    vflip,
)


def random_record(seed, size=16, ident="r"):
    rng = np.random.default_rng(seed)
    return SampleRecord(
        ident,
        rng.random((size, size, 3), dtype=np.float32),
        rng.integers(0, 2, (size, size), dtype=np.uint8),
        rng.integers(0, 2, (size, size), dtype=np.uint8),
    )


def coordinate_record(size=8):
    """Image channels carry row/col indices so geometric transforms can be traced."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float32)
    image = np.stack([rows, cols, rows * size + cols], axis=-1) / (size * size)
    vessel = ((rows + 2 * cols) % 3 == 0).astype(np.uint8)
    fov = (rows < cols + 3).astype(np.uint8)
    return SampleRecord("grid", image, vessel, fov)


class FixedRng:
    def __init__(self, draws):
        self.draws = np.asarray(draws, dtype=float)

    def random(self, n):
        return self.draws[:n]


class TestLoad:
    def test_drive(self, drive_root):
        records = load_dataset(DatasetSpec("drive", drive_root))
        assert len(records) == 40
        assert [r.id for r in records] == sorted(r.id for r in records)
        assert all(r.size == (584, 565) for r in records)
        for r in records:
            assert set(np.unique(r.vessel_mask)) <= {0, 1}
            assert set(np.unique(r.fov_mask)) <= {0, 1}
            assert 0 <= r.image.min() and r.image.max() <= 1

    def test_chase(self, chase_root):
        records = load_dataset(DatasetSpec("chase_db1", chase_root))
        assert len(records) == 28
        assert all(r.size == (960, 999) for r in records)
        assert all(r.fov_mask.all() for r in records)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DatasetError, match="matched 0 files"):
            load_dataset(DatasetSpec("drive", tmp_path))

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError, match="does not exist"):
            load_dataset(DatasetSpec("drive", tmp_path / "nope"))

    def test_count_mismatch(self, tmp_path):
        from synthetic import write_chase

        write_chase(tmp_path, size=(32, 32), count=4)
        with pytest.raises(DatasetError, match="should have 28"):
            load_dataset(DatasetSpec("chase_db1", tmp_path))

    def test_unreadable_file_named(self, tmp_path):
        from synthetic import write_chase

        write_chase(tmp_path, size=(32, 32), count=28)
        (tmp_path / "Image_03L.jpg").write_bytes(b"not an image")
        with pytest.raises(DatasetError, match="Image_03L.jpg"):
            load_dataset(DatasetSpec("chase_db1", tmp_path))

    def test_kind_parsing(self):
        assert DatasetKind.parse("CHASE-DB1") is DatasetKind.CHASE_DB1
        with pytest.raises(DatasetError):
            DatasetKind.parse("stare")


class TestSplit:
    def test_drive(self, drive_root):
        records = load_dataset(DatasetSpec("drive", drive_root))
        train, test = split(records, "drive")
        assert len(train) == 20 and len(test) == 20
        assert all("training" in r.id for r in train)
        assert all("test" in r.id for r in test)

    def test_chase_first_twenty(self, chase_root):
        records = load_dataset(DatasetSpec("chase_db1", chase_root))
        train, test = split(records, "chase_db1")
        assert [r.id for r in train] == [r.id for r in records[:20]]
        assert [r.id for r in test] == [r.id for r in records[20:]]
        assert train[-1].id == "Image_10R" and test[0].id == "Image_11L"

    def test_deterministic(self, chase_root):
        spec = DatasetSpec("chase_db1", chase_root)
        a = [r.id for r in split(load_dataset(spec), "chase_db1")[1]]
        b = [r.id for r in split(load_dataset(spec), "chase_db1")[1]]
        assert a == b

    def test_wrong_count(self):
        with pytest.raises(DatasetError):
            split([random_record(0)], "drive")


class TestPreprocess:
    def test_drive_record_resized(self, drive_root):
        spec = DatasetSpec("drive", drive_root)
        rec = load_dataset(spec)[0]
        out = preprocess(rec, (448, 448), crop_to_fov=True)
        assert out.size == (448, 448)
        assert set(np.unique(out.vessel_mask)) <= {0, 1}
        assert set(np.unique(out.fov_mask)) <= {0, 1}
        assert out.image.min() == 0.0 and out.image.max() == 1.0

    def test_all_ones_fov(self):
        rec = random_record(1, size=20)
        rec = SampleRecord(rec.id, rec.image, rec.vessel_mask, np.ones((20, 20), np.uint8))
        assert preprocess(rec, (12, 12)).fov_mask.all()

    def test_empty_fov(self):
        rec = random_record(2)
        rec = SampleRecord(rec.id, rec.image, rec.vessel_mask, np.zeros((16, 16), np.uint8))
        with pytest.raises(DatasetError):
            preprocess(rec, (8, 8))

    def test_mask_resize_threshold(self):
        m = np.zeros((4, 4), np.uint8)
        m[:2, :2] = 1
        m[3, 3] = 1
        assert resize_mask(m, (2, 2)).tolist() == [[1, 0], [0, 0]]

    def test_prepare_records(self, chase_root):
        train, test = prepare_records(DatasetSpec("chase_db1", chase_root, target_size=(64, 64)))
        assert len(train) == 20 and len(test) == 8
        assert all(r.size == (64, 64) for r in train + test)


class TestAugment:
    def test_no_flips_is_identity(self):
        rec = random_record(3)
        out = augment(rec, FixedRng([0.9, 0.9, 0.9]))
        assert np.array_equal(out.image, rec.image) and np.array_equal(out.vessel_mask, rec.vessel_mask)

    @pytest.mark.parametrize("flip", [hflip, vflip, diagonal_flip])
    def test_involution(self, flip):
        rec = random_record(4)
        twice = flip(flip(rec))
        for name in ("image", "vessel_mask", "fov_mask"):
            assert np.array_equal(getattr(twice, name), getattr(rec, name))

    def test_diagonal_needs_square(self):
        rec = SampleRecord("r", np.zeros((4, 6, 3), np.float32), np.zeros((4, 6), np.uint8), np.ones((4, 6), np.uint8))
        with pytest.raises(ValueError):
            diagonal_flip(rec)
        with pytest.raises(ValueError):
            augment(rec, np.random.default_rng(0))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_preserves_pixel_multiset(self, seed):
        rec = random_record(seed % 1000)
        out = augment(rec, np.random.default_rng(seed))
        for name in ("image", "vessel_mask", "fov_mask"):
            a, b = getattr(rec, name), getattr(out, name)
            assert np.array_equal(np.sort(a, axis=None), np.sort(b, axis=None))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_alignment_preserved(self, seed):
        rec = coordinate_record()
        out = augment(rec, np.random.default_rng(seed))
        size = rec.size[0]
        code = np.rint(out.image[..., 2] * size * size).astype(int)
        src_rows, src_cols = code // size, code % size
        assert np.array_equal(out.vessel_mask, rec.vessel_mask[src_rows, src_cols])
        assert np.array_equal(out.fov_mask, rec.fov_mask[src_rows, src_cols])

    def test_all_flip_patterns_reachable(self):
        rec = coordinate_record()
        seen = {augment(rec, np.random.default_rng(s)).image.tobytes() for s in range(200)}
        assert len(seen) == 8
