import numpy as np
import pytest

from pclast.dataset import RECORD_DTYPE, TransitionDataset, coarse_coverage
from pclast.maze import MazeWorld, collect_dataset


@pytest.fixture(scope="module")
def small_ds(hallway):
    return collect_dataset(hallway, 600, seed=3)


def test_record_layout_is_40_bytes():
    assert RECORD_DTYPE.itemsize == 40


def test_save_load_roundtrip(tmp_path, small_ds):
    path = tmp_path / "d.pcl1"
    small_ds.save(path)
    loaded = TransitionDataset.load(path)
    assert loaded.layout_id == small_ds.layout_id
    assert loaded.resolution == small_ds.resolution
    assert loaded.seed == small_ds.seed
    assert np.array_equal(loaded.cells_t, small_ds.cells_t)
    assert np.array_equal(loaded.states, small_ds.states)
    assert np.array_equal(loaded.actions, small_ds.actions)
    assert loaded.content_hash() == small_ds.content_hash()


def test_save_is_byte_identical(tmp_path, hallway):
    p1, p2 = tmp_path / "a.pcl1", tmp_path / "b.pcl1"
    collect_dataset(hallway, 300, seed=9).save(p1)
    collect_dataset(hallway, 300, seed=9).save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.pcl1"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError, match="magic"):
        TransitionDataset.load(path)


def test_load_rejects_truncated(tmp_path, small_ds):
    path = tmp_path / "t.pcl1"
    small_ds.save(path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 80])
    with pytest.raises(ValueError, match="truncated"):
        TransitionDataset.load(path)


def test_episode_spans(small_ds):
    spans = small_ds.episode_spans()
    assert spans[0][0] == 0
    assert spans[-1][1] == len(small_ds)
    for start, end in spans:
        assert len(np.unique(small_ds.episodes[start:end])) == 1


def test_coverage_increases_with_size(hallway):
    small = coarse_coverage(collect_dataset(hallway, 200, seed=1))
    bigger = coarse_coverage(collect_dataset(hallway, 4000, seed=1))
    assert bigger >= small
    assert 0.0 < small <= 1.0
