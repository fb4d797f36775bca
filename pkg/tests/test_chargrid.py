import io

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scripts.chargrid import (
    CharacterGrid,
    compute_entity_grid,
    compute_grid,
    compute_object_grid,
    flatten_pad,
    grid_report,
    shade_levels,
)
from scripts.corpus import CharacterRecord, ImageRecord, ImageSequenceRecord, ObjectRecord, load_dataset
from scripts.utils import DataError, SizeError


def make_seq(image_feats, char_feats, object_feats=()):
    images = tuple(ImageRecord("i{}".format(a), np.asarray(f, dtype=float)) for a, f in enumerate(image_feats))
    chars = tuple(
        CharacterRecord("c{}".format(b), "male", (), np.asarray(f, dtype=float)) for b, f in enumerate(char_feats)
    )
    objects = tuple(ObjectRecord("o{}".format(k), np.asarray(f, dtype=float)) for k, f in enumerate(object_feats))
    return ImageSequenceRecord("seq", images, chars, objects)


def brute_force(image_feats, column_feats):
    return [[sum(x * y for x, y in zip(i, l)) for l in column_feats] for i in image_feats]


# # # #
def test_grid_fixture(fixtures_path):
    grid = compute_grid(load_dataset(fixtures_path)[0])
    assert grid.shape == (5, 2)
    assert grid.values[0, 0] == 8.0
    assert grid.values[0, 1] == 6.0
    assert grid.column_ids == ("jack", "mary")
    assert grid.image_ids[0] == "s1_i0"


def test_grid_brute_force_random_integers():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, m, d = rng.integers(1, 11), rng.integers(0, 6), rng.integers(1, 9)
        images = rng.integers(-5, 6, size=(n, d)).tolist()
        chars = rng.integers(-5, 6, size=(m, d)).tolist()
        grid = compute_grid(make_seq(images, chars))
        assert grid.values.tolist() == [[float(v) for v in row] for row in brute_force(images, chars)]
        assert grid.shape == (n, m)


def test_grid_zero_character_column():
    grid = compute_grid(make_seq([[1, 2, 3], [4, 5, 6]], [[0, 0, 0], [1, 0, 0]]))
    assert np.all(grid.values[:, 0] == 0.0)


def test_grid_identical_unit_vectors():
    u = [0.6, 0.8, 0.0]
    grid = compute_grid(make_seq([u], [u]))
    assert grid.values[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_grid_dimension_mismatch():
    with pytest.raises(DataError):
        compute_grid(make_seq([[1, 2, 3]], [[1, 2]]))


def test_object_and_entity_grid():
    images = [[1, 0, 2], [0, 1, 1], [2, 2, 0]]
    chars = [[1, 1, 1], [0, 2, 0]]
    objects = [[3, 0, 1], [1, 1, 0], [0, 0, 2]]
    seq = make_seq(images, chars, objects)
    objs = compute_object_grid(seq)
    assert objs.values.tolist() == brute_force(images, objects)
    entity = compute_entity_grid(seq)
    assert entity.shape == (3, 5)
    assert entity.column_ids == ("c0", "c1", "o0", "o1", "o2")
    assert entity.values.tolist() == [c + o for c, o in zip(brute_force(images, chars), brute_force(images, objects))]


def test_object_grid_without_objects():
    grid = compute_object_grid(make_seq([[1, 2]] * 5, [[1, 1]]))
    assert grid.shape == (5, 0)
    assert compute_entity_grid(make_seq([[1, 2]] * 5, [[1, 1]])).shape == (5, 1)


# # # #
@settings(max_examples=50, deadline=None)
@given(
    arrays(np.int64, st.tuples(st.integers(1, 6), st.just(4)), elements=st.integers(-9, 9)),
    arrays(np.int64, st.tuples(st.integers(1, 5), st.just(4)), elements=st.integers(-9, 9)),
    st.randoms(use_true_random=False),
)
def test_character_permutation_permutes_columns(images, chars, random):
    order = list(range(len(chars)))
    random.shuffle(order)
    grid = compute_grid(make_seq(images, chars))
    permuted = compute_grid(make_seq(images, chars[order]))
    assert np.array_equal(permuted.values, grid.values[:, order])


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.int64, st.tuples(st.integers(1, 6), st.just(3)), elements=st.integers(-9, 9)),
    arrays(np.int64, st.tuples(st.integers(1, 5), st.just(3)), elements=st.integers(-9, 9)),
    st.integers(1, 8),
    st.data(),
)
def test_image_scaling_scales_row(images, chars, s, data):
    a = data.draw(st.integers(0, len(images) - 1))
    scaled = images.copy()
    scaled[a] *= s
    grid = compute_grid(make_seq(images, chars))
    out = compute_grid(make_seq(scaled, chars))
    assert np.array_equal(out.values[a], s * grid.values[a])


# # # #
def _grid(values):
    values = np.asarray(values, dtype=float)
    n, m = values.shape
    return CharacterGrid(values, tuple("i{}".format(a) for a in range(n)), tuple("c{}".format(b) for b in range(m)))


def test_flatten_pad_layout():
    vec = flatten_pad(_grid([[1, 2], [3, 4]]), 10, 5)
    assert vec.shape == (50,)
    assert vec[[0, 1, 5, 6]].tolist() == [1, 2, 3, 4]
    assert np.count_nonzero(vec) == 4


def test_flatten_pad_zero_and_full():
    assert not flatten_pad(_grid(np.zeros((3, 2)))).any()
    full = np.arange(50.0).reshape(10, 5)
    assert flatten_pad(_grid(full)).tolist() == full.reshape(-1).tolist()


def test_flatten_pad_injective_for_fixed_occupancy():
    a = flatten_pad(_grid([[1, 2], [3, 4]]))
    b = flatten_pad(_grid([[1, 2], [3, 5]]))
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("shape", [(11, 2), (3, 6)])
def test_flatten_pad_exceeds_frame(shape):
    with pytest.raises(SizeError):
        flatten_pad(_grid(np.ones(shape)))


# # # #
def test_shade_levels():
    assert not shade_levels(np.full((2, 3), 7.0)).any()
    row = shade_levels(np.array([[0.0, 1.0, 2.0, 3.0, 4.0]]))[0]
    assert list(row) == sorted(row)
    assert row[0] == 0 and row[-1] == 4


def test_grid_report_csv_round_trip():
    rng = np.random.default_rng(4)
    grid = _grid(rng.normal(size=(5, 3)))
    csv_text, table = grid_report(grid)
    parsed = pd.read_csv(io.StringIO(csv_text), index_col="image_id", float_precision="round_trip")
    assert np.array_equal(parsed.values, grid.values)
    assert list(parsed.index) == list(grid.image_ids)
    for column in grid.column_ids:
        assert column in table


def test_grid_report_deterministic(fixtures_path):
    grid = compute_grid(load_dataset(fixtures_path)[0])
    assert grid_report(grid) == grid_report(grid)
